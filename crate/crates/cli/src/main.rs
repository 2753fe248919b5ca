mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use shrinknet::data::{load_csv, make_splits, Dataset};
use shrinknet::em::write_state;
use shrinknet::experiment::{run_experiment, run_split, ExperimentConfig, SplitOutcome};
use shrinknet::net::{posterior_moment_map, write_moment_grids, MomentSource};
use shrinknet::noise::verify_gsm;
use shrinknet::objectives::{self, ToyProblem};
use shrinknet::report::{self, ResultTable};
use shrinknet::rng::stream;

#[derive(Parser)]
#[command(name = "shrinknet", version, about = "Multiplicative-noise shrinkage networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file; every key has a default.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding the dataset CSVs.
    #[arg(long, env = "SHRINKNET_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Output directory.
    #[arg(short, long, default_value = "results")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train and score a single split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        split: usize,
    },
    /// Run the full split protocol and write CSV/JSON reports.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check the noise/marginal-prior equivalences with KS tests.
    VerifyGsm {
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare Monte Carlo objectives with exact mask enumeration on a toy network.
    EnumerateMap {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0.5)]
        drop_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one split and write per-weight second moments of hidden-to-hidden layers.
    ExportHeatmap {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        split: usize,
    },
}

fn load(run: &RunArgs) -> Result<(ExperimentConfig, Dataset)> {
    let config = config::load(run.config.as_deref(), &run.overrides)?;
    let path = config::resolve_data_path(&config, &run.data_dir);
    let data = load_csv(&path, config.data.target.as_deref())
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok((config, data))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn print_table(table: &ResultTable) {
    for r in &table.rows {
        println!(
            "split {:>2}  rmse {:.4}  test ll {:.4}  noise sd {:.4}  epochs {}",
            r.split, r.rmse, r.test_log_lik, r.noise_std, r.epochs
        );
    }
    for (s, msg) in &table.failures {
        println!("split {s:>2}  FAILED: {msg}");
    }
    let a = table.aggregate();
    println!(
        "mean over {} splits: rmse {:.4} ± {:.4}  test ll {:.4} ± {:.4}  ({} failed)",
        a.splits,
        a.rmse_mean,
        a.rmse_stderr,
        a.test_log_lik_mean,
        a.test_log_lik_stderr,
        table.failures.len()
    );
}

fn one_split(run: &RunArgs, split: usize) -> Result<(ExperimentConfig, usize, SplitOutcome)> {
    let (config, data) = load(run)?;
    let splits = make_splits(data.len(), config.data.splits, config.data.test_fraction, config.train.seed)?;
    let Some(s) = splits.get(split) else {
        bail!("split {split} out of range (config has {})", splits.len());
    };
    let outcome = run_split(&config, &data, s, split)?;
    Ok((config, data.dims(), outcome))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { run, split } => {
            let (config, _, outcome) = one_split(&run, split)?;
            create_dir(&run.out)?;
            let table = ResultTable {
                rows: vec![outcome.result],
                failures: vec![],
            };
            report::write_csv(&run.out.join(format!("split_{split}.csv")), &table)?;
            report::write_json(&run.out.join(format!("split_{split}.json")), &table, &config)?;
            if let Some(state) = outcome.learner.state() {
                write_state(&run.out.join(format!("state_split_{split}.txt")), state)?;
            }
            print_table(&table);
        }
        Command::Benchmark { run } => {
            let (config, data) = load(&run)?;
            let output = run_experiment(&config, &data)?;
            create_dir(&run.out)?;
            report::write_csv(&run.out.join("results.csv"), &output.table)?;
            report::write_json(&run.out.join("results.json"), &output.table, &config)?;
            if let Some(h) = &output.histogram {
                report::write_histogram_csv(&run.out.join("weight_histogram.csv"), h)?;
            }
            print_table(&output.table);
        }
        Command::VerifyGsm { draws, seed } => {
            let checks = verify_gsm(draws, seed)?;
            println!("{:<48} {:>10} {:>10}  result", "check", "statistic", "p-value");
            for c in &checks {
                println!(
                    "{:<48} {:>10.5} {:>10.4}  {}",
                    c.name,
                    c.statistic,
                    c.p_value,
                    if c.passed { "pass" } else { "FAIL" }
                );
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
        Command::EnumerateMap {
            samples,
            drop_rate,
            seed,
        } => {
            let mut toy = ToyProblem::new(drop_rate, seed)?;
            let (weights, x, y, var) = (toy.weights.clone(), toy.x.clone(), toy.y.clone(), toy.noise_var);
            let batch = objectives::Batch { x: &x, y: &y, noise_var: var };
            let exact = objectives::enumerate_log_marginal(&mut toy.net, &weights, batch)?;
            let mut rng = stream(seed);
            let iw = objectives::iw_objective(&mut toy.net, &weights, batch, samples, &mut rng)?;
            let lb = objectives::mc_lower_bound(&mut toy.net, &weights, batch, samples, &mut rng)?;
            println!("drop rate {drop_rate} (keep {}), {samples} samples", 1.0 - drop_rate);
            println!("enumerated log marginal  {exact:.6}");
            println!(
                "importance weighted      {:.6} ± {:.6}",
                iw.value,
                objectives::iw_stderr(&iw.log_likelihoods)
            );
            println!(
                "lower bound              {:.6} ± {:.6}",
                lb.value,
                objectives::lower_bound_stderr(&lb.log_likelihoods)
            );
        }
        Command::ExportHeatmap { run, split } => {
            let (config, input, outcome) = one_split(&run, split)?;
            let net = config.model.network(input)?;
            let variances;
            let source = match (outcome.learner.state(), outcome.learner.weights()) {
                (Some(state), _) => {
                    variances = state.variances();
                    MomentSource::Gaussian {
                        means: &state.means,
                        variances: &variances,
                    }
                }
                (None, Some(w)) => MomentSource::Point(w),
                (None, None) => unreachable!("a learner holds either weights or a state"),
            };
            let grids = posterior_moment_map(&net, source)?;
            let written = write_moment_grids(&run.out, &grids)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
