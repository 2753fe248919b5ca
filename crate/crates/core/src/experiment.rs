//! The split protocol: fit on 80% of each training split, pick the
//! observation noise on the remaining 20%, refit on the full training
//! split, and score on held-out rows in original target units.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_splits, validation_split, Dataset, Split, Standardization};
use crate::em::{self, EmKind, EmOptimizer, EmSettings, HyperPrior, VariationalState};
use crate::error::{Error, Result};
use crate::net::{Network, NetworkConfig, NoiseLayout, NoiseStructure, WeightSet};
use crate::noise::NoiseFamily;
use crate::numeric::log_sum_exp;
use crate::objectives::{self, Batch, ObjectiveKind};
use crate::optim::{Adam, AdamConfig};
use crate::report::{ResultTable, SplitResult, WeightHistogram};
use crate::rng::{child_stream, derive_seed, Stream};
use crate::tensor::Tensor;

use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths resolve against the data directory.
    pub path: PathBuf,
    /// Defaults to the last column.
    pub target: Option<String>,
    pub splits: usize,
    pub test_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("boston.csv"),
            target: None,
            splits: 20,
            test_fraction: 0.1,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Point weights trained with a Monte Carlo noise objective.
    Mc,
    /// Variational EM.
    Em,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureKind {
    UnitWise,
    WeightWise,
    LayerWise,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    /// Skip connections on every hidden-to-hidden layer.
    pub residual: bool,
    pub sigma0: f64,
    pub structure: StructureKind,
    pub noise: NoiseFamily,
    /// Overrides `noise` with `Bernoulli { keep: 1 − drop_rate }`.
    pub drop_rate: Option<f64>,
    /// Scale family for layer-wise and combined structures.
    pub layer_noise: Option<NoiseFamily>,
    pub mask_output_layer: bool,
    pub objective: ObjectiveKind,
    pub samples: usize,
    pub weight_decay: bool,
    pub em: EmKind,
    pub hyperprior: HyperPrior,
    pub init_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mc,
            hidden: vec![50],
            residual: false,
            sigma0: 1.0,
            structure: StructureKind::UnitWise,
            noise: NoiseFamily::Bernoulli { keep: 0.95 },
            drop_rate: None,
            layer_noise: None,
            mask_output_layer: false,
            objective: ObjectiveKind::Lb,
            samples: 10,
            weight_decay: true,
            em: EmKind::ArdAdd,
            hyperprior: HyperPrior::InverseGamma { alpha: 3.0, beta: 3.0 },
            init_variance: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn noise_family(&self) -> NoiseFamily {
        match self.drop_rate {
            Some(p) => NoiseFamily::dropout(p),
            None => self.noise,
        }
    }

    pub fn network(&self, input: usize) -> Result<NetworkConfig> {
        let mut config = NetworkConfig::mlp(input, &self.hidden, 1).with_sigma0(self.sigma0);
        if self.residual {
            for k in config.hidden_to_hidden().collect::<Vec<_>>() {
                config.residual[k] = true;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn noise_structure(&self) -> Result<NoiseStructure> {
        let family = self.noise_family();
        let layer = || {
            self.layer_noise
                .ok_or_else(|| Error::Config("this structure needs `layer_noise`".into()))
        };
        let layout = match self.structure {
            StructureKind::UnitWise => NoiseLayout::UnitWise { family },
            StructureKind::WeightWise => NoiseLayout::WeightWise { family },
            StructureKind::LayerWise => NoiseLayout::LayerWise { family: layer()? },
            StructureKind::Combined => NoiseLayout::Combined {
                unit: family,
                layer: layer()?,
            },
        };
        Ok(NoiseStructure::new(layout).with_output_layer(self.mask_output_layer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Upper bound; early stopping usually ends the fitting run sooner.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs between validation checks.
    pub eval_every: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub test_samples: usize,
    /// Observation noise, in standardized target units, used while fitting.
    pub train_noise_std: f64,
    pub noise_grid_points: usize,
    pub noise_grid_min: f64,
    pub noise_grid_max: f64,
    pub seed: u64,
    pub histogram_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 32,
            learning_rate: 1e-3,
            eval_every: 5,
            patience: 10,
            test_samples: 100,
            train_noise_std: 0.3,
            noise_grid_points: 30,
            noise_grid_min: 1e-3,
            noise_grid_max: 10.0,
            seed: 0,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.splits == 0 {
            return Err(Error::Config("need at least one split".into()));
        }
        for (name, f) in [("test_fraction", d.test_fraction), ("validation_fraction", d.validation_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        let m = &self.model;
        if let Some(p) = m.drop_rate {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("drop_rate must lie in [0, 1], got {p}")));
            }
        }
        m.network(1)?;
        match m.kind {
            ModelKind::Mc => {
                let s = m.noise_structure()?;
                s.validate(&m.network(1)?)?;
                self.objective_spec().validate()?;
                if m.objective == ObjectiveKind::Hp && m.structure != StructureKind::UnitWise {
                    return Err(Error::Config("the hierarchical objective needs unit-wise noise".into()));
                }
            }
            ModelKind::Em => {
                m.hyperprior.validate()?;
                if !(m.init_variance > 0.0) {
                    return Err(Error::Config("init_variance must be positive".into()));
                }
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_every == 0 || t.test_samples == 0 {
            return Err(Error::Config("epochs, batch_size, eval_every and test_samples must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.train_noise_std > 0.0) {
            return Err(Error::Config("learning_rate and train_noise_std must be positive".into()));
        }
        if t.noise_grid_points < 1 || !(t.noise_grid_min > 0.0 && t.noise_grid_max >= t.noise_grid_min) {
            return Err(Error::Config("invalid noise grid".into()));
        }
        Ok(())
    }

    pub fn objective_spec(&self) -> objectives::ObjectiveSpec {
        objectives::ObjectiveSpec {
            kind: self.model.objective,
            samples: self.model.samples,
            decay_sigma0: self.model.weight_decay.then_some(self.model.sigma0),
        }
    }

    /// Log-spaced observation noise standard deviations.
    pub fn noise_grid(&self) -> Vec<f64> {
        let t = &self.train;
        if t.noise_grid_points == 1 {
            return vec![t.noise_grid_min];
        }
        let (lo, hi) = (t.noise_grid_min.ln(), t.noise_grid_max.ln());
        let step = (hi - lo) / (t.noise_grid_points - 1) as f64;
        (0..t.noise_grid_points).map(|i| (lo + step * i as f64).exp()).collect()
    }
}

/// Output of one optimization step.
#[derive(Debug, Clone, Default)]
pub struct StepInfo {
    /// Weights the objective applied to each noise sample.
    pub sample_weights: Vec<f64>,
}

/// Predictive draws in standardized units.
#[derive(Debug, Clone)]
pub enum PredictiveDraws {
    /// Per-sample network outputs, each a Gaussian component with the
    /// observation noise.
    Mixture(Vec<Tensor>),
    /// Moment-matched Gaussian from weight draws.
    Gaussian { mean: Tensor, mc_variance: Tensor },
}

impl PredictiveDraws {
    pub fn mean(&self) -> Tensor {
        match self {
            PredictiveDraws::Mixture(s) => {
                let mut m = Tensor::zeros(s[0].shape());
                for t in s {
                    m.axpy(1.0 / s.len() as f64, t);
                }
                m
            }
            PredictiveDraws::Gaussian { mean, .. } => mean.clone(),
        }
    }

    /// Mean per-row log predictive density at noise standard deviation `sd`.
    pub fn mean_log_density(&self, y: &Tensor, sd: f64) -> f64 {
        let var = sd * sd;
        let n = y.rows();
        let norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut total = 0.0;
        for i in 0..n {
            let yi = y.get(i, 0);
            total += match self {
                PredictiveDraws::Mixture(samples) => {
                    let terms: Vec<f64> = samples
                        .iter()
                        .map(|s| {
                            let d = yi - s.get(i, 0);
                            norm - 0.5 * var.ln() - d * d / (2.0 * var)
                        })
                        .collect();
                    log_sum_exp(&terms) - (samples.len() as f64).ln()
                }
                PredictiveDraws::Gaussian { mean, mc_variance } => {
                    let v = mc_variance.get(i, 0) + var;
                    let d = yi - mean.get(i, 0);
                    norm - 0.5 * v.ln() - d * d / (2.0 * v)
                }
            };
        }
        total / n as f64
    }
}

#[derive(Debug, Clone)]
struct McLearner {
    net: Network,
    weights: WeightSet,
    adam: Adam,
    kind: ObjectiveKind,
    samples: usize,
    decay: Option<f64>,
    sigma0: f64,
}

#[derive(Debug, Clone)]
struct EmLearner {
    net: Network,
    state: VariationalState,
    optimizer: EmOptimizer,
    hyperprior: HyperPrior,
    sigma0: f64,
}

/// A model together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Learner(LearnerKind);

#[derive(Debug, Clone)]
enum LearnerKind {
    Mc(Box<McLearner>),
    Em(Box<EmLearner>),
}

impl Learner {
    pub fn new(config: &ExperimentConfig, input: usize, rng: &mut Stream) -> Result<Self> {
        let m = &config.model;
        let net_config = m.network(input)?;
        let adam = AdamConfig::new(config.train.learning_rate);
        Ok(Learner(match m.kind {
            ModelKind::Mc => {
                let structure = m.noise_structure()?;
                let net = Network::new(&net_config, &structure)?;
                let weights = WeightSet::init_he(&net_config, rng);
                let spec = config.objective_spec();
                LearnerKind::Mc(Box::new(McLearner {
                    adam: Adam::new(adam, &weights.layers),
                    net,
                    weights,
                    kind: spec.kind,
                    samples: spec.samples,
                    decay: spec.decay_sigma0,
                    sigma0: m.sigma0,
                }))
            }
            ModelKind::Em => {
                let net = Network::deterministic(&net_config)?;
                let state = VariationalState::new(&net_config, Some(m.em), m.init_variance, rng)?;
                LearnerKind::Em(Box::new(EmLearner {
                    optimizer: EmOptimizer::new(adam, &state),
                    net,
                    state,
                    hyperprior: m.hyperprior,
                    sigma0: m.sigma0,
                }))
            }
        }))
    }

    /// One ascent step on a mini-batch; `likelihood_scale` is `N / B`.
    pub fn step(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        noise_var: f64,
        likelihood_scale: f64,
        rng: &mut Stream,
    ) -> Result<StepInfo> {
        match &mut self.0 {
            LearnerKind::Mc(l) => {
                let batch = Batch { x, y, noise_var };
                let (grad, weights) = if l.kind == ObjectiveKind::Hp {
                    let ones = l.net.ones_masks();
                    let (_, g) = l.net.log_likelihood_grad(&l.weights, &ones, x, y, noise_var)?;
                    let (_, pg) = objectives::hierarchical_penalty(&l.net, &l.weights, l.sigma0)?;
                    let mut g = g.map(|v| v * likelihood_scale);
                    g.axpy(-1.0, &pg);
                    (g, vec![1.0])
                } else {
                    let masks: Vec<_> = (0..l.samples).map(|_| l.net.sample_masks(rng)).collect();
                    let eval = match l.kind {
                        ObjectiveKind::Lb => objectives::mc_lower_bound_fixed(&mut l.net, &l.weights, &masks, batch)?,
                        ObjectiveKind::Iw => objectives::iw_objective_fixed(&mut l.net, &l.weights, &masks, batch)?,
                        ObjectiveKind::Ta => objectives::ta_objective_fixed(&mut l.net, &l.weights, &masks, batch)?,
                        ObjectiveKind::Hp => unreachable!(),
                    };
                    let mut g = eval.gradient.map(|v| v * likelihood_scale);
                    objectives::add_decay_gradient(&mut g, &l.weights, l.decay);
                    (g, eval.weights)
                };
                if !grad.is_finite() {
                    return Err(Error::NonFinite { node: 0, op: "objective gradient" });
                }
                l.adam.ascend(&mut l.weights.layers, &grad.layers);
                Ok(StepInfo { sample_weights: weights })
            }
            LearnerKind::Em(l) => {
                let settings = EmSettings {
                    hyperprior: l.hyperprior,
                    sigma0: l.sigma0,
                    noise_var,
                    likelihood_scale,
                };
                em::m_step(&mut l.state, &settings);
                em::e_step(&mut l.net, &mut l.state, &settings, x, y, &mut l.optimizer, 1, rng)?;
                if !(l.state.means.is_finite() && l.state.raw_variances.is_finite()) {
                    return Err(Error::NonFinite { node: 0, op: "variational parameters" });
                }
                Ok(StepInfo::default())
            }
        }
    }

    pub fn predict(&mut self, x: &Tensor, samples: usize, rng: &mut Stream) -> Result<PredictiveDraws> {
        match &mut self.0 {
            LearnerKind::Mc(l) => {
                if l.kind == ObjectiveKind::Hp {
                    let ones = l.net.ones_masks();
                    return Ok(PredictiveDraws::Mixture(vec![l.net.predict(&l.weights, &ones, x)?]));
                }
                let mut out = Vec::with_capacity(samples);
                for _ in 0..samples {
                    let m = l.net.sample_masks(rng);
                    out.push(l.net.predict(&l.weights, &m, x)?);
                }
                Ok(PredictiveDraws::Mixture(out))
            }
            LearnerKind::Em(l) => {
                let p = em::predictive_distribution(&mut l.net, &l.state, x, samples, 0.0, rng)?;
                Ok(PredictiveDraws::Gaussian {
                    mean: p.mean,
                    mc_variance: p.variance,
                })
            }
        }
    }

    /// Every trainable value, flattened.
    pub fn parameters(&self) -> Vec<f64> {
        match &self.0 {
            LearnerKind::Mc(l) => l.weights.flat(),
            LearnerKind::Em(l) => {
                let mut v = l.state.means.flat();
                v.extend(l.state.raw_variances.flat());
                v
            }
        }
    }

    pub fn weights(&self) -> Option<&WeightSet> {
        match &self.0 {
            LearnerKind::Mc(l) => Some(&l.weights),
            LearnerKind::Em(_) => None,
        }
    }

    pub fn state(&self) -> Option<&VariationalState> {
        match &self.0 {
            LearnerKind::Em(l) => Some(&l.state),
            LearnerKind::Mc(_) => None,
        }
    }
}

/// Standardized design matrices for one split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: Tensor,
    pub y: Tensor,
}

impl Prepared {
    fn new(data: &Dataset, rows: &[usize], std: &Standardization) -> Self {
        let sub = data.subset(rows);
        Prepared {
            x: std.features(&sub.features),
            y: std.targets(&sub.targets),
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

struct Fit {
    learner: Learner,
    /// Best validation epoch, or the last epoch without validation.
    epochs: usize,
    noise_std: f64,
    /// Weights applied during the final epoch.
    final_weights: Vec<Vec<f64>>,
}

fn best_noise(draws: &PredictiveDraws, y: &Tensor, grid: &[f64]) -> (f64, f64) {
    grid.iter()
        .map(|&sd| (draws.mean_log_density(y, sd), sd))
        .fold((f64::NEG_INFINITY, grid[0]), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Trains on `fit`; with `validation` present, keeps the checkpoint with the
/// best validation likelihood over the noise grid.
fn train(
    config: &ExperimentConfig,
    fit: &Prepared,
    validation: Option<&Prepared>,
    noise_std: f64,
    epochs: usize,
    rng: &mut Stream,
) -> Result<Fit> {
    let t = &config.train;
    let grid = config.noise_grid();
    let mut learner = Learner::new(config, fit.x.cols(), rng)?;
    let n = fit.len();
    let noise_var = noise_std * noise_std;
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Learner, usize, f64)> = None;
    let mut stale = 0;
    let mut final_weights = Vec::new();
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let last = epoch == epochs;
        if last {
            final_weights.clear();
        }
        for chunk in order.chunks(t.batch_size) {
            let x = fit.x.select_rows(chunk);
            let y = fit.y.select_rows(chunk);
            let info = learner.step(&x, &y, noise_var, n as f64 / chunk.len() as f64, rng)?;
            if last {
                final_weights.push(info.sample_weights);
            }
        }
        if let Some(val) = validation {
            if epoch % t.eval_every == 0 || last {
                let draws = learner.predict(&val.x, t.test_samples, rng)?;
                let (ll, sd) = best_noise(&draws, &val.y, &grid);
                if best.as_ref().is_none_or(|b| ll > b.0) {
                    best = Some((ll, learner.clone(), epoch, sd));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= t.patience {
                        break;
                    }
                }
            }
        }
    }
    Ok(match best {
        Some((_, learner, epoch, sd)) => Fit {
            learner,
            epochs: epoch,
            noise_std: sd,
            final_weights,
        },
        None => Fit {
            learner,
            epochs,
            noise_std,
            final_weights,
        },
    })
}

/// Everything one split produces.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub result: SplitResult,
    pub learner: Learner,
    pub histogram: Option<WeightHistogram>,
}

/// Trains and scores one split. Test rows only enter at scoring time.
pub fn run_split(config: &ExperimentConfig, data: &Dataset, split: &Split, index: usize) -> Result<SplitOutcome> {
    let seed = derive_seed(config.train.seed, index as u64);
    let train_set = data.subset(&split.train);
    let std = Standardization::fit(&train_set);
    let (fit_rows, val_rows) = validation_split(&split.train, config.data.validation_fraction, seed);
    let fit = Prepared::new(data, &fit_rows, &std);
    let val = Prepared::new(data, &val_rows, &std);
    let full = Prepared::new(data, &split.train, &std);

    let selection = train(
        config,
        &fit,
        Some(&val),
        config.train.train_noise_std,
        config.train.epochs,
        &mut child_stream(seed, 1),
    )?;
    let mut refit = train(
        config,
        &full,
        None,
        selection.noise_std,
        selection.epochs,
        &mut child_stream(seed, 2),
    )?;

    let test = data.subset(&split.test);
    let x = std.features(&test.features);
    let draws = refit.learner.predict(&x, config.train.test_samples, &mut child_stream(seed, 3))?;
    let mean = draws.mean();
    let sq: f64 = test
        .targets
        .iter()
        .enumerate()
        .map(|(i, &y)| (y - std.unstandardize_target(mean.get(i, 0))).powi(2))
        .sum();
    let rmse = (sq / test.len() as f64).sqrt();
    let y_std = std.targets(&test.targets);
    let test_log_lik = draws.mean_log_density(&y_std, selection.noise_std) - std.target_std.ln();

    let histogram = match (config.model.kind, config.model.objective) {
        (ModelKind::Mc, ObjectiveKind::Lb | ObjectiveKind::Iw | ObjectiveKind::Ta) => Some(WeightHistogram::from_weights(
            &refit.final_weights,
            config.train.histogram_bins,
        )),
        _ => None,
    };
    refit.final_weights.clear();

    Ok(SplitOutcome {
        result: SplitResult {
            split: index,
            rmse,
            test_log_lik,
            noise_std: selection.noise_std * std.target_std,
            epochs: selection.epochs,
        },
        learner: refit.learner,
        histogram,
    })
}

/// Results of a full protocol run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub table: ResultTable,
    /// Summed over splits.
    pub histogram: Option<WeightHistogram>,
}

/// Runs every split (in parallel) and aggregates in split order. Splits
/// that fail are recorded and skipped.
pub fn run_experiment(config: &ExperimentConfig, data: &Dataset) -> Result<RunOutput> {
    config.validate()?;
    let splits = make_splits(data.len(), config.data.splits, config.data.test_fraction, config.train.seed)?;
    let outcomes: Vec<(usize, Result<SplitOutcome>)> = splits
        .par_iter()
        .enumerate()
        .map(|(i, s)| (i, run_split(config, data, s, i)))
        .collect();
    let mut table = ResultTable::default();
    let mut histogram: Option<WeightHistogram> = None;
    for (i, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                table.rows.push(o.result);
                if let Some(h) = o.histogram {
                    match &mut histogram {
                        Some(acc) => acc.merge(&h),
                        None => histogram = Some(h),
                    }
                }
            }
            Err(e) => table.failures.push((i, e.to_string())),
        }
    }
    Ok(RunOutput { table, histogram })
}
