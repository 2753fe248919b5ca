//! Result tables and their CSV/JSON forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    /// Original target units.
    pub rmse: f64,
    /// Mean per-row predictive log-density, original units.
    pub test_log_lik: f64,
    /// Selected observation noise, original units.
    pub noise_std: f64,
    /// Epochs used for the refit.
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub splits: usize,
    pub rmse_mean: f64,
    pub rmse_stderr: f64,
    pub test_log_lik_mean: f64,
    pub test_log_lik_stderr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<SplitResult>,
    /// `(split, message)` for splits whose training failed.
    pub failures: Vec<(usize, String)>,
}

/// Mean and standard error `sd / √n` with the `n − 1` sample deviation.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

impl ResultTable {
    pub fn aggregate(&self) -> Aggregate {
        let rmse: Vec<f64> = self.rows.iter().map(|r| r.rmse).collect();
        let ll: Vec<f64> = self.rows.iter().map(|r| r.test_log_lik).collect();
        let (rmse_mean, rmse_stderr) = mean_stderr(&rmse);
        let (test_log_lik_mean, test_log_lik_stderr) = mean_stderr(&ll);
        Aggregate {
            splits: self.rows.len(),
            rmse_mean,
            rmse_stderr,
            test_log_lik_mean,
            test_log_lik_stderr,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    split: String,
    rmse: f64,
    rmse_stderr: Option<f64>,
    test_log_lik: f64,
    test_log_lik_stderr: Option<f64>,
    noise_std: Option<f64>,
    epochs: Option<usize>,
}

const AGGREGATE_LABEL: &str = "mean";

/// One line per split, then one aggregate line labelled `mean`.
pub fn write_csv(path: &Path, table: &ResultTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    let io = |e: csv::Error| Error::io(path, e);
    for r in &table.rows {
        w.serialize(CsvRow {
            split: r.split.to_string(),
            rmse: r.rmse,
            rmse_stderr: None,
            test_log_lik: r.test_log_lik,
            test_log_lik_stderr: None,
            noise_std: Some(r.noise_std),
            epochs: Some(r.epochs),
        })
        .map_err(io)?;
    }
    let a = table.aggregate();
    w.serialize(CsvRow {
        split: AGGREGATE_LABEL.into(),
        rmse: a.rmse_mean,
        rmse_stderr: Some(a.rmse_stderr),
        test_log_lik: a.test_log_lik_mean,
        test_log_lik_stderr: Some(a.test_log_lik_stderr),
        noise_std: None,
        epochs: None,
    })
    .map_err(io)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`write_csv`]; returns the split rows and the
/// aggregate as written.
pub fn read_csv(path: &Path) -> Result<(ResultTable, Aggregate)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    let mut table = ResultTable::default();
    let mut aggregate = None;
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if row.split == AGGREGATE_LABEL {
            aggregate = Some(Aggregate {
                splits: table.rows.len(),
                rmse_mean: row.rmse,
                rmse_stderr: row.rmse_stderr.unwrap_or(f64::NAN),
                test_log_lik_mean: row.test_log_lik,
                test_log_lik_stderr: row.test_log_lik_stderr.unwrap_or(f64::NAN),
            });
            continue;
        }
        table.rows.push(SplitResult {
            split: row
                .split
                .parse()
                .map_err(|_| Error::Data(format!("bad split label {:?}", row.split)))?,
            rmse: row.rmse,
            test_log_lik: row.test_log_lik,
            noise_std: row.noise_std.unwrap_or(f64::NAN),
            epochs: row.epochs.unwrap_or(0),
        });
    }
    let aggregate = aggregate.ok_or_else(|| Error::Data(format!("{}: no aggregate row", path.display())))?;
    Ok((table, aggregate))
}

#[derive(Serialize)]
struct JsonReport<'a, C: Serialize> {
    config: &'a C,
    protocol: &'a str,
    splits: &'a [SplitResult],
    failures: &'a [(usize, String)],
    aggregate: Aggregate,
}

const PROTOCOL_NOTE: &str = "fit on 80% of each training split with early stopping on validation \
log-likelihood, observation noise chosen from the grid on the validation slice, refit on the full \
training split for the selected epoch count; RMSE and log-likelihood in original target units";

/// Writes the table with a full echo of `config`.
pub fn write_json<C: Serialize>(path: &Path, table: &ResultTable, config: &C) -> Result<()> {
    let report = JsonReport {
        config,
        protocol: PROTOCOL_NOTE,
        splits: &table.rows,
        failures: &table.failures,
        aggregate: table.aggregate(),
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Counts of normalized sample weights over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHistogram {
    pub counts: Vec<u64>,
    /// Number of weight vectors collected.
    pub vectors: u64,
}

impl WeightHistogram {
    pub fn new(bins: usize) -> Self {
        WeightHistogram {
            counts: vec![0; bins.max(1)],
            vectors: 0,
        }
    }

    pub fn from_weights(vectors: &[Vec<f64>], bins: usize) -> Self {
        let mut h = Self::new(bins);
        for v in vectors {
            h.add(v);
        }
        h
    }

    pub fn add(&mut self, weights: &[f64]) {
        let bins = self.counts.len();
        for &w in weights {
            let b = ((w * bins as f64).floor() as usize).min(bins - 1);
            self.counts[b] += 1;
        }
        self.vectors += 1;
    }

    pub fn merge(&mut self, other: &WeightHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.vectors += other.vectors;
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let w = 1.0 / self.counts.len() as f64;
        (b as f64 * w, (b + 1) as f64 * w)
    }
}

/// `lower,upper,count` per bin.
pub fn write_histogram_csv(path: &Path, h: &WeightHistogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    let io = |e: csv::Error| Error::io(path, e);
    w.write_record(["lower", "upper", "count"]).map_err(io)?;
    for (b, c) in h.counts.iter().enumerate() {
        let (lo, hi) = h.bin_edges(b);
        w.write_record([format!("{lo:?}"), format!("{hi:?}"), c.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
