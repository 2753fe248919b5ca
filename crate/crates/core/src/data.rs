//! CSV ingestion, train/test splits, and standardization.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::child_stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// `N × D`.
    pub features: Tensor,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, target_name: String, features: Tensor, targets: Vec<f64>) -> Result<Self> {
        if features.rows() != targets.len() || features.cols() != feature_names.len() {
            return Err(Error::Data(format!(
                "{} feature rows, {} targets, {} names for {} columns",
                features.rows(),
                targets.len(),
                feature_names.len(),
                features.cols()
            )));
        }
        Ok(Dataset {
            feature_names,
            target_name,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            features: self.features.select_rows(rows),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
        }
    }
}

/// Reads a headed, all-numeric CSV. `target = None` takes the last column.
pub fn load_csv(path: &Path, target: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::io(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.len() < 2 {
        return Err(Error::Data(format!("{}: need at least two columns", path.display())));
    }
    let target_idx = match target {
        Some(name) => header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!("{}: no column named {name:?}", path.display()))
        })?,
        None => header.len() - 1,
    };
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() != header.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} cells, expected {}",
                path.display(),
                i + 1,
                record.len(),
                header.len()
            )));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}, column {:?}: {cell:?} is not a number",
                    path.display(),
                    i + 1,
                    header[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: row {}, column {:?}: non-finite value",
                    path.display(),
                    i + 1,
                    header[j]
                )));
            }
            if j == target_idx {
                targets.push(v);
            } else {
                data.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let mut names = header;
    let target_name = names.remove(target_idx);
    let features = Tensor::matrix(targets.len(), names.len(), data)?;
    Dataset::new(names, target_name, features, targets)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn holdout_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Independent random permutations per split, each cut into train and test.
pub fn make_splits(n: usize, splits: usize, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 rows to split, got {n}")));
    }
    if splits == 0 || !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "invalid split protocol: {splits} splits, test fraction {test_fraction}"
        )));
    }
    let n_test = holdout_size(n, test_fraction);
    Ok((0..splits)
        .map(|s| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut child_stream(seed, s as u64));
            let test = idx.split_off(n - n_test);
            Split { train: idx, test }
        })
        .collect())
}

/// Splits training rows into a fitting part and a trailing validation part.
pub fn validation_split(train: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = train.to_vec();
    idx.shuffle(&mut child_stream(seed, u64::MAX));
    let n_val = holdout_size(idx.len(), fraction);
    let val = idx.split_off(idx.len() - n_val);
    (idx, val)
}

/// Per-column affine maps estimated on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    // Constant columns map to zero rather than dividing by zero.
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

impl Standardization {
    pub fn fit(data: &Dataset) -> Self {
        let (mut feature_mean, mut feature_std) = (Vec::new(), Vec::new());
        for j in 0..data.dims() {
            let (m, s) = mean_std((0..data.len()).map(|i| data.features.get(i, j)));
            feature_mean.push(m);
            feature_std.push(s);
        }
        let (target_mean, target_std) = mean_std(data.targets.iter().copied());
        Standardization {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        }
    }

    pub fn features(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.feature_mean[j]) / self.feature_std[j];
            }
        }
        out
    }

    pub fn targets(&self, y: &[f64]) -> Tensor {
        Tensor::column(&y.iter().map(|v| (v - self.target_mean) / self.target_std).collect::<Vec<_>>())
    }

    pub fn unstandardize_target(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }
}
