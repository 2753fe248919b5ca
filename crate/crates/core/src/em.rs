//! Variational EM over weight groups with learned prior scales.
//!
//! `q(W)` is a mean-field Gaussian; the scales are point masses updated in
//! closed form. For a group of `D` weights with summed second moment
//! `S = Σ(μ² + σ²)`, the M-step maximizes
//! `J(v) = −S/(2σ₀²v) − (D/2)·log v + log p_v(v)` over the squared scale `v`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::net::{NetworkConfig, Network, WeightSet};
use crate::numeric::{sigmoid, softplus, softplus_inverse};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Smallest squared scale used inside the prior variance.
pub const SCALE_FLOOR: f64 = 1e-12;

const COORDINATE_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "prior", rename_all = "kebab-case")]
pub enum HyperPrior {
    /// Inverse-gamma on the squared scale.
    InverseGamma { alpha: f64, beta: f64 },
    /// Half-Cauchy on the scale.
    HalfCauchy { scale: f64 },
    /// Improper `p(τ) ∝ 1/τ`.
    LogUniform,
}

impl HyperPrior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            HyperPrior::InverseGamma { alpha, beta } => alpha > 0.0 && beta > 0.0,
            HyperPrior::HalfCauchy { scale } => scale > 0.0,
            HyperPrior::LogUniform => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid hyperprior {self:?}")))
        }
    }

    /// Log-density of the squared scale `v`, Jacobian included.
    pub fn log_density(&self, v: f64) -> f64 {
        match *self {
            HyperPrior::InverseGamma { alpha, beta } => {
                alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * v.ln() - beta / v
            }
            HyperPrior::HalfCauchy { scale } => {
                let b2 = scale * scale;
                (2.0 / std::f64::consts::PI).ln() + scale.ln() - (b2 + v).ln() - 0.5 * v.ln() - 2f64.ln()
            }
            HyperPrior::LogUniform => -v.ln(),
        }
    }

    /// The M-step objective `J(v)` up to a constant.
    pub fn scale_objective(&self, s: f64, d: f64, sigma0: f64, v: f64) -> f64 {
        -s / (2.0 * sigma0 * sigma0 * v) - 0.5 * d * v.ln() + self.log_density(v)
    }
}

/// Closed-form maximizer `v*` of the scale objective.
pub fn scale_star(prior: &HyperPrior, s: f64, d: f64, sigma0: f64) -> f64 {
    let a = s / (2.0 * sigma0 * sigma0);
    match *prior {
        HyperPrior::InverseGamma { alpha, beta } => (beta + a) / (alpha + 1.0 + 0.5 * d),
        HyperPrior::LogUniform => s / (sigma0 * sigma0 * (d + 2.0)),
        HyperPrior::HalfCauchy { scale } => {
            if a == 0.0 {
                return 0.0;
            }
            let b2 = scale * scale;
            let qa = 0.5 * (d + 3.0);
            let qb = 0.5 * (d + 1.0) * b2 - a;
            let qc = a * b2;
            let disc = (qb * qb + 4.0 * qa * qc).sqrt();
            if qb > 0.0 {
                2.0 * qc / (qb + disc)
            } else {
                (disc - qb) / (2.0 * qa)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmKind {
    /// One scale per weight row in every layer.
    Ard,
    /// One scale per hidden-to-hidden residual layer.
    Add,
    /// Both, multiplied in the prior variance.
    ArdAdd,
}

impl EmKind {
    pub fn has_rows(self) -> bool {
        matches!(self, EmKind::Ard | EmKind::ArdAdd)
    }

    pub fn has_layers(self) -> bool {
        matches!(self, EmKind::Add | EmKind::ArdAdd)
    }
}

/// Fixed ingredients of the ELBO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmSettings {
    pub hyperprior: HyperPrior,
    pub sigma0: f64,
    pub noise_var: f64,
    /// Multiplier on the batch log-likelihood, `N / B` for mini-batches.
    pub likelihood_scale: f64,
}

/// Mean-field Gaussian over weights plus point-mass scales.
///
/// Bias rows never belong to a scale group and keep prior variance `σ₀²`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub kind: Option<EmKind>,
    /// Whether each weight matrix carries a trailing bias row.
    pub bias: bool,
    pub means: WeightSet,
    /// `σ² = softplus(raw)`.
    pub raw_variances: WeightSet,
    /// `ξ̄_{l,r}` per non-bias row, where present.
    pub row_scales: Vec<Option<Vec<f64>>>,
    /// `τ̄_l`, where present.
    pub layer_scales: Vec<Option<f64>>,
}

impl VariationalState {
    /// He-initialized means, constant variances, unit scales. `kind = None`
    /// gives plain mean-field inference under the fixed `N(0, σ₀²)` prior.
    pub fn new(
        config: &NetworkConfig,
        kind: Option<EmKind>,
        init_variance: f64,
        rng: &mut Stream,
    ) -> Result<Self> {
        config.validate()?;
        if !(init_variance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "initial variance must be positive, got {init_variance}"
            )));
        }
        let layers = config.weight_layers();
        let mut row_scales = vec![None; layers];
        let mut layer_scales = vec![None; layers];
        if let Some(kind) = kind {
            if kind.has_rows() {
                for (k, slot) in row_scales.iter_mut().enumerate() {
                    *slot = Some(vec![1.0; config.widths[k]]);
                }
            }
            if kind.has_layers() {
                if config.hidden_layers() < 2 {
                    return Err(Error::Config(
                        "layer scales need at least one hidden-to-hidden layer".into(),
                    ));
                }
                for k in config.hidden_to_hidden() {
                    if !config.residual[k] {
                        return Err(Error::Config(format!(
                            "layer scale on hidden layer {} needs a residual connection",
                            k + 1
                        )));
                    }
                    layer_scales[k] = Some(1.0);
                }
            }
        }
        Ok(VariationalState {
            kind,
            bias: config.bias,
            means: WeightSet::init_he(config, rng),
            raw_variances: WeightSet::filled(config, softplus_inverse(init_variance)),
            row_scales,
            layer_scales,
        })
    }

    pub fn variances(&self) -> WeightSet {
        self.raw_variances.map(softplus)
    }

    /// Squared scale multiplying `σ₀²` for row `r` of layer `k`.
    pub fn prior_scale(&self, k: usize, r: usize) -> f64 {
        let row = self.row_scales[k]
            .as_ref()
            .and_then(|rows| rows.get(r))
            .map_or(1.0, |x| x * x);
        let layer = if r < self.row_width(k) {
            self.layer_scales[k].map_or(1.0, |t| t * t)
        } else {
            1.0
        };
        row * layer
    }

    /// Rows of layer `k` excluding the bias row.
    pub fn row_width(&self, k: usize) -> usize {
        self.means.layers[k].rows() - usize::from(self.bias)
    }

    /// Row and layer squared scales as `(x_r, t)`, for diagnostics.
    pub fn squared_scales(&self) -> (Vec<Option<Vec<f64>>>, Vec<Option<f64>>) {
        (
            self.row_scales
                .iter()
                .map(|r| r.as_ref().map(|v| v.iter().map(|x| x * x).collect()))
                .collect(),
            self.layer_scales.iter().map(|t| t.map(|t| t * t)).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub expected_log_lik: f64,
    pub kl: f64,
    pub log_scale_prior: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.expected_log_lik - self.kl + self.log_scale_prior
    }

    fn check(self) -> Result<Self> {
        if self.total().is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFiniteElbo {
                expected_log_lik: self.expected_log_lik,
                kl: self.kl,
                log_scale_prior: self.log_scale_prior,
            })
        }
    }
}

/// KL for one weight; returns `(kl, d/dμ, d/dσ²)`.
fn weight_kl(mu: f64, s: f64, sigma0: f64, scale: f64) -> (f64, f64, f64) {
    if scale <= SCALE_FLOOR {
        let p = sigma0 * sigma0 * SCALE_FLOOR;
        return (0.5 * (mu * mu + s) / p, mu / p, 0.5 / p);
    }
    let p = sigma0 * sigma0 * scale;
    let kl = 0.5 * ((s + mu * mu) / p - 1.0 - (s / p).ln());
    (kl, mu / p, 0.5 * (1.0 / p - 1.0 / s))
}

/// `KL[q(W) ‖ p(W | scales)]`, with its gradient in `(μ, raw)`.
pub fn kl_divergence(state: &VariationalState, sigma0: f64) -> (f64, WeightSet, WeightSet) {
    let mut total = 0.0;
    let mut g_mu = state.means.map(|_| 0.0);
    let mut g_raw = g_mu.clone();
    for k in 0..state.means.layers.len() {
        let mu = &state.means.layers[k];
        let raw = &state.raw_variances.layers[k];
        for r in 0..mu.rows() {
            let scale = state.prior_scale(k, r);
            for j in 0..mu.cols() {
                let (m, rv) = (mu.get(r, j), raw.get(r, j));
                let (kl, dm, ds) = weight_kl(m, softplus(rv), sigma0, scale);
                total += kl;
                g_mu.layers[k].set(r, j, dm);
                g_raw.layers[k].set(r, j, ds * sigmoid(rv));
            }
        }
    }
    (total, g_mu, g_raw)
}

/// Sum of `log p_v` over every scale, each taken at `max(v, floor)`.
pub fn log_scale_prior(state: &VariationalState, prior: &HyperPrior) -> f64 {
    let (rows, layers) = state.squared_scales();
    let mut total = 0.0;
    for r in rows.iter().flatten() {
        total += r.iter().map(|&x| prior.log_density(x.max(SCALE_FLOOR))).sum::<f64>();
    }
    for &t in layers.iter().flatten() {
        total += prior.log_density(t.max(SCALE_FLOOR));
    }
    total
}

/// Standard normal draws shaped like the weights.
pub fn draw_noise(like: &WeightSet, rng: &mut Stream) -> WeightSet {
    let mut eps = like.clone();
    for l in &mut eps.layers {
        for v in l.data_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    eps
}

fn sampled_weights(state: &VariationalState, eps: &WeightSet) -> WeightSet {
    let sd = state.variances().map(f64::sqrt);
    let mut w = state.means.clone();
    w.axpy(1.0, &sd.zip_map(eps, |a, b| a * b));
    w
}

#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub means: WeightSet,
    pub raw_variances: WeightSet,
}

/// ELBO and its `(μ, raw)` gradient for fixed reparametrization noise.
pub fn elbo_with_noise(
    net: &mut Network,
    state: &VariationalState,
    settings: &EmSettings,
    x: &Tensor,
    y: &Tensor,
    eps: &[WeightSet],
) -> Result<(ElboTerms, ElboGradient)> {
    if eps.is_empty() {
        return Err(Error::InvalidParameter("need at least one weight sample".into()));
    }
    let ones = net.ones_masks();
    let variances = state.variances();
    let mut ell = 0.0;
    let mut g_mu = state.means.map(|_| 0.0);
    let mut g_raw = g_mu.clone();
    let c = settings.likelihood_scale / eps.len() as f64;
    for e in eps {
        let w = sampled_weights(state, e);
        let (ll, g) = net.log_likelihood_grad(&w, &ones, x, y, settings.noise_var)?;
        ell += c * ll;
        g_mu.axpy(c, &g);
        // d w / d raw = ε · sigmoid(raw) / (2σ)
        for k in 0..g.layers.len() {
            let dr = g_raw.layers[k].data_mut();
            let it = g.layers[k]
                .data()
                .iter()
                .zip(e.layers[k].data())
                .zip(state.raw_variances.layers[k].data())
                .zip(variances.layers[k].data());
            for (slot, (((gv, ev), rv), sv)) in dr.iter_mut().zip(it) {
                *slot += c * gv * ev * sigmoid(*rv) / (2.0 * sv.sqrt());
            }
        }
    }
    let (kl, k_mu, k_raw) = kl_divergence(state, settings.sigma0);
    g_mu.axpy(-1.0, &k_mu);
    g_raw.axpy(-1.0, &k_raw);
    let terms = ElboTerms {
        expected_log_lik: ell,
        kl,
        log_scale_prior: log_scale_prior(state, &settings.hyperprior),
    }
    .check()?;
    Ok((
        terms,
        ElboGradient {
            means: g_mu,
            raw_variances: g_raw,
        },
    ))
}

/// Monte Carlo ELBO with `samples` reparametrized weight draws.
pub fn elbo(
    net: &mut Network,
    state: &VariationalState,
    settings: &EmSettings,
    x: &Tensor,
    y: &Tensor,
    samples: usize,
    rng: &mut Stream,
) -> Result<ElboTerms> {
    let eps: Vec<WeightSet> = (0..samples).map(|_| draw_noise(&state.means, rng)).collect();
    Ok(elbo_with_noise(net, state, settings, x, y, &eps)?.0)
}

/// Summed second moments of the non-bias part of each row.
fn row_moments(state: &VariationalState, k: usize, rows: usize) -> Vec<f64> {
    let mu = &state.means.layers[k];
    let raw = &state.raw_variances.layers[k];
    (0..rows)
        .map(|r| {
            mu.row(r)
                .iter()
                .zip(raw.row(r))
                .map(|(m, rv)| m * m + softplus(*rv))
                .sum()
        })
        .collect()
}

/// Joint scale objective of one layer's groups; `x` and `t` are squared.
fn layer_scale_objective(prior: &HyperPrior, sigma0: f64, moments: &[f64], d: f64, x: &[f64], t: f64) -> f64 {
    let t = t.max(SCALE_FLOOR);
    let mut total = prior.log_density(t);
    for (s, &xr) in moments.iter().zip(x) {
        let xr = xr.max(SCALE_FLOOR);
        total += -s / (2.0 * sigma0 * sigma0 * xr * t) - 0.5 * d * (xr * t).ln() + prior.log_density(xr);
    }
    total
}

/// Recomputes every scale in closed form. Returns the number of
/// coordinate-ascent sweeps used on each layer carrying both scale kinds.
pub fn m_step(state: &mut VariationalState, settings: &EmSettings) -> Vec<usize> {
    let prior = settings.hyperprior;
    let sigma0 = settings.sigma0;
    let mut sweeps = Vec::new();
    for k in 0..state.means.layers.len() {
        let d = state.means.layers[k].cols() as f64;
        let rows = match (&state.row_scales[k], state.layer_scales[k]) {
            (Some(rows), _) => rows.len(),
            (None, Some(_)) => state.row_width(k),
            (None, None) => continue,
        };
        let moments = row_moments(state, k, rows);
        match (state.row_scales[k].is_some(), state.layer_scales[k]) {
            (true, None) => {
                state.row_scales[k] = Some(
                    moments
                        .iter()
                        .map(|&s| scale_star(&prior, s, d, sigma0).sqrt())
                        .collect(),
                );
            }
            (false, Some(_)) => {
                let s: f64 = moments.iter().sum();
                state.layer_scales[k] = Some(scale_star(&prior, s, d * rows as f64, sigma0).sqrt());
            }
            (true, Some(tau)) => {
                let mut t = tau * tau;
                let mut x: Vec<f64> = state.row_scales[k]
                    .as_ref()
                    .expect("row scales present")
                    .iter()
                    .map(|v| v * v)
                    .collect();
                let mut last = layer_scale_objective(&prior, sigma0, &moments, d, &x, t);
                let mut used = 0;
                for sweep in 1..=MAX_SWEEPS {
                    used = sweep;
                    let tf = t.max(SCALE_FLOOR);
                    for (xr, &s) in x.iter_mut().zip(&moments) {
                        *xr = scale_star(&prior, s / tf, d, sigma0);
                    }
                    let pooled: f64 = moments
                        .iter()
                        .zip(&x)
                        .map(|(s, xr)| s / xr.max(SCALE_FLOOR))
                        .sum();
                    t = scale_star(&prior, pooled, d * rows as f64, sigma0);
                    let now = layer_scale_objective(&prior, sigma0, &moments, d, &x, t);
                    let change = (now - last).abs();
                    last = now;
                    if change < COORDINATE_TOL {
                        break;
                    }
                }
                sweeps.push(used);
                state.row_scales[k] = Some(x.into_iter().map(f64::sqrt).collect());
                state.layer_scales[k] = Some(t.sqrt());
            }
            (false, None) => unreachable!(),
        }
    }
    sweeps
}

/// Adam state for the variational parameters.
#[derive(Debug, Clone)]
pub struct EmOptimizer {
    means: Adam,
    raw: Adam,
}

impl EmOptimizer {
    pub fn new(config: AdamConfig, state: &VariationalState) -> Self {
        EmOptimizer {
            means: Adam::new(config, &state.means.layers),
            raw: Adam::new(config, &state.raw_variances.layers),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.means.config.learning_rate = lr;
        self.raw.config.learning_rate = lr;
    }
}

/// One gradient-ascent update of `(μ, σ²)` with scales fixed. Returns the
/// ELBO at the pre-update state.
pub fn e_step(
    net: &mut Network,
    state: &mut VariationalState,
    settings: &EmSettings,
    x: &Tensor,
    y: &Tensor,
    optimizer: &mut EmOptimizer,
    samples: usize,
    rng: &mut Stream,
) -> Result<ElboTerms> {
    let eps: Vec<WeightSet> = (0..samples.max(1)).map(|_| draw_noise(&state.means, rng)).collect();
    let (terms, grad) = elbo_with_noise(net, state, settings, x, y, &eps)?;
    optimizer.means.ascend(&mut state.means.layers, &grad.means.layers);
    optimizer.raw.ascend(&mut state.raw_variances.layers, &grad.raw_variances.layers);
    Ok(terms)
}

/// M-step followed by one E-step update.
pub fn em_step(
    net: &mut Network,
    state: &mut VariationalState,
    settings: &EmSettings,
    x: &Tensor,
    y: &Tensor,
    optimizer: &mut EmOptimizer,
    rng: &mut Stream,
) -> Result<ElboTerms> {
    m_step(state, settings);
    e_step(net, state, settings, x, y, optimizer, 1, rng)
}

#[derive(Debug, Clone)]
pub struct Predictive {
    pub mean: Tensor,
    /// MC variance of the network output plus the observation variance.
    pub variance: Tensor,
    pub samples: Vec<Tensor>,
}

pub fn predictive_distribution(
    net: &mut Network,
    state: &VariationalState,
    x: &Tensor,
    samples: usize,
    noise_var: f64,
    rng: &mut Stream,
) -> Result<Predictive> {
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let ones = net.ones_masks();
    let mut outs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = draw_noise(&state.means, rng);
        outs.push(net.predict(&sampled_weights(state, &eps), &ones, x)?);
    }
    let n = samples as f64;
    let mut mean = Tensor::zeros(outs[0].shape());
    for o in &outs {
        mean.axpy(1.0 / n, o);
    }
    let mut variance = Tensor::full(outs[0].shape(), noise_var);
    for o in &outs {
        let sq = o.zip_map(&mean, |a, m| (a - m) * (a - m));
        variance.axpy(1.0 / n, &sq);
    }
    Ok(Predictive {
        mean,
        variance,
        samples: outs,
    })
}

fn write_block(out: &mut String, header: &str, t: &Tensor) {
    let _ = writeln!(out, "# {header} {} {}", t.rows(), t.cols());
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
}

/// Text dump: blocks of `# <name> <layer> <rows> <cols>` followed by the
/// row-major values, one matrix row per line. Scales are written as
/// `row-scales` (one row) and `layer-scale` (1×1) blocks.
pub fn write_state(path: &Path, state: &VariationalState) -> Result<()> {
    let mut out = String::new();
    let kind = match state.kind {
        Some(EmKind::Ard) => "ard",
        Some(EmKind::Add) => "add",
        Some(EmKind::ArdAdd) => "ard-add",
        None => "none",
    };
    let _ = writeln!(out, "# kind {kind} bias {}", u8::from(state.bias));
    for k in 0..state.means.layers.len() {
        write_block(&mut out, &format!("mean {}", k + 1), &state.means.layers[k]);
        write_block(&mut out, &format!("raw-variance {}", k + 1), &state.raw_variances.layers[k]);
        if let Some(rows) = &state.row_scales[k] {
            write_block(&mut out, &format!("row-scales {}", k + 1), &Tensor::matrix(1, rows.len(), rows.clone()).expect("nonempty"));
        }
        if let Some(t) = state.layer_scales[k] {
            write_block(&mut out, &format!("layer-scale {}", k + 1), &Tensor::matrix(1, 1, vec![t]).expect("nonempty"));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_state(path: &Path) -> Result<VariationalState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let head: Vec<&str> = lines
        .next()
        .and_then(|l| l.strip_prefix("# kind "))
        .ok_or_else(|| bad("missing kind header"))?
        .split(' ')
        .collect();
    let kind = match head.first().copied() {
        Some("ard") => Some(EmKind::Ard),
        Some("add") => Some(EmKind::Add),
        Some("ard-add") => Some(EmKind::ArdAdd),
        Some("none") => None,
        _ => return Err(bad("unknown kind")),
    };
    let bias = match head.get(1..3) {
        Some(["bias", "1"]) => true,
        Some(["bias", "0"]) => false,
        _ => return Err(bad("missing bias flag")),
    };
    let mut means = Vec::new();
    let mut raws = Vec::new();
    let mut row_scales: Vec<Option<Vec<f64>>> = Vec::new();
    let mut layer_scales: Vec<Option<f64>> = Vec::new();
    while let Some(header) = lines.next() {
        let parts: Vec<&str> = header.strip_prefix("# ").ok_or_else(|| bad("expected block header"))?.split(' ').collect();
        if parts.len() != 4 {
            return Err(bad(&format!("malformed header {header:?}")));
        }
        let layer: usize = parts[1].parse().map_err(|_| bad("bad layer index"))?;
        let rows: usize = parts[2].parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = parts[3].parse().map_err(|_| bad("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| bad("truncated block"))?;
            for v in line.split(',') {
                data.push(v.trim().parse::<f64>().map_err(|_| bad(&format!("bad value {v:?}")))?);
            }
        }
        let t = Tensor::matrix(rows, cols, data)?;
        let idx = layer.checked_sub(1).ok_or_else(|| bad("layers are 1-based"))?;
        if row_scales.len() <= idx {
            row_scales.resize(idx + 1, None);
            layer_scales.resize(idx + 1, None);
        }
        match parts[0] {
            "mean" => means.push(t),
            "raw-variance" => raws.push(t),
            "row-scales" => row_scales[idx] = Some(t.into_data()),
            "layer-scale" => layer_scales[idx] = Some(t.item()),
            other => return Err(bad(&format!("unknown block {other:?}"))),
        }
    }
    if means.is_empty() || means.len() != raws.len() {
        return Err(bad("mean and variance blocks do not pair up"));
    }
    row_scales.resize(means.len(), None);
    layer_scales.resize(means.len(), None);
    Ok(VariationalState {
        kind,
        bias,
        means: WeightSet { layers: means },
        raw_variances: WeightSet { layers: raws },
        row_scales,
        layer_scales,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetworkConfig, Network};
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn settings(prior: HyperPrior) -> EmSettings {
        EmSettings {
            hyperprior: prior,
            sigma0: 1.0,
            noise_var: 0.25,
            likelihood_scale: 1.0,
        }
    }

    fn data(rng: &mut Stream, n: usize, d: usize) -> (Tensor, Tensor) {
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let y = Tensor::matrix(n, 1, (0..n).map(|i| x.get(i, 0) + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        (x, y)
    }

    #[test]
    fn kl_reference_values() {
        assert_eq!(weight_kl(0.0, 2.0, 1.0, 2.0).0, 0.0);
        assert_relative_eq!(weight_kl(1.0, 1.0, 1.0, 1.0).0, 0.5, epsilon = 1e-15);
        assert_eq!(weight_kl(0.5, 1.0, 1.0, 0.0).0, 0.5 * 1.25 / SCALE_FLOOR);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_the_prior() {
        let config = NetworkConfig::resnet(2, 3, 1, 1);
        let mut rng = stream(1);
        for _ in 0..50 {
            let mut s = VariationalState::new(&config, Some(EmKind::ArdAdd), 0.3, &mut rng).unwrap();
            for l in &mut s.raw_variances.layers {
                l.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-4.0..2.0));
            }
            for rows in s.row_scales.iter_mut().flatten() {
                rows.iter_mut().for_each(|x| *x = rng.random_range(0.1..3.0));
            }
            assert!(kl_divergence(&s, 0.7).0 >= 0.0);
        }
        let mut s = VariationalState::new(&config, Some(EmKind::ArdAdd), 1.0, &mut rng).unwrap();
        s.means = s.means.map(|_| 0.0);
        s.layer_scales[1] = Some(0.5);
        for k in 0..s.means.layers.len() {
            for r in 0..s.means.layers[k].rows() {
                let v = s.prior_scale(k, r);
                s.raw_variances.layers[k].row_mut(r).iter_mut().for_each(|x| *x = softplus_inverse(v));
            }
        }
        assert!(kl_divergence(&s, 1.0).0.abs() < 1e-12);
    }

    #[test]
    fn scale_star_reference_values() {
        assert_eq!(scale_star(&HyperPrior::LogUniform, 0.0, 7.0, 1.0), 0.0);
        assert_eq!(scale_star(&HyperPrior::HalfCauchy { scale: 1.0 }, 0.0, 7.0, 1.0), 0.0);
        let v = scale_star(&HyperPrior::InverseGamma { alpha: 3.0, beta: 3.0 }, 0.0, 10.0, 1.0);
        assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn add_m_step_matches_scale_star() {
        let config = NetworkConfig::resnet(2, 3, 1, 1);
        let mut s = VariationalState::new(&config, Some(EmKind::Add), 0.1, &mut stream(2)).unwrap();
        let prior = HyperPrior::InverseGamma { alpha: 3.0, beta: 3.0 };
        m_step(&mut s, &settings(prior));
        let mut total = 0.0;
        for r in 0..3 {
            for j in 0..3 {
                let m = s.means.layers[1].get(r, j);
                total += m * m + softplus(s.raw_variances.layers[1].get(r, j));
            }
        }
        let tau = s.layer_scales[1].unwrap();
        assert_relative_eq!(tau * tau, scale_star(&prior, total, 9.0, 1.0), max_relative = 1e-14);
    }

    #[test]
    fn m_step_never_lowers_the_elbo() {
        let config = NetworkConfig::resnet(3, 4, 2, 1);
        let mut rng = stream(3);
        let (x, y) = data(&mut rng, 12, 3);
        for prior in [
            HyperPrior::InverseGamma { alpha: 3.0, beta: 3.0 },
            HyperPrior::HalfCauchy { scale: 0.5 },
            HyperPrior::LogUniform,
        ] {
            for kind in [EmKind::Ard, EmKind::Add, EmKind::ArdAdd] {
                let mut net = Network::deterministic(&config).unwrap();
                let mut s = VariationalState::new(&config, Some(kind), 0.05, &mut rng).unwrap();
                let eps = vec![draw_noise(&s.means, &mut rng)];
                let st = settings(prior);
                let mut last = elbo_with_noise(&mut net, &s, &st, &x, &y, &eps).unwrap().0.total();
                for _ in 0..3 {
                    m_step(&mut s, &st);
                    let now = elbo_with_noise(&mut net, &s, &st, &x, &y, &eps).unwrap().0.total();
                    assert!(now >= last - 1e-10, "{kind:?} {prior:?}: {last} -> {now}");
                    last = now;
                }
            }
        }
    }

    #[test]
    fn coordinate_ascent_terminates() {
        let config = NetworkConfig::resnet(2, 5, 1, 1);
        let mut s = VariationalState::new(&config, Some(EmKind::ArdAdd), 0.01, &mut stream(4)).unwrap();
        let sweeps = m_step(&mut s, &settings(HyperPrior::HalfCauchy { scale: 1.0 }));
        assert_eq!(sweeps.len(), 1);
        assert!(sweeps[0] <= MAX_SWEEPS);
    }

    #[test]
    fn predictive_collapses_to_mean_network() {
        let config = NetworkConfig::mlp(2, &[5], 1);
        let mut rng = stream(5);
        let s = VariationalState::new(&config, Some(EmKind::Ard), 1e-300, &mut rng).unwrap();
        let (x, _) = data(&mut rng, 4, 2);
        let mut net = Network::deterministic(&config).unwrap();
        let p = predictive_distribution(&mut net, &s, &x, 3, 0.5, &mut rng).unwrap();
        let det = crate::net::forward_deterministic(&config, &s.means, &x).unwrap();
        for (a, b) in p.mean.data().iter().zip(det.data()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        assert!(p.variance.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let a = predictive_distribution(&mut net, &s, &x, 1, 0.5, &mut stream(6)).unwrap();
        let b = predictive_distribution(&mut net, &s, &x, 1, 0.5, &mut stream(6)).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn state_dump_round_trips() {
        let config = NetworkConfig::resnet(2, 3, 1, 2);
        let mut s = VariationalState::new(&config, Some(EmKind::ArdAdd), 0.2, &mut stream(7)).unwrap();
        m_step(&mut s, &settings(HyperPrior::LogUniform));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.txt");
        write_state(&path, &s).unwrap();
        assert_eq!(read_state(&path).unwrap(), s);
    }

    #[test]
    fn non_finite_elbo_reports_components() {
        let config = NetworkConfig::linear(1, 1, false);
        let mut net = Network::deterministic(&config).unwrap();
        let s = VariationalState::new(&config, None, 1.0, &mut stream(8)).unwrap();
        let x = Tensor::column(&[1.0]);
        let y = Tensor::column(&[0.0]);
        let mut st = settings(HyperPrior::LogUniform);
        st.likelihood_scale = f64::INFINITY;
        let err = elbo(&mut net, &s, &st, &x, &y, 1, &mut stream(9)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteElbo { .. }));
    }
}
