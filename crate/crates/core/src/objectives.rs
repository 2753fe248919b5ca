//! Training objectives over sampled noise masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Masks, Network, NoiseLayout, WeightSet};
use crate::noise::NoiseFamily;
use crate::numeric::log_sum_exp;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Upper bound on mask bits accepted by [`enumerate_log_marginal`].
pub const MAX_MASK_BITS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Monte Carlo lower bound.
    Lb,
    /// Importance-weighted.
    Iw,
    /// Tail-adaptive weights.
    Ta,
    /// Hierarchical parametrization, noiseless likelihood plus expected penalty.
    Hp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub samples: usize,
    /// Prior scale for the L2 term; `None` disables decay.
    pub decay_sigma0: Option<f64>,
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("objective needs at least one sample".into()));
        }
        if self.kind == ObjectiveKind::Ta && self.samples < 2 {
            return Err(Error::Config("tail-adaptive weights need at least two samples".into()));
        }
        if let Some(s) = self.decay_sigma0 {
            if !(s > 0.0) {
                return Err(Error::Config(format!("decay sigma0 must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub y: &'a Tensor,
    pub noise_var: f64,
}

/// Value, gradient, and the per-sample quantities behind them.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub gradient: WeightSet,
    pub log_likelihoods: Vec<f64>,
    /// Weight each per-sample gradient received.
    pub weights: Vec<f64>,
}

fn sample_terms(
    net: &mut Network,
    weights: &WeightSet,
    masks: &[Masks],
    batch: Batch<'_>,
) -> Result<(Vec<f64>, Vec<WeightSet>)> {
    if batch.x.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let mut lls = Vec::with_capacity(masks.len());
    let mut grads = Vec::with_capacity(masks.len());
    for (s, m) in masks.iter().enumerate() {
        let (ll, g) = net
            .log_likelihood_grad(weights, m, batch.x, batch.y, batch.noise_var)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteSample { sample: s },
                other => other,
            })?;
        if !ll.is_finite() || !g.is_finite() {
            return Err(Error::NonFiniteSample { sample: s });
        }
        lls.push(ll);
        grads.push(g);
    }
    Ok((lls, grads))
}

fn weighted_gradient(grads: &[WeightSet], weights: &[f64]) -> WeightSet {
    let mut out = grads[0].map(|_| 0.0);
    for (g, &w) in grads.iter().zip(weights) {
        out.axpy(w, g);
    }
    out
}

fn draw_masks(net: &Network, samples: usize, rng: &mut Stream) -> Result<Vec<Masks>> {
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    Ok((0..samples).map(|_| net.sample_masks(rng)).collect())
}

/// `(1/S) Σ_s log p(y | X, W, Ξ_s)` for the given masks.
pub fn mc_lower_bound_fixed(
    net: &mut Network,
    weights: &WeightSet,
    masks: &[Masks],
    batch: Batch<'_>,
) -> Result<ObjectiveEval> {
    let (lls, grads) = sample_terms(net, weights, masks, batch)?;
    let s = lls.len() as f64;
    let w = vec![1.0 / s; lls.len()];
    Ok(ObjectiveEval {
        value: lls.iter().sum::<f64>() / s,
        gradient: weighted_gradient(&grads, &w),
        log_likelihoods: lls,
        weights: w,
    })
}

pub fn mc_lower_bound(
    net: &mut Network,
    weights: &WeightSet,
    batch: Batch<'_>,
    samples: usize,
    rng: &mut Stream,
) -> Result<ObjectiveEval> {
    let masks = draw_masks(net, samples, rng)?;
    mc_lower_bound_fixed(net, weights, &masks, batch)
}

/// Normalized importance weights `w̃_s / Σ_k w̃_k` from log-likelihoods.
pub fn importance_weights(log_likelihoods: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_likelihoods);
    if !lse.is_finite() {
        return Err(Error::AllSamplesUnderflow);
    }
    Ok(log_likelihoods.iter().map(|l| (l - lse).exp()).collect())
}

/// `log (1/S) Σ_s p(y | X, W, Ξ_s)` for the given masks.
pub fn iw_objective_fixed(
    net: &mut Network,
    weights: &WeightSet,
    masks: &[Masks],
    batch: Batch<'_>,
) -> Result<ObjectiveEval> {
    let (lls, grads) = sample_terms(net, weights, masks, batch)?;
    let w = importance_weights(&lls)?;
    Ok(ObjectiveEval {
        value: iw_value(&lls)?,
        gradient: weighted_gradient(&grads, &w),
        log_likelihoods: lls,
        weights: w,
    })
}

fn iw_value(lls: &[f64]) -> Result<f64> {
    let lse = log_sum_exp(lls);
    if !lse.is_finite() {
        return Err(Error::AllSamplesUnderflow);
    }
    Ok(lse - (lls.len() as f64).ln())
}

pub fn iw_objective(
    net: &mut Network,
    weights: &WeightSet,
    batch: Batch<'_>,
    samples: usize,
    rng: &mut Stream,
) -> Result<ObjectiveEval> {
    let masks = draw_masks(net, samples, rng)?;
    iw_objective_fixed(net, weights, &masks, batch)
}

/// Monte Carlo standard error of the lower-bound estimate.
pub fn lower_bound_stderr(log_likelihoods: &[f64]) -> f64 {
    let (_, var) = crate::numeric::mean_variance(log_likelihoods);
    (var / log_likelihoods.len() as f64).sqrt()
}

/// Delta-method standard error of the importance-weighted estimate,
/// `sd(w̃) / (√S · mean(w̃))`, computed from log-likelihoods.
pub fn iw_stderr(log_likelihoods: &[f64]) -> f64 {
    let max = log_likelihoods.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_likelihoods.iter().map(|l| (l - max).exp()).collect();
    let (mean, var) = crate::numeric::mean_variance(&scaled);
    (var / scaled.len() as f64).sqrt() / mean
}

/// Rank-based weights `γ_s = S / #{k : w̃_k ≥ w̃_s}`, normalized.
///
/// Only the ordering of the inputs matters, so likelihoods and
/// log-likelihoods give the same result.
pub fn tail_adaptive_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::InvalidParameter(
            "tail-adaptive weights need at least two samples".into(),
        ));
    }
    let s = raw.len() as f64;
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let gamma: Vec<f64> = raw
        .iter()
        .map(|v| {
            let below = sorted.partition_point(|x| x < v);
            s / (raw.len() - below) as f64
        })
        .collect();
    let total: f64 = gamma.iter().sum();
    Ok(gamma.into_iter().map(|g| g / total).collect())
}

/// Tail-adaptive gradient; `value` is the importance-weighted bound, kept
/// for monitoring only.
pub fn ta_objective_fixed(
    net: &mut Network,
    weights: &WeightSet,
    masks: &[Masks],
    batch: Batch<'_>,
) -> Result<ObjectiveEval> {
    let (lls, grads) = sample_terms(net, weights, masks, batch)?;
    let w = tail_adaptive_weights(&lls)?;
    Ok(ObjectiveEval {
        value: iw_value(&lls)?,
        gradient: weighted_gradient(&grads, &w),
        log_likelihoods: lls,
        weights: w,
    })
}

pub fn ta_objective(
    net: &mut Network,
    weights: &WeightSet,
    batch: Batch<'_>,
    samples: usize,
    rng: &mut Stream,
) -> Result<ObjectiveEval> {
    if samples < 2 {
        return Err(Error::InvalidParameter(
            "tail-adaptive weights need at least two samples".into(),
        ));
    }
    let masks = draw_masks(net, samples, rng)?;
    ta_objective_fixed(net, weights, &masks, batch)
}

/// `Σ_s c_s log p(y | X, W, Ξ_s)` with caller-chosen constant weights.
pub fn weighted_log_likelihood_fixed(
    net: &mut Network,
    weights: &WeightSet,
    masks: &[Masks],
    coefficients: &[f64],
    batch: Batch<'_>,
) -> Result<ObjectiveEval> {
    if coefficients.len() != masks.len() {
        return Err(Error::InvalidParameter("one coefficient per mask".into()));
    }
    let (lls, grads) = sample_terms(net, weights, masks, batch)?;
    Ok(ObjectiveEval {
        value: lls.iter().zip(coefficients).map(|(l, c)| l * c).sum(),
        gradient: weighted_gradient(&grads, coefficients),
        log_likelihoods: lls,
        weights: coefficients.to_vec(),
    })
}

/// Per-row penalty coefficients `E[ξ⁻²]` for the hierarchical objective.
fn hierarchical_coefficients(net: &Network) -> Result<Vec<Vec<f64>>> {
    let config = net.config();
    let structure = net.structure();
    let family = match structure.layout {
        NoiseLayout::Deterministic => None,
        NoiseLayout::UnitWise { family } => Some(family),
        _ => {
            return Err(Error::Config(
                "the hierarchical objective is defined for unit-wise noise".into(),
            ))
        }
    };
    let coeff = match family {
        Some(f) => f.inverse_second_moment()?,
        None => 1.0,
    };
    Ok((0..config.weight_layers())
        .map(|k| {
            let noisy = family.is_some() && structure.masks_layer(config, k);
            let mut rows = vec![if noisy { coeff } else { 1.0 }; config.widths[k]];
            if config.bias {
                rows.push(1.0);
            }
            rows
        })
        .collect())
}

/// `(1/(2σ₀²)) Σ_{l,r} E[ξ⁻²_{l,r}] Σ_j w²_{l,r,j}` and its gradient.
///
/// Rows not covered by noise (bias rows, unmasked layers) carry
/// coefficient 1, which is the plain Gaussian prior.
pub fn hierarchical_penalty(net: &Network, weights: &WeightSet, sigma0: f64) -> Result<(f64, WeightSet)> {
    let coeffs = hierarchical_coefficients(net)?;
    let inv = 1.0 / (sigma0 * sigma0);
    let mut grad = weights.map(|_| 0.0);
    let mut penalty = 0.0;
    for ((w, g), rows) in weights.layers.iter().zip(grad.layers.iter_mut()).zip(&coeffs) {
        for (r, &c) in rows.iter().enumerate() {
            for (wv, gv) in w.row(r).iter().zip(g.row_mut(r)) {
                penalty += c * wv * wv;
                *gv = inv * c * wv;
            }
        }
    }
    Ok((0.5 * inv * penalty, grad))
}

/// Noiseless log-likelihood minus [`hierarchical_penalty`].
pub fn hierarchical_objective(
    net: &mut Network,
    weights: &WeightSet,
    batch: Batch<'_>,
    sigma0: f64,
) -> Result<ObjectiveEval> {
    let (penalty, penalty_grad) = hierarchical_penalty(net, weights, sigma0)?;
    let ones = net.ones_masks();
    let (ll, mut grad) = net.log_likelihood_grad(weights, &ones, batch.x, batch.y, batch.noise_var)?;
    grad.axpy(-1.0, &penalty_grad);
    Ok(ObjectiveEval {
        value: ll - penalty,
        gradient: grad,
        log_likelihoods: vec![ll],
        weights: vec![1.0],
    })
}

/// `−(1/(2σ₀²)) Σ_l ‖W_l‖²_F`; zero when `sigma0` is `None`.
pub fn decay_penalty(weights: &WeightSet, sigma0: Option<f64>) -> f64 {
    match sigma0 {
        Some(s) => -0.5 * weights.sum_squares() / (s * s),
        None => 0.0,
    }
}

pub fn map_objective_with_decay(value: f64, weights: &WeightSet, sigma0: Option<f64>) -> f64 {
    value + decay_penalty(weights, sigma0)
}

/// Adds the decay gradient `−W/σ₀²` to `gradient`.
pub fn add_decay_gradient(gradient: &mut WeightSet, weights: &WeightSet, sigma0: Option<f64>) {
    if let Some(s) = sigma0 {
        gradient.axpy(-1.0 / (s * s), weights);
    }
}

#[derive(Debug, Clone, Copy)]
enum BitSlot {
    Unit { layer: usize, index: usize },
    Weight { layer: usize, row: usize, col: usize },
    Layer { layer: usize },
}

fn bernoulli_keep(family: NoiseFamily) -> Result<f64> {
    match family {
        NoiseFamily::Bernoulli { keep } => Ok(keep),
        other => Err(Error::InvalidParameter(format!(
            "mask enumeration needs Bernoulli noise, got {}",
            other.name()
        ))),
    }
}

/// Exact `log Σ_masks P(mask) p(y | X, W, mask)` over every Bernoulli mask.
pub fn enumerate_log_marginal(net: &mut Network, weights: &WeightSet, batch: Batch<'_>) -> Result<f64> {
    let config = net.config().clone();
    let structure = *net.structure();
    let template = net.ones_masks();
    let mut slots: Vec<(BitSlot, f64)> = Vec::new();
    for (k, m) in template.layers.iter().enumerate() {
        if let Some(u) = &m.unit {
            let keep = bernoulli_keep(structure.unit_family().expect("unit mask present"))?;
            slots.extend((0..u.len()).map(|index| (BitSlot::Unit { layer: k, index }, keep)));
        }
        if m.weight.is_some() {
            let keep = bernoulli_keep(structure.weight_family().expect("weight mask present"))?;
            for row in 0..config.widths[k] {
                for col in 0..config.widths[k + 1] {
                    slots.push((BitSlot::Weight { layer: k, row, col }, keep));
                }
            }
        }
        if m.layer.is_some() {
            let keep = bernoulli_keep(structure.layer_family().expect("layer scale present"))?;
            slots.push((BitSlot::Layer { layer: k }, keep));
        }
    }
    if slots.len() > MAX_MASK_BITS {
        return Err(Error::TooManyMaskBits {
            bits: slots.len(),
            limit: MAX_MASK_BITS,
        });
    }
    let mut terms = Vec::new();
    for code in 0u64..(1u64 << slots.len()) {
        let mut masks = template.clone();
        let mut log_p = 0.0;
        for (b, &(slot, keep)) in slots.iter().enumerate() {
            let on = code >> b & 1 == 1;
            log_p += if on { keep.ln() } else { (1.0 - keep).ln() };
            let v = if on { 1.0 } else { 0.0 };
            match slot {
                BitSlot::Unit { layer, index } => {
                    masks.layers[layer].unit.as_mut().expect("unit mask")[index] = v
                }
                BitSlot::Weight { layer, row, col } => {
                    masks.layers[layer].weight.as_mut().expect("weight mask").set(row, col, v)
                }
                BitSlot::Layer { layer } => masks.layers[layer].layer = Some(v),
            }
        }
        if log_p == f64::NEG_INFINITY {
            continue;
        }
        let ll = net.log_likelihood(weights, &masks, batch.x, batch.y, batch.noise_var)?;
        terms.push(log_p + ll);
    }
    Ok(log_sum_exp(&terms))
}

/// A fixed 2-4-1 ReLU network with Bernoulli unit noise on the inputs and
/// hidden units (six mask bits) and eight data points, small enough to
/// enumerate.
pub struct ToyProblem {
    pub net: Network,
    pub weights: WeightSet,
    pub x: Tensor,
    pub y: Tensor,
    pub noise_var: f64,
}

impl ToyProblem {
    pub fn new(drop_rate: f64, seed: u64) -> Result<Self> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let config = crate::net::NetworkConfig::mlp(2, &[4], 1);
        let structure = crate::net::NoiseStructure::unit_wise(NoiseFamily::dropout(drop_rate)).with_output_layer(true);
        let net = Network::new(&config, &structure)?;
        let mut rng = crate::rng::stream(seed);
        let weights = WeightSet::init_he(&config, &mut rng);
        let x = Tensor::matrix(8, 2, (0..16).map(|_| rng.sample(StandardNormal)).collect())?;
        let y = Tensor::column(
            &(0..8)
                .map(|i| (x.get(i, 0) - 0.5 * x.get(i, 1)).max(0.0) + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>(),
        );
        Ok(ToyProblem {
            net,
            weights,
            x,
            y,
            noise_var: 0.25,
        })
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            x: &self.x,
            y: &self.y,
            noise_var: self.noise_var,
        }
    }
}
