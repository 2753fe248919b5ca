//! Oracles shared by the integration suites and the acceptance report.
#![allow(dead_code)]

use shrinknet::em::HyperPrior;

/// Five-point central difference of `f` at every coordinate of `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |d: f64| {
                p[i] = x[i] + d;
                let v = f(&p);
                p[i] = x[i];
                v
            };
            (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
        })
        .collect()
}

/// [`numeric_gradient`] at `h` and `h / 4`, or `None` when the two disagree
/// beyond `1e-7` relative: the stencil straddles a ReLU kink and the point
/// says nothing about the derivative there.
pub fn smooth_numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let coarse = numeric_gradient(&mut f, x, h);
    let fine = numeric_gradient(&mut f, x, h / 4.0);
    (relative_error(&coarse, &fine, 1e-8) <= 1e-7).then_some(fine)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// `log p(v₁) − log p(v₂)` for `v = e^u`, computed from `u₁ − u₂` so that
/// nearby points do not cancel.
fn log_prior_difference(prior: &HyperPrior, u1: f64, u2: f64) -> f64 {
    let du = u1 - u2;
    match *prior {
        HyperPrior::InverseGamma { alpha, beta } => {
            // −β(1/v₁ − 1/v₂) = β e^{−u₁} expm1(u₁ − u₂)
            -(alpha + 1.0) * du + beta * (-u1).exp() * du.exp_m1()
        }
        HyperPrior::HalfCauchy { scale } => {
            let b2 = scale * scale;
            let dv = u2.exp() * du.exp_m1();
            -(dv / (b2 + u2.exp())).ln_1p() - 0.5 * du
        }
        HyperPrior::LogUniform => -du,
    }
}

/// `J(e^{u₁}) − J(e^{u₂})` for `J(v) = −S/(2σ₀²v) − (D/2) ln v + log p(v)`.
pub fn scale_objective_difference(prior: &HyperPrior, s: f64, d: f64, sigma0: f64, u1: f64, u2: f64) -> f64 {
    let a = s / (2.0 * sigma0 * sigma0);
    let du = u1 - u2;
    a * (-u1).exp() * du.exp_m1() - 0.5 * d * du + log_prior_difference(prior, u1, u2)
}

/// Maximizer of the scale objective by golden-section search over `ln v`.
///
/// The bracket is found by doubling outward from `u = 0` until the
/// objective falls on both sides.
pub fn scale_oracle(prior: &HyperPrior, s: f64, d: f64, sigma0: f64) -> f64 {
    let diff = |a: f64, b: f64| scale_objective_difference(prior, s, d, sigma0, a, b);
    let mut step = 1.0;
    let (mut lo, mut hi) = (-step, step);
    while diff(lo, lo + 1e-3) > 0.0 && lo > -700.0 {
        step *= 2.0;
        lo = -step;
    }
    step = 1.0;
    while diff(hi, hi - 1e-3) > 0.0 && hi < 700.0 {
        step *= 2.0;
        hi = step;
    }
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - r * (hi - lo);
    let mut e = lo + r * (hi - lo);
    for _ in 0..400 {
        if hi - lo <= 1e-13 {
            break;
        }
        if diff(c, e) > 0.0 {
            hi = e;
            e = c;
            c = hi - r * (hi - lo);
        } else {
            lo = c;
            c = e;
            e = lo + r * (hi - lo);
        }
    }
    (0.5 * (lo + hi)).exp()
}

// ---- objective gradients at random points ------------------------------------

use rand::Rng;
use rand_distr::StandardNormal;
use shrinknet::em::{draw_noise, elbo_with_noise, EmKind, EmSettings, VariationalState};
use shrinknet::net::{Masks, Network, NetworkConfig, NoiseStructure, WeightSet};
use shrinknet::noise::NoiseFamily;
use shrinknet::objectives::{self, Batch};
use shrinknet::rng::{stream, Stream};
use shrinknet::Tensor;

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_POINTS: usize = 20;
/// Points whose stencil crosses a ReLU kink are redrawn, up to this many.
pub const MAX_REJECTED: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    LowerBound,
    ImportanceWeighted,
    /// The surrogate with its rank weights held fixed.
    TailAdaptive,
    Hierarchical,
    Elbo,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::LowerBound,
        Objective::ImportanceWeighted,
        Objective::TailAdaptive,
        Objective::Hierarchical,
        Objective::Elbo,
    ];
}

/// Outcome over every setting of one objective.
#[derive(Debug, Clone, Default)]
pub struct GradientReport {
    pub judged: usize,
    pub required: usize,
    pub rejected: usize,
    pub worst: f64,
}

impl GradientReport {
    pub fn passes(&self) -> bool {
        self.judged == self.required && self.worst <= GRAD_TOL
    }

    fn record(&mut self, err: Option<f64>) {
        match err {
            Some(e) => {
                self.judged += 1;
                self.worst = self.worst.max(e);
            }
            None => self.rejected += 1,
        }
    }
}

pub fn randn(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Gaussian weights including biases. He initialization zeroes the biases,
/// which puts dead-input rows exactly on a ReLU kink.
pub fn random_weights(config: &NetworkConfig, rng: &mut Stream) -> WeightSet {
    let mut w = WeightSet::zeros(config);
    for l in &mut w.layers {
        l.data_mut().iter_mut().for_each(|v| *v = 0.7 * rng.sample::<f64, _>(StandardNormal));
    }
    w
}

pub fn unflatten(like: &WeightSet, flat: &[f64]) -> WeightSet {
    let mut out = like.clone();
    let mut at = 0;
    for l in &mut out.layers {
        let n = l.numel();
        l.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    out
}

/// Judges points until `GRAD_POINTS` are in or too many were rejected.
fn judge_points(report: &mut GradientReport, mut point: impl FnMut() -> Option<f64>) {
    report.required += GRAD_POINTS;
    let (start, mut rejected) = (report.judged, 0);
    while report.judged - start < GRAD_POINTS && rejected <= MAX_REJECTED {
        let err = point();
        rejected += usize::from(err.is_none());
        report.record(err);
    }
}

type Fixed = fn(&mut Network, &WeightSet, &[Masks], Batch<'_>) -> shrinknet::Result<objectives::ObjectiveEval>;

fn mc_structures() -> Vec<NoiseStructure> {
    vec![
        NoiseStructure::unit_wise(NoiseFamily::dropout(0.3)),
        NoiseStructure::unit_wise(NoiseFamily::Gaussian { scale: 0.5 }).with_output_layer(true),
        NoiseStructure::weight_wise(NoiseFamily::Rayleigh { scale: 0.8 }),
    ]
}

/// Maximum relative error between analytic and five-point gradients of
/// `objective`, over 20 random points per setting.
pub fn check_objective_gradient(objective: Objective, seed: u64) -> GradientReport {
    let mut rng = stream(seed);
    let mut report = GradientReport::default();
    let config = NetworkConfig::mlp(3, &[5, 4], 1);
    match objective {
        Objective::LowerBound | Objective::ImportanceWeighted | Objective::TailAdaptive => {
            for structure in mc_structures() {
                let mut net = Network::new(&config, &structure).unwrap();
                let x = randn(&mut rng, &[16, 3]);
                let y = randn(&mut rng, &[16, 1]);
                let b = Batch { x: &x, y: &y, noise_var: 0.5 };
                judge_points(&mut report, || {
                    let w = random_weights(&config, &mut rng);
                    let masks: Vec<_> = (0..5).map(|_| net.sample_masks(&mut rng)).collect();
                    let (analytic, numeric) = match objective {
                        Objective::TailAdaptive => {
                            let ta = objectives::ta_objective_fixed(&mut net, &w, &masks, b).unwrap();
                            let numeric = smooth_numeric_gradient(
                                |f| {
                                    objectives::weighted_log_likelihood_fixed(&mut net, &unflatten(&w, f), &masks, &ta.weights, b)
                                        .unwrap()
                                        .value
                                },
                                &w.flat(),
                                GRAD_STEP,
                            )?;
                            (ta.gradient.flat(), numeric)
                        }
                        _ => {
                            let f: Fixed = if objective == Objective::LowerBound {
                                objectives::mc_lower_bound_fixed
                            } else {
                                objectives::iw_objective_fixed
                            };
                            let analytic = f(&mut net, &w, &masks, b).unwrap().gradient.flat();
                            let numeric = smooth_numeric_gradient(
                                |p| f(&mut net, &unflatten(&w, p), &masks, b).unwrap().value,
                                &w.flat(),
                                GRAD_STEP,
                            )?;
                            (analytic, numeric)
                        }
                    };
                    Some(relative_error(&analytic, &numeric, 1e-8))
                });
            }
        }
        Objective::Hierarchical => {
            // Gaussian noise has no finite E[ξ⁻²]; use heavier-tailed families.
            for family in [
                NoiseFamily::InverseNakagami { shape: 2.5, scale: 1.5 },
                NoiseFamily::InverseNakagami { shape: 4.0, scale: 0.6 },
            ] {
                let mut net = Network::new(&config, &NoiseStructure::unit_wise(family)).unwrap();
                let x = randn(&mut rng, &[16, 3]);
                let y = randn(&mut rng, &[16, 1]);
                let b = Batch { x: &x, y: &y, noise_var: 0.5 };
                judge_points(&mut report, || {
                    let w = random_weights(&config, &mut rng);
                    let analytic = objectives::hierarchical_objective(&mut net, &w, b, 0.8).unwrap().gradient.flat();
                    let numeric = smooth_numeric_gradient(
                        |f| objectives::hierarchical_objective(&mut net, &unflatten(&w, f), b, 0.8).unwrap().value,
                        &w.flat(),
                        GRAD_STEP,
                    )?;
                    Some(relative_error(&analytic, &numeric, 1e-8))
                });
            }
        }
        Objective::Elbo => {
            let config = NetworkConfig::resnet(3, 4, 2, 1);
            let mut net = Network::deterministic(&config).unwrap();
            let x = randn(&mut rng, &[12, 3]);
            let y = randn(&mut rng, &[12, 1]);
            let settings = EmSettings {
                hyperprior: HyperPrior::InverseGamma { alpha: 3.0, beta: 3.0 },
                sigma0: 0.9,
                noise_var: 0.4,
                likelihood_scale: 2.5,
            };
            let kinds = [None, Some(EmKind::Ard), Some(EmKind::Add), Some(EmKind::ArdAdd)];
            let mut drawn = 0;
            judge_points(&mut report, || {
                let kind = kinds[drawn % kinds.len()];
                drawn += 1;
                let mut state = VariationalState::new(&config, kind, 0.05, &mut rng).unwrap();
                for l in &mut state.raw_variances.layers {
                    l.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-4.0..0.5));
                }
                for rows in state.row_scales.iter_mut().flatten() {
                    rows.iter_mut().for_each(|v| *v = rng.random_range(0.2..2.0));
                }
                for t in state.layer_scales.iter_mut().flatten() {
                    *t = rng.random_range(0.2..2.0);
                }
                let eps: Vec<WeightSet> = (0..2).map(|_| draw_noise(&state.means, &mut rng)).collect();
                let (_, grad) = elbo_with_noise(&mut net, &state, &settings, &x, &y, &eps).unwrap();
                let analytic: Vec<f64> = grad.means.flat().into_iter().chain(grad.raw_variances.flat()).collect();
                let n = state.means.num_params();
                let point: Vec<f64> = state.means.flat().into_iter().chain(state.raw_variances.flat()).collect();
                let numeric = smooth_numeric_gradient(
                    |f| {
                        let mut s = state.clone();
                        s.means = unflatten(&state.means, &f[..n]);
                        s.raw_variances = unflatten(&state.raw_variances, &f[n..]);
                        elbo_with_noise(&mut net, &s, &settings, &x, &y, &eps).unwrap().0.total()
                    },
                    &point,
                    GRAD_STEP,
                )?;
                Some(relative_error(&analytic, &numeric, 1e-8))
            });
        }
    }
    report
}

// ---- closed-form scale updates against the search oracle ---------------------

/// Worst `|v − v*| / (1 + v*)` over a sweep, and how many `S = 0` cases
/// failed to return exactly zero where they must.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScaleSweep {
    pub configurations: usize,
    pub worst: f64,
    pub nonzero_at_zero: usize,
}

impl ScaleSweep {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst <= tol && self.nonzero_at_zero == 0
    }
}

/// `S` is 0 one time in twenty, else log-uniform on `[1e-4, 1e4]`;
/// `D ∈ [1, 400)`; `σ₀` log-uniform on `[0.1, 5]`.
pub fn scale_star_sweep(seed: u64, n: usize, mut draw_prior: impl FnMut(&mut Stream) -> HyperPrior) -> ScaleSweep {
    let mut rng = stream(seed);
    let mut out = ScaleSweep { configurations: n, ..Default::default() };
    for _ in 0..n {
        let prior = draw_prior(&mut rng);
        let s = if rng.random::<f64>() < 0.05 {
            0.0
        } else {
            10f64.powf(rng.random_range(-4.0..4.0))
        };
        let d = rng.random_range(1..400) as f64;
        let sigma0 = 10f64.powf(rng.random_range(-1.0..0.7));
        let v = shrinknet::em::scale_star(&prior, s, d, sigma0);
        if s == 0.0 && !matches!(prior, HyperPrior::InverseGamma { .. }) {
            out.nonzero_at_zero += usize::from(v != 0.0);
            continue;
        }
        let oracle = scale_oracle(&prior, s, d, sigma0);
        out.worst = out.worst.max((v - oracle).abs() / (1.0 + oracle));
    }
    out
}

pub fn random_inverse_gamma(rng: &mut Stream) -> HyperPrior {
    HyperPrior::InverseGamma {
        alpha: 10f64.powf(rng.random_range(-1.0..1.5)),
        beta: 10f64.powf(rng.random_range(-2.0..1.5)),
    }
}

pub fn random_half_cauchy(rng: &mut Stream) -> HyperPrior {
    HyperPrior::HalfCauchy {
        scale: 10f64.powf(rng.random_range(-2.0..1.5)),
    }
}
