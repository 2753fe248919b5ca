//! Noise families, the marginal weight priors they induce, and the
//! statistical checks tying the two together.
//!
//! Multiplying a `N(0, σ₀²)` weight by an independent scale `ξ` gives a
//! Gaussian scale mixture. The product form is the *expanded*
//! parametrization; drawing `ξ` and then `w ~ N(0, σ₀²ξ²)` is the
//! *hierarchical* one. Both produce the same marginal law:
//!
//! | noise `ξ`        | law of `ξ²`   | marginal `w`       |
//! |------------------|---------------|--------------------|
//! | Bernoulli(π)     | Bernoulli(π)  | spike-and-slab     |
//! | Gaussian(0, s²)  | scaled χ²     | gen. hyperbolic    |
//! | Rayleigh(s)      | exponential   | Laplace(sσ₀)       |
//! | inverse Nakagami | Γ⁻¹(a, b)     | Student-t(2a, σ₀√(b/a)) |
//! | half-Cauchy(b)   | (unnamed)     | horseshoe          |

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numeric::integrate_half_line;
use crate::rng::{child_stream, Stream};
use crate::stats::{ks_one_sample, ks_two_sample, normal_cdf, KsResult};

/// Distribution of a multiplicative scale variable `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// `ξ ∈ {0, 1}` with `P(ξ = 1) = keep`.
    Bernoulli { keep: f64 },
    /// Zero-mean Gaussian with standard deviation `scale`.
    Gaussian { scale: f64 },
    Rayleigh { scale: f64 },
    /// Parametrized through `ξ² ~ inverse-gamma(shape, scale)`.
    InverseNakagami { shape: f64, scale: f64 },
    HalfCauchy { scale: f64 },
}

impl NoiseFamily {
    /// Dropout with an explicit drop probability.
    pub fn dropout(drop_rate: f64) -> Self {
        NoiseFamily::Bernoulli {
            keep: 1.0 - drop_rate,
        }
    }

    /// Inverse Nakagami from its `(m, Ω)` form: `1/ξ ~ Nakagami(m, Ω)` gives
    /// `ξ² ~ inverse-gamma(m, m/Ω)`.
    pub fn inverse_nakagami_from_m_omega(m: f64, omega: f64) -> Self {
        NoiseFamily::InverseNakagami {
            shape: m,
            scale: m / omega,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseFamily::Bernoulli { .. } => "bernoulli",
            NoiseFamily::Gaussian { .. } => "gaussian",
            NoiseFamily::Rayleigh { .. } => "rayleigh",
            NoiseFamily::InverseNakagami { .. } => "inverse-nakagami",
            NoiseFamily::HalfCauchy { .. } => "half-cauchy",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseFamily::Bernoulli { keep } => (0.0..=1.0).contains(&keep),
            NoiseFamily::Gaussian { scale }
            | NoiseFamily::Rayleigh { scale }
            | NoiseFamily::HalfCauchy { scale } => scale > 0.0 && scale.is_finite(),
            NoiseFamily::InverseNakagami { shape, scale } => {
                shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{self:?}")))
        }
    }

    pub fn is_continuous(&self) -> bool {
        !matches!(self, NoiseFamily::Bernoulli { .. })
    }

    /// True when every draw is exactly 1 (the noiseless limit).
    pub fn is_degenerate_one(&self) -> bool {
        matches!(self, NoiseFamily::Bernoulli { keep } if *keep >= 1.0)
    }

    pub fn sample(&self, rng: &mut Stream) -> f64 {
        match *self {
            NoiseFamily::Bernoulli { keep } => {
                if rng.random::<f64>() < keep {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseFamily::Gaussian { scale } => scale * rng.sample::<f64, _>(StandardNormal),
            NoiseFamily::Rayleigh { scale } => {
                let u: f64 = rng.random();
                scale * (-2.0 * (-u).ln_1p()).sqrt()
            }
            NoiseFamily::InverseNakagami { shape, scale } => {
                let g = Gamma::new(shape, 1.0).expect("validated shape").sample(rng);
                (scale / g).sqrt()
            }
            NoiseFamily::HalfCauchy { scale } => {
                let u: f64 = rng.random();
                scale * (PI * (u - 0.5)).tan().abs()
            }
        }
    }

    /// Density of `ξ` on `[0, ∞)`. The Gaussian family is folded since only
    /// `ξ²` enters any formula.
    pub fn density(&self, xi: f64) -> f64 {
        if xi < 0.0 {
            return 0.0;
        }
        match *self {
            NoiseFamily::Bernoulli { .. } => f64::NAN,
            NoiseFamily::Gaussian { scale } => {
                2.0 * (-0.5 * (xi / scale).powi(2)).exp() / (scale * (2.0 * PI).sqrt())
            }
            NoiseFamily::Rayleigh { scale } => {
                let s2 = scale * scale;
                xi / s2 * (-xi * xi / (2.0 * s2)).exp()
            }
            NoiseFamily::InverseNakagami { shape, scale } => {
                if xi == 0.0 {
                    return 0.0;
                }
                let v = xi * xi;
                let log_ig =
                    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * v.ln() - scale / v;
                2.0 * xi * log_ig.exp()
            }
            NoiseFamily::HalfCauchy { scale } => 2.0 / (PI * scale * (1.0 + (xi / scale).powi(2))),
        }
    }

    /// `E[ξ⁻²]`, the coefficient of the hierarchical-parametrization penalty.
    pub fn inverse_second_moment(&self) -> Result<f64> {
        match *self {
            NoiseFamily::Bernoulli { keep } if keep >= 1.0 => Ok(1.0),
            NoiseFamily::InverseNakagami { shape, scale } => Ok(shape / scale),
            _ => Err(Error::DivergentExpectation(format!("{self:?}"))),
        }
    }

    /// `E[ξ²]`; infinite for the half-Cauchy and for heavy inverse-gamma tails.
    pub fn second_moment(&self) -> f64 {
        match *self {
            NoiseFamily::Bernoulli { keep } => keep,
            NoiseFamily::Gaussian { scale } => scale * scale,
            NoiseFamily::Rayleigh { scale } => 2.0 * scale * scale,
            NoiseFamily::InverseNakagami { shape, scale } if shape > 1.0 => scale / (shape - 1.0),
            _ => f64::INFINITY,
        }
    }
}

/// `count` i.i.d. draws of `ξ`.
pub fn sample_noise(family: &NoiseFamily, count: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    family.validate()?;
    Ok((0..count).map(|_| family.sample(rng)).collect())
}

/// Expanded parametrization: `ξ_i · z_i` with `z_i ~ N(0, σ₀²)`.
pub fn sample_gsm_expanded(
    family: &NoiseFamily,
    sigma0: f64,
    count: usize,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    family.validate()?;
    Ok((0..count)
        .map(|_| {
            let xi = family.sample(rng);
            let z: f64 = rng.sample::<f64, _>(StandardNormal) * sigma0;
            xi * z
        })
        .collect())
}

/// Hierarchical parametrization: draw `ξ`, then `w ~ N(0, σ₀²ξ²)`.
pub fn sample_gsm_hierarchical(
    family: &NoiseFamily,
    sigma0: f64,
    count: usize,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    family.validate()?;
    Ok((0..count)
        .map(|_| {
            let variance = sigma0 * sigma0 * family.sample(rng).powi(2);
            if variance == 0.0 {
                0.0
            } else {
                Normal::new(0.0, variance.sqrt()).expect("positive sd").sample(rng)
            }
        })
        .collect())
}

/// Marginal density of a weight after integrating out its scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MarginalPrior {
    SpikeAndSlab { keep: f64, sigma0: f64 },
    Laplace { scale: f64 },
    StudentT { dof: f64, scale: f64 },
    Horseshoe { sigma0: f64, scale: f64 },
    GeneralizedHyperbolic { sigma0: f64, scale: f64 },
}

impl MarginalPrior {
    pub fn for_family(family: &NoiseFamily, sigma0: f64) -> Self {
        match *family {
            NoiseFamily::Bernoulli { keep } => MarginalPrior::SpikeAndSlab { keep, sigma0 },
            NoiseFamily::Gaussian { scale } => {
                MarginalPrior::GeneralizedHyperbolic { sigma0, scale }
            }
            NoiseFamily::Rayleigh { scale } => MarginalPrior::Laplace {
                scale: scale * sigma0,
            },
            NoiseFamily::InverseNakagami { shape, scale } => MarginalPrior::StudentT {
                dof: 2.0 * shape,
                scale: sigma0 * (scale / shape).sqrt(),
            },
            NoiseFamily::HalfCauchy { scale } => MarginalPrior::Horseshoe { sigma0, scale },
        }
    }

    /// Direct sampler for the closed-form marginals, independent of any
    /// scale-mixture construction.
    pub fn sample_direct(&self, count: usize, rng: &mut Stream) -> Result<Vec<f64>> {
        match *self {
            MarginalPrior::Laplace { scale } => Ok((0..count)
                .map(|_| {
                    let u: f64 = rng.random::<f64>() - 0.5;
                    -scale * u.signum() * (-2.0 * u.abs()).ln_1p()
                })
                .collect()),
            MarginalPrior::StudentT { dof, scale } => {
                let t = StudentT::new(dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                Ok((0..count).map(|_| scale * t.sample(rng)).collect())
            }
            _ => Err(Error::UseQuadrature(self.name())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MarginalPrior::SpikeAndSlab { .. } => "spike-and-slab",
            MarginalPrior::Laplace { .. } => "laplace",
            MarginalPrior::StudentT { .. } => "student-t",
            MarginalPrior::Horseshoe { .. } => "horseshoe",
            MarginalPrior::GeneralizedHyperbolic { .. } => "generalized-hyperbolic",
        }
    }
}

/// Exact `log p(w)` for the closed-form marginals. For spike-and-slab this is
/// the continuous part `log(π) + log N(w; 0, σ₀²)`; the point mass at zero
/// has no density.
pub fn marginal_log_density(prior: &MarginalPrior, w: f64) -> Result<f64> {
    match *prior {
        MarginalPrior::SpikeAndSlab { keep, sigma0 } => {
            Ok(keep.ln() - 0.5 * (2.0 * PI * sigma0 * sigma0).ln() - w * w / (2.0 * sigma0 * sigma0))
        }
        MarginalPrior::Laplace { scale } => Ok(-(2.0 * scale).ln() - w.abs() / scale),
        MarginalPrior::StudentT { dof, scale } => {
            let z = w / scale;
            Ok(ln_gamma(0.5 * (dof + 1.0))
                - ln_gamma(0.5 * dof)
                - 0.5 * (dof * PI).ln()
                - scale.ln()
                - 0.5 * (dof + 1.0) * (z * z / dof).ln_1p())
        }
        MarginalPrior::Horseshoe { .. } | MarginalPrior::GeneralizedHyperbolic { .. } => {
            Err(Error::UseQuadrature(prior.name()))
        }
    }
}

/// Absolute tolerance on the mixture density.
pub const QUADRATURE_TOLERANCE: f64 = 1e-8;

/// `log ∫ N(w; 0, σ₀²ξ²) p(ξ) dξ` by adaptive quadrature.
pub fn marginal_log_density_quadrature(family: &NoiseFamily, sigma0: f64, w: f64) -> Result<f64> {
    family.validate()?;
    if !family.is_continuous() {
        return Err(Error::InvalidParameter(
            "quadrature needs a continuous noise family".into(),
        ));
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let q = integrate_half_line(
        |xi| {
            if xi <= 0.0 {
                return 0.0;
            }
            let sd = sigma0 * xi;
            let log_n = -half_log_2pi - sd.ln() - w * w / (2.0 * sd * sd);
            log_n.exp() * family.density(xi)
        },
        QUADRATURE_TOLERANCE,
        4000,
    )?;
    Ok(q.value.ln())
}

/// One row of the equivalence report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GsmCheck {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub passed: bool,
}

impl GsmCheck {
    fn from_ks(name: impl Into<String>, ks: KsResult, level: f64) -> Self {
        GsmCheck {
            name: name.into(),
            statistic: ks.statistic,
            p_value: ks.p_value,
            passed: ks.passes(level),
        }
    }
}

pub const KS_LEVEL: f64 = 0.01;

/// Expanded samples of `family` against the direct sampler of its marginal.
pub fn check_marginal_equivalence(
    family: &NoiseFamily,
    sigma0: f64,
    draws: usize,
    seed: u64,
) -> Result<GsmCheck> {
    let prior = MarginalPrior::for_family(family, sigma0);
    let expanded = sample_gsm_expanded(family, sigma0, draws, &mut child_stream(seed, 0))?;
    let direct = prior.sample_direct(draws, &mut child_stream(seed, 1))?;
    Ok(GsmCheck::from_ks(
        format!("{} expanded vs {} sampler", family.name(), prior.name()),
        ks_two_sample(&expanded, &direct),
        KS_LEVEL,
    ))
}

/// Expanded against hierarchical samples of the same family.
pub fn check_parametrization_equivalence(
    family: &NoiseFamily,
    sigma0: f64,
    draws: usize,
    seed: u64,
) -> Result<GsmCheck> {
    let expanded = sample_gsm_expanded(family, sigma0, draws, &mut child_stream(seed, 2))?;
    let hierarchical = sample_gsm_hierarchical(family, sigma0, draws, &mut child_stream(seed, 3))?;
    Ok(GsmCheck::from_ks(
        format!("{} expanded vs hierarchical", family.name()),
        ks_two_sample(&expanded, &hierarchical),
        KS_LEVEL,
    ))
}

/// Spike-and-slab structure of Bernoulli noise: the zero fraction sits within
/// a 6σ binomial band of `1 - π` and the non-zero part is `N(0, σ₀²)`.
pub fn check_spike_and_slab(keep: f64, sigma0: f64, draws: usize, seed: u64) -> Result<Vec<GsmCheck>> {
    let family = NoiseFamily::Bernoulli { keep };
    let samples = sample_gsm_expanded(&family, sigma0, draws, &mut child_stream(seed, 4))?;
    let n = draws as f64;
    let zeros = samples.iter().filter(|&&w| w == 0.0).count() as f64;
    let expected = (1.0 - keep) * n;
    let sd = (n * keep * (1.0 - keep)).sqrt();
    let z = if sd > 0.0 { (zeros - expected) / sd } else { zeros - expected };
    let mut checks = vec![GsmCheck {
        name: format!("bernoulli(keep={keep}) zero fraction"),
        statistic: z,
        p_value: f64::NAN,
        passed: z.abs() <= 6.0,
    }];
    let slab: Vec<f64> = samples.into_iter().filter(|&w| w != 0.0).collect();
    if !slab.is_empty() {
        checks.push(GsmCheck::from_ks(
            format!("bernoulli(keep={keep}) slab normality"),
            ks_one_sample(&slab, |x| normal_cdf(x, sigma0)),
            KS_LEVEL,
        ));
    }
    let xi = sample_noise(&family, draws, &mut child_stream(seed, 5))?;
    let squared_ok = xi.iter().all(|&x| x * x == x);
    checks.push(GsmCheck {
        name: format!("bernoulli(keep={keep}) squaring invariance"),
        statistic: 0.0,
        p_value: f64::NAN,
        passed: squared_ok,
    });
    Ok(checks)
}

/// The full equivalence suite reported by `verify-gsm`.
pub fn verify_gsm(draws: usize, seed: u64) -> Result<Vec<GsmCheck>> {
    let sigma0 = 1.0;
    let rayleigh = NoiseFamily::Rayleigh { scale: 0.8 };
    let inv_nak = NoiseFamily::InverseNakagami {
        shape: 2.5,
        scale: 1.5,
    };
    let mut checks = vec![
        check_marginal_equivalence(&rayleigh, sigma0, draws, seed)?,
        check_marginal_equivalence(&inv_nak, sigma0, draws, seed)?,
    ];
    let continuous = [
        NoiseFamily::Gaussian { scale: 1.0 },
        rayleigh,
        inv_nak,
        NoiseFamily::HalfCauchy { scale: 1.0 },
    ];
    for (i, family) in continuous.iter().enumerate() {
        checks.push(check_parametrization_equivalence(
            family,
            sigma0,
            draws,
            seed.wrapping_add(i as u64 + 1),
        )?);
    }
    checks.extend(check_spike_and_slab(0.5, sigma0, draws, seed)?);
    Ok(checks)
}
