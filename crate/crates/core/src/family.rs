//! Exponential-family data models, link functions and size-parameter maps.
//!
//! Parameterisations:
//! - gaussian: mean `mu`, variance `psi`;
//! - poisson: mean `mu`;
//! - gamma: mean `mu`, shape `1/psi`;
//! - inverse-gaussian: mean `mu`, shape `1/psi`;
//! - negative-binomial: failures before `k` successes, `pi = k/(mu + k)`;
//! - binomial: successes in `k` trials, `pi = mu/k`.
//!
//! The dispersion `psi` is fixed to 1 for the three count families.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, InverseGaussian, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{FrkError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    Poisson,
    Gamma,
    InverseGaussian,
    NegativeBinomial,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Link {
    Identity,
    Inverse,
    Log,
    Sqrt,
    Logit,
    Probit,
    Cloglog,
}

/// Classification of a family/link pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compatibility {
    Ok,
    /// Allowed, but the implied mean range can give nonsensical results.
    Warn,
    Forbidden,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Gaussian,
        Family::Poisson,
        Family::Gamma,
        Family::InverseGaussian,
        Family::NegativeBinomial,
        Family::Binomial,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "gamma" => Ok(Family::Gamma),
            "inverse-gaussian" => Ok(Family::InverseGaussian),
            "negative-binomial" => Ok(Family::NegativeBinomial),
            "binomial" => Ok(Family::Binomial),
            _ => Err(FrkError::Configuration(format!("unknown response family `{name}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Gamma => "gamma",
            Family::InverseGaussian => "inverse-gaussian",
            Family::NegativeBinomial => "negative-binomial",
            Family::Binomial => "binomial",
        }
    }

    /// Binomial and negative-binomial carry a known size parameter.
    pub fn has_size(&self) -> bool {
        matches!(self, Family::NegativeBinomial | Family::Binomial)
    }

    /// Whether `psi` is a free parameter (otherwise it is fixed at 1).
    pub fn has_dispersion(&self) -> bool {
        matches!(self, Family::Gaussian | Family::Gamma | Family::InverseGaussian)
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Family::Poisson | Family::NegativeBinomial | Family::Binomial)
    }
}

impl Link {
    pub const ALL: [Link; 7] = [
        Link::Identity,
        Link::Inverse,
        Link::Log,
        Link::Sqrt,
        Link::Logit,
        Link::Probit,
        Link::Cloglog,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "identity" => Ok(Link::Identity),
            "inverse" => Ok(Link::Inverse),
            "log" => Ok(Link::Log),
            "sqrt" | "square-root" => Ok(Link::Sqrt),
            "logit" => Ok(Link::Logit),
            "probit" => Ok(Link::Probit),
            "cloglog" => Ok(Link::Cloglog),
            _ => Err(FrkError::Configuration(format!("unknown link function `{name}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Inverse => "inverse",
            Link::Log => "log",
            Link::Sqrt => "square-root",
            Link::Logit => "logit",
            Link::Probit => "probit",
            Link::Cloglog => "cloglog",
        }
    }

    /// Links whose inverse maps onto `(0, 1)`.
    pub fn is_probability(&self) -> bool {
        matches!(self, Link::Logit | Link::Probit | Link::Cloglog)
    }

    /// `g(mu)`.
    pub fn link(&self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Inverse => 1.0 / mu,
            Link::Log => mu.ln(),
            Link::Sqrt => mu.sqrt(),
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Probit => probit(mu),
            Link::Cloglog => (-(-mu).ln_1p()).ln(),
        }
    }

    /// `g^{-1}(y)` with its first two derivatives.
    pub fn inverse_derivs(&self, y: f64) -> (f64, f64, f64) {
        match self {
            Link::Identity => (y, 1.0, 0.0),
            Link::Inverse => (1.0 / y, -1.0 / (y * y), 2.0 / (y * y * y)),
            Link::Log => {
                let e = y.exp();
                (e, e, e)
            }
            Link::Sqrt => (y * y, 2.0 * y, 2.0),
            Link::Logit => {
                let p = logistic(y);
                let q = logistic(-y);
                (p, p * q, p * q * (q - p))
            }
            Link::Probit => {
                let d = std_normal_pdf(y);
                (std_normal_cdf(y), d, -y * d)
            }
            Link::Cloglog => {
                let e = y.exp();
                let s = (-e).exp();
                let d1 = e * s;
                (-(-e).exp_m1(), d1, d1 * (1.0 - e))
            }
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        self.inverse_derivs(y).0
    }

    /// `1 - f^{-1}(y)` for probability links, computed without cancellation.
    pub fn inverse_complement(&self, y: f64) -> f64 {
        match self {
            Link::Logit => logistic(-y),
            Link::Probit => std_normal_cdf(-y),
            Link::Cloglog => (-y.exp()).exp(),
            _ => 1.0 - self.inverse(y),
        }
    }
}

fn logistic(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

pub fn std_normal_cdf(y: f64) -> f64 {
    0.5 * erfc(-y * FRAC_1_SQRT_2)
}

pub fn std_normal_pdf(y: f64) -> f64 {
    (-0.5 * y * y).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile: rational initial guess refined by Newton steps
/// on the accurate CDF.
fn probit(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // Acklam's approximation as the starting point
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let plow = 0.02425;
    let mut x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..3 {
        let pdf = std_normal_pdf(x);
        if pdf <= 0.0 {
            break;
        }
        x -= (std_normal_cdf(x) - p) / pdf;
    }
    x
}

/// Family/link compatibility table.
pub fn validate_combination(family: Family, link: Link) -> Compatibility {
    use Compatibility::*;
    match family {
        Family::Gaussian => match link {
            Link::Identity | Link::Inverse => Ok,
            Link::Log | Link::Sqrt => Warn,
            _ => Forbidden,
        },
        Family::Poisson | Family::Gamma | Family::InverseGaussian => match link {
            Link::Log | Link::Sqrt => Ok,
            Link::Identity | Link::Inverse => Warn,
            _ => Forbidden,
        },
        Family::NegativeBinomial => match link {
            Link::Identity | Link::Inverse => Forbidden,
            _ => Ok,
        },
        Family::Binomial => {
            if link.is_probability() {
                Ok
            } else {
                Forbidden
            }
        }
    }
}

/// Errors for forbidden pairs and logs a warning for problematic ones.
pub fn check_combination(family: Family, link: Link) -> Result<Compatibility> {
    let c = validate_combination(family, link);
    match c {
        Compatibility::Forbidden => {
            Err(FrkError::ForbiddenCombination { family: family.name().into(), link: link.name().into() })
        }
        Compatibility::Warn => {
            log::warn!(
                "family `{}` with link `{}` is allowed but may give nonsensical results",
                family.name(),
                link.name()
            );
            Ok(c)
        }
        Compatibility::Ok => Ok(c),
    }
}

/// `mu` as a function of the latent value, with first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanMap {
    pub mu: f64,
    pub d1: f64,
    pub d2: f64,
    /// Probability process value, for size families.
    pub pi: Option<f64>,
}

/// Latent value -> BAU mean (and probability, for size families).
pub fn mean_map(y: f64, link: Link, family: Family, k: Option<f64>) -> Result<MeanMap> {
    if !family.has_size() {
        let (mu, d1, d2) = link.inverse_derivs(y);
        return Ok(MeanMap { mu, d1, d2, pi: None });
    }
    let k = k.ok_or(FrkError::SizeParameterMissing { bau: usize::MAX })?;
    if link.is_probability() {
        let (p, p1, p2) = link.inverse_derivs(y);
        match family {
            Family::Binomial => Ok(MeanMap { mu: k * p, d1: k * p1, d2: k * p2, pi: Some(p) }),
            _ => {
                // mu = k (1 - pi) / pi
                let q = link.inverse_complement(y);
                let mu = k * q / p;
                let d1 = -k * p1 / (p * p);
                let d2 = -k * (p2 / (p * p) - 2.0 * p1 * p1 / (p * p * p));
                Ok(MeanMap { mu, d1, d2, pi: Some(p) })
            }
        }
    } else {
        let (g, g1, g2) = link.inverse_derivs(y);
        let mu = k * g;
        Ok(MeanMap { mu, d1: k * g1, d2: k * g2, pi: Some(k / (mu + k)) })
    }
}

/// Returns `(mu, pi)` for a latent value.
pub fn mean_from_latent(y: f64, link: Link, family: Family, k: Option<f64>) -> Result<(f64, Option<f64>)> {
    let m = mean_map(y, link, family, k)?;
    Ok((m.mu, m.pi))
}

/// `h(mu; k)`: mean -> probability for the size families.
pub fn prob_from_mean(family: Family, mu: f64, k: f64) -> Option<f64> {
    match family {
        Family::Binomial => Some(mu / k),
        Family::NegativeBinomial => Some(k / (mu + k)),
        _ => None,
    }
}

fn is_count(z: f64) -> bool {
    z >= 0.0 && (z - z.round()).abs() < 1e-9
}

/// Checks that `z` lies in the support of the family.
pub fn check_support(family: Family, z: f64, k: Option<f64>, index: usize) -> Result<()> {
    let ok = z.is_finite()
        && match family {
            Family::Gaussian => true,
            Family::Poisson | Family::NegativeBinomial => is_count(z),
            Family::Binomial => is_count(z) && k.is_none_or(|k| z <= k + 1e-9),
            Family::Gamma | Family::InverseGaussian => z > 0.0,
        };
    if ok {
        Ok(())
    } else {
        Err(FrkError::OutsideSupport { family: family.name().into(), index, value: z })
    }
}

fn mean_in_domain(family: Family, mu: f64, k: f64) -> bool {
    mu.is_finite()
        && match family {
            Family::Gaussian => true,
            Family::Binomial => mu > 0.0 && mu < k,
            _ => mu > 0.0,
        }
}

fn ln_choose(n: f64, r: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(r + 1.0) - ln_gamma(n - r + 1.0)
}

/// Log-density (log-PMF) of `z` given mean `mu`. Returns `-inf` when `mu`
/// lies outside the family's mean domain.
pub fn log_density(family: Family, z: f64, mu: f64, psi: f64, k: Option<f64>) -> Result<f64> {
    check_support(family, z, k, 0)?;
    Ok(log_density_unchecked(family, z, mu, psi, k.unwrap_or(f64::NAN)))
}

pub(crate) fn log_density_unchecked(family: Family, z: f64, mu: f64, psi: f64, k: f64) -> f64 {
    if family.has_size() && k == 0.0 {
        return if z == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if !mean_in_domain(family, mu, k) {
        return f64::NEG_INFINITY;
    }
    match family {
        Family::Gaussian => -0.5 * (2.0 * PI * psi).ln() - (z - mu) * (z - mu) / (2.0 * psi),
        Family::Poisson => z * mu.ln() - mu - ln_gamma(z + 1.0),
        Family::Gamma => {
            let a = 1.0 / psi;
            a * a.ln() - a * mu.ln() + (a - 1.0) * z.ln() - a * z / mu - ln_gamma(a)
        }
        Family::InverseGaussian => {
            let lambda = 1.0 / psi;
            0.5 * (lambda / (2.0 * PI * z * z * z)).ln() - lambda * (z - mu) * (z - mu) / (2.0 * mu * mu * z)
        }
        Family::NegativeBinomial => {
            // log pi = log k - log(mu + k), log(1 - pi) = log mu - log(mu + k)
            let lmk = (mu + k).ln();
            ln_gamma(z + k) - ln_gamma(k) - ln_gamma(z + 1.0) + k * (k.ln() - lmk) + z * (mu.ln() - lmk)
        }
        Family::Binomial => {
            let p = mu / k;
            ln_choose(k, z) + z * p.ln() + (k - z) * (-p).ln_1p()
        }
    }
}

/// First and second derivatives of the log-density with respect to `mu`.
pub fn log_density_derivs(family: Family, z: f64, mu: f64, psi: f64, k: f64) -> (f64, f64) {
    if family.has_size() && k == 0.0 {
        return (0.0, 0.0);
    }
    match family {
        Family::Gaussian => ((z - mu) / psi, -1.0 / psi),
        Family::Poisson => (z / mu - 1.0, -z / (mu * mu)),
        Family::Gamma => {
            let a = 1.0 / psi;
            (a * (z - mu) / (mu * mu), a / (mu * mu) - 2.0 * a * z / (mu * mu * mu))
        }
        Family::InverseGaussian => {
            let l = 1.0 / psi;
            let mu3 = mu * mu * mu;
            (l * (z - mu) / mu3, l * (2.0 * mu - 3.0 * z) / (mu3 * mu))
        }
        Family::NegativeBinomial => {
            let s = mu + k;
            (z / mu - (z + k) / s, -z / (mu * mu) + (z + k) / (s * s))
        }
        Family::Binomial => {
            let r = k - mu;
            (z / mu - (k - z) / r, -z / (mu * mu) - (k - z) / (r * r))
        }
    }
}

/// Expected information `-E[d^2 log f / d mu^2]`.
pub fn fisher_info(family: Family, mu: f64, psi: f64, k: f64) -> f64 {
    if family.has_size() && k == 0.0 {
        return 0.0;
    }
    match family {
        Family::Gaussian => 1.0 / psi,
        Family::Poisson => 1.0 / mu,
        Family::Gamma => 1.0 / (psi * mu * mu),
        Family::InverseGaussian => 1.0 / (psi * mu * mu * mu),
        Family::NegativeBinomial => k / (mu * (mu + k)),
        Family::Binomial => k / (mu * (k - mu)),
    }
}

/// Draws one observation with mean `mu`.
pub fn sample<R: Rng + ?Sized>(family: Family, mu: f64, psi: f64, k: Option<f64>, rng: &mut R) -> f64 {
    let poisson = |lambda: f64, rng: &mut R| -> f64 {
        if lambda > 0.0 {
            Poisson::new(lambda).map(|d| d.sample(rng)).unwrap_or(f64::NAN)
        } else {
            0.0
        }
    };
    match family {
        Family::Gaussian => {
            if psi > 0.0 {
                Normal::new(mu, psi.sqrt()).map(|d| d.sample(rng)).unwrap_or(f64::NAN)
            } else {
                mu
            }
        }
        Family::Poisson => poisson(mu, rng),
        Family::Gamma => Gamma::new(1.0 / psi, mu * psi).map(|d| d.sample(rng)).unwrap_or(f64::NAN),
        Family::InverseGaussian => InverseGaussian::new(mu, 1.0 / psi).map(|d| d.sample(rng)).unwrap_or(f64::NAN),
        Family::NegativeBinomial => {
            let k = k.unwrap_or(f64::NAN);
            if !(k > 0.0) {
                return 0.0;
            }
            let lambda = Gamma::new(k, mu / k).map(|d| d.sample(rng)).unwrap_or(f64::NAN);
            poisson(lambda, rng)
        }
        Family::Binomial => {
            let n = k.unwrap_or(f64::NAN).round();
            if !(n >= 1.0) {
                return 0.0;
            }
            let p = (mu / n).clamp(0.0, 1.0);
            Binomial::new(n as u64, p).map(|d| d.sample(rng) as f64).unwrap_or(f64::NAN)
        }
    }
}
