//! Covariance and precision matrices for the basis-function coefficients.
//!
//! All matrices are block diagonal across resolutions. Within a resolution
//! the options are a tapered exponential covariance, a Leroux lattice
//! precision, or a distance-based precision. Space-time models combine a
//! spatial precision with an AR(1) temporal precision by Kronecker product.

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::basis::{distance, BasisSet};
use crate::error::{FrkError, Result};

/// Default `taper` multiplier: `beta_k = taper * mindist(k)`.
pub const DEFAULT_TAPER: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaperedParams {
    pub variance: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LerouxParams {
    pub kappa: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceParams {
    pub kappa: f64,
    pub rho: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorVariant {
    KTapered,
    QLeroux,
    QDist,
}

impl PriorVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "K_tapered" | "covariance" => Ok(PriorVariant::KTapered),
            "Q_leroux" | "precision" => Ok(PriorVariant::QLeroux),
            "Q_dist" => Ok(PriorVariant::QDist),
            other => Err(FrkError::Configuration(format!(
                "unknown prior variant `{other}` (expected K_tapered, Q_leroux or Q_dist)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PriorVariant::KTapered => "K_tapered",
            PriorVariant::QLeroux => "Q_leroux",
            PriorVariant::QDist => "Q_dist",
        }
    }

    pub fn is_precision(&self) -> bool {
        !matches!(self, PriorVariant::KTapered)
    }
}

/// Per-resolution parameters of one of the three variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorParams {
    Tapered(Vec<TaperedParams>),
    Leroux(Vec<LerouxParams>),
    Distance(Vec<DistanceParams>),
}

/// Parameters of the prior on the basis-function coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefPrior {
    pub params: PriorParams,
    pub taper_multiplier: f64,
    /// AR(1) coefficient of the temporal factor (space-time models only).
    pub temporal_rho: Option<f64>,
}

impl CoefPrior {
    pub fn variant(&self) -> PriorVariant {
        match self.params {
            PriorParams::Tapered(_) => PriorVariant::KTapered,
            PriorParams::Leroux(_) => PriorVariant::QLeroux,
            PriorParams::Distance(_) => PriorVariant::QDist,
        }
    }

    pub fn n_res(&self) -> usize {
        match &self.params {
            PriorParams::Tapered(p) => p.len(),
            PriorParams::Leroux(p) => p.len(),
            PriorParams::Distance(p) => p.len(),
        }
    }
}

/// `{1 - d/beta}_+^2 {1 + d/(2 beta)}`.
pub fn spherical_taper(d: f64, beta: f64) -> f64 {
    let t = (1.0 - d / beta).max(0.0);
    t * t * (1.0 + d / (2.0 * beta))
}

fn positive(name: &str, k: usize, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(FrkError::ParameterDomain(format!("{name}[{k}] = {v} must be positive")))
    }
}

fn non_negative(name: &str, k: usize, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(FrkError::ParameterDomain(format!("{name}[{k}] = {v} must be non-negative")))
    }
}

fn check_res(basis: &BasisSet, n: usize) -> Result<()> {
    if n != basis.n_res() {
        return Err(FrkError::Dimension(format!(
            "prior has {n} resolutions but the basis has {}",
            basis.n_res()
        )));
    }
    Ok(())
}

fn check_taper(taper: f64) -> Result<()> {
    if taper > 0.0 && !taper.is_nan() {
        Ok(())
    } else {
        Err(FrkError::ParameterDomain(format!("taper multiplier {taper} must be positive")))
    }
}

/// Tapered exponential covariance `K`.
pub fn build_k(basis: &BasisSet, prior: &CoefPrior) -> Result<CsrMatrix<f64>> {
    let PriorParams::Tapered(params) = &prior.params else {
        return Err(FrkError::VariantMismatch(format!("build_k needs K_tapered, got {}", prior.variant().name())));
    };
    check_res(basis, params.len())?;
    check_taper(prior.taper_multiplier)?;
    let fns = basis.functions();
    let mut coo = CooMatrix::new(basis.len(), basis.len());
    for (k, (res, p)) in basis.resolutions().iter().zip(params).enumerate() {
        positive("variance", k, p.variance)?;
        positive("length", k, p.length)?;
        let beta = prior.taper_multiplier * res.mindist;
        for i in res.start..res.start + res.len {
            for j in res.start..res.start + res.len {
                let d = distance(fns[i].centre, fns[j].centre);
                if d < beta {
                    let v = p.variance * (-d / p.length).exp() * spherical_taper(d, beta);
                    if v != 0.0 {
                        coo.push(i, j, v);
                    }
                }
            }
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// Leroux precision on a regular lattice: `kappa + rho |N_i|` on the diagonal
/// and `-rho` between first-order horizontal and vertical neighbours.
pub fn build_q_leroux(basis: &BasisSet, prior: &CoefPrior) -> Result<CsrMatrix<f64>> {
    let PriorParams::Leroux(params) = &prior.params else {
        return Err(FrkError::VariantMismatch(format!(
            "build_q_leroux needs Q_leroux, got {}",
            prior.variant().name()
        )));
    };
    check_res(basis, params.len())?;
    if !basis.is_regular() {
        return Err(FrkError::VariantMismatch(
            "the Leroux precision needs regularly spaced basis functions; use Q_dist for irregular bases".into(),
        ));
    }
    let fns = basis.functions();
    let mut coo = CooMatrix::new(basis.len(), basis.len());
    for (k, (res, p)) in basis.resolutions().iter().zip(params).enumerate() {
        positive("kappa", k, p.kappa)?;
        non_negative("rho", k, p.rho)?;
        let (nc, nr) = res.lattice_dims.expect("regular basis has lattice dims");
        let mut slot = vec![usize::MAX; nc * nr];
        for i in res.start..res.start + res.len {
            let (c, r) = fns[i].lattice.expect("regular basis has lattice coordinates");
            slot[r * nc + c] = i;
        }
        for i in res.start..res.start + res.len {
            let (c, r) = fns[i].lattice.unwrap();
            let mut neighbours = Vec::with_capacity(4);
            if c > 0 {
                neighbours.push(slot[r * nc + c - 1]);
            }
            if c + 1 < nc {
                neighbours.push(slot[r * nc + c + 1]);
            }
            if r > 0 {
                neighbours.push(slot[(r - 1) * nc + c]);
            }
            if r + 1 < nr {
                neighbours.push(slot[(r + 1) * nc + c]);
            }
            coo.push(i, i, p.kappa + p.rho * neighbours.len() as f64);
            if p.rho != 0.0 {
                for j in neighbours {
                    coo.push(i, j, -p.rho);
                }
            }
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// Distance-based precision: off-diagonals `-rho exp(-d/tau) T_beta(d)` and
/// diagonal `kappa` minus the off-diagonal row sum.
pub fn build_q_dist(basis: &BasisSet, prior: &CoefPrior) -> Result<CsrMatrix<f64>> {
    let PriorParams::Distance(params) = &prior.params else {
        return Err(FrkError::VariantMismatch(format!("build_q_dist needs Q_dist, got {}", prior.variant().name())));
    };
    check_res(basis, params.len())?;
    check_taper(prior.taper_multiplier)?;
    let fns = basis.functions();
    let mut coo = CooMatrix::new(basis.len(), basis.len());
    for (k, (res, p)) in basis.resolutions().iter().zip(params).enumerate() {
        positive("kappa", k, p.kappa)?;
        non_negative("rho", k, p.rho)?;
        positive("length", k, p.length)?;
        let beta = prior.taper_multiplier * res.mindist;
        for i in res.start..res.start + res.len {
            let mut offsum = 0.0;
            for j in res.start..res.start + res.len {
                if i == j {
                    continue;
                }
                let d = distance(fns[i].centre, fns[j].centre);
                if d < beta && p.rho != 0.0 {
                    let v = -p.rho * (-d / p.length).exp() * spherical_taper(d, beta);
                    if v != 0.0 {
                        offsum += v;
                        coo.push(i, j, v);
                    }
                }
            }
            coo.push(i, i, p.kappa - offsum);
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// Precision of a stationary AR(1) sequence of length `r_t` with unit
/// marginal variance.
pub fn ar1_precision(r_t: usize, rho: f64) -> Result<CsrMatrix<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(FrkError::ParameterDomain(format!("AR(1) coefficient {rho} must lie in (-1, 1)")));
    }
    if r_t == 0 {
        return Err(FrkError::Dimension("AR(1) precision needs at least one time point".into()));
    }
    let scale = 1.0 / (1.0 - rho * rho);
    let mut coo = CooMatrix::new(r_t, r_t);
    for i in 0..r_t {
        let interior = i > 0 && i + 1 < r_t;
        let d = if r_t == 1 { 1.0 - rho * rho } else if interior { 1.0 + rho * rho } else { 1.0 };
        coo.push(i, i, scale * d);
        if i + 1 < r_t && rho != 0.0 {
            coo.push(i, i + 1, -scale * rho);
            coo.push(i + 1, i, -scale * rho);
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// Sparse Kronecker product `Q_t ⊗ Q_s`.
pub fn build_q_spacetime(q_t: &CsrMatrix<f64>, q_s: &CsrMatrix<f64>) -> CsrMatrix<f64> {
    let rs = q_s.nrows();
    let cs = q_s.ncols();
    let mut coo = CooMatrix::new(q_t.nrows() * rs, q_t.ncols() * cs);
    for (a, b, v) in q_t.triplet_iter() {
        for (c, d, w) in q_s.triplet_iter() {
            coo.push(a * rs + c, b * cs + d, v * w);
        }
    }
    CsrMatrix::from(&coo)
}

/// Builds whichever matrix the prior's variant defines for a spatial basis.
pub fn build_spatial(basis: &BasisSet, prior: &CoefPrior) -> Result<CsrMatrix<f64>> {
    match prior.variant() {
        PriorVariant::KTapered => build_k(basis, prior),
        PriorVariant::QLeroux => build_q_leroux(basis, prior),
        PriorVariant::QDist => build_q_dist(basis, prior),
    }
}

pub fn to_dense(m: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, j, v) in m.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}
