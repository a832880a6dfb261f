//! Monte Carlo prediction of the latent process, the mean and probability
//! processes, and predictive data, over BAUs or aggregation regions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};
use crate::family::{self, Family, Link};
use crate::geometry::IncidenceMatrix;
use crate::laplace::LaplaceResult;
use crate::model::{expand_fs_variances, Model, ModelState};

pub const DEFAULT_N_MC: usize = 400;
pub const DEFAULT_PERCENTILES: [f64; 2] = [5.0, 95.0];

fn column_rng(seed: u64, column: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(column as u64);
    rng
}

fn columns_to_matrix(nrows: usize, cols: Vec<Vec<f64>>) -> DMatrix<f64> {
    let ncols = cols.len();
    let mut data = Vec::with_capacity(nrows * ncols);
    for c in cols {
        data.extend(c);
    }
    DMatrix::from_vec(nrows, ncols, data)
}

/// Draws `Y_MC = T alpha + [S I] U` with `U ~ Gau(u_hat, P^{-1})`; fine-scale
/// effects at BAUs without data come from their prior. Column `c` uses its
/// own random stream derived from `seed`, so results do not depend on
/// scheduling.
pub fn sample_latent(model: &Model, state: &ModelState, laplace: &LaplaceResult, n_mc: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n_mc == 0 {
        return Err(FrkError::Configuration("n_MC must be at least 1".into()));
    }
    let p = model.p();
    if laplace.factor.dim() != p || laplace.u_hat.len() != p {
        return Err(FrkError::State("stored factorisation does not match the model".into()));
    }
    let n = model.grid.len();
    let r = model.r();
    let t = model.grid.covariates();
    let fixed = t * DVector::from_column_slice(&state.alpha);
    let fs_sd: Vec<f64> = if model.fine_scale {
        expand_fs_variances(&model.grid, &state.sigma2fs)?.iter().map(|v| v.sqrt()).collect()
    } else {
        vec![0.0; n]
    };
    let observed = model.observed_baus();
    let cols: Vec<Vec<f64>> = (0..n_mc)
        .into_par_iter()
        .map(|c| {
            let mut rng = column_rng(seed, c);
            let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dev = laplace.factor.sample_from_std_normal(&z);
            let u: Vec<f64> = laplace.u_hat.iter().zip(&dev).map(|(a, b)| a + b).collect();
            let mut y: Vec<f64> = fixed.iter().copied().collect();
            for (i, yi) in y.iter_mut().enumerate() {
                let row = model.s.row(i);
                for (&col, &v) in row.col_indices().iter().zip(row.values()) {
                    *yi += v * u[col];
                }
            }
            if model.fine_scale {
                let mut next_obs = 0;
                for (i, yi) in y.iter_mut().enumerate() {
                    if next_obs < observed.len() && observed[next_obs] == i {
                        *yi += u[r + next_obs];
                        next_obs += 1;
                    } else {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *yi += fs_sd[i] * e;
                    }
                }
            }
            y
        })
        .collect();
    Ok(columns_to_matrix(n, cols))
}

/// Sample matrices of the mean and probability processes.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    /// `None` when size parameters needed for the mean are missing.
    pub mu: Option<DMatrix<f64>>,
    /// Probability process (size families only).
    pub pi: Option<DMatrix<f64>>,
}

/// Applies the inverse link entrywise.
pub fn transform_targets(y_mc: &DMatrix<f64>, family: Family, link: Link, k: Option<&[f64]>) -> Transformed {
    if !family.has_size() {
        return Transformed { mu: Some(y_mc.map(|y| link.inverse(y))), pi: None };
    }
    let (n, m) = y_mc.shape();
    match k {
        Some(k) => {
            let mut mu = DMatrix::zeros(n, m);
            let mut pi = DMatrix::zeros(n, m);
            for j in 0..m {
                for i in 0..n {
                    let (a, b) = family::mean_from_latent(y_mc[(i, j)], link, family, Some(k[i])).expect("size given");
                    mu[(i, j)] = a;
                    pi[(i, j)] = b.unwrap_or(f64::NAN);
                }
            }
            Transformed { mu: Some(mu), pi: Some(pi) }
        }
        None => {
            log::warn!("size parameters missing: mean-process predictions omitted");
            let pi = link.is_probability().then(|| y_mc.map(|y| link.inverse(y)));
            Transformed { mu: None, pi }
        }
    }
}

/// `M_P = C_P M` and, for size families, `pi_P = h(mu_P; k_P)`.
pub fn aggregate_regions(
    m: &DMatrix<f64>,
    c_p: &IncidenceMatrix,
    family: Family,
    k_bau: Option<&[f64]>,
) -> (DMatrix<f64>, Option<DMatrix<f64>>, Option<Vec<f64>>) {
    let nr = c_p.nrows();
    let mut out = DMatrix::zeros(nr, m.ncols());
    for l in 0..nr {
        for (i, w) in c_p.row(l) {
            for c in 0..m.ncols() {
                out[(l, c)] += w * m[(i, c)];
            }
        }
    }
    if !family.has_size() {
        return (out, None, None);
    }
    let Some(k) = k_bau else {
        return (out, None, None);
    };
    let k_p: Vec<f64> = (0..nr).map(|l| c_p.row(l).map(|(i, _)| k[i]).sum()).collect();
    let pi = DMatrix::from_fn(nr, m.ncols(), |l, c| family::prob_from_mean(family, out[(l, c)], k_p[l]).unwrap_or(f64::NAN));
    (out, Some(pi), Some(k_p))
}

/// One draw from the data model per entry of `m`.
pub fn sample_predictive_data(m: &DMatrix<f64>, family: Family, psi: f64, k: Option<&[f64]>, seed: u64) -> DMatrix<f64> {
    let n = m.nrows();
    let cols: Vec<Vec<f64>> = (0..m.ncols())
        .into_par_iter()
        .map(|c| {
            let mut rng = column_rng(seed ^ 0x5eed_da7a, c);
            (0..n).map(|i| family::sample(family, m[(i, c)], psi, k.map(|k| k[i]), &mut rng)).collect()
        })
        .collect();
    columns_to_matrix(n, cols)
}

/// Per-row posterior summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub percentiles: Vec<f64>,
    /// `quantiles[row][k]` is the `percentiles[k]` percentile of that row.
    pub quantiles: Vec<Vec<f64>>,
}

pub fn check_percentiles(percentiles: &[f64]) -> Result<()> {
    if let Some(p) = percentiles.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(FrkError::Configuration(format!("percentile {p} outside [0, 100]")));
    }
    Ok(())
}

/// Nearest-rank percentile of sorted values.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Mean, sample standard deviation and nearest-rank percentiles per row.
pub fn summarize(samples: &DMatrix<f64>, percentiles: &[f64]) -> Result<Summary> {
    check_percentiles(percentiles)?;
    let (n, m) = samples.shape();
    if m == 0 {
        return Err(FrkError::Configuration("no sample columns to summarise".into()));
    }
    let mut mean = Vec::with_capacity(n);
    let mut sd = Vec::with_capacity(n);
    let mut quantiles = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<f64> = samples.row(i).iter().copied().collect();
        let mu = row.iter().sum::<f64>() / m as f64;
        let var = if m > 1 { row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m - 1) as f64 } else { 0.0 };
        row.sort_by(|a, b| a.total_cmp(b));
        mean.push(mu);
        sd.push(var.sqrt());
        quantiles.push(percentiles.iter().map(|&p| nearest_rank(&row, p)).collect());
    }
    Ok(Summary { mean, sd, percentiles: percentiles.to_vec(), quantiles })
}

/// Which quantity a prediction refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Latent,
    Mean,
    Probability,
    Data,
}

impl Target {
    pub fn name(&self) -> &'static str {
        match self {
            Target::Latent => "Y",
            Target::Mean => "mu",
            Target::Probability => "prob",
            Target::Data => "Z",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "Y" | "latent" => Ok(Target::Latent),
            "mu" | "mean" => Ok(Target::Mean),
            "prob" | "pi" | "probability" => Ok(Target::Probability),
            "Z" | "data" => Ok(Target::Data),
            _ => Err(FrkError::Configuration(format!("unknown prediction target `{s}`"))),
        }
    }
}

/// Sample matrices for one set of prediction locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub targets: Vec<(Target, DMatrix<f64>)>,
}

impl PredictionResult {
    pub fn get(&self, target: Target) -> Option<&DMatrix<f64>> {
        self.targets.iter().find(|(t, _)| *t == target).map(|(_, m)| m)
    }

    pub fn summaries(&self, percentiles: &[f64]) -> Result<Vec<(Target, Summary)>> {
        self.targets.iter().map(|(t, m)| Ok((*t, summarize(m, percentiles)?))).collect()
    }
}

/// Prediction at the BAUs (`c_p = None`) or over the regions of `c_p`.
pub fn predict(
    model: &Model,
    state: &ModelState,
    laplace: &LaplaceResult,
    c_p: Option<&IncidenceMatrix>,
    n_mc: usize,
    seed: u64,
) -> Result<PredictionResult> {
    let y = sample_latent(model, state, laplace, n_mc, seed)?;
    let k = model.bau_sizes();
    let tr = transform_targets(&y, model.family, model.link, k);
    let psi = if model.family.has_dispersion() { state.psi } else { 1.0 };
    let mut targets = Vec::new();
    match c_p {
        None => {
            let data = tr.mu.as_ref().map(|mu| sample_predictive_data(mu, model.family, psi, k, seed));
            targets.push((Target::Latent, y));
            if let Some(mu) = tr.mu {
                targets.push((Target::Mean, mu));
            }
            if let Some(pi) = tr.pi {
                targets.push((Target::Probability, pi));
            }
            if let Some(z) = data {
                targets.push((Target::Data, z));
            }
        }
        Some(c_p) => {
            if c_p.ncols() != model.grid.len() {
                return Err(FrkError::Dimension("region incidence matrix does not match the grid".into()));
            }
            let Some(mu) = tr.mu else {
                return Err(FrkError::SizeParameterMissing { bau: 0 });
            };
            let (mu_p, pi_p, k_p) = aggregate_regions(&mu, c_p, model.family, k);
            let z_p = sample_predictive_data(&mu_p, model.family, psi, k_p.as_deref(), seed);
            targets.push((Target::Mean, mu_p));
            if let Some(pi_p) = pi_p {
                targets.push((Target::Probability, pi_p));
            }
            targets.push((Target::Data, z_p));
        }
    }
    Ok(PredictionResult { targets })
}
