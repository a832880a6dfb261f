//! Complete-data log-likelihood, the Newton search for the random-effect mode
//! and the Laplace approximation of the marginal likelihood.
//!
//! The random effects are stacked as `u = (eta, xi)` where `xi` covers only
//! the observed BAUs. The negative Hessian
//!
//! ```text
//! P = [ S'WS + Q    S'W      ]
//!     [ WS          W + D_xi ]
//! ```
//!
//! is factorised by eliminating `xi` first: `W + D_xi` is block diagonal over
//! groups of BAUs linked by shared supports, leaving a dense `r x r` Schur
//! complement for `eta`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};
use crate::family::{self, MeanMap};
use crate::model::{expand_fs_variances, Model, ModelState};

pub const INNER_TOL: f64 = 1e-8;
pub const INNER_MAX_ITER: usize = 100;

/// `u = (eta, xi)` split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffects {
    pub eta: Vec<f64>,
    pub xi: Vec<f64>,
}

impl RandomEffects {
    pub fn from_stacked(u: &[f64], r: usize) -> Self {
        RandomEffects { eta: u[..r].to_vec(), xi: u[r..].to_vec() }
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut u = self.eta.clone();
        u.extend_from_slice(&self.xi);
        u
    }
}

/// One diagonal block of the `xi` part of the factorisation.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Block {
    members: Vec<usize>,
    cols: Vec<usize>,
    /// Lower Cholesky factor of `W_c + D_c` (empty without fine scale).
    l_a: DMatrix<f64>,
    /// `L_A^{-1} W_c S_c` restricted to `cols`.
    m: DMatrix<f64>,
}

/// Cholesky-type factor of the posterior precision `P = L L'`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionFactor {
    r: usize,
    n_xi: usize,
    blocks: Vec<Block>,
    l_g: DMatrix<f64>,
    logdet: f64,
}

impl PrecisionFactor {
    pub fn dim(&self) -> usize {
        self.r + self.n_xi
    }

    /// `log |P|`.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Forward substitution `L y = b` (in place, `b` in `(eta, xi)` order).
    fn forward(&self, b: &mut [f64]) {
        let r = self.r;
        let mut rhs_eta = DVector::from_column_slice(&b[..r]);
        if self.n_xi > 0 {
            for blk in &self.blocks {
                let mut yx = DVector::from_iterator(blk.members.len(), blk.members.iter().map(|&l| b[r + l]));
                blk.l_a.solve_lower_triangular_mut(&mut yx);
                let t = blk.m.tr_mul(&yx);
                for (a, &c) in blk.cols.iter().enumerate() {
                    rhs_eta[c] -= t[a];
                }
                for (a, &l) in blk.members.iter().enumerate() {
                    b[r + l] = yx[a];
                }
            }
        }
        if r > 0 {
            self.l_g.solve_lower_triangular_mut(&mut rhs_eta);
        }
        b[..r].copy_from_slice(rhs_eta.as_slice());
    }

    /// Backward substitution `L' x = y` (in place).
    fn backward(&self, y: &mut [f64]) {
        let r = self.r;
        let mut x_eta = DVector::from_column_slice(&y[..r]);
        if r > 0 {
            self.l_g.tr_solve_lower_triangular_mut(&mut x_eta);
        }
        if self.n_xi > 0 {
            for blk in &self.blocks {
                let xe = DVector::from_iterator(blk.cols.len(), blk.cols.iter().map(|&c| x_eta[c]));
                let mut v = DVector::from_iterator(blk.members.len(), blk.members.iter().map(|&l| y[r + l]));
                v -= &blk.m * xe;
                blk.l_a.tr_solve_lower_triangular_mut(&mut v);
                for (a, &l) in blk.members.iter().enumerate() {
                    y[r + l] = v[a];
                }
            }
        }
        y[..r].copy_from_slice(x_eta.as_slice());
    }

    /// Solves `P x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward(&mut x);
        self.backward(&mut x);
        x
    }

    /// Maps a standard-normal vector to a draw from `Gau(0, P^{-1})`.
    pub fn sample_from_std_normal(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        self.backward(&mut x);
        x
    }
}

/// Output of the Laplace approximation at one `theta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaplaceResult {
    pub u_hat: Vec<f64>,
    pub factor: PrecisionFactor,
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Quantities depending on `theta` only.
pub(crate) struct Prepared {
    offset: Vec<f64>,
    q: DMatrix<f64>,
    q_logdet: f64,
    prec_xi: Vec<f64>,
    prec_xi_logdet: f64,
    psi: f64,
}

pub(crate) fn prepare(model: &Model, state: &ModelState) -> Result<Prepared> {
    model.check_state(state)?;
    let alpha = DVector::from_column_slice(&state.alpha);
    let offset = (&model.t_obs * alpha).as_slice().to_vec();
    let (q, q_logdet) = match (&state.prior, model.r()) {
        (_, 0) => (DMatrix::zeros(0, 0), 0.0),
        (Some(prior), _) => model.eta_precision(prior)?,
        (None, _) => unreachable!("checked by check_state"),
    };
    let (prec_xi, prec_xi_logdet) = if model.fine_scale {
        let var = expand_fs_variances(&model.grid, &state.sigma2fs)?;
        let prec: Vec<f64> = model.obs_baus.iter().map(|&i| 1.0 / var[i]).collect();
        let ld = prec.iter().map(|p| p.ln()).sum();
        (prec, ld)
    } else {
        (Vec::new(), 0.0)
    };
    let psi = if model.family.has_dispersion() { state.psi } else { 1.0 };
    Ok(Prepared { offset, q, q_logdet, prec_xi, prec_xi_logdet, psi })
}

fn latent_at_observed(model: &Model, prep: &Prepared, u: &[f64]) -> Vec<f64> {
    let r = model.r();
    (0..model.obs_baus.len())
        .map(|l| {
            let mut y = prep.offset[l];
            for &(c, v) in &model.s_rows[l] {
                y += v * u[c];
            }
            if model.fine_scale {
                y += u[r + l];
            }
            y
        })
        .collect()
}

fn mean_maps(model: &Model, y: &[f64]) -> Vec<MeanMap> {
    y.iter()
        .enumerate()
        .map(|(l, &yl)| {
            family::mean_map(yl, model.link, model.family, model.k_bau_local(l)).expect("size parameters validated on construction")
        })
        .collect()
}

fn observation_means(model: &Model, maps: &[MeanMap]) -> Vec<f64> {
    model.obs_rows.iter().map(|row| row.iter().map(|&(l, w)| w * maps[l].mu).sum()).collect()
}

fn k_obs(model: &Model, j: usize) -> f64 {
    model.k_z.get(j).copied().unwrap_or(f64::NAN)
}

fn prior_terms(model: &Model, prep: &Prepared, u: &[f64]) -> f64 {
    let r = model.r();
    let mut total = 0.0;
    if r > 0 {
        let eta = DVector::from_column_slice(&u[..r]);
        let quad = eta.dot(&(&prep.q * &eta));
        total += 0.5 * prep.q_logdet - 0.5 * r as f64 * (2.0 * PI).ln() - 0.5 * quad;
    }
    if model.fine_scale {
        let n = prep.prec_xi.len();
        let quad: f64 = prep.prec_xi.iter().zip(&u[r..]).map(|(p, x)| p * x * x).sum();
        total += 0.5 * prep.prec_xi_logdet - 0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * quad;
    }
    total
}

fn loglik_prepared(model: &Model, prep: &Prepared, u: &[f64]) -> f64 {
    let y = latent_at_observed(model, prep, u);
    let maps = mean_maps(model, &y);
    let mu = observation_means(model, &maps);
    let mut total = 0.0;
    for (j, &m) in mu.iter().enumerate() {
        total += family::log_density_unchecked(model.family, model.z[j], m, prep.psi, k_obs(model, j));
        if total == f64::NEG_INFINITY || total.is_nan() {
            return f64::NEG_INFINITY;
        }
    }
    total + prior_terms(model, prep, u)
}

/// `log [Z | mu_Z, psi] + log [eta | theta] + log [xi | sigma2_xi]`.
pub fn complete_loglik(model: &Model, state: &ModelState, u: &[f64]) -> Result<f64> {
    check_len(model, u)?;
    let prep = prepare(model, state)?;
    Ok(loglik_prepared(model, &prep, u))
}

fn check_len(model: &Model, u: &[f64]) -> Result<()> {
    if u.len() != model.p() {
        return Err(FrkError::Dimension(format!("random effects have length {}, expected {}", u.len(), model.p())));
    }
    Ok(())
}

/// Gradient and curvature of the data term with respect to the latent values
/// at the observed BAUs.
struct DataTerms {
    g_y: Vec<f64>,
    /// Per component, the dense block of `W` (negative Hessian w.r.t. `Y`).
    w_blocks: Vec<DMatrix<f64>>,
}

fn data_terms(model: &Model, prep: &Prepared, u: &[f64], fisher: bool) -> DataTerms {
    let y = latent_at_observed(model, prep, u);
    let maps = mean_maps(model, &y);
    let mu = observation_means(model, &maps);
    let n_o = y.len();
    let mut g_y = vec![0.0; n_o];
    let mut diag = vec![0.0; n_o];
    let mut w_blocks: Vec<DMatrix<f64>> =
        model.components.iter().map(|c| DMatrix::zeros(c.members.len(), c.members.len())).collect();
    for (j, row) in model.obs_rows.iter().enumerate() {
        let k = k_obs(model, j);
        let (d, e) = family::log_density_derivs(model.family, model.z[j], mu[j], prep.psi, k);
        let curv = if fisher { family::fisher_info(model.family, mu[j], prep.psi, k) } else { -e };
        let comp = model.comp_of[row[0].0].0;
        let wb = &mut w_blocks[comp];
        for &(l, w) in row {
            let a_l = w * maps[l].d1;
            g_y[l] += d * a_l;
            if !fisher {
                diag[l] -= d * w * maps[l].d2;
            }
            let pl = model.comp_of[l].1;
            for &(l2, w2) in row {
                let pl2 = model.comp_of[l2].1;
                wb[(pl, pl2)] += curv * a_l * w2 * maps[l2].d1;
            }
        }
    }
    for (l, dv) in diag.iter().enumerate() {
        let (c, pos) = model.comp_of[l];
        w_blocks[c][(pos, pos)] += dv;
    }
    DataTerms { g_y, w_blocks }
}

fn gradient_prepared(model: &Model, prep: &Prepared, u: &[f64], g_y: &[f64]) -> Vec<f64> {
    let r = model.r();
    let mut g = vec![0.0; model.p()];
    for (l, row) in model.s_rows.iter().enumerate() {
        for &(c, v) in row {
            g[c] += v * g_y[l];
        }
    }
    if r > 0 {
        let eta = DVector::from_column_slice(&u[..r]);
        let qe = &prep.q * eta;
        for c in 0..r {
            g[c] -= qe[c];
        }
    }
    if model.fine_scale {
        for l in 0..g_y.len() {
            g[r + l] = g_y[l] - prep.prec_xi[l] * u[r + l];
        }
    }
    g
}

/// Analytic gradient of [`complete_loglik`] with respect to `u`.
pub fn gradient(model: &Model, state: &ModelState, u: &[f64]) -> Result<Vec<f64>> {
    check_len(model, u)?;
    let prep = prepare(model, state)?;
    let terms = data_terms(model, &prep, u, false);
    Ok(gradient_prepared(model, &prep, u, &terms.g_y))
}

fn factorise(model: &Model, prep: &Prepared, w_blocks: &[DMatrix<f64>]) -> Option<PrecisionFactor> {
    let r = model.r();
    let mut g = prep.q.clone();
    let mut logdet = 0.0;
    let mut blocks = Vec::with_capacity(model.components.len());
    let mut pos = vec![usize::MAX; r];
    for (comp, wc) in model.components.iter().zip(w_blocks) {
        let nc = comp.members.len();
        let nj = comp.cols.len();
        for (a, &c) in comp.cols.iter().enumerate() {
            pos[c] = a;
        }
        let mut sc = DMatrix::zeros(nc, nj);
        for (a, &l) in comp.members.iter().enumerate() {
            for &(c, v) in &model.s_rows[l] {
                sc[(a, pos[c])] += v;
            }
        }
        let ws = wc * &sc;
        let mut upd = sc.tr_mul(&ws);
        let (l_a, m) = if model.fine_scale {
            let mut a = wc.clone();
            for (i, &l) in comp.members.iter().enumerate() {
                a[(i, i)] += prep.prec_xi[l];
            }
            let chol = a.cholesky()?;
            let l_a = chol.unpack();
            logdet += 2.0 * l_a.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let m = l_a.solve_lower_triangular(&ws)?;
            upd -= m.tr_mul(&m);
            (l_a, m)
        } else {
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        };
        for (a, &ca) in comp.cols.iter().enumerate() {
            for (b, &cb) in comp.cols.iter().enumerate() {
                g[(ca, cb)] += upd[(a, b)];
            }
        }
        blocks.push(Block { members: comp.members.clone(), cols: comp.cols.clone(), l_a, m });
    }
    let l_g = if r > 0 {
        // symmetrise against accumulated rounding
        let gs = (&g + g.transpose()) * 0.5;
        let l = gs.cholesky()?.unpack();
        logdet += 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        l
    } else {
        DMatrix::zeros(0, 0)
    };
    if !logdet.is_finite() {
        return None;
    }
    Some(PrecisionFactor { r, n_xi: model.n_xi(), blocks, l_g, logdet })
}

/// Result of the Newton search.
#[derive(Debug, Clone)]
pub struct InnerMode {
    pub u: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton(model: &Model, prep: &Prepared, u0: &[f64]) -> Result<InnerMode> {
    let p = model.p();
    let mut u = u0.to_vec();
    let mut f = loglik_prepared(model, prep, &u);
    if !f.is_finite() {
        u = vec![0.0; p];
        f = loglik_prepared(model, prep, &u);
        if !f.is_finite() {
            return Err(FrkError::Numerical("complete log-likelihood is not finite at u = 0".into()));
        }
    }
    let mut grad_norm = f64::INFINITY;
    for iter in 0..=INNER_MAX_ITER {
        let terms = data_terms(model, prep, &u, false);
        let g = gradient_prepared(model, prep, &u, &terms.g_y);
        grad_norm = max_abs(&g);
        if grad_norm < INNER_TOL {
            return Ok(InnerMode { u, loglik: f, iterations: iter, grad_norm });
        }
        if iter == INNER_MAX_ITER {
            break;
        }
        let factor = match factorise(model, prep, &terms.w_blocks) {
            Some(fac) => fac,
            None => {
                let fisher = data_terms(model, prep, &u, true);
                factorise(model, prep, &fisher.w_blocks)
                    .ok_or_else(|| FrkError::Numerical("Newton system is not positive-definite".into()))?
            }
        };
        let delta = factor.solve(&g);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = u.iter().zip(&delta).map(|(a, d)| a + step * d).collect();
            let fc = loglik_prepared(model, prep, &cand);
            if fc.is_finite() && fc >= f - 1e-12 * (1.0 + f.abs()) {
                u = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(FrkError::InnerConvergence { iterations: INNER_MAX_ITER, grad_norm })
}

/// Newton search for the mode of the complete log-likelihood in `u`.
pub fn inner_mode(model: &Model, state: &ModelState, u0: Option<&[f64]>) -> Result<InnerMode> {
    let prep = prepare(model, state)?;
    let zeros = vec![0.0; model.p()];
    let u0 = u0.unwrap_or(&zeros);
    check_len(model, u0)?;
    newton(model, &prep, u0)
}

/// Laplace approximation `l*(theta) = l(u_hat) + (p/2) log 2 pi - (1/2) log |P|`.
pub fn laplace_objective(model: &Model, state: &ModelState, u0: Option<&[f64]>) -> Result<LaplaceResult> {
    let prep = prepare(model, state)?;
    let zeros = vec![0.0; model.p()];
    let u0 = u0.unwrap_or(&zeros);
    check_len(model, u0)?;
    let mode = newton(model, &prep, u0)?;
    let terms = data_terms(model, &prep, &mode.u, false);
    let factor = factorise(model, &prep, &terms.w_blocks)
        .ok_or_else(|| FrkError::Numerical("Hessian is not positive-definite at the mode".into()))?;
    let p = model.p() as f64;
    let loglik = mode.loglik + 0.5 * p * (2.0 * PI).ln() - 0.5 * factor.logdet;
    Ok(LaplaceResult { u_hat: mode.u, factor, loglik, iterations: mode.iterations, grad_norm: mode.grad_norm })
}

/// Dense negative Hessian `P` of the complete log-likelihood at `u`.
pub fn precision_dense(model: &Model, state: &ModelState, u: &[f64]) -> Result<DMatrix<f64>> {
    let prep = prepare(model, state)?;
    let terms = data_terms(model, &prep, u, false);
    let r = model.r();
    let p = model.p();
    let n_o = model.obs_baus.len();
    let mut w = DMatrix::zeros(n_o, n_o);
    for (comp, wb) in model.components.iter().zip(&terms.w_blocks) {
        for (a, &la) in comp.members.iter().enumerate() {
            for (b, &lb) in comp.members.iter().enumerate() {
                w[(la, lb)] = wb[(a, b)];
            }
        }
    }
    let mut so = DMatrix::zeros(n_o, r);
    for (l, row) in model.s_rows.iter().enumerate() {
        for &(c, v) in row {
            so[(l, c)] += v;
        }
    }
    let ws = &w * &so;
    let mut out = DMatrix::zeros(p, p);
    out.view_mut((0, 0), (r, r)).copy_from(&(so.tr_mul(&ws) + &prep.q));
    if model.fine_scale {
        out.view_mut((r, 0), (n_o, r)).copy_from(&ws);
        out.view_mut((0, r), (r, n_o)).copy_from(&ws.transpose());
        let mut a = w.clone();
        for l in 0..n_o {
            a[(l, l)] += prep.prec_xi[l];
        }
        out.view_mut((r, r), (n_o, n_o)).copy_from(&a);
    }
    Ok(out)
}

/// Sparse assembly of `P` (explicit zeros dropped).
pub fn precision_sparse(model: &Model, state: &ModelState, u: &[f64]) -> Result<CsrMatrix<f64>> {
    let dense = precision_dense(model, state, u)?;
    let mut coo = CooMatrix::new(dense.nrows(), dense.ncols());
    for j in 0..dense.ncols() {
        for i in 0..dense.nrows() {
            if dense[(i, j)] != 0.0 {
                coo.push(i, j, dense[(i, j)]);
            }
        }
    }
    Ok(CsrMatrix::from(&coo))
}
