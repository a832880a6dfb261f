//! Maximum-likelihood estimation of `theta` on a transformed scale.
//!
//! Variances, length-scales, `kappa_k` and `rho_k` are optimised on the log
//! scale, the temporal AR(1) coefficient through `atanh`, fixed effects as is.
//! Gradients are central finite differences evaluated in parallel, each warm
//! started from the random-effect mode at the current iterate.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covpar::{CoefPrior, DistanceParams, LerouxParams, PriorParams, PriorVariant, TaperedParams};
use crate::error::{FrkError, Result};
use crate::family::{Family, Link};
use crate::geometry::SupportSet;
use crate::laplace::{laplace_objective, LaplaceResult};
use crate::model::{FineScale, Model, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Log,
    Atanh,
}

impl Transform {
    fn forward(&self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Log => v.ln(),
            Transform::Atanh => v.atanh(),
        }
    }

    fn inverse(&self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => x.exp(),
            Transform::Atanh => x.tanh(),
        }
    }
}

/// How the fine-scale variance is treated during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sigma2fsRule {
    Free,
    /// Fixed at a user-supplied value.
    FixedUser(f64),
    /// Fixed at a rough moment-based estimate because no support is a single BAU.
    FixedRough,
}

/// Decides whether `sigma2_xi` is estimated or fixed.
pub fn resolve_sigma2fs(supports: &SupportSet, user_value: Option<f64>) -> Result<Sigma2fsRule> {
    if let Some(v) = user_value {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(FrkError::ParameterDomain(format!("known fine-scale variance {v} must be non-negative")));
        }
        return Ok(Sigma2fsRule::FixedUser(v));
    }
    if supports.bau_index_sets.iter().any(|c| c.len() == 1) {
        Ok(Sigma2fsRule::Free)
    } else {
        Ok(Sigma2fsRule::FixedRough)
    }
}

/// Link-scale least-squares fit ignoring the random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFit {
    pub alpha: Vec<f64>,
    /// Residual variance on the link scale.
    pub residual_variance: f64,
    /// Moment estimate of the dispersion (1 for the count families).
    pub psi: f64,
}

fn positive_floor(v: f64, floor: f64) -> f64 {
    if v.is_finite() && v > floor {
        v
    } else {
        floor
    }
}

/// Empirical link-scale value of one observation, or `None` when uninformative.
fn link_scale_response(family: Family, link: Link, z: f64, w_sum: f64, k: f64, scale_hint: f64) -> Option<f64> {
    let y = match family {
        Family::Binomial => {
            if !(k > 0.0) {
                return None;
            }
            link.link((z + 0.5) / (k + 1.0))
        }
        Family::NegativeBinomial => {
            if !(k > 0.0) {
                return None;
            }
            let mu = z + 0.5;
            if link.is_probability() {
                link.link(k / (mu + k))
            } else {
                link.link(mu / k)
            }
        }
        _ => {
            let mut mu = z / w_sum;
            if family == Family::Poisson {
                mu = (z + 0.5) / w_sum;
            }
            if matches!(link, Link::Log | Link::Sqrt | Link::Inverse) && mu <= 0.0 {
                mu = 1e-2 * scale_hint;
            }
            link.link(mu)
        }
    };
    y.is_finite().then_some(y)
}

/// GLM-style starting values: ordinary least squares of the link-transformed
/// data on support-averaged covariates.
pub fn moment_fit(model: &Model) -> MomentFit {
    let covs = model.grid.covariates();
    let q = covs.ncols();
    let scale_hint = model.z.iter().map(|z| z.abs()).sum::<f64>() / model.z.len().max(1) as f64;
    let scale_hint = positive_floor(scale_hint, 1.0);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    for j in 0..model.n_obs() {
        let row: Vec<(usize, f64)> = model.c_z.row(j).collect();
        let w_sum: f64 = row.iter().map(|(_, w)| w).sum();
        let k = model.k_z.get(j).copied().unwrap_or(f64::NAN);
        let Some(y) = link_scale_response(model.family, model.link, model.z[j], w_sum, k, scale_hint) else {
            continue;
        };
        let tbar: Vec<f64> = (0..q).map(|c| row.iter().map(|&(i, w)| w * covs[(i, c)]).sum::<f64>() / w_sum).collect();
        rows.push(tbar);
        ys.push(y);
    }
    let n = ys.len();
    let mut alpha = vec![0.0; q];
    let mut resid_var = 1.0;
    if n > 0 {
        let x = DMatrix::from_fn(n, q, |i, c| rows[i][c]);
        let yv = DVector::from_vec(ys.clone());
        let svd = x.clone().svd(true, true);
        if let Ok(sol) = svd.solve(&yv, 1e-10) {
            alpha = sol.as_slice().to_vec();
        }
        let fitted = &x * DVector::from_column_slice(&alpha);
        let rss: f64 = (&yv - &fitted).iter().map(|e| e * e).sum();
        let dof = if n > q { n - q } else { n };
        resid_var = rss / dof as f64;
    }
    let resid_var = positive_floor(resid_var, 1e-3);

    let psi = match model.family {
        Family::Gaussian | Family::Gamma | Family::InverseGaussian => {
            let mut acc = 0.0;
            let mut count = 0usize;
            for j in 0..model.n_obs() {
                let row: Vec<(usize, f64)> = model.c_z.row(j).collect();
                let mu: f64 = row
                    .iter()
                    .map(|&(i, w)| {
                        let yi: f64 = (0..q).map(|c| covs[(i, c)] * alpha[c]).sum();
                        w * model.link.inverse(yi)
                    })
                    .sum();
                let e = model.z[j] - mu;
                let v = match model.family {
                    Family::Gaussian => e * e,
                    Family::Gamma => e * e / (mu * mu),
                    _ => e * e / (mu * mu * mu),
                };
                if v.is_finite() {
                    acc += v;
                    count += 1;
                }
            }
            let floor = if model.family == Family::Gaussian { 1e-3 * scale_hint * scale_hint } else { 1e-3 };
            positive_floor(acc / count.max(1) as f64, floor)
        }
        _ => 1.0,
    };
    MomentFit { alpha, residual_variance: resid_var, psi }
}

/// Model-structure choices that fix the shape of `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub variant: PriorVariant,
    pub taper_multiplier: f64,
    pub fs_by_spatial_bau: bool,
    pub known_sigma2fs: Option<f64>,
}

/// Default starting point plus the fine-scale rule that applies.
pub fn initial_state(model: &Model, spec: &StateSpec) -> Result<(ModelState, Sigma2fsRule)> {
    let mf = moment_fit(model);
    let s2 = mf.residual_variance;
    let prior = match &model.basis {
        None => None,
        Some(basis) => {
            let spatial = basis.spatial();
            let n_res = spatial.n_res();
            let params = match spec.variant {
                PriorVariant::KTapered => PriorParams::Tapered(
                    (0..n_res).map(|k| TaperedParams { variance: s2, length: spatial.mindist(k) }).collect(),
                ),
                PriorVariant::QLeroux => {
                    PriorParams::Leroux((0..n_res).map(|_| LerouxParams { kappa: 1.0 / s2, rho: 0.1 }).collect())
                }
                PriorVariant::QDist => PriorParams::Distance(
                    (0..n_res)
                        .map(|k| DistanceParams { kappa: 1.0 / s2, rho: 0.1, length: spatial.mindist(k) })
                        .collect(),
                ),
            };
            Some(CoefPrior {
                params,
                taper_multiplier: spec.taper_multiplier,
                temporal_rho: model.is_spacetime().then_some(0.1),
            })
        }
    };
    if spec.fs_by_spatial_bau && model.grid.n_time() == 1 {
        return Err(FrkError::Configuration(
            "per-spatial-BAU fine-scale variances need a spatio-temporal grid".into(),
        ));
    }
    let rule = resolve_sigma2fs(&model.supports, spec.known_sigma2fs)?;
    let value = match rule {
        Sigma2fsRule::Free => s2,
        Sigma2fsRule::FixedUser(v) => v,
        Sigma2fsRule::FixedRough => 0.1 * s2,
    };
    if model.fine_scale && !(value > 0.0) {
        return Err(FrkError::ParameterDomain("fine-scale variance must be positive when fine scale is modelled".into()));
    }
    let sigma2fs = if spec.fs_by_spatial_bau {
        FineScale::PerSpatial(vec![value; model.grid.n_spatial()])
    } else {
        FineScale::Scalar(value)
    };
    let state = ModelState {
        alpha: mf.alpha,
        prior,
        sigma2fs,
        psi: mf.psi,
        sigma2fs_fixed: rule != Sigma2fsRule::Free || !model.fine_scale,
    };
    Ok((state, rule))
}

/// One entry of the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub transform: Transform,
    pub value: f64,
}

/// Flattens `theta` into named, natural-scale entries.
pub fn parameter_entries(model: &Model, state: &ModelState) -> Vec<ParamEntry> {
    let mut out = Vec::new();
    let mut push = |name: String, transform: Transform, value: f64| out.push(ParamEntry { name, transform, value });
    for (i, a) in state.alpha.iter().enumerate() {
        push(format!("alpha[{i}]"), Transform::Identity, *a);
    }
    if let Some(prior) = &state.prior {
        match &prior.params {
            PriorParams::Tapered(ps) => {
                for (k, p) in ps.iter().enumerate() {
                    push(format!("variance[{k}]"), Transform::Log, p.variance);
                    push(format!("length[{k}]"), Transform::Log, p.length);
                }
            }
            PriorParams::Leroux(ps) => {
                for (k, p) in ps.iter().enumerate() {
                    push(format!("kappa[{k}]"), Transform::Log, p.kappa);
                    push(format!("rho[{k}]"), Transform::Log, p.rho);
                }
            }
            PriorParams::Distance(ps) => {
                for (k, p) in ps.iter().enumerate() {
                    push(format!("kappa[{k}]"), Transform::Log, p.kappa);
                    push(format!("rho[{k}]"), Transform::Log, p.rho);
                    push(format!("length[{k}]"), Transform::Log, p.length);
                }
            }
        }
        if let Some(rho) = prior.temporal_rho {
            push("rho_t".into(), Transform::Atanh, rho);
        }
    }
    if model.fine_scale {
        match &state.sigma2fs {
            FineScale::Scalar(v) => push("sigma2fs".into(), Transform::Log, *v),
            FineScale::PerSpatial(vs) => {
                for (s, v) in vs.iter().enumerate() {
                    push(format!("sigma2fs[{s}]"), Transform::Log, *v);
                }
            }
        }
    }
    if model.family.has_dispersion() {
        push("psi".into(), Transform::Log, state.psi);
    }
    out
}

/// Writes natural-scale values back into a copy of `template`.
pub fn state_from_values(model: &Model, template: &ModelState, values: &[f64]) -> ModelState {
    let mut st = template.clone();
    let mut it = values.iter().copied();
    let mut next = || it.next().expect("value vector shorter than parameter layout");
    for a in st.alpha.iter_mut() {
        *a = next();
    }
    if let Some(prior) = st.prior.as_mut() {
        match &mut prior.params {
            PriorParams::Tapered(ps) => {
                for p in ps.iter_mut() {
                    p.variance = next();
                    p.length = next();
                }
            }
            PriorParams::Leroux(ps) => {
                for p in ps.iter_mut() {
                    p.kappa = next();
                    p.rho = next();
                }
            }
            PriorParams::Distance(ps) => {
                for p in ps.iter_mut() {
                    p.kappa = next();
                    p.rho = next();
                    p.length = next();
                }
            }
        }
        if prior.temporal_rho.is_some() {
            prior.temporal_rho = Some(next());
        }
    }
    if model.fine_scale {
        match &mut st.sigma2fs {
            FineScale::Scalar(v) => *v = next(),
            FineScale::PerSpatial(vs) => {
                for v in vs.iter_mut() {
                    *v = next();
                }
            }
        }
    }
    if model.family.has_dispersion() {
        st.psi = next();
    }
    st
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Parameter names (as in [`parameter_entries`]) held at their initial values.
    pub fixed: BTreeSet<String>,
    pub max_iter: usize,
    /// Convergence thresholds on the change in objective and the gradient.
    pub f_tol: f64,
    pub g_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { fixed: BTreeSet::new(), max_iter: 200, f_tol: 1e-6, g_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    /// Objective (approximate log-likelihood) after each accepted step.
    pub objective_trace: Vec<f64>,
    pub free: Vec<String>,
    pub fixed: Vec<String>,
    pub sigma2fs_rule: Sigma2fsRule,
    pub message: String,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub state: ModelState,
    pub laplace: LaplaceResult,
    pub report: FitReport,
    /// Starting point of the final inner search; re-running the Laplace
    /// approximation from it reproduces `laplace` exactly.
    pub u_start: Vec<f64>,
}

struct Objective<'a> {
    model: &'a Model,
    template: &'a ModelState,
    entries: Vec<ParamEntry>,
    free: Vec<usize>,
}

impl Objective<'_> {
    fn state_at(&self, x: &[f64]) -> ModelState {
        let mut values: Vec<f64> = self.entries.iter().map(|e| e.value).collect();
        for (a, &i) in self.free.iter().enumerate() {
            values[i] = self.entries[i].transform.inverse(x[a]);
        }
        state_from_values(self.model, self.template, &values)
    }

    /// Negative approximate log-likelihood and the mode it was computed at.
    fn eval(&self, x: &[f64], u0: &[f64]) -> Option<(f64, Vec<f64>)> {
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let state = self.state_at(x);
        match laplace_objective(self.model, &state, Some(u0)) {
            Ok(res) if res.loglik.is_finite() => Some((-res.loglik, res.u_hat)),
            _ => None,
        }
    }

    fn gradient(&self, x: &[f64], f0: f64, u0: &[f64]) -> (Vec<f64>, usize) {
        let d = x.len();
        let evals: Vec<Option<f64>> = (0..2 * d)
            .into_par_iter()
            .map(|k| {
                let i = k / 2;
                let h = 1e-4 * (1.0 + x[i].abs());
                let mut xp = x.to_vec();
                xp[i] += if k % 2 == 0 { h } else { -h };
                self.eval(&xp, u0).map(|(f, _)| f)
            })
            .collect();
        let g = (0..d)
            .map(|i| {
                let h = 1e-4 * (1.0 + x[i].abs());
                match (evals[2 * i], evals[2 * i + 1]) {
                    (Some(fp), Some(fm)) => (fp - fm) / (2.0 * h),
                    (Some(fp), None) => (fp - f0) / h,
                    (None, Some(fm)) => (f0 - fm) / h,
                    (None, None) => 0.0,
                }
            })
            .collect();
        (g, 2 * d)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

const MAX_STEP: f64 = 2.0;

/// Maximises the Laplace-approximate log-likelihood by BFGS.
pub fn fit(model: &Model, init: &ModelState, rule: Sigma2fsRule, options: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let entries = parameter_entries(model, init);
    for name in &options.fixed {
        if !entries.iter().any(|e| &e.name == name) {
            return Err(FrkError::Configuration(format!("cannot fix unknown parameter `{name}`")));
        }
    }
    let free: Vec<usize> = (0..entries.len())
        .filter(|&i| {
            let e = &entries[i];
            !(options.fixed.contains(&e.name) || init.sigma2fs_fixed && e.name.starts_with("sigma2fs"))
        })
        .collect();
    let obj = Objective { model, template: init, entries, free };
    let free_names: Vec<String> = obj.free.iter().map(|&i| obj.entries[i].name.clone()).collect();
    let fixed_names: Vec<String> =
        obj.entries.iter().map(|e| e.name.clone()).filter(|n| !free_names.contains(n)).collect();

    let mut x: Vec<f64> = obj.free.iter().map(|&i| obj.entries[i].transform.forward(obj.entries[i].value)).collect();
    let u_init = vec![0.0; model.p()];
    let (mut f, mut u) = obj.eval(&x, &u_init).ok_or_else(|| {
        FrkError::Numerical("the approximate likelihood is not finite at the initial parameters".into())
    })?;
    let mut u_start = u_init.clone();
    let mut evaluations = 1;
    let mut trace = vec![-f];
    let d = x.len();
    let mut converged = d == 0;
    let mut iterations = 0;
    let mut grad_norm = 0.0;
    let mut message = if d == 0 { "all parameters fixed".to_string() } else { String::new() };

    if d > 0 {
        let (mut g, n) = obj.gradient(&x, f, &u);
        evaluations += n;
        grad_norm = max_abs(&g);
        let mut h_inv = DMatrix::<f64>::identity(d, d);
        let mut scaled = false;
        let mut last_df = f64::INFINITY;
        while iterations < options.max_iter {
            if grad_norm < options.g_tol && last_df < options.f_tol {
                converged = true;
                break;
            }
            iterations += 1;
            let gv = DVector::from_column_slice(&g);
            let mut dir = -(&h_inv * &gv);
            if dir.dot(&gv) >= 0.0 {
                h_inv = DMatrix::identity(d, d);
                scaled = false;
                dir = -gv.clone();
            }
            let big = dir.amax();
            if big > MAX_STEP {
                dir *= MAX_STEP / big;
            }
            let slope = dir.dot(&gv);
            let mut accepted = None;
            let mut t = 1.0;
            for _ in 0..30 {
                let xn: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
                evaluations += 1;
                if let Some((fnew, un)) = obj.eval(&xn, &u) {
                    if fnew <= f + 1e-4 * t * slope {
                        accepted = Some((xn, fnew, un));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((xn, fnew, un)) = accepted else {
                if scaled || h_inv != DMatrix::identity(d, d) {
                    h_inv = DMatrix::identity(d, d);
                    scaled = false;
                    continue;
                }
                message = "line search failed to improve the objective".into();
                break;
            };
            let (gn, n) = obj.gradient(&xn, fnew, &un);
            evaluations += n;
            let s = DVector::from_iterator(d, xn.iter().zip(&x).map(|(a, b)| a - b));
            let yv = DVector::from_iterator(d, gn.iter().zip(&g).map(|(a, b)| a - b));
            let sy = s.dot(&yv);
            if sy > 1e-12 {
                if !scaled {
                    h_inv *= sy / yv.dot(&yv);
                    scaled = true;
                }
                let rho = 1.0 / sy;
                let hy = &h_inv * &yv;
                let yhy = yv.dot(&hy);
                h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            }
            last_df = f - fnew;
            x = xn;
            f = fnew;
            u_start = u.clone();
            u = un;
            g = gn;
            grad_norm = max_abs(&g);
            trace.push(-f);
        }
        if !converged && grad_norm < options.g_tol && last_df < options.f_tol {
            converged = true;
        }
        if converged {
            message = "converged".into();
        } else {
            if message.is_empty() {
                message = format!("no convergence within {} iterations", options.max_iter);
            }
            log::warn!("outer optimisation: {message}; returning the best parameters found");
        }
    }

    let state = obj.state_at(&x);
    let laplace = laplace_objective(model, &state, Some(&u_start))?;
    Ok(FitResult {
        state,
        laplace,
        report: FitReport {
            converged,
            iterations,
            evaluations,
            grad_norm,
            objective_trace: trace,
            free: free_names,
            fixed: fixed_names,
            sigma2fs_rule: rule,
            message,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
        u_start,
    })
}

/// Builds the default starting point, then fits.
pub fn fit_default(model: &Model, spec: &StateSpec, options: &FitOptions) -> Result<FitResult> {
    let (init, rule) = initial_state(model, spec)?;
    fit(model, &init, rule, options)
}
