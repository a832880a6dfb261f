//! Random model instances and dense reference implementations.
#![allow(dead_code)]

use frk_core::basis::{auto_basis, ModelBasis};
use frk_core::covpar::{CoefPrior, DistanceParams, LerouxParams, PriorParams, PriorVariant, TaperedParams, DEFAULT_TAPER};
use frk_core::family::{self, Family, Link};
use frk_core::geometry::{build_bau_grid, map_supports, Rect, Support, SupportKind};
use frk_core::model::{FineScale, Model, ModelState};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Instance {
    pub model: Model,
    pub state: ModelState,
    /// Latent value around which the instance is centred.
    pub y0: f64,
}

pub struct InstanceSpec {
    pub family: Family,
    pub link: Link,
    pub nx: usize,
    pub ny: usize,
    pub n_points: usize,
    pub n_rects: usize,
    pub variant: PriorVariant,
    pub fine_scale: bool,
    pub normalise: bool,
}

impl InstanceSpec {
    pub fn new(family: Family, link: Link) -> Self {
        InstanceSpec {
            family,
            link,
            nx: 7,
            ny: 6,
            n_points: 25,
            n_rects: 6,
            variant: PriorVariant::KTapered,
            fine_scale: true,
            normalise: true,
        }
    }
}

/// A latent value giving a sensible mean for the family and link.
pub fn typical_latent(family: Family, link: Link) -> f64 {
    if family.has_size() {
        if link.is_probability() {
            link.link(0.3)
        } else {
            link.link(0.5)
        }
    } else {
        let target = if family == Family::Gaussian { 2.0 } else { 5.0 };
        link.link(target)
    }
}

pub fn random_prior<R: Rng>(variant: PriorVariant, rng: &mut R) -> CoefPrior {
    let params = match variant {
        PriorVariant::KTapered => PriorParams::Tapered(vec![TaperedParams {
            variance: rng.random_range(0.3..1.5),
            length: rng.random_range(0.2..0.6),
        }]),
        PriorVariant::QLeroux => PriorParams::Leroux(vec![LerouxParams {
            kappa: rng.random_range(0.5..2.0),
            rho: rng.random_range(0.0..1.0),
        }]),
        PriorVariant::QDist => PriorParams::Distance(vec![DistanceParams {
            kappa: rng.random_range(0.5..2.0),
            rho: rng.random_range(0.0..1.0),
            length: rng.random_range(0.2..0.6),
        }]),
    };
    CoefPrior { params, taper_multiplier: DEFAULT_TAPER, temporal_rho: None }
}

/// Random instance on the unit square with one basis resolution (r = 9),
/// mixed point and rectangle supports and data drawn near `typical_latent`.
pub fn random_instance(spec: &InstanceSpec, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bbox = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let mut grid = build_bau_grid(bbox, spec.nx, spec.ny, 1).unwrap();
    grid.use_linear_trend();
    if spec.family.has_size() {
        let k: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(1..20) as f64).collect();
        grid.set_size_params(k).unwrap();
    }
    let basis = ModelBasis::Spatial(auto_basis(bbox, 1).unwrap());
    let mut supports = Vec::new();
    for _ in 0..spec.n_points {
        supports.push(Support::point(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
    }
    for _ in 0..spec.n_rects {
        let x0: f64 = rng.random_range(0.0..0.8);
        let y0: f64 = rng.random_range(0.0..0.8);
        let w: f64 = rng.random_range(0.05..0.3);
        let h: f64 = rng.random_range(0.05..0.3);
        supports.push(Support::rect(Rect::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)).unwrap()));
    }
    let set = map_supports(&grid, supports, SupportKind::Observation).unwrap();
    let y0 = typical_latent(spec.family, spec.link);
    let scale = 0.05 * y0.abs().max(0.2);
    let alpha = vec![y0, scale * rng.random_range(-1.0..1.0), scale * rng.random_range(-1.0..1.0)];
    let prior = random_prior(spec.variant, &mut rng);
    let psi = if spec.family.has_dispersion() { rng.random_range(0.2..1.0) } else { 1.0 };
    let sigma2fs = rng.random_range(0.1..0.5);

    // data generated from a small perturbation of the fixed-effect surface
    let covs = grid.covariates().clone();
    let sizes = grid.size_params().map(|k| k.to_vec());
    let mut zs = Vec::with_capacity(set.len());
    for c in &set.bau_index_sets {
        let mut mu = 0.0;
        let mut k_sum = 0.0;
        for &i in c {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let y = alpha[0] + alpha[1] * covs[(i, 1)] + alpha[2] * covs[(i, 2)] + scale * noise;
            let k = sizes.as_ref().map(|k| k[i]);
            let (m, _) = family::mean_from_latent(y, spec.link, spec.family, k).unwrap();
            let w = if spec.family.has_size() || !spec.normalise { 1.0 } else { 1.0 / c.len() as f64 };
            mu += w * m;
            k_sum += k.unwrap_or(0.0);
        }
        let k = spec.family.has_size().then_some(k_sum);
        let mut z = family::sample(spec.family, mu, psi, k, &mut rng);
        if matches!(spec.family, Family::Gamma | Family::InverseGaussian) {
            z = z.max(1e-3);
        }
        zs.push(z);
    }
    let model = Model::new(grid, Some(basis), set, zs, spec.family, spec.link, spec.normalise, spec.fine_scale).unwrap();
    let state = ModelState {
        alpha,
        prior: Some(prior),
        sigma2fs: FineScale::Scalar(sigma2fs),
        psi,
        sigma2fs_fixed: false,
    };
    Instance { model, state, y0 }
}

/// Random effects close to zero on the latent scale of the instance.
pub fn random_u(inst: &Instance, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.05 * inst.y0.abs().max(0.2);
    (0..inst.model.p())
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            scale * n
        })
        .collect()
}

pub fn dense_s(model: &Model) -> DMatrix<f64> {
    frk_core::covpar::to_dense(&model.s)
}

pub fn dense_prior_precision(model: &Model, state: &ModelState) -> DMatrix<f64> {
    model.eta_precision(state.prior.as_ref().unwrap()).unwrap().0
}

pub fn log_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let chol = cov.clone().cholesky().expect("covariance must be positive-definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let r = x - mean;
    let sol = chol.solve(&r);
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * r.dot(&sol)
}

/// Independent log-density written directly from the textbook forms.
pub fn reference_log_density(family: Family, z: f64, mu: f64, psi: f64, k: f64) -> f64 {
    use statrs::distribution::{Binomial, Discrete, NegativeBinomial, Poisson};
    use statrs::function::gamma::ln_gamma;
    match family {
        Family::Gaussian => -0.5 * (2.0 * std::f64::consts::PI * psi).ln() - (z - mu).powi(2) / (2.0 * psi),
        Family::Poisson => Poisson::new(mu).unwrap().ln_pmf(z as u64),
        Family::Gamma => {
            let shape = 1.0 / psi;
            let rate = shape / mu;
            shape * rate.ln() + (shape - 1.0) * z.ln() - rate * z - ln_gamma(shape)
        }
        Family::InverseGaussian => {
            let l = 1.0 / psi;
            0.5 * (l / (2.0 * std::f64::consts::PI * z.powi(3))).ln() - l * (z - mu).powi(2) / (2.0 * mu * mu * z)
        }
        Family::NegativeBinomial => NegativeBinomial::new(k, k / (mu + k)).unwrap().ln_pmf(z as u64),
        Family::Binomial => Binomial::new(mu / k, k as u64).unwrap().ln_pmf(z as u64),
    }
}

/// Complete log-likelihood built with dense matrices over all BAUs.
pub fn dense_complete_loglik(model: &Model, state: &ModelState, u: &[f64]) -> f64 {
    let r = model.r();
    let n = model.grid.len();
    let s = dense_s(model);
    let t = model.grid.covariates().clone();
    let alpha = DVector::from_column_slice(&state.alpha);
    let eta = DVector::from_column_slice(&u[..r]);
    let mut xi_full = DVector::zeros(n);
    if model.fine_scale {
        for (l, &i) in model.observed_baus().iter().enumerate() {
            xi_full[i] = u[r + l];
        }
    }
    let y = &t * alpha + &s * &eta + &xi_full;
    let k = model.bau_sizes();
    let mu_bau = DVector::from_fn(n, |i, _| family::mean_from_latent(y[i], model.link, model.family, k.map(|k| k[i])).unwrap().0);
    let mu_z = model.c_z.to_dense() * mu_bau;
    let psi = if model.family.has_dispersion() { state.psi } else { 1.0 };
    let mut total = 0.0;
    for j in 0..model.n_obs() {
        let kz = model.k_z.get(j).copied().unwrap_or(f64::NAN);
        total += reference_log_density(model.family, model.z[j], mu_z[j], psi, kz);
    }
    let q = dense_prior_precision(model, state);
    let q_inv = q.clone().cholesky().unwrap().inverse();
    total += log_mvn(&eta, &DVector::zeros(r), &q_inv);
    if model.fine_scale {
        let var = frk_core::model::expand_fs_variances(&model.grid, &state.sigma2fs).unwrap();
        for (l, &i) in model.observed_baus().iter().enumerate() {
            let x = u[r + l];
            total += -0.5 * (2.0 * std::f64::consts::PI * var[i]).ln() - x * x / (2.0 * var[i]);
        }
    }
    total
}

/// Exact Gaussian marginal log-likelihood of `Z` (identity link).
pub fn gaussian_marginal(model: &Model, state: &ModelState) -> f64 {
    let n = model.grid.len();
    let s = dense_s(model);
    let c = model.c_z.to_dense();
    let t = model.grid.covariates().clone();
    let alpha = DVector::from_column_slice(&state.alpha);
    let q = dense_prior_precision(model, state);
    let k = q.cholesky().unwrap().inverse();
    let mut cov_y = &s * k * s.transpose();
    if model.fine_scale {
        let var = frk_core::model::expand_fs_variances(&model.grid, &state.sigma2fs).unwrap();
        for i in 0..n {
            cov_y[(i, i)] += var[i];
        }
    }
    let mut cov_z = &c * cov_y * c.transpose();
    for j in 0..model.n_obs() {
        cov_z[(j, j)] += state.psi;
    }
    let mean = &c * (&t * alpha);
    log_mvn(&DVector::from_column_slice(&model.z), &mean, &cov_z)
}

/// Closed-form Gaussian posterior of `u = (eta, xi_obs)`: mean and covariance.
pub fn gaussian_posterior(model: &Model, state: &ModelState) -> (DVector<f64>, DMatrix<f64>) {
    let r = model.r();
    let obs = model.observed_baus();
    let p = model.p();
    let s = dense_s(model);
    let c = model.c_z.to_dense();
    // A maps u to the latent process at all BAUs
    let mut a = DMatrix::zeros(model.grid.len(), p);
    a.view_mut((0, 0), (model.grid.len(), r)).copy_from(&s);
    if model.fine_scale {
        for (l, &i) in obs.iter().enumerate() {
            a[(i, r + l)] = 1.0;
        }
    }
    let q = dense_prior_precision(model, state);
    let mut prior_cov = DMatrix::zeros(p, p);
    prior_cov.view_mut((0, 0), (r, r)).copy_from(&q.cholesky().unwrap().inverse());
    if model.fine_scale {
        let var = frk_core::model::expand_fs_variances(&model.grid, &state.sigma2fs).unwrap();
        for (l, &i) in obs.iter().enumerate() {
            prior_cov[(r + l, r + l)] = var[i];
        }
    }
    let ca = &c * &a;
    let mut cov_z = &ca * &prior_cov * ca.transpose();
    for j in 0..model.n_obs() {
        cov_z[(j, j)] += state.psi;
    }
    let t = model.grid.covariates().clone();
    let resid = DVector::from_column_slice(&model.z) - &c * (&t * DVector::from_column_slice(&state.alpha));
    let gain = &prior_cov * ca.transpose() * cov_z.clone().cholesky().unwrap().inverse();
    let mean = &gain * resid;
    let cov = &prior_cov - &gain * &ca * &prior_cov;
    (mean, cov)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Closed-form posterior mean and sd of the latent process at every BAU
/// (Gaussian data, identity link).
pub fn gaussian_y_posterior(inst: &Instance) -> (Vec<f64>, Vec<f64>) {
    let model = &inst.model;
    let (mean_u, cov_u) = gaussian_posterior(model, &inst.state);
    let r = model.r();
    let n = model.grid.len();
    let s = dense_s(model);
    let fs = frk_core::model::expand_fs_variances(&model.grid, &inst.state.sigma2fs).unwrap();
    let obs = model.observed_baus();
    let fixed = model.grid.covariates() * DVector::from_column_slice(&inst.state.alpha);
    let mut mean = vec![0.0; n];
    let mut sd = vec![0.0; n];
    for i in 0..n {
        // Y_i = fixed_i + a' u (+ prior fine-scale noise when unobserved)
        let mut a = DVector::zeros(mean_u.len());
        for c in 0..r {
            a[c] = s[(i, c)];
        }
        let mut extra = 0.0;
        match obs.iter().position(|&b| b == i) {
            Some(l) => a[r + l] = 1.0,
            None => extra = fs[i],
        }
        mean[i] = fixed[i] + a.dot(&mean_u);
        sd[i] = ((&cov_u * &a).dot(&a) + extra).sqrt();
    }
    (mean, sd)
}

/// Every family/link pair that is not forbidden.
pub fn supported_pairs() -> Vec<(Family, Link)> {
    let mut out = Vec::new();
    for f in Family::ALL {
        for l in Link::ALL {
            if family::validate_combination(f, l) != family::Compatibility::Forbidden {
                out.push((f, l));
            }
        }
    }
    out
}
