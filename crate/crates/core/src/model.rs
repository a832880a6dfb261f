//! Model parameters and the structures prebuilt once per dataset.

use nalgebra::DMatrix;
use nalgebra_sparse::CsrMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::ModelBasis;
use crate::covpar::{self, CoefPrior, PriorVariant};
use crate::error::{FrkError, Result};
use crate::family::{self, Family, Link};
use crate::geometry::{build_incidence, BauGrid, IncidenceMatrix, SupportKind, SupportSet};

/// Fine-scale variance: one value, or one per spatial BAU (replicated over time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FineScale {
    Scalar(f64),
    PerSpatial(Vec<f64>),
}

impl FineScale {
    pub fn variance_at(&self, spatial: usize) -> f64 {
        match self {
            FineScale::Scalar(v) => *v,
            FineScale::PerSpatial(v) => v[spatial],
        }
    }
}

/// The parameter vector `theta = (alpha, prior parameters, sigma2_xi, psi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub alpha: Vec<f64>,
    /// `None` for models without basis functions.
    pub prior: Option<CoefPrior>,
    pub sigma2fs: FineScale,
    /// Dispersion; held at 1 for the count families.
    pub psi: f64,
    pub sigma2fs_fixed: bool,
}

/// Fine-scale covariance diagonal `Sigma_xi` over all BAUs.
pub fn expand_fs_variances(grid: &BauGrid, sigma2fs: &FineScale) -> Result<Vec<f64>> {
    if let FineScale::PerSpatial(v) = sigma2fs {
        if grid.n_time() == 1 {
            return Err(FrkError::Configuration(
                "per-spatial-BAU fine-scale variances need a spatio-temporal grid".into(),
            ));
        }
        if v.len() != grid.n_spatial() {
            return Err(FrkError::Dimension(format!(
                "{} fine-scale variances given for {} spatial BAUs",
                v.len(),
                grid.n_spatial()
            )));
        }
    }
    let scale = grid.fs_scale();
    Ok((0..grid.len()).map(|i| sigma2fs.variance_at(grid.spatial_index(i)) * scale[i]).collect())
}

/// A group of observed BAUs linked through shared observation supports.
#[derive(Debug, Clone)]
pub(crate) struct Component {
    /// Local (observed-BAU) indices.
    pub members: Vec<usize>,
    pub observations: Vec<usize>,
    /// Basis columns touched by any member.
    pub cols: Vec<usize>,
}

/// Everything that stays fixed while `theta` varies.
#[derive(Debug, Clone)]
pub struct Model {
    pub family: Family,
    pub link: Link,
    pub grid: BauGrid,
    pub basis: Option<ModelBasis>,
    /// `N x r` basis design matrix.
    pub s: CsrMatrix<f64>,
    pub supports: SupportSet,
    pub c_z: IncidenceMatrix,
    pub z: Vec<f64>,
    /// Aggregated size parameters per observation (size families only).
    pub k_z: Vec<f64>,
    pub fine_scale: bool,
    pub normalise: bool,
    pub(crate) obs_baus: Vec<usize>,
    pub(crate) obs_rows: Vec<Vec<(usize, f64)>>,
    pub(crate) components: Vec<Component>,
    /// Local index -> (component, position within the component).
    pub(crate) comp_of: Vec<(usize, usize)>,
    pub(crate) s_rows: Vec<Vec<(usize, f64)>>,
    pub(crate) t_obs: DMatrix<f64>,
}

impl Model {
    /// Validates the data against the family and prebuilds `S`, `C_Z` and the
    /// observed-BAU bookkeeping.
    pub fn new(
        grid: BauGrid,
        basis: Option<ModelBasis>,
        supports: SupportSet,
        z: Vec<f64>,
        family: Family,
        link: Link,
        normalise: bool,
        fine_scale: bool,
    ) -> Result<Model> {
        family::check_combination(family, link)?;
        if supports.kind != SupportKind::Observation {
            return Err(FrkError::Configuration("model data must use observation supports".into()));
        }
        if supports.len() != z.len() {
            return Err(FrkError::Dimension(format!("{} supports but {} data values", supports.len(), z.len())));
        }
        if let Some(ModelBasis::SpaceTime(tb)) = &basis {
            if grid.n_time() == 1 && tb.temporal.len() > 1 {
                return Err(FrkError::Configuration("space-time basis on a spatial-only grid".into()));
            }
        }
        let c_z = build_incidence(&grid, &supports, normalise, family.has_size());
        let k_z = if family.has_size() {
            let sizes = match grid.size_params() {
                Some(k) => k,
                None => {
                    let first = supports.touched_baus().first().copied().unwrap_or(0);
                    return Err(FrkError::SizeParameterMissing { bau: first });
                }
            };
            supports.bau_index_sets.iter().map(|set| set.iter().map(|&i| sizes[i]).sum()).collect()
        } else {
            Vec::new()
        };
        for (j, &zj) in z.iter().enumerate() {
            family::check_support(family, zj, k_z.get(j).copied(), j)?;
        }

        let s = match &basis {
            Some(b) => b.design_matrix(&grid),
            None => CsrMatrix::zeros(grid.len(), 0),
        };

        let obs_baus = supports.touched_baus();
        let mut local_of = vec![usize::MAX; grid.len()];
        for (l, &i) in obs_baus.iter().enumerate() {
            local_of[i] = l;
        }
        let obs_rows: Vec<Vec<(usize, f64)>> =
            (0..c_z.nrows()).map(|j| c_z.row(j).map(|(i, w)| (local_of[i], w)).collect()).collect();

        // union-find over observed BAUs sharing a support
        let n_o = obs_baus.len();
        let mut parent: Vec<usize> = (0..n_o).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for row in &obs_rows {
            if let Some(&(first, _)) = row.first() {
                for &(l, _) in &row[1..] {
                    let (a, b) = (find(&mut parent, first), find(&mut parent, l));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut comp_index = vec![usize::MAX; n_o];
        let mut components: Vec<Component> = Vec::new();
        let mut comp_of = vec![(0, 0); n_o];
        for l in 0..n_o {
            let root = find(&mut parent, l);
            if comp_index[root] == usize::MAX {
                comp_index[root] = components.len();
                components.push(Component { members: Vec::new(), observations: Vec::new(), cols: Vec::new() });
            }
            let c = comp_index[root];
            comp_of[l] = (c, components[c].members.len());
            components[c].members.push(l);
        }
        for (j, row) in obs_rows.iter().enumerate() {
            let c = comp_of[row[0].0].0;
            components[c].observations.push(j);
        }

        let s_rows: Vec<Vec<(usize, f64)>> = obs_baus
            .iter()
            .map(|&i| {
                let row = s.row(i);
                row.col_indices().iter().copied().zip(row.values().iter().copied()).collect()
            })
            .collect();
        for comp in &mut components {
            let mut cols: Vec<usize> = comp.members.iter().flat_map(|&l| s_rows[l].iter().map(|&(c, _)| c)).collect();
            cols.sort_unstable();
            cols.dedup();
            comp.cols = cols;
        }
        let covs = grid.covariates();
        let t_obs = DMatrix::from_fn(n_o, covs.ncols(), |l, c| covs[(obs_baus[l], c)]);

        Ok(Model {
            family,
            link,
            grid,
            basis,
            s,
            supports,
            c_z,
            z,
            k_z,
            fine_scale,
            normalise,
            obs_baus,
            obs_rows,
            components,
            comp_of,
            s_rows,
            t_obs,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.z.len()
    }

    /// Number of basis coefficients `r`.
    pub fn r(&self) -> usize {
        self.s.ncols()
    }

    /// BAUs touched by at least one observation, in increasing order.
    pub fn observed_baus(&self) -> &[usize] {
        &self.obs_baus
    }

    /// Number of fine-scale effects in the random-effect vector.
    pub fn n_xi(&self) -> usize {
        if self.fine_scale {
            self.obs_baus.len()
        } else {
            0
        }
    }

    /// Length `p` of `u = (eta, xi)`.
    pub fn p(&self) -> usize {
        self.r() + self.n_xi()
    }

    pub fn n_covariates(&self) -> usize {
        self.grid.covariates().ncols()
    }

    pub fn is_spacetime(&self) -> bool {
        matches!(self.basis, Some(ModelBasis::SpaceTime(_)))
    }

    /// Per-BAU size parameters, when the grid carries them.
    pub fn bau_sizes(&self) -> Option<&[f64]> {
        self.grid.size_params()
    }

    pub(crate) fn k_bau_local(&self, l: usize) -> Option<f64> {
        self.grid.size_params().map(|k| k[self.obs_baus[l]])
    }

    /// Dense prior precision of `eta` with its log-determinant.
    pub fn eta_precision(&self, prior: &CoefPrior) -> Result<(DMatrix<f64>, f64)> {
        let basis = self.basis.as_ref().ok_or_else(|| FrkError::State("model has no basis".into()))?;
        let spatial = basis.spatial();
        let (q_s, logdet_s) = spatial_precision(spatial, prior)?;
        match basis {
            ModelBasis::Spatial(_) => Ok((q_s, logdet_s)),
            ModelBasis::SpaceTime(tb) => {
                let rho = prior
                    .temporal_rho
                    .ok_or_else(|| FrkError::ParameterDomain("space-time prior needs a temporal AR(1) coefficient".into()))?;
                let q_t = covpar::to_dense(&covpar::ar1_precision(tb.temporal.len(), rho)?);
                let (rt, rs) = (q_t.nrows(), q_s.nrows());
                let logdet_t = dense_logdet(&q_t)?;
                let q = q_t.kronecker(&q_s);
                Ok((q, rs as f64 * logdet_t + rt as f64 * logdet_s))
            }
        }
    }

    pub fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.alpha.len() != self.n_covariates() {
            return Err(FrkError::Dimension(format!(
                "{} fixed effects for {} covariates",
                state.alpha.len(),
                self.n_covariates()
            )));
        }
        if self.family.has_dispersion() && !(state.psi > 0.0 && state.psi.is_finite()) {
            return Err(FrkError::ParameterDomain(format!("dispersion {} must be positive", state.psi)));
        }
        if self.r() > 0 && state.prior.is_none() {
            return Err(FrkError::State("basis present but no coefficient prior given".into()));
        }
        if self.fine_scale {
            let bad = match &state.sigma2fs {
                FineScale::Scalar(v) => !(*v > 0.0 && v.is_finite()),
                FineScale::PerSpatial(v) => v.iter().any(|v| !(*v > 0.0 && v.is_finite())),
            };
            if bad {
                return Err(FrkError::ParameterDomain("fine-scale variances must be positive".into()));
            }
        }
        Ok(())
    }
}

fn spatial_precision(basis: &crate::basis::BasisSet, prior: &CoefPrior) -> Result<(DMatrix<f64>, f64)> {
    let m = covpar::to_dense(&covpar::build_spatial(basis, prior)?);
    match prior.variant() {
        PriorVariant::KTapered => {
            let chol = m
                .clone()
                .cholesky()
                .ok_or_else(|| FrkError::Numerical("tapered covariance is not positive-definite".into()))?;
            let logdet_k = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Ok((chol.inverse(), -logdet_k))
        }
        _ => {
            let logdet = dense_logdet(&m)?;
            Ok((m, logdet))
        }
    }
}

pub(crate) fn dense_logdet(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| FrkError::Numerical("matrix is not positive-definite".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}
