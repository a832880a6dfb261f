//! Fixed-rank spatial and spatio-temporal prediction for exponential-family data.

pub mod basis;
pub mod covpar;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod family;
pub mod geometry;
pub mod laplace;
pub mod model;
pub mod predict;
pub mod simulate;

pub use basis::{auto_basis, eval_basis, tensor_basis, temporal_basis, BasisFunction, BasisSet, ModelBasis, TensorBasis};
pub use covpar::{CoefPrior, PriorParams, PriorVariant};
pub use error::{FrkError, Result};
pub use family::{check_combination, mean_from_latent, validate_combination, Compatibility, Family, Link};
pub use geometry::{build_bau_grid, build_incidence, map_supports, BauGrid, Footprint, IncidenceMatrix, Rect, Support, SupportKind, SupportSet};
pub use laplace::{complete_loglik, inner_mode, laplace_objective, LaplaceResult, PrecisionFactor, RandomEffects};
pub use model::{expand_fs_variances, FineScale, Model, ModelState};
pub use estimate::{fit, fit_default, initial_state, resolve_sigma2fs, FitOptions, FitReport, FitResult, Sigma2fsRule, StateSpec};
pub use predict::{predict, summarize, PredictionResult, Summary, Target};
pub use nalgebra_sparse::CsrMatrix;
