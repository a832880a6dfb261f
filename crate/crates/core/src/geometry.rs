//! Discretised domain (BAUs), support mapping and incidence matrices.
//!
//! BAUs are the cells of a regular rectangular grid, optionally replicated
//! over time bins. Spatial cells are numbered in raster order: column index
//! runs fastest and row 0 is the top row (largest `y`). The full BAU index is
//! `t * n_spatial + s`, so space runs faster than time.
//!
//! Intersections use closed-set semantics: a support that only touches the
//! boundary of a cell is still associated with that cell.

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};

/// Closed axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Rect {
    /// Builds a rectangle, rejecting non-finite or zero-area extents.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let r = Rect { xmin, ymin, xmax, ymax };
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(FrkError::InvalidGeometry(format!("non-finite rectangle {r:?}")));
        }
        if xmax <= xmin || ymax <= ymin {
            return Err(FrkError::InvalidGeometry(format!("degenerate rectangle {r:?}")));
        }
        Ok(r)
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn centroid(&self) -> [f64; 2] {
        [0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)]
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.xmin <= other.xmax && other.xmin <= self.xmax && self.ymin <= other.ymax && other.ymin <= self.ymax
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.xmin <= x && x <= self.xmax && self.ymin <= y && y <= self.ymax
    }
}

/// The discretised domain: a regular grid of spatial cells replicated over
/// `n_time` time bins, together with per-BAU attributes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BauGrid {
    bbox: Rect,
    nx: usize,
    ny: usize,
    n_time: usize,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    rel_weights: Vec<f64>,
    size_params: Option<Vec<f64>>,
    fs_scale: Vec<f64>,
}

/// Builds a regular grid over `bbox` with `nx * ny` spatial cells and
/// `time_bins` time bins. Defaults: intercept-only covariates, unit relative
/// weights, unit fine-scale scaling and no size parameters.
pub fn build_bau_grid(bbox: Rect, nx: usize, ny: usize, time_bins: usize) -> Result<BauGrid> {
    if nx == 0 || ny == 0 || time_bins == 0 {
        return Err(FrkError::InvalidGeometry(format!(
            "grid dimensions must be positive (nx = {nx}, ny = {ny}, time_bins = {time_bins})"
        )));
    }
    let bbox = Rect::new(bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax)?;
    let n = nx * ny * time_bins;
    Ok(BauGrid {
        bbox,
        nx,
        ny,
        n_time: time_bins,
        covariates: DMatrix::from_element(n, 1, 1.0),
        covariate_names: vec!["intercept".to_string()],
        rel_weights: vec![1.0; n],
        size_params: None,
        fs_scale: vec![1.0; n],
    })
}

impl BauGrid {
    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn n_spatial(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    /// Total number of BAUs, `n_spatial * n_time`.
    pub fn len(&self) -> usize {
        self.n_spatial() * self.n_time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial_index(&self, bau: usize) -> usize {
        bau % self.n_spatial()
    }

    pub fn time_index(&self, bau: usize) -> usize {
        bau / self.n_spatial()
    }

    pub fn bau_index(&self, spatial: usize, time: usize) -> usize {
        time * self.n_spatial() + spatial
    }

    fn col_bounds(&self, col: usize) -> (f64, f64) {
        let dx = self.bbox.width() / self.nx as f64;
        let lo = if col == 0 { self.bbox.xmin } else { self.bbox.xmin + col as f64 * dx };
        let hi = if col + 1 == self.nx { self.bbox.xmax } else { self.bbox.xmin + (col + 1) as f64 * dx };
        (lo, hi)
    }

    fn row_bounds(&self, row: usize) -> (f64, f64) {
        let dy = self.bbox.height() / self.ny as f64;
        let hi = if row == 0 { self.bbox.ymax } else { self.bbox.ymax - row as f64 * dy };
        let lo = if row + 1 == self.ny { self.bbox.ymin } else { self.bbox.ymax - (row + 1) as f64 * dy };
        (lo, hi)
    }

    /// Footprint of spatial cell `spatial` (raster order).
    pub fn cell(&self, spatial: usize) -> Rect {
        let (x0, x1) = self.col_bounds(spatial % self.nx);
        let (y0, y1) = self.row_bounds(spatial / self.nx);
        Rect { xmin: x0, ymin: y0, xmax: x1, ymax: y1 }
    }

    /// Spatial centroid of a BAU.
    pub fn centroid(&self, bau: usize) -> [f64; 2] {
        self.cell(self.spatial_index(bau)).centroid()
    }

    /// Spatial centroids of all BAUs, in BAU order.
    pub fn centroids(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.centroid(i)).collect()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn rel_weights(&self) -> &[f64] {
        &self.rel_weights
    }

    pub fn size_params(&self) -> Option<&[f64]> {
        self.size_params.as_deref()
    }

    pub fn fs_scale(&self) -> &[f64] {
        &self.fs_scale
    }

    /// Replaces the covariate matrix (rows are BAUs, columns are covariates).
    pub fn set_covariates(&mut self, names: Vec<String>, covariates: DMatrix<f64>) -> Result<()> {
        if covariates.nrows() != self.len() || covariates.ncols() != names.len() {
            return Err(FrkError::Dimension(format!(
                "covariates are {}x{} but the grid has {} BAUs and {} names",
                covariates.nrows(),
                covariates.ncols(),
                self.len(),
                names.len()
            )));
        }
        self.covariates = covariates;
        self.covariate_names = names;
        Ok(())
    }

    /// Intercept plus centroid coordinates as covariates.
    pub fn use_linear_trend(&mut self) {
        let n = self.len();
        let mut t = DMatrix::zeros(n, 3);
        for i in 0..n {
            let c = self.centroid(i);
            t[(i, 0)] = 1.0;
            t[(i, 1)] = c[0];
            t[(i, 2)] = c[1];
        }
        self.covariates = t;
        self.covariate_names = vec!["intercept".into(), "x".into(), "y".into()];
    }

    pub fn set_rel_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        self.check_len("rel_weights", weights.len())?;
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(FrkError::ParameterDomain(format!("rel_weights[{i}] = {} must be positive", weights[i])));
        }
        self.rel_weights = weights;
        Ok(())
    }

    pub fn set_size_params(&mut self, sizes: Vec<f64>) -> Result<()> {
        self.check_len("size_params", sizes.len())?;
        if let Some(i) = sizes.iter().position(|k| !(*k >= 0.0 && k.is_finite())) {
            return Err(FrkError::ParameterDomain(format!("size_params[{i}] = {} must be non-negative", sizes[i])));
        }
        self.size_params = Some(sizes);
        Ok(())
    }

    pub fn set_fs_scale(&mut self, scale: Vec<f64>) -> Result<()> {
        self.check_len("fs_scale", scale.len())?;
        if let Some(i) = scale.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(FrkError::ParameterDomain(format!("fs_scale[{i}] = {} must be positive", scale[i])));
        }
        self.fs_scale = scale;
        Ok(())
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(FrkError::Dimension(format!("{what} has length {len}, expected {}", self.len())));
        }
        Ok(())
    }

    /// Spatial cells whose closed footprint intersects `rect`, in increasing order.
    pub fn cells_intersecting(&self, rect: &Rect) -> Vec<usize> {
        let dx = self.bbox.width() / self.nx as f64;
        let dy = self.bbox.height() / self.ny as f64;
        let clamp_col = |v: f64| -> usize { v.floor().clamp(0.0, (self.nx - 1) as f64) as usize };
        let clamp_row = |v: f64| -> usize { v.floor().clamp(0.0, (self.ny - 1) as f64) as usize };
        // candidate ranges padded by one cell, then filtered exactly
        let c0 = clamp_col((rect.xmin - self.bbox.xmin) / dx).saturating_sub(1);
        let c1 = (clamp_col((rect.xmax - self.bbox.xmin) / dx) + 1).min(self.nx - 1);
        let r0 = clamp_row((self.bbox.ymax - rect.ymax) / dy).saturating_sub(1);
        let r1 = (clamp_row((self.bbox.ymax - rect.ymin) / dy) + 1).min(self.ny - 1);
        let mut out = Vec::new();
        for row in r0..=r1 {
            let (y0, y1) = self.row_bounds(row);
            if !(y0 <= rect.ymax && rect.ymin <= y1) {
                continue;
            }
            for col in c0..=c1 {
                let (x0, x1) = self.col_bounds(col);
                if x0 <= rect.xmax && rect.xmin <= x1 {
                    out.push(row * self.nx + col);
                }
            }
        }
        out
    }
}

/// Original footprint of an observation or prediction region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Footprint {
    Point { x: f64, y: f64 },
    Rect(Rect),
    /// Explicit list of BAU indices (full, space-time indices).
    Baus(Vec<usize>),
}

/// A footprint with an optional time bin. `time = None` spans all time bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub footprint: Footprint,
    pub time: Option<usize>,
}

impl Support {
    pub fn point(x: f64, y: f64) -> Self {
        Support { footprint: Footprint::Point { x, y }, time: None }
    }

    pub fn rect(rect: Rect) -> Self {
        Support { footprint: Footprint::Rect(rect), time: None }
    }

    pub fn baus(ids: Vec<usize>) -> Self {
        Support { footprint: Footprint::Baus(ids), time: None }
    }

    pub fn at_time(mut self, t: usize) -> Self {
        self.time = Some(t);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportKind {
    Observation,
    Prediction,
}

/// Supports together with their BAU index sets `c_j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportSet {
    pub supports: Vec<Support>,
    pub bau_index_sets: Vec<Vec<usize>>,
    pub kind: SupportKind,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.bau_index_sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bau_index_sets.is_empty()
    }

    /// Sorted, de-duplicated union of all index sets.
    pub fn touched_baus(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.bau_index_sets.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Maps each support onto the set of BAUs it intersects.
pub fn map_supports(grid: &BauGrid, supports: Vec<Support>, kind: SupportKind) -> Result<SupportSet> {
    let mut sets = Vec::with_capacity(supports.len());
    for (j, support) in supports.iter().enumerate() {
        let times: Vec<usize> = match support.time {
            Some(t) if t >= grid.n_time() => {
                return Err(FrkError::InvalidGeometry(format!(
                    "support {j} refers to time bin {t} but the grid has {} bins",
                    grid.n_time()
                )))
            }
            Some(t) => vec![t],
            None => (0..grid.n_time()).collect(),
        };
        let cells = match &support.footprint {
            Footprint::Point { x, y } => {
                if !(x.is_finite() && y.is_finite()) {
                    return Err(FrkError::InvalidGeometry(format!("support {j} has a non-finite point")));
                }
                grid.cells_intersecting(&Rect { xmin: *x, ymin: *y, xmax: *x, ymax: *y })
            }
            Footprint::Rect(r) => grid.cells_intersecting(r),
            Footprint::Baus(ids) => {
                if let Some(bad) = ids.iter().find(|&&i| i >= grid.len()) {
                    return Err(FrkError::InvalidGeometry(format!(
                        "support {j} references BAU {bad} but the grid has {} BAUs",
                        grid.len()
                    )));
                }
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids.dedup();
                if ids.is_empty() {
                    return Err(FrkError::EmptySupport { index: j });
                }
                sets.push(ids);
                continue;
            }
        };
        if cells.is_empty() {
            return Err(FrkError::EmptySupport { index: j });
        }
        let mut set = Vec::with_capacity(cells.len() * times.len());
        for &t in &times {
            set.extend(cells.iter().map(|&s| grid.bau_index(s, t)));
        }
        sets.push(set);
    }
    Ok(SupportSet { supports, bau_index_sets: sets, kind })
}

/// Sparse aggregation matrix from BAU-level means to support-level means.
#[derive(Debug, Clone)]
pub struct IncidenceMatrix {
    pub matrix: CsrMatrix<f64>,
    pub normalised: bool,
}

impl IncidenceMatrix {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// `(column, weight)` pairs of row `j`.
    pub fn row(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let row = self.matrix.row(j);
        row.col_indices().iter().copied().zip(row.values().iter().copied()).collect::<Vec<_>>().into_iter()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows()).map(|j| self.matrix.row(j).values().iter().sum()).collect()
    }

    /// Computes `C x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows())
            .map(|j| {
                let row = self.matrix.row(j);
                row.col_indices().iter().zip(row.values()).map(|(&i, &w)| w * x[i]).sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.ncols());
        for (i, j, v) in self.matrix.triplet_iter() {
            d[(i, j)] = *v;
        }
        d
    }
}

/// Builds `C_Z` (or `C_P`) for a mapped support set.
///
/// With `force_unit_sum` every weight is 1 and `normalise` is ignored (simple
/// summation, used by the size-parameter families). Otherwise `w_ij ∝ v_i`,
/// normalised per row when `normalise` is set.
pub fn build_incidence(grid: &BauGrid, supports: &SupportSet, normalise: bool, force_unit_sum: bool) -> IncidenceMatrix {
    let v = grid.rel_weights();
    let mut coo = CooMatrix::new(supports.len(), grid.len());
    for (j, set) in supports.bau_index_sets.iter().enumerate() {
        let total: f64 = set.iter().map(|&i| v[i]).sum();
        for &i in set {
            let w = if force_unit_sum {
                1.0
            } else if normalise {
                v[i] / total
            } else {
                v[i]
            };
            coo.push(j, i, w);
        }
    }
    IncidenceMatrix { matrix: CsrMatrix::from(&coo), normalised: normalise && !force_unit_sum }
}
