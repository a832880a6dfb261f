//! Multiresolution bisquare basis functions and their evaluation.

use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};
use crate::geometry::{BauGrid, Rect};

/// Aperture of a lattice basis function relative to its lattice spacing.
pub const APERTURE_FACTOR: f64 = 1.5;

/// A local bisquare function `(1 - (d/a)^2)^2` for `d < a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub centre: [f64; 2],
    pub aperture: f64,
    /// One-based resolution index.
    pub resolution: usize,
    /// Lattice position `(col, row)` when the resolution is a regular lattice.
    pub lattice: Option<(usize, usize)>,
}

impl BasisFunction {
    pub fn eval(&self, point: [f64; 2]) -> f64 {
        bisquare(distance(self.centre, point), self.aperture)
    }
}

/// Per-resolution metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionInfo {
    pub start: usize,
    pub len: usize,
    pub mindist: f64,
    /// `(ncols, nrows)` of the lattice, if regular.
    pub lattice_dims: Option<(usize, usize)>,
}

/// A set of basis functions ordered by resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    functions: Vec<BasisFunction>,
    resolutions: Vec<ResolutionInfo>,
    regular: bool,
}

pub fn bisquare(d: f64, aperture: f64) -> f64 {
    if d < aperture {
        let q = d / aperture;
        let t = 1.0 - q * q;
        t * t
    } else {
        0.0
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Lattice of `3 * 2^(k-1)` functions per axis at resolution `k`, spanning
/// `bbox` edge to edge; apertures are 1.5 lattice spacings so supports reach
/// one aperture beyond the box.
pub fn auto_basis(bbox: Rect, n_res: usize) -> Result<BasisSet> {
    if n_res == 0 {
        return Err(FrkError::Configuration("n_res must be at least 1".into()));
    }
    let bbox = Rect::new(bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax)?;
    let mut functions = Vec::new();
    for k in 1..=n_res {
        let n = 3usize << (k - 1);
        let hx = bbox.width() / (n - 1) as f64;
        let hy = bbox.height() / (n - 1) as f64;
        let aperture = APERTURE_FACTOR * hx.max(hy);
        for row in 0..n {
            for col in 0..n {
                functions.push(BasisFunction {
                    centre: [bbox.xmin + col as f64 * hx, bbox.ymax - row as f64 * hy],
                    aperture,
                    resolution: k,
                    lattice: Some((col, row)),
                });
            }
        }
    }
    BasisSet::from_functions(functions)
}

/// One-dimensional bisquare basis over time bins `0..n_times`, with `r_t`
/// equally spaced centres. Centres are stored as `[t, 0]`.
pub fn temporal_basis(n_times: usize, r_t: usize) -> Result<BasisSet> {
    if n_times == 0 || r_t == 0 {
        return Err(FrkError::Configuration(format!(
            "temporal basis needs n_times >= 1 and r_t >= 1 (got {n_times}, {r_t})"
        )));
    }
    let span = (n_times - 1) as f64;
    let (spacing, first) = if r_t == 1 { (n_times.max(1) as f64, 0.5 * span) } else { (span / (r_t - 1) as f64, 0.0) };
    if spacing <= 0.0 {
        return Err(FrkError::Configuration(format!("cannot place {r_t} temporal functions over {n_times} time bins")));
    }
    let functions = (0..r_t)
        .map(|j| BasisFunction {
            centre: [first + j as f64 * spacing, 0.0],
            aperture: APERTURE_FACTOR * spacing,
            resolution: 1,
            lattice: Some((j, 0)),
        })
        .collect();
    BasisSet::from_functions(functions)
}

impl BasisSet {
    /// Validates and indexes a list of functions. Resolutions must be
    /// contiguous from 1 and share one aperture each. A resolution counts as
    /// a regular lattice when its centres form a complete, evenly spaced grid.
    pub fn from_functions(mut functions: Vec<BasisFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(FrkError::Configuration("basis has no functions".into()));
        }
        functions.sort_by_key(|f| f.resolution);
        let n_res = functions.last().map(|f| f.resolution).unwrap_or(0);
        let mut resolutions = Vec::with_capacity(n_res);
        let mut start = 0;
        for k in 1..=n_res {
            let len = functions[start..].iter().take_while(|f| f.resolution == k).count();
            if len == 0 {
                return Err(FrkError::Configuration(format!("resolution {k} has no basis functions")));
            }
            let block = &mut functions[start..start + len];
            let a = block[0].aperture;
            if !(a > 0.0) || block.iter().any(|f| f.aperture != a) {
                return Err(FrkError::Configuration(format!("resolution {k} must have one positive aperture")));
            }
            let lattice_dims = detect_lattice(block);
            let mut mindist = f64::INFINITY;
            for i in 0..len {
                for j in (i + 1)..len {
                    mindist = mindist.min(distance(block[i].centre, block[j].centre));
                }
            }
            if len == 1 {
                mindist = a / APERTURE_FACTOR;
            }
            if !(mindist > 0.0) {
                return Err(FrkError::Configuration(format!("resolution {k} has coincident centres")));
            }
            resolutions.push(ResolutionInfo { start, len, mindist, lattice_dims });
            start += len;
        }
        if start != functions.len() {
            return Err(FrkError::Configuration("resolution indices must be contiguous from 1".into()));
        }
        let regular = resolutions.iter().all(|r| r.lattice_dims.is_some());
        Ok(BasisSet { functions, resolutions, regular })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn n_res(&self) -> usize {
        self.resolutions.len()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn resolutions(&self) -> &[ResolutionInfo] {
        &self.resolutions
    }

    pub fn mindist(&self, k: usize) -> f64 {
        self.resolutions[k].mindist
    }

    pub fn is_regular(&self) -> bool {
        self.regular
    }
}

/// Assigns lattice coordinates when centres form a full evenly spaced grid.
fn detect_lattice(block: &mut [BasisFunction]) -> Option<(usize, usize)> {
    let scale = block.iter().flat_map(|f| f.centre).fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let uniq = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup_by(|a, b| (*a - *b).abs() <= tol);
        v
    };
    let xs = uniq(block.iter().map(|f| f.centre[0]).collect());
    let mut ys = uniq(block.iter().map(|f| f.centre[1]).collect());
    ys.reverse();
    if xs.len() * ys.len() != block.len() {
        return None;
    }
    let even = |v: &[f64]| {
        v.len() < 3 || {
            let h = (v[1] - v[0]).abs();
            v.windows(2).all(|w| ((w[1] - w[0]).abs() - h).abs() <= 1e-7 * h.max(tol))
        }
    };
    if !even(&xs) || !even(&ys) {
        return None;
    }
    let mut seen = vec![false; block.len()];
    let mut coords = Vec::with_capacity(block.len());
    for f in block.iter() {
        let col = xs.iter().position(|x| (x - f.centre[0]).abs() <= tol)?;
        let row = ys.iter().position(|y| (y - f.centre[1]).abs() <= tol)?;
        let slot = row * xs.len() + col;
        if seen[slot] {
            return None;
        }
        seen[slot] = true;
        coords.push((col, row));
    }
    for (f, c) in block.iter_mut().zip(coords) {
        f.lattice = Some(c);
    }
    Some((xs.len(), ys.len()))
}

/// Evaluates every basis function at every point: a sparse `|points| x r`
/// matrix.
pub fn eval_basis(basis: &BasisSet, points: &[[f64; 2]]) -> CsrMatrix<f64> {
    let mut coo = CooMatrix::new(points.len(), basis.len());
    for (p, &pt) in points.iter().enumerate() {
        for (l, f) in basis.functions.iter().enumerate() {
            let v = f.eval(pt);
            if v != 0.0 {
                coo.push(p, l, v);
            }
        }
    }
    CsrMatrix::from(&coo)
}

/// Tensor product of a spatial and a temporal basis. Function
/// `t * r_s + s` is `spatial[s] * temporal[t]`, matching `Q_t ⊗ Q_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBasis {
    pub spatial: BasisSet,
    pub temporal: BasisSet,
}

pub fn tensor_basis(spatial: BasisSet, temporal: BasisSet) -> TensorBasis {
    TensorBasis { spatial, temporal }
}

impl TensorBasis {
    pub fn len(&self) -> usize {
        self.spatial.len() * self.temporal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eval(&self, point: [f64; 2], time: f64) -> Vec<f64> {
        let rs = self.spatial.len();
        let mut out = vec![0.0; self.len()];
        for (t, ft) in self.temporal.functions().iter().enumerate() {
            let vt = ft.eval([time, 0.0]);
            for (s, fs) in self.spatial.functions().iter().enumerate() {
                out[t * rs + s] = fs.eval(point) * vt;
            }
        }
        out
    }

    /// Sparse evaluation at `(point, time)` pairs.
    pub fn eval_at(&self, points: &[([f64; 2], f64)]) -> CsrMatrix<f64> {
        let rs = self.spatial.len();
        let mut coo = CooMatrix::new(points.len(), self.len());
        for (p, &(pt, time)) in points.iter().enumerate() {
            let sv: Vec<(usize, f64)> = self
                .spatial
                .functions()
                .iter()
                .enumerate()
                .filter_map(|(s, f)| Some((s, f.eval(pt))).filter(|(_, v)| *v != 0.0))
                .collect();
            for (t, ft) in self.temporal.functions().iter().enumerate() {
                let vt = ft.eval([time, 0.0]);
                if vt == 0.0 {
                    continue;
                }
                for &(s, v) in &sv {
                    coo.push(p, t * rs + s, v * vt);
                }
            }
        }
        CsrMatrix::from(&coo)
    }
}

/// The basis used by a model: spatial only, or a space-time tensor product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelBasis {
    Spatial(BasisSet),
    SpaceTime(TensorBasis),
}

impl ModelBasis {
    pub fn len(&self) -> usize {
        match self {
            ModelBasis::Spatial(b) => b.len(),
            ModelBasis::SpaceTime(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> &BasisSet {
        match self {
            ModelBasis::Spatial(b) => b,
            ModelBasis::SpaceTime(b) => &b.spatial,
        }
    }

    /// Design matrix `S` evaluated at BAU centroids (and time bins).
    pub fn design_matrix(&self, grid: &BauGrid) -> CsrMatrix<f64> {
        match self {
            ModelBasis::Spatial(b) => eval_basis(b, &grid.centroids()),
            ModelBasis::SpaceTime(b) => {
                let pts: Vec<_> = (0..grid.len()).map(|i| (grid.centroid(i), grid.time_index(i) as f64)).collect();
                b.eval_at(&pts)
            }
        }
    }
}
