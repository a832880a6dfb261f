//! Synthetic datasets: point-referenced Poisson and Gaussian data, areal
//! negative-binomial data with mixed coarse and fine supports, and
//! spatio-temporal Poisson data with a withheld time slice.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};
use crate::family::{self, Family, Link};
use crate::geometry::{build_bau_grid, BauGrid, Rect, Support};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    PoissonPoint,
    GaussianPoint,
    NegbinAreal,
    PoissonSpacetime,
}

impl Scenario {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "poisson_point" => Ok(Scenario::PoissonPoint),
            "gaussian_point" => Ok(Scenario::GaussianPoint),
            "negbin_areal" => Ok(Scenario::NegbinAreal),
            "poisson_spacetime" => Ok(Scenario::PoissonSpacetime),
            _ => Err(FrkError::Configuration(format!(
                "unknown scenario `{name}` (expected poisson_point, gaussian_point, negbin_areal or poisson_spacetime)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::PoissonPoint => "poisson_point",
            Scenario::GaussianPoint => "gaussian_point",
            Scenario::NegbinAreal => "negbin_areal",
            Scenario::PoissonSpacetime => "poisson_spacetime",
        }
    }
}

/// Scenario knobs. `None` picks the scenario default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// BAUs per side.
    pub grid_size: Option<usize>,
    /// Number of point observations.
    pub n_obs: Option<usize>,
    /// Size parameter of every BAU (negative-binomial scenario).
    pub size: Option<f64>,
    /// Number of time bins (space-time scenario).
    pub n_times: Option<usize>,
}

/// True processes over the BAUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub latent: Vec<f64>,
    pub mean: Vec<f64>,
    pub prob: Option<Vec<f64>>,
    pub size: Option<Vec<f64>>,
    /// Whether any observation support touches the BAU.
    pub observed: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub scenario: Scenario,
    pub family: Family,
    pub link: Link,
    pub grid: BauGrid,
    pub supports: Vec<Support>,
    pub z: Vec<f64>,
    pub truth: Truth,
    /// Time bin withheld from the data (space-time scenario).
    pub held_out_time: Option<usize>,
}

/// Smooth multi-scale surface on the unit square used for the point scenarios.
pub fn trig_surface(x: f64, y: f64) -> f64 {
    0.9 * (2.0 * PI * x).sin() * (PI * y).cos()
        + 0.5 * (2.0 * PI * (1.8 * x + 0.9 * y) + 0.5).cos()
        + 0.35 * (2.0 * PI * 3.6 * x).sin() * (2.0 * PI * 3.2 * y + 1.0).sin()
        + rough_surface(x, y)
}

/// High-frequency part of [`trig_surface`], below the finest basis spacing.
pub fn rough_surface(x: f64, y: f64) -> f64 {
    const WAVES: [(f64, f64, f64); 4] = [(13.0, 4.0, 0.3), (-5.0, 12.0, 1.9), (9.0, -10.0, 4.1), (11.0, 8.0, 2.7)];
    0.12 * WAVES.iter().map(|&(fx, fy, ph)| (2.0 * PI * (fx * x + fy * y) + ph).sin()).sum::<f64>()
}

fn unit_square() -> Rect {
    Rect { xmin: 0.0, ymin: 0.0, xmax: 1.0, ymax: 1.0 }
}

/// A point strictly inside BAU cell `cell`, so that it maps to that BAU only.
fn interior_point<R: Rng>(grid: &BauGrid, cell: usize, rng: &mut R) -> (f64, f64) {
    let r = grid.cell(cell);
    let x = r.xmin + r.width() * rng.random_range(0.05..0.95);
    let y = r.ymin + r.height() * rng.random_range(0.05..0.95);
    (x, y)
}

fn inset(r: Rect, by: f64) -> Rect {
    Rect { xmin: r.xmin + by, ymin: r.ymin + by, xmax: r.xmax - by, ymax: r.ymax - by }
}

pub fn simulate(scenario: Scenario, seed: u64, opts: &SimOptions) -> Result<Simulation> {
    match scenario {
        Scenario::PoissonPoint => point_scenario(scenario, seed, opts, Family::Poisson),
        Scenario::GaussianPoint => point_scenario(scenario, seed, opts, Family::Gaussian),
        Scenario::NegbinAreal => negbin_areal(seed, opts),
        Scenario::PoissonSpacetime => poisson_spacetime(seed, opts),
    }
}

fn point_scenario(scenario: Scenario, seed: u64, opts: &SimOptions, family: Family) -> Result<Simulation> {
    let n = opts.grid_size.unwrap_or(64);
    let m = opts.n_obs.unwrap_or(750);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = build_bau_grid(unit_square(), n, n, 1)?;
    let (link, offset, scale) = match family {
        Family::Gaussian => (Link::Identity, 0.0, 1.0),
        _ => (Link::Log, 3.0, 1.0),
    };
    let latent: Vec<f64> = (0..grid.len())
        .map(|i| {
            let c = grid.centroid(i);
            offset + scale * trig_surface(c[0], c[1])
        })
        .collect();
    let mean: Vec<f64> = latent.iter().map(|&y| link.inverse(y)).collect();
    let psi = 0.25;
    let mut supports = Vec::with_capacity(m);
    let mut z = Vec::with_capacity(m);
    let mut observed = vec![false; grid.len()];
    for _ in 0..m {
        let cell = rng.random_range(0..grid.len());
        let (x, y) = interior_point(&grid, cell, &mut rng);
        supports.push(Support::point(x, y));
        z.push(family::sample(family, mean[cell], psi, None, &mut rng));
        observed[cell] = true;
    }
    Ok(Simulation {
        scenario,
        family,
        link,
        grid,
        supports,
        z,
        truth: Truth { latent, mean, prob: None, size: None, observed },
        held_out_time: None,
    })
}

/// Probability surface for the areal scenario (logit scale).
pub fn areal_logit_surface(x: f64, y: f64) -> f64 {
    0.2 + 0.8 * (2.0 * PI * x).sin() * (1.5 * PI * y).cos() + 0.4 * (2.0 * PI * (1.2 * x + 1.6 * y)).cos()
}

fn negbin_areal(seed: u64, opts: &SimOptions) -> Result<Simulation> {
    let n = opts.grid_size.unwrap_or(30);
    let k = opts.size.unwrap_or(50.0);
    let block = 5usize;
    if n % block != 0 {
        return Err(FrkError::Configuration(format!("grid size {n} must be a multiple of {block}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = build_bau_grid(unit_square(), n, n, 1)?;
    grid.set_size_params(vec![k; grid.len()])?;
    let link = Link::Logit;
    let latent: Vec<f64> = (0..grid.len())
        .map(|i| {
            let c = grid.centroid(i);
            areal_logit_surface(c[0], c[1])
        })
        .collect();
    let prob: Vec<f64> = latent.iter().map(|&y| link.inverse(y)).collect();
    let mean: Vec<f64> = latent
        .iter()
        .map(|&y| family::mean_from_latent(y, link, Family::NegativeBinomial, Some(k)).map(|m| m.0))
        .collect::<Result<_>>()?;

    let nb = n / block;
    let mut kinds: Vec<u8> = (0..nb * nb).map(|b| (b % 10) as u8).collect();
    kinds.shuffle(&mut rng);
    let cw = grid.cell(0).width();
    let mut supports = Vec::new();
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for (b, kind) in kinds.iter().enumerate() {
        let (bc, br) = (b % nb, b / nb);
        let cells: Vec<usize> =
            (0..block).flat_map(|dr| (0..block).map(move |dc| (br * block + dr) * n + bc * block + dc)).collect();
        match kind {
            // coarse support over the whole block
            0..=3 => {
                let first = grid.cell(cells[0]);
                let last = grid.cell(*cells.last().unwrap());
                let r = Rect { xmin: first.xmin, ymin: last.ymin, xmax: last.xmax, ymax: first.ymax };
                supports.push(Support::rect(inset(r, 0.25 * cw)));
                sets.push(cells);
            }
            // a random half of the BAUs observed individually
            4..=6 => {
                let mut cs = cells.clone();
                cs.shuffle(&mut rng);
                cs.truncate(cells.len() / 2);
                cs.sort_unstable();
                for c in cs {
                    supports.push(Support::rect(inset(grid.cell(c), 0.25 * cw)));
                    sets.push(vec![c]);
                }
            }
            _ => {}
        }
    }
    let mut observed = vec![false; grid.len()];
    let mut z = Vec::with_capacity(sets.len());
    for set in &sets {
        let mu_z: f64 = set.iter().map(|&i| mean[i]).sum();
        let k_z = k * set.len() as f64;
        z.push(family::sample(Family::NegativeBinomial, mu_z, 1.0, Some(k_z), &mut rng));
        for &i in set {
            observed[i] = true;
        }
    }
    Ok(Simulation {
        scenario: Scenario::NegbinAreal,
        family: Family::NegativeBinomial,
        link,
        grid,
        supports,
        z,
        truth: Truth { latent, mean, prob: Some(prob), size: Some(vec![k; n * n]), observed },
        held_out_time: None,
    })
}

fn poisson_spacetime(seed: u64, opts: &SimOptions) -> Result<Simulation> {
    let n = opts.grid_size.unwrap_or(5);
    let nt = opts.n_times.unwrap_or(10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = build_bau_grid(unit_square(), n, n, nt)?;
    let held_out = nt / 2;
    let ns = grid.n_spatial();
    // fine-scale standard deviation varies over space
    let fs_sd: Vec<f64> = (0..ns)
        .map(|s| {
            let c = grid.centroid(s);
            (0.1 + 0.2 * c[0]).sqrt()
        })
        .collect();
    let mut latent = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let c = grid.centroid(i);
        let t = grid.time_index(i) as f64 / nt as f64;
        let s = grid.spatial_index(i);
        let smooth = 4.0 + 0.6 * (2.0 * PI * c[0]).sin() * (PI * c[1]).cos() + 0.4 * (2.0 * PI * t + 2.0 * c[0] - c[1]).sin();
        let xi: f64 = Normal::new(0.0, fs_sd[s]).expect("positive sd").sample(&mut rng);
        latent.push(smooth + xi);
    }
    let mean: Vec<f64> = latent.iter().map(|y| y.exp()).collect();
    let mut supports = Vec::new();
    let mut z = Vec::new();
    let mut observed = vec![false; grid.len()];
    for t in 0..nt {
        if t == held_out {
            continue;
        }
        for s in 0..ns {
            let i = grid.bau_index(s, t);
            let (x, y) = interior_point(&grid, s, &mut rng);
            supports.push(Support::point(x, y).at_time(t));
            z.push(family::sample(Family::Poisson, mean[i], 1.0, None, &mut rng));
            observed[i] = true;
        }
    }
    Ok(Simulation {
        scenario: Scenario::PoissonSpacetime,
        family: Family::Poisson,
        link: Link::Log,
        grid,
        supports,
        z,
        truth: Truth { latent, mean, prob: None, size: None, observed },
        held_out_time: Some(held_out),
    })
}
