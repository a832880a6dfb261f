//! Shared fixtures for the benchmarks.

use frk_core::estimate::{initial_state, StateSpec};
use frk_core::covpar::{PriorVariant, DEFAULT_TAPER};
use frk_core::simulate::{simulate, Scenario, SimOptions};
use frk_core::{auto_basis, map_supports, Model, ModelBasis, ModelState, SupportKind};

/// Poisson point scenario at its default size, with its starting state.
pub fn poisson_model(n_res: usize) -> (Model, ModelState) {
    let sim = simulate(Scenario::PoissonPoint, 1, &SimOptions::default()).expect("simulation");
    let mut grid = sim.grid;
    grid.use_linear_trend();
    let set = map_supports(&grid, sim.supports, SupportKind::Observation).expect("supports");
    let basis = ModelBasis::Spatial(auto_basis(grid.bbox(), n_res).expect("basis"));
    let model = Model::new(grid, Some(basis), set, sim.z, sim.family, sim.link, true, true).expect("model");
    let spec = StateSpec {
        variant: PriorVariant::QLeroux,
        taper_multiplier: DEFAULT_TAPER,
        fs_by_spatial_bau: false,
        known_sigma2fs: None,
    };
    let (state, _) = initial_state(&model, &spec).expect("initial state");
    (model, state)
}
