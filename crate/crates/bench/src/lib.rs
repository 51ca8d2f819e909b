//! Fixtures shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xtune_core::nmpc::QpProblem;
use xtune_core::{
    ControlInput, NmpcController, NmpcWeights, OcpConfig, ReferencePath, ScenarioConfig,
    VehicleState,
};

/// Box-constrained QP with `H = AᵀA + I`.
pub fn random_box_qp(n: usize, seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = a.transpose() * &a + DMatrix::identity(n, n);
    let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    QpProblem::new(h, g).with_bounds(
        DVector::from_element(n, -1.0),
        DVector::from_element(n, 1.0),
    )
}

/// Controller and path of the default scenario, with the vehicle on the
/// path start at the reference speed.
pub fn default_controller() -> (NmpcController, ReferencePath, VehicleState, ControlInput) {
    let cfg = ScenarioConfig::default();
    let path = xtune_core::build_dlc_path(&cfg.dlc, cfg.path_spacing).unwrap();
    let ctrl =
        NmpcController::new(NmpcWeights::uniform(1.0), OcpConfig::default(), cfg.model).unwrap();
    let x = VehicleState {
        vx: cfg.dlc.entry_speed,
        ..Default::default()
    };
    (ctrl, path, x, ControlInput::default())
}
