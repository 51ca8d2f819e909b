//! Path-following NMPC for a single-track vehicle, with cost weights tuned
//! online from rollouts on a randomized surrogate plant.
// Negated comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod dynamics;
pub mod harness;
pub mod nmpc;
pub mod path;
pub mod tuner;

pub use dynamics::{ControlInput, PlantConfig, SingleTrackParams, VehicleState};
pub use harness::{run_closed_loop, RunLog, ScenarioConfig, SummaryReport};
pub use nmpc::{NmpcController, NmpcWeights, OcpConfig, SolveStatus};
pub use path::{build_dlc_path, DlcGeometry, ReferencePath};
pub use tuner::{Tuner, TunerConfig, TunerKind, UpdateRecord};
