//! Reproducible experiments built on the engine and the diagnostics.

pub mod bkw;
pub mod distances;
pub mod grid_dynamics;
pub mod spec;
pub mod studies;

pub use bkw::{calibrate, validate_calibration, Bkw, CalibrationReport};
pub use distances::BlDictionary;
pub use grid_dynamics::{run_grid_boltzmann, GridRun};
pub use spec::{mean_free_time, Check, ConvergenceReport, Horizon, StudySpec};
pub use studies::{
    bkw_oracle_study, dissipation_study, entropy_propagation_study, flux_check_study, self_convergence_study, simulate_study, ReplicaRun,
};
