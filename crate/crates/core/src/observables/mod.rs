//! Empirical measure and flow of a trajectory, their grid surrogates, the
//! collision flux of a product measure, and pathwise residuals.

pub mod balance;
pub mod flux;
pub mod grid;
pub mod io;
pub mod lattice;
pub mod martingale;
pub mod reference;

pub use balance::{balance_residual, BalanceReport, TestFunction};
pub use flux::{
    collision_flux, collision_flux_diagnosed, empirical_flow, events_on_conservation_set, upsilon_pushforward,
    FluxDiagnostics, FluxKey, FluxMeasure, OUTSIDE,
};
pub use grid::{binned_path, empirical_measure, CellIndex, EmpiricalMeasure, GridMeasure, GridSpec};
pub use lattice::{lattice_dirichlet, lattice_flux, lattice_flux_rate, LatticeFluxKind, LatticeKernel};
pub use martingale::{martingale_residual, MartingaleSeries, MartingaleTracker, PairFunction};
pub use reference::EmpiricalReference;
