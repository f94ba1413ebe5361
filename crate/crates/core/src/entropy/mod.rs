//! Relative entropy and its extension to finite measures, differential
//! entropy estimates, H_e, the Dirichlet form and the dissipation report.

pub mod divergence;
pub mod functionals;
pub mod knn;
pub mod report;

pub use divergence::{
    coarsen, ediv_flux, ediv_grid, ediv_pairs, ent_discrete, log_likelihood_ratio, variational_ediv_lower_bound, variational_value,
};
pub use functionals::{
    dirichlet_form, dirichlet_integral, entropy_balance_check, h_e_from_entropy, h_e_grid, h_e_samples, h_grid, he_offset, kinematic_cost,
    kinematic_identity, DirichletValue, EntropyBalance, HeValue, KinematicIdentity,
};
pub use knn::{diff_entropy_knn, KnnEstimate};
pub use report::{dissipation_gap, dissipation_gap_grid, EntropyReport, KacGapSettings};
