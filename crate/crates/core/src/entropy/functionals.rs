//! H, H_e, 𝒟, the kinematic cost and the entropy balance on grid measures.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::geometry::{CompensatedSum, Configuration, Dim};
use crate::initial_data::Maxwellian;
use crate::observables::{lattice_dirichlet, lattice_flux, FluxMeasure, GridMeasure, LatticeFluxKind, LatticeKernel};

use super::divergence::ediv_flux;
use super::knn::{diff_entropy_knn, KnnEstimate};

/// (d/2)(ln(4πe/d) + 1) = H_e(π) - H(π) on 𝒫_e.
pub fn he_offset(d: Dim, e: f64) -> f64 {
    let d = d.as_f64();
    0.5 * d * ((4.0 * PI * e / d).ln() + 1.0)
}

/// Histogram plug-in H: Σ p ln(p / h^d), the density taken constant per cell.
pub fn h_grid(p: &GridMeasure) -> f64 {
    let lv = p.grid.cell_volume().ln();
    let mut s = CompensatedSum::new();
    for &w in &p.weights {
        if w > 0.0 {
            s.add(w * (w.ln() - lv));
        }
    }
    s.value()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeValue {
    pub value: f64,
    /// |mean velocity| / √(2e).
    pub mean_defect: f64,
    pub energy: f64,
    /// Why the value is +∞, if it is.
    pub diagnostic: Option<String>,
}

fn membership(mean_norm: f64, energy: f64, e: f64, tol: f64) -> Option<String> {
    let md = mean_norm / (2.0 * e).sqrt();
    if md > tol {
        Some(format!("mean velocity {md:.3e} (relative) exceeds tolerance {tol:.1e}"))
    } else if energy > e * (1.0 + tol) {
        Some(format!("energy {energy} exceeds e = {e}"))
    } else {
        None
    }
}

/// H_e on the grid: Σ p ln(p / (M_e(x_c) h^d)) + β(e - π(ζ₀)), centre representatives.
///
/// With this surrogate h_e_grid(p) - h_grid(p) = (d/2)(ln(4πe/d) + 1) holds
/// identically. +∞ off 𝒫_e at relative tolerance `tol`.
pub fn h_e_grid(p: &GridMeasure, e: f64, tol: f64) -> Result<HeValue> {
    let m = Maxwellian::new(p.grid.dim, e)?;
    let energy = p.energy();
    let mean_norm = p.mean_velocity().norm();
    let diagnostic = membership(mean_norm, energy, e, tol);
    let mean_defect = mean_norm / (2.0 * e).sqrt();
    if diagnostic.is_some() {
        return Ok(HeValue {
            value: f64::INFINITY,
            mean_defect,
            energy,
            diagnostic,
        });
    }
    let lv = p.grid.cell_volume().ln();
    let mut s = CompensatedSum::new();
    for (c, &w) in p.weights.iter().enumerate() {
        if w > 0.0 {
            s.add(w * (w.ln() - m.ln_density(p.grid.centre(c)) - lv));
        }
    }
    s.add(m.beta() * (e - energy));
    Ok(HeValue {
        value: s.value(),
        mean_defect,
        energy,
        diagnostic: None,
    })
}

/// H_e from an estimate of H, by the offset identity.
pub fn h_e_from_entropy(h: f64, d: Dim, e: f64) -> f64 {
    h + he_offset(d, e)
}

/// H_e of an empirical measure through the kNN estimate of H.
pub fn h_e_samples<R: rand::Rng + ?Sized>(cfg: &Configuration, k: usize, jitter: f64, tol: f64, rng: &mut R) -> Result<(HeValue, KnnEstimate)> {
    let e = cfg.energy();
    let est = diff_entropy_knn(cfg.velocities(), cfg.dim(), k, jitter, rng)?;
    let energy = cfg.mean_energy();
    let mean_norm = cfg.mean_velocity().norm();
    let diagnostic = membership(mean_norm, energy, e, tol);
    let value = if diagnostic.is_some() {
        f64::INFINITY
    } else {
        // the energy term cancels against β ∫|v|²/2 in Ent(π|M_e)
        h_e_from_entropy(est.value, cfg.dim(), e)
    };
    Ok((
        HeValue {
            value,
            mean_defect: mean_norm / (2.0 * e).sqrt(),
            energy,
            diagnostic,
        },
        est,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirichletValue {
    /// Σ G p_a p_b
    pub first: f64,
    /// Σ G sqrt(p_a p_b p_c p_d)
    pub second: f64,
    pub value: f64,
}

/// 𝒟(π) on the lattice: ∬∫ f f* B - ∬∫ sqrt(f f* f' f'*) B with densities w/h^d.
pub fn dirichlet_form(lk: &LatticeKernel, p: &GridMeasure) -> Result<DirichletValue> {
    lk.grid().check_same(&p.grid)?;
    let (first, second) = lattice_dirichlet(lk, p);
    Ok(DirichletValue {
        first,
        second,
        value: first - second,
    })
}

/// ∫ 𝒟(P_t) dt over the binned path.
pub fn dirichlet_integral(lk: &LatticeKernel, path: &[GridMeasure], widths: &[f64]) -> Result<f64> {
    if path.len() != widths.len() {
        return Err(invalid("widths", "one width per path element"));
    }
    let mut s = CompensatedSum::new();
    for (p, &dt) in path.iter().zip(widths) {
        s.add(dt * dirichlet_form(lk, p)?.value);
    }
    Ok(s.value())
}

/// E(Q | R^{P⊗P}).
pub fn kinematic_cost(lk: &LatticeKernel, q: &FluxMeasure, path: &[GridMeasure], widths: &[f64]) -> Result<f64> {
    let r = lattice_flux(lk, path, widths, LatticeFluxKind::Geometric)?;
    ediv_flux(q, &r)
}

/// Both sides of the kinematic-cost identity for a grid pair (P, Q).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KinematicIdentity {
    pub dirichlet: f64,
    /// E(Q|R)
    pub cost: f64,
    /// E(Q|Q^{P⊗P})
    pub forward: f64,
    /// E(Q|Υ#Q^{P⊗P})
    pub backward: f64,
    /// ∫𝒟 + E(Q|R) vs E(Q|Υ#Q̃) + E(Q|Q̃), relative defect.
    pub single_cost_defect: f64,
    /// ∫𝒟 + 2E(Q|R) vs E(Q|Υ#Q̃) + E(Q|Q̃), relative defect.
    pub double_cost_defect: f64,
}

impl KinematicIdentity {
    pub fn all_finite(&self) -> bool {
        [self.dirichlet, self.cost, self.forward, self.backward].iter().all(|x| x.is_finite())
    }
}

fn rel_defect(l: f64, r: f64) -> f64 {
    let s = l.abs().max(r.abs());
    if s == 0.0 {
        0.0
    } else {
        (l - r).abs() / s
    }
}

/// Evaluates ∫𝒟, E(Q|R), E(Q|Q̃), E(Q|Υ#Q̃) and both candidate identities.
///
/// Since Q̃ · Υ#Q̃ = R² tuple by tuple and Q̃, Υ#Q̃ have equal mass,
/// E(Q|Q̃) + E(Q|Υ#Q̃) = 2E(Q|R) + 2(Q̃ - R)(1) = 2E(Q|R) + ∫𝒟. The form
/// with a single E(Q|R) holds only when E(Q|R) = 0.
pub fn kinematic_identity(lk: &LatticeKernel, q: &FluxMeasure, path: &[GridMeasure], widths: &[f64]) -> Result<KinematicIdentity> {
    let qt = lattice_flux(lk, path, widths, LatticeFluxKind::Product)?;
    let r = lattice_flux(lk, path, widths, LatticeFluxKind::Geometric)?;
    let dirichlet = dirichlet_integral(lk, path, widths)?;
    let cost = ediv_flux(q, &r)?;
    let forward = ediv_flux(q, &qt)?;
    let backward = ediv_flux(q, &qt.upsilon())?;
    Ok(KinematicIdentity {
        dirichlet,
        cost,
        forward,
        backward,
        single_cost_defect: rel_defect(dirichlet + cost, forward + backward),
        double_cost_defect: rel_defect(dirichlet + 2.0 * cost, forward + backward),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyBalance {
    pub he_start: f64,
    pub he_end: f64,
    pub forward: f64,
    pub backward: f64,
    /// H_e(P₀) + E(Q|Q̃) - H_e(P_T) - E(Q|Υ#Q̃).
    pub residual: f64,
    /// False when an infinite term makes the residual meaningless.
    pub finite: bool,
}

/// Entropy balance for a grid pair; Q̃ is built from `path` on the lattice.
pub fn entropy_balance_check(
    lk: &LatticeKernel,
    p0: &GridMeasure,
    pt: &GridMeasure,
    q: &FluxMeasure,
    path: &[GridMeasure],
    widths: &[f64],
    e: f64,
    tol: f64,
) -> Result<EntropyBalance> {
    let qt = lattice_flux(lk, path, widths, LatticeFluxKind::Product)?;
    let he_start = h_e_grid(p0, e, tol)?.value;
    let he_end = h_e_grid(pt, e, tol)?.value;
    let forward = ediv_flux(q, &qt)?;
    let backward = ediv_flux(q, &qt.upsilon())?;
    let finite = [he_start, he_end, forward, backward].iter().all(|x| x.is_finite());
    Ok(EntropyBalance {
        he_start,
        he_end,
        forward,
        backward,
        residual: he_start + forward - he_end - backward,
        finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use crate::observables::GridSpec;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn small_grid() -> GridSpec {
        GridSpec::new(Dim::Three, 2.0, 8, 1, 1.0).unwrap()
    }

    /// Random measure symmetric under v ↦ -v, so its centre mean vanishes.
    fn symmetric_measure(g: GridSpec, seed: u64) -> GridMeasure {
        let mut rng = stream_rng(seed, 0);
        let n = g.n_cells as i32;
        let mut w = vec![0.0; g.len()];
        for c in 0..g.len() {
            let k = g.unflat(c);
            let m = g.flat([n - 1 - k[0], n - 1 - k[1], n - 1 - k[2]]);
            if m >= c {
                let x: f64 = rng.random::<f64>() + 0.05;
                w[c] = x;
                w[m] = x;
            }
        }
        let s: f64 = w.iter().sum();
        GridMeasure::from_weights(g, w.iter().map(|x| x / s).collect(), 0.0).unwrap()
    }

    #[test]
    fn colder_maxwellian_costs_three_halves_ln2() {
        // Ent(M_{e/2}|M_e) + β e/2 = (3/2)(ln 2 - 1/2) + 3/4
        let g = GridSpec::new(Dim::Three, 5.0, 48, 1, 1.0).unwrap();
        let cold = Maxwellian::new(Dim::Three, 0.5).unwrap();
        let w = cold.centre_weights(&g);
        let p = GridMeasure::from_weights(g, w, 0.0).unwrap();
        let he = h_e_grid(&p, 1.0, 1e-6).unwrap();
        assert!((he.value - 1.5 * 2f64.ln()).abs() < 5e-3, "{he:?}");
        let warm = GridMeasure::from_weights(g, Maxwellian::new(Dim::Three, 1.0).unwrap().centre_weights(&g), 0.0).unwrap();
        assert!(h_e_grid(&warm, 1.0, 1e-6).unwrap().value.abs() < 5e-3);
    }

    #[test]
    fn offset_identity_on_exact_moment_measures() {
        let g = small_grid();
        for seed in 0..5 {
            let p = symmetric_measure(g, seed);
            let e = p.energy();
            let he = h_e_grid(&p, e, 1e-9).unwrap();
            assert!(he.diagnostic.is_none());
            assert!((he.value - h_grid(&p) - he_offset(Dim::Three, e)).abs() < 1e-9);
        }
    }

    #[test]
    fn he_is_infinite_off_the_energy_shell() {
        let g = small_grid();
        let p = symmetric_measure(g, 7);
        let he = h_e_grid(&p, 0.5 * p.energy(), 1e-9).unwrap();
        assert_eq!(he.value, f64::INFINITY);
        assert!(he.diagnostic.is_some());
    }

    #[test]
    fn dirichlet_form_vanishes_on_maxwellians_and_is_nonnegative() {
        let g = small_grid();
        let lk = LatticeKernel::new(g, KernelSpec::HardSphere, 32).unwrap();
        let m = GridMeasure::from_weights(g, Maxwellian::new(Dim::Three, 0.6).unwrap().centre_weights(&g), 0.0).unwrap();
        let dm = dirichlet_form(&lk, &m).unwrap();
        assert!(dm.value.abs() < 1e-12 * dm.first, "{dm:?}");
        for seed in 0..10 {
            let p = symmetric_measure(g, 100 + seed);
            assert!(dirichlet_form(&lk, &p).unwrap().value >= 0.0);
        }
    }

    #[test]
    fn far_apart_cells_give_only_the_first_term() {
        let g = small_grid();
        let lk = LatticeKernel::new(g, KernelSpec::HardSphere, 32).unwrap();
        let mut w = vec![0.0; g.len()];
        w[g.flat([0, 0, 0])] = 0.5;
        w[g.flat([7, 7, 7])] = 0.5;
        let p = GridMeasure::from_weights(g, w, 0.0).unwrap();
        let d = dirichlet_form(&lk, &p).unwrap();
        assert!(d.first > 0.0);
        assert_eq!(d.second, 0.0);
        assert_eq!(d.value, d.first);
    }

    #[test]
    fn kinematic_identity_with_two_costs() {
        let g = small_grid();
        let lk = LatticeKernel::new(g, KernelSpec::HardSphere, 32).unwrap();
        let p = symmetric_measure(g, 3);
        let path = vec![p];
        let widths = [0.7];
        let qt = lattice_flux(&lk, &path, &widths, LatticeFluxKind::Product).unwrap();
        let mut rng = stream_rng(33, 0);
        let mut q = FluxMeasure::new(g);
        for (k, &w) in &qt.weights {
            q.add_symmetric(*k, w * rng.random_range(0.3..3.0));
        }
        let id = kinematic_identity(&lk, &q, &path, &widths).unwrap();
        assert!(id.all_finite());
        assert!(id.double_cost_defect < 1e-9, "{id:?}");
        assert!(id.single_cost_defect > 1e-3, "{id:?}");
        // Q = Q̃: E(Q̃|Υ#Q̃) = ∫𝒟 + 2E(Q̃|R)
        let id0 = kinematic_identity(&lk, &qt, &path, &widths).unwrap();
        assert_eq!(id0.forward, 0.0);
        assert!(id0.double_cost_defect < 1e-9);
    }

    #[test]
    fn stationary_balance_at_equilibrium() {
        let g = small_grid();
        let lk = LatticeKernel::new(g, KernelSpec::HardSphere, 32).unwrap();
        let m = GridMeasure::from_weights(g, Maxwellian::new(Dim::Three, 0.6).unwrap().centre_weights(&g), 0.0).unwrap();
        let e = m.energy();
        let path = vec![m.clone()];
        let q = lattice_flux(&lk, &path, &[1.0], LatticeFluxKind::Product).unwrap();
        let b = entropy_balance_check(&lk, &m, &m, &q, &path, &[1.0], e, 1e-9).unwrap();
        assert!(b.finite);
        assert!(b.residual.abs() < 1e-12, "{b:?}");
        assert!(b.backward < 1e-12);
    }
}
