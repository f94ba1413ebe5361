//! Forward-Euler dynamics of the lattice Boltzmann surrogate.
//!
//! One step moves ½ p_a p_b G Δt from (a, b) to (c, d) for every lattice
//! tuple. Centre energies are conserved tuple by tuple, so mass, momentum
//! and energy are conserved up to rounding; positivity needs Δt times the
//! largest loss rate to stay below one.

use rand::Rng;
use serde::Serialize;

use crate::entropy::{ediv_pairs, h_e_grid, EntropyBalance};
use crate::error::{invalid, KacError, Result};
use crate::geometry::CompensatedSum;
use crate::initial_data::{sample_chaotic, Maxwellian, Preset};
use crate::observables::{empirical_measure, lattice_flux, CellIndex, FluxMeasure, GridMeasure, GridSpec, LatticeFluxKind, LatticeKernel};
use crate::par;

const CHUNK: usize = 64;

fn same_geometry(lk: &LatticeKernel, p: &GridMeasure) -> Result<()> {
    let (g, h) = (lk.grid(), &p.grid);
    if g.dim == h.dim && g.n_cells == h.n_cells && g.v_max == h.v_max {
        Ok(())
    } else {
        Err(KacError::GridMismatch)
    }
}

#[inline]
fn shift(k: CellIndex, j: CellIndex, s: i32) -> CellIndex {
    [k[0] + s * j[0], k[1] + s * j[1], k[2] + s * j[2]]
}

/// Per-cell gain minus loss rate of the lattice collision operator at `p`.
///
/// Work is split in fixed chunks of the support and reduced in chunk
/// order, so the result does not depend on the thread count.
pub fn collision_rhs(lk: &LatticeKernel, p: &GridMeasure) -> Vec<f64> {
    let g = *lk.grid();
    let w = &p.weights;
    let sup = p.support();
    let chunks: Vec<&[usize]> = sup.chunks(CHUNK).collect();
    let parts = par::map_slice(&chunks, |chunk| {
        let mut delta = vec![0.0; w.len()];
        for &a in chunk.iter() {
            let ka = g.unflat(a);
            for &b in &sup {
                let kb = g.unflat(b);
                let pab = 0.5 * w[a] * w[b];
                for &(j, gw) in lk.row(shift(ka, kb, -1)) {
                    let (kc, kd) = (shift(ka, j, 1), shift(kb, j, -1));
                    if !g.contains(kc) || !g.contains(kd) {
                        continue;
                    }
                    let (c, d) = (g.flat(kc), g.flat(kd));
                    if (c == a && d == b) || (c == b && d == a) {
                        continue;
                    }
                    let r = pab * gw;
                    delta[a] -= r;
                    delta[b] -= r;
                    delta[c] += r;
                    delta[d] += r;
                }
            }
        }
        delta
    });
    let mut out = vec![0.0; w.len()];
    for part in parts {
        for (o, x) in out.iter_mut().zip(part) {
            *o += x;
        }
    }
    out
}

/// Largest loss rate any cell could have under `p`, occupied or not.
///
/// Used to pick a step that stays positive while the support spreads.
pub fn envelope_loss_rate(lk: &LatticeKernel, p: &GridMeasure) -> f64 {
    let g = *lk.grid();
    let sup = p.support();
    let rates = par::map_indices(g.len(), |a| {
        let ka = g.unflat(a);
        let mut s = 0.0;
        for &b in &sup {
            let kb = g.unflat(b);
            for &(j, gw) in lk.row(shift(ka, kb, -1)) {
                let (kc, kd) = (shift(ka, j, 1), shift(kb, j, -1));
                if g.contains(kc) && g.contains(kd) {
                    let (c, d) = (g.flat(kc), g.flat(kd));
                    if !((c == a && d == b) || (c == b && d == a)) {
                        s += p.weights[b] * gw;
                    }
                }
            }
        }
        s
    });
    rates.into_iter().fold(0.0, f64::max)
}

/// One forward-Euler step of the lattice Boltzmann surrogate.
///
/// Refuses with [`KacError::Positivity`] when Δt exceeds 1 / (largest loss
/// rate of an occupied cell).
pub fn grid_boltzmann_step(lk: &LatticeKernel, p: &GridMeasure, dt: f64) -> Result<GridMeasure> {
    same_geometry(lk, p)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", "must be positive"));
    }
    let bound = lk.max_stable_dt(p);
    if dt > bound {
        return Err(KacError::Positivity { dt, bound });
    }
    let rhs = collision_rhs(lk, p);
    let weights: Vec<f64> = p.weights.iter().zip(&rhs).map(|(w, r)| (w + dt * r).max(0.0)).collect();
    Ok(GridMeasure {
        grid: p.grid,
        weights,
        overflow: p.overflow,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridRunStats {
    pub steps: usize,
    pub dt: f64,
    pub max_mass_defect: f64,
    pub max_energy_defect: f64,
    pub max_momentum_defect: f64,
}

/// A forward-Euler trajectory; step k is its own time bin.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub lattice: LatticeKernel,
    /// P at the start of every step, on the retimed grid.
    pub path: Vec<GridMeasure>,
    pub widths: Vec<f64>,
    pub terminal: GridMeasure,
    pub stats: GridRunStats,
}

impl GridRun {
    /// Times of `path` followed by the horizon.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.path.len()).map(|k| k as f64 * self.stats.dt).collect()
    }

    /// State at the last step boundary not after `t`.
    pub fn state_at(&self, t: f64) -> &GridMeasure {
        let k = ((t / self.stats.dt) + 1e-9).floor() as usize;
        if k >= self.path.len() {
            &self.terminal
        } else {
            &self.path[k]
        }
    }

    /// The flux carried by the scheme, which is Q^{P⊗P} of the path.
    pub fn flux(&self) -> Result<FluxMeasure> {
        lattice_flux(&self.lattice, &self.path, &self.widths, LatticeFluxKind::Product)
    }

    /// Entropy balance of (path, flux) at the run's own energy.
    ///
    /// Here Q = Q̃, so E(Q|Q̃) = 0 and only E(Q̃|Υ#Q̃) is summed. The lattice
    /// rate is symmetric under (a, b) ↔ (c, d), so Υ#Q̃ on a tuple is
    /// ½ p_c p_d G Δt; summing bin by bin avoids building either measure.
    pub fn balance(&self, tol: f64) -> Result<EntropyBalance> {
        let e = self.path[0].energy();
        let he_start = h_e_grid(&self.path[0], e, tol)?.value;
        let he_end = h_e_grid(&self.terminal, e, tol)?.value;
        let mut backward = CompensatedSum::new();
        for (p, &dt) in self.path.iter().zip(&self.widths) {
            let w = &p.weights;
            let mut pairs = Vec::new();
            self.lattice.for_each_tuple(p, |a, b, c, d, g| {
                let s = 0.5 * g * dt;
                pairs.push((s * w[a] * w[b], s * w[c] * w[d]));
            });
            backward.add(ediv_pairs(pairs));
        }
        let backward = backward.value();
        let forward = 0.0;
        let finite = [he_start, he_end, backward].iter().all(|x| x.is_finite());
        Ok(EntropyBalance {
            he_start,
            he_end,
            forward,
            backward,
            residual: he_start + forward - he_end - backward,
            finite,
        })
    }

    /// H_e along the run at the run's own energy.
    pub fn he_series(&self, tol: f64) -> Result<Vec<f64>> {
        let e = self.path[0].energy();
        self.path
            .iter()
            .chain(std::iter::once(&self.terminal))
            .map(|p| h_e_grid(p, e, tol).map(|h| h.value))
            .collect()
    }
}

/// Average of `p` and its image under v ↦ -v; the centre mean becomes zero.
pub fn symmetrized(p: &GridMeasure) -> GridMeasure {
    let g = p.grid;
    let n = g.n_cells as i32 - 1;
    let three = g.dim.get() == 3;
    let weights = (0..g.len())
        .map(|c| {
            let k = g.unflat(c);
            let m = [n - k[0], n - k[1], if three { n - k[2] } else { 0 }];
            0.5 * (p.weights[c] + p.weights[g.flat(m)])
        })
        .collect();
    GridMeasure {
        grid: g,
        weights,
        overflow: p.overflow,
    }
}

/// Grid version of a preset: exact cell masses for the Maxwellian, a
/// symmetrized histogram of `samples` chaotic draws otherwise. Normalized
/// to a probability on the box.
pub fn preset_grid_measure<R: Rng + ?Sized>(preset: Preset, grid: &GridSpec, e: f64, samples: usize, rng: &mut R) -> Result<GridMeasure> {
    let p = match preset {
        Preset::Maxwellian => Maxwellian::new(grid.dim, e)?.cell_masses(grid)?,
        _ => {
            let (cfg, _) = sample_chaotic(samples, grid.dim, e, preset, rng)?;
            symmetrized(&empirical_measure(&cfg, grid)?.measure)
        }
    };
    let s: f64 = p.weights.iter().sum();
    if !(s > 0.0) {
        return Err(invalid("grid", "preset has no mass inside the box"));
    }
    GridMeasure::from_weights(p.grid, p.weights.iter().map(|w| w / s).collect(), 0.0)
}

/// Runs `steps` Euler steps of length horizon/steps from `p0`.
pub fn run_grid_boltzmann(lk: &LatticeKernel, p0: &GridMeasure, horizon: f64, steps: usize) -> Result<GridRun> {
    same_geometry(lk, p0)?;
    if steps == 0 {
        return Err(invalid("steps", "at least one step"));
    }
    let lattice = lk.retimed(steps, horizon)?;
    let dt = horizon / steps as f64;
    let mut p = GridMeasure {
        grid: *lattice.grid(),
        ..p0.clone()
    };
    let (m0, e0, u0) = (p.mass(), p.energy(), p.mean_velocity());
    let mut stats = GridRunStats {
        steps,
        dt,
        max_mass_defect: 0.0,
        max_energy_defect: 0.0,
        max_momentum_defect: 0.0,
    };
    let mut path = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = grid_boltzmann_step(&lattice, &p, dt)?;
        stats.max_mass_defect = stats.max_mass_defect.max((next.mass() - m0).abs());
        stats.max_energy_defect = stats.max_energy_defect.max((next.energy() - e0).abs());
        stats.max_momentum_defect = stats.max_momentum_defect.max((next.mean_velocity() - u0).norm());
        path.push(std::mem::replace(&mut p, next));
    }
    Ok(GridRun {
        lattice,
        widths: vec![dt; steps],
        path,
        terminal: p,
        stats,
    })
}

/// Step count giving Δt ≤ safety / (envelope loss rate of `p0`).
pub fn stable_steps(lk: &LatticeKernel, p0: &GridMeasure, horizon: f64, safety: f64) -> usize {
    let r = envelope_loss_rate(lk, p0);
    if r <= 0.0 {
        return 1;
    }
    ((horizon * r / safety).ceil() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::entropy_balance_check;
    use crate::geometry::Dim;
    use crate::kernel::KernelSpec;
    use crate::rng::stream_rng;

    fn lattice(n: usize, v_max: f64) -> LatticeKernel {
        LatticeKernel::new(GridSpec::new(Dim::Three, v_max, n, 1, 1.0).unwrap(), KernelSpec::HardSphere, 32).unwrap()
    }

    /// Two-bump mixture binned by its exact cell masses (full support).
    fn two_bump(g: &GridSpec) -> GridMeasure {
        let s2 = 1.0 / 3.0;
        let left = Maxwellian::new(Dim::Three, 1.5 * s2).unwrap();
        let m = left.cell_masses(g).unwrap();
        // shifting by ±1 along the first axis: average the two translated copies
        let n = g.n_cells as i32;
        let h = g.h();
        let off = (1.0 / h).round() as i32;
        let mut w = vec![0.0; g.len()];
        for c in 0..g.len() {
            let k = g.unflat(c);
            for s in [-off, off] {
                let src = [k[0] - s, k[1], k[2]];
                if src[0] >= 0 && src[0] < n {
                    w[c] += 0.5 * m.weights[g.flat(src)];
                }
            }
        }
        let tot: f64 = w.iter().sum();
        GridMeasure::from_weights(*g, w.iter().map(|x| x / tot).collect(), 0.0).unwrap()
    }

    #[test]
    fn maxwellian_is_a_fixed_point() {
        let lk = lattice(10, 3.0);
        let p = Maxwellian::new(Dim::Three, 1.0).unwrap().cell_masses(lk.grid()).unwrap().normalized().unwrap();
        let dt = 0.5 * lk.max_stable_dt(&p);
        let q = grid_boltzmann_step(&lk, &p, dt).unwrap();
        let tv = q.total_variation(&p).unwrap();
        assert!(tv < 1e-4, "tv {tv}");
        // centre weights are an exact fixed point of the lattice
        let c = Maxwellian::new(Dim::Three, 1.0).unwrap().centre_weights(lk.grid());
        let s: f64 = c.iter().sum();
        let pc = GridMeasure::from_weights(*lk.grid(), c.iter().map(|x| x / s).collect(), 0.0).unwrap();
        let qc = grid_boltzmann_step(&lk, &pc, dt).unwrap();
        assert!(qc.total_variation(&pc).unwrap() < 1e-13);
    }

    #[test]
    fn conserves_and_refuses_large_steps() {
        let lk = lattice(8, 2.5);
        let p = two_bump(lk.grid());
        let bound = lk.max_stable_dt(&p);
        assert!(matches!(grid_boltzmann_step(&lk, &p, 1.5 * bound), Err(KacError::Positivity { .. })));
        let run = run_grid_boltzmann(&lk, &p, 0.2, stable_steps(&lk, &p, 0.2, 0.5)).unwrap();
        assert!(run.stats.max_mass_defect < 1e-13, "{:?}", run.stats);
        assert!(run.stats.max_energy_defect < 1e-12, "{:?}", run.stats);
        assert!(run.stats.max_momentum_defect < 1e-12, "{:?}", run.stats);
        assert!(run.terminal.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn balance_residual_is_first_order() {
        let lk = lattice(8, 2.5);
        let p = two_bump(lk.grid());
        let horizon = 0.2;
        let n0 = stable_steps(&lk, &p, horizon, 0.5);
        let res: Vec<f64> = [n0, 2 * n0, 4 * n0]
            .iter()
            .map(|&n| {
                let b = run_grid_boltzmann(&lk, &p, horizon, n).unwrap().balance(1e-9).unwrap();
                assert!(b.finite);
                assert!(b.forward.abs() < 1e-12);
                b.residual
            })
            .collect();
        // ratios approach 2 and the Richardson limit 2r(dt/2) - r(dt) vanishes
        let (r1, r2) = (res[0] / res[1], res[1] / res[2]);
        assert!((r2 - 2.0).abs() < (r1 - 2.0).abs() && (r2 - 2.0).abs() < 0.25, "{res:?}");
        assert!((2.0 * res[2] - res[1]).abs() < 0.25 * res[2].abs(), "{res:?}");
    }

    #[test]
    fn streamed_balance_matches_materialized_flux() {
        let lk = lattice(6, 2.0);
        let p = two_bump(lk.grid());
        let run = run_grid_boltzmann(&lk, &p, 0.05, 3).unwrap();
        let fast = run.balance(1e-9).unwrap();
        let q = run.flux().unwrap();
        let e = run.path[0].energy();
        let slow = entropy_balance_check(&run.lattice, &run.path[0], &run.terminal, &q, &run.path, &run.widths, e, 1e-9).unwrap();
        assert!(slow.forward.abs() < 1e-14);
        assert!((fast.backward - slow.backward).abs() < 1e-12 * slow.backward.abs().max(1.0), "{fast:?} {slow:?}");
        assert!((fast.residual - slow.residual).abs() < 1e-12);
    }

    #[test]
    fn shell_entropy_decreases() {
        let lk = lattice(10, 3.0);
        let mut rng = stream_rng(8, 0);
        let p = preset_grid_measure(Preset::Shell, lk.grid(), 1.0, 20_000, &mut rng).unwrap();
        assert!(p.mean_velocity().norm() < 1e-14);
        let horizon = 0.5;
        let run = run_grid_boltzmann(&lk, &p, horizon, stable_steps(&lk, &p, horizon, 0.5)).unwrap();
        let he = run.he_series(1e-6).unwrap();
        let down = he.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(down as f64 >= 0.95 * (he.len() - 1) as f64, "{he:?}");
        assert!(he[0] > he[he.len() - 1] + 0.1);
    }
}
