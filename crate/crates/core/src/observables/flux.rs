use std::collections::BTreeMap;

use crate::engine::EventLog;
use crate::error::Result;
use crate::geometry::{compensated_sum, Velocity};
use crate::kernel::{KernelSpec, SphereQuadrature};

use super::grid::{GridMeasure, GridSpec};

/// (time bin, c, c*, c', c'*); cells outside the box are [`OUTSIDE`].
pub type FluxKey = [u32; 5];

pub const OUTSIDE: u32 = u32::MAX;

/// The four images of a tuple under the pre-pair and post-pair exchanges.
#[inline]
pub fn images(k: &FluxKey) -> [FluxKey; 4] {
    let [t, a, b, c, d] = *k;
    [[t, a, b, c, d], [t, b, a, c, d], [t, a, b, d, c], [t, b, a, d, c]]
}

/// Υ: swaps incoming and outgoing pairs.
#[inline]
pub fn upsilon_key(k: &FluxKey) -> FluxKey {
    let [t, a, b, c, d] = *k;
    [t, c, d, a, b]
}

#[inline]
pub(crate) fn cell_u32(c: Option<usize>) -> u32 {
    c.map_or(OUTSIDE, |c| c as u32)
}

/// Sparse nonnegative weights on flux tuples.
///
/// Stored in a `BTreeMap` so that every sum over the support runs in key
/// order; reports are then bit-reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxMeasure {
    pub grid: GridSpec,
    pub weights: BTreeMap<FluxKey, f64>,
}

impl FluxMeasure {
    pub fn new(grid: GridSpec) -> Self {
        Self {
            grid,
            weights: BTreeMap::new(),
        }
    }

    #[inline]
    pub fn add(&mut self, key: FluxKey, w: f64) {
        *self.weights.entry(key).or_insert(0.0) += w;
    }

    /// Adds `w` spread as w/4 over the four images (coinciding images merge).
    #[inline]
    pub fn add_symmetric(&mut self, key: FluxKey, w: f64) {
        for k in images(&key) {
            self.add(k, 0.25 * w);
        }
    }

    pub fn get(&self, key: &FluxKey) -> f64 {
        self.weights.get(key).copied().unwrap_or(0.0)
    }

    pub fn mass(&self) -> f64 {
        compensated_sum(self.weights.values().copied())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Largest deviation from the pair-exchange symmetries.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (k, &w) in &self.weights {
            for im in images(k) {
                worst = worst.max((self.get(&im) - w).abs());
            }
        }
        worst
    }

    pub fn upsilon(&self) -> FluxMeasure {
        FluxMeasure {
            grid: self.grid,
            weights: self.weights.iter().map(|(k, &w)| (upsilon_key(k), w)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> FluxMeasure {
        FluxMeasure {
            grid: self.grid,
            weights: self.weights.iter().map(|(k, &w)| (*k, w * s)).collect(),
        }
    }
}

/// Υ#Q.
pub fn upsilon_pushforward(q: &FluxMeasure) -> FluxMeasure {
    q.upsilon()
}

/// Q^N binned: every event adds 1/N, split over the four symmetric images.
pub fn empirical_flow(log: &EventLog, grid: &GridSpec, n_particles: usize) -> Result<FluxMeasure> {
    if n_particles < 2 {
        return Err(crate::error::invalid("N", "N ≥ 2 required"));
    }
    let mut q = FluxMeasure::new(*grid);
    let w = 1.0 / n_particles as f64;
    for ev in &log.events {
        if ev.t > grid.horizon {
            break;
        }
        let key = [
            grid.time_bin(ev.t) as u32,
            cell_u32(grid.cell_of(ev.pre_i)),
            cell_u32(grid.cell_of(ev.pre_j)),
            cell_u32(grid.cell_of(ev.post_i)),
            cell_u32(grid.cell_of(ev.post_j)),
        ];
        q.add_symmetric(key, w);
    }
    Ok(q)
}

/// Quality counters for [`collision_flux_diagnosed`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FluxDiagnostics {
    /// Pairs with positive rate whose every quadrature node lands back in the pre-collision cells.
    pub unresolved_pairs: usize,
    pub pairs: usize,
}

/// Q^{P⊗P} on one time bin of weight `time_weight`, cell centres as representatives.
pub fn collision_flux(p: &GridMeasure, kernel: KernelSpec, time_weight: f64, n_omega: usize) -> Result<FluxMeasure> {
    Ok(collision_flux_diagnosed(p, kernel, time_weight, n_omega, 0)?.0)
}

/// As [`collision_flux`], writing into time bin `tbin` and reporting resolution problems.
pub fn collision_flux_diagnosed(
    p: &GridMeasure,
    kernel: KernelSpec,
    time_weight: f64,
    n_omega: usize,
    tbin: u32,
) -> Result<(FluxMeasure, FluxDiagnostics)> {
    kernel.validate()?;
    if !(time_weight >= 0.0) {
        return Err(crate::error::invalid("time_weight", "must be nonnegative"));
    }
    let grid = p.grid;
    let quad = SphereQuadrature::new(grid.dim, n_omega)?;
    let mut q = FluxMeasure::new(grid);
    let mut diag = FluxDiagnostics::default();
    let support = p.support();
    for (ia, &a) in support.iter().enumerate() {
        let xa = grid.centre(a);
        for &b in &support[ia..] {
            let xb = grid.centre(b);
            // both orderings of an off-diagonal pair, each with ½ p_a p_b
            let pre = if a == b { 0.5 } else { 1.0 } * time_weight * p.weights[a] * p.weights[b];
            let u = xa - xb;
            let axis = if u.norm2() > 0.0 { u } else { Velocity::new(1.0, 0.0, 0.0) };
            let mut moved = false;
            let mut any = false;
            for (omega, w) in quad.oriented(axis) {
                let bw = kernel.eval(u, omega) * w;
                if bw <= 0.0 {
                    continue;
                }
                any = true;
                let s = u.dot(omega);
                let c = grid.cell_of(xa - omega * s);
                let d = grid.cell_of(xb + omega * s);
                if c != Some(a) && c != Some(b) {
                    moved = true;
                }
                q.add_symmetric([tbin, a as u32, b as u32, cell_u32(c), cell_u32(d)], pre * bw);
            }
            if any {
                diag.pairs += 1;
                if !moved && a != b {
                    diag.unresolved_pairs += 1;
                }
            }
        }
    }
    Ok((q, diag))
}

/// Checks that every event of a raw log lies on the conservation set.
pub fn events_on_conservation_set(log: &EventLog, tol: f64) -> std::result::Result<(), usize> {
    match log.events.iter().position(|e| !e.on_conservation_set(tol)) {
        Some(k) => Err(k),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate_logged, CollisionEvent, SchedulerKind};
    use crate::geometry::{Configuration, Dim};
    use crate::kernel::kappa;
    use crate::rng::stream_rng;
    use rand::Rng;
    use std::f64::consts::PI;

    fn grid() -> GridSpec {
        GridSpec::new(Dim::Three, 2.0, 8, 1, 1.0).unwrap()
    }

    fn swap_event(v: Velocity) -> CollisionEvent {
        CollisionEvent {
            t: 0.5,
            i: 0,
            j: 1,
            omega: v * (1.0 / v.norm()),
            pre_i: v,
            pre_j: -v,
            post_i: -v,
            post_j: v,
        }
    }

    #[test]
    fn empty_and_single_event_flows() {
        let g = grid();
        let log = EventLog::new(1.0);
        assert_eq!(empirical_flow(&log, &g, 10).unwrap().mass(), 0.0);
        let mut log = EventLog::new(1.0);
        log.events.push(swap_event(Velocity::new(0.7, 0.2, -0.3)));
        let q = empirical_flow(&log, &g, 10).unwrap();
        assert!((q.mass() - 0.1).abs() < 1e-15);
        assert_eq!(q.symmetry_defect(), 0.0);
        // a head-on swap is its own time reversal at cell level
        assert_eq!(upsilon_pushforward(&q), q);
    }

    #[test]
    fn upsilon_is_a_mass_preserving_involution() {
        let g = grid();
        let mut rng = stream_rng(3, 3);
        let v: Vec<Velocity> = (0..30)
            .map(|_| Velocity::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let cfg = crate::engine::reproject(&Configuration::new(Dim::Three, 0.4, v).unwrap()).unwrap();
        let (log, _) = simulate_logged(&cfg, 1.0, KernelSpec::HardSphere, SchedulerKind::ExactGillespie, &mut rng, &[]).unwrap();
        assert!(events_on_conservation_set(&log, 1e-12).is_ok());
        let q = empirical_flow(&log, &g, 30).unwrap();
        assert!((q.mass() - log.len() as f64 / 30.0).abs() < 1e-12);
        let u = q.upsilon();
        assert_eq!(u.upsilon(), q);
        assert!((u.mass() - q.mass()).abs() < 1e-15);
    }

    #[test]
    fn point_mass_has_no_flux() {
        let g = grid();
        let mut p = GridMeasure::zeros(g);
        p.weights[g.cell_of(Velocity::new(0.3, 0.3, 0.3)).unwrap()] = 1.0;
        let q = collision_flux(&p, KernelSpec::HardSphere, 1.0, 32).unwrap();
        assert_eq!(q.mass(), 0.0);
    }

    #[test]
    fn two_atom_flux_mass() {
        let g = grid();
        let mut p = GridMeasure::zeros(g);
        let a = g.cell_of(Velocity::new(0.75, 0.25, 0.25)).unwrap();
        let b = g.cell_of(Velocity::new(-1.25, 0.25, 0.25)).unwrap();
        assert_eq!((g.centre(a) - g.centre(b)).norm(), 2.0);
        p.weights[a] = 0.5;
        p.weights[b] = 0.5;
        let t = 3.0;
        let q = collision_flux(&p, KernelSpec::HardSphere, t, 32).unwrap();
        assert!((q.mass() - t * PI / 2.0).abs() < 1e-12);
        assert!(q.symmetry_defect() < 1e-15);
    }

    #[test]
    fn flux_mass_matches_monte_carlo() {
        let g = grid();
        let mut rng = stream_rng(11, 0);
        let mut p = GridMeasure::zeros(g);
        for _ in 0..12 {
            let c = rng.random_range(0..g.len());
            p.weights[c] += rng.random::<f64>();
        }
        let p = p.normalized().unwrap();
        let q = collision_flux(&p, KernelSpec::HardSphere, 1.0, 32).unwrap();
        // sample (v, v*, ω) with ω uniform, estimator ½ |S²| B(u, ω)
        let sup = p.support();
        let cdf: Vec<f64> = sup
            .iter()
            .scan(0.0, |s, &c| {
                *s += p.weights[c];
                Some(*s)
            })
            .collect();
        let draw = |rng: &mut crate::rng::SimRng| {
            let r = rng.random::<f64>() * cdf[cdf.len() - 1];
            g.centre(sup[cdf.iter().position(|&x| x > r).unwrap_or(sup.len() - 1)])
        };
        let m = 100_000;
        let mut xs = Vec::with_capacity(m);
        for _ in 0..m {
            let v = draw(&mut rng);
            let w = draw(&mut rng);
            let z = 2.0 * rng.random::<f64>() - 1.0;
            let phi = 2.0 * PI * rng.random::<f64>();
            let s = (1.0 - z * z).sqrt();
            let om = Velocity::new(s * phi.cos(), s * phi.sin(), z);
            xs.push(0.5 * 4.0 * PI * KernelSpec::HardSphere.eval(v - w, om));
        }
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let se = (var / m as f64).sqrt();
        assert!((q.mass() - mean).abs() < 3.0 * se, "{} vs {} ± {}", q.mass(), mean, se);
        assert!(kappa(Dim::Three) > 0.0);
    }

    #[test]
    fn reflection_invariance_for_symmetric_measures() {
        // P(v) = P(-v) ⇒ Q is invariant under v ↦ -v on all four slots
        let g = GridSpec::new(Dim::Three, 2.0, 6, 1, 1.0).unwrap();
        let mut rng = stream_rng(12, 0);
        let mut p = GridMeasure::zeros(g);
        for _ in 0..6 {
            let c = rng.random_range(0..g.len());
            let w = rng.random::<f64>();
            let k = g.unflat(c);
            let r = [5 - k[0], 5 - k[1], 5 - k[2]];
            p.weights[c] += w;
            p.weights[g.flat(r)] += w;
        }
        let p = p.normalized().unwrap();
        let q = collision_flux(&p, KernelSpec::HardSphere, 1.0, 32).unwrap();
        let refl = |c: u32| {
            if c == OUTSIDE {
                c
            } else {
                let k = g.unflat(c as usize);
                g.flat([5 - k[0], 5 - k[1], 5 - k[2]]) as u32
            }
        };
        let mut diff = 0.0;
        for (k, &w) in &q.weights {
            let r = [k[0], refl(k[1]), refl(k[2]), refl(k[3]), refl(k[4])];
            diff += (q.get(&r) - w).abs();
        }
        assert!(diff <= 1e-6 * q.mass(), "{diff}");
    }
}
