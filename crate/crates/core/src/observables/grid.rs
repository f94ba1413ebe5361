use serde::{Deserialize, Serialize};

use crate::engine::EventLog;
use crate::error::{invalid, KacError, Result};
use crate::geometry::{compensated_sum, CompensatedSum, Configuration, Dim, Velocity};

/// Regular velocity lattice on [-v_max, v_max]^d with `n_t` time bins on [0, horizon].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: Dim,
    pub v_max: f64,
    pub n_cells: usize,
    pub n_t: usize,
    pub horizon: f64,
}

/// Multi-index of a cell; the third entry is 0 in the plane.
pub type CellIndex = [i32; 3];

impl GridSpec {
    pub fn new(dim: Dim, v_max: f64, n_cells: usize, n_t: usize, horizon: f64) -> Result<Self> {
        let g = Self {
            dim,
            v_max,
            n_cells,
            n_t,
            horizon,
        };
        g.validate()?;
        Ok(g)
    }

    /// v_max = 4 sqrt(2e), 32 cells per axis, 10 time bins.
    pub fn default_for(dim: Dim, e: f64, horizon: f64) -> Result<Self> {
        Self::new(dim, 4.0 * (2.0 * e).sqrt(), 32, 10, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(invalid("grid.v_max", "must be positive"));
        }
        if self.n_cells == 0 || self.n_cells > 1024 {
            return Err(invalid("grid.n_cells", "must lie in 1..=1024"));
        }
        if self.n_t == 0 {
            return Err(invalid("grid.n_t", "at least one time bin"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("grid.horizon", "must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn h(&self) -> f64 {
        2.0 * self.v_max / self.n_cells as f64
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim.get() as i32)
    }

    /// Number of cells n^d.
    #[inline]
    pub fn len(&self) -> usize {
        self.n_cells.pow(self.dim.get() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn contains(&self, k: CellIndex) -> bool {
        let n = self.n_cells as i32;
        let d = self.dim.get();
        (0..d).all(|a| k[a] >= 0 && k[a] < n) && (d == 3 || k[2] == 0)
    }

    /// Multi-index of the cell containing `v` (may lie outside the box).
    #[inline]
    pub fn index_of(&self, v: Velocity) -> CellIndex {
        let h = self.h();
        let mut k = [0i32; 3];
        for a in 0..self.dim.get() {
            k[a] = ((v.0[a] + self.v_max) / h).floor() as i32;
        }
        k
    }

    #[inline]
    pub fn flat(&self, k: CellIndex) -> usize {
        let n = self.n_cells;
        k[0] as usize + n * (k[1] as usize + n * k[2] as usize)
    }

    #[inline]
    pub fn unflat(&self, c: usize) -> CellIndex {
        let n = self.n_cells;
        [(c % n) as i32, ((c / n) % n) as i32, (c / (n * n)) as i32]
    }

    /// Flat cell of `v`, or `None` for the overflow region.
    #[inline]
    pub fn cell_of(&self, v: Velocity) -> Option<usize> {
        let k = self.index_of(v);
        self.contains(k).then(|| self.flat(k))
    }

    #[inline]
    pub fn centre_of_index(&self, k: CellIndex) -> Velocity {
        let h = self.h();
        let mut x = [0.0; 3];
        for a in 0..self.dim.get() {
            x[a] = -self.v_max + (k[a] as f64 + 0.5) * h;
        }
        Velocity(x)
    }

    #[inline]
    pub fn centre(&self, c: usize) -> Velocity {
        self.centre_of_index(self.unflat(c))
    }

    pub fn bin_width(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    /// Time bin of `t`; t = horizon belongs to the last bin.
    #[inline]
    pub fn time_bin(&self, t: f64) -> usize {
        let b = (t / self.bin_width()).floor();
        if b < 0.0 {
            0
        } else {
            (b as usize).min(self.n_t - 1)
        }
    }

    pub fn bin_bounds(&self, b: usize) -> (f64, f64) {
        let w = self.bin_width();
        let hi = if b + 1 == self.n_t { self.horizon } else { (b + 1) as f64 * w };
        (b as f64 * w, hi)
    }

    pub(crate) fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(KacError::GridMismatch)
        }
    }
}

/// Nonnegative weights per cell plus the mass that fell outside the box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    pub grid: GridSpec,
    pub weights: Vec<f64>,
    pub overflow: f64,
}

impl GridMeasure {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            weights: vec![0.0; grid.len()],
            grid,
            overflow: 0.0,
        }
    }

    pub fn from_weights(grid: GridSpec, weights: Vec<f64>, overflow: f64) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(KacError::GridMismatch);
        }
        if weights.iter().chain(std::iter::once(&overflow)).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("weights", "must be finite and nonnegative"));
        }
        Ok(Self { grid, weights, overflow })
    }

    pub fn mass(&self) -> f64 {
        compensated_sum(self.weights.iter().copied()) + self.overflow
    }

    pub fn is_probability(&self) -> bool {
        (self.mass() - 1.0).abs() <= 1e-12
    }

    /// Rescales to total mass 1 (overflow included).
    pub fn normalized(&self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(invalid("measure", "zero mass cannot be normalized"));
        }
        Ok(Self {
            grid: self.grid,
            weights: self.weights.iter().map(|w| w / m).collect(),
            overflow: self.overflow / m,
        })
    }

    #[inline]
    pub fn density(&self, c: usize) -> f64 {
        self.weights[c] / self.grid.cell_volume()
    }

    /// Occupied cells in increasing index order.
    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&c| self.weights[c] > 0.0).collect()
    }

    /// Mean velocity with cell centres as representatives.
    pub fn mean_velocity(&self) -> Velocity {
        let mut acc = [CompensatedSum::new(); 3];
        for (c, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                let x = self.grid.centre(c);
                for a in 0..3 {
                    acc[a].add(w * x.0[a]);
                }
            }
        }
        Velocity([acc[0].value(), acc[1].value(), acc[2].value()])
    }

    /// ∫ |v|²/2 with cell centres as representatives.
    pub fn energy(&self) -> f64 {
        compensated_sum(
            self.weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w > 0.0)
                .map(|(c, w)| w * 0.5 * self.grid.centre(c).norm2()),
        )
    }

    /// Pushforward under a cell map into `target_len` cells.
    pub fn pushforward(&self, map: impl Fn(usize) -> usize, target_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; target_len];
        for (c, &w) in self.weights.iter().enumerate() {
            out[map(c)] += w;
        }
        out
    }

    /// Total variation distance (1/2)Σ|p - q|, overflow treated as one more cell.
    pub fn total_variation(&self, other: &GridMeasure) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        let s = compensated_sum(self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()));
        Ok(0.5 * (s + (self.overflow - other.overflow).abs()))
    }
}

/// Binned empirical measure with moments taken from the raw velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub measure: GridMeasure,
    pub raw_mean: Velocity,
    pub raw_energy: f64,
}

/// Each particle puts mass 1/N in its cell, or in the overflow.
pub fn empirical_measure(cfg: &Configuration, grid: &GridSpec) -> Result<EmpiricalMeasure> {
    if cfg.dim() != grid.dim {
        return Err(KacError::GridMismatch);
    }
    let n = cfg.len() as f64;
    let mut m = GridMeasure::zeros(*grid);
    let mut overflow = 0usize;
    for &v in cfg.velocities() {
        match grid.cell_of(v) {
            Some(c) => m.weights[c] += 1.0 / n,
            None => overflow += 1,
        }
    }
    m.overflow = overflow as f64 / n;
    Ok(EmpiricalMeasure {
        measure: m,
        raw_mean: cfg.mean_velocity(),
        raw_energy: cfg.mean_energy(),
    })
}

/// Exact time average of π^N_t over each time bin.
///
/// Replays `log` from `cfg0`; particle i occupies its cell for the whole
/// interval between its jumps, so the averages carry no quadrature error.
pub fn binned_path(cfg0: &Configuration, log: &EventLog, grid: &GridSpec) -> Result<Vec<GridMeasure>> {
    if cfg0.dim() != grid.dim {
        return Err(KacError::GridMismatch);
    }
    let n = cfg0.len();
    let mut out = vec![GridMeasure::zeros(*grid); grid.n_t];
    let mut cell: Vec<Option<usize>> = cfg0.velocities().iter().map(|&v| grid.cell_of(v)).collect();
    let mut since = vec![0.0f64; n];
    let t_end = grid.horizon;
    let scale = 1.0 / n as f64;

    let deposit = |out: &mut [GridMeasure], c: Option<usize>, t0: f64, t1: f64| {
        if t1 <= t0 {
            return;
        }
        let b0 = grid.time_bin(t0);
        let b1 = grid.time_bin(t1);
        for b in b0..=b1 {
            let (lo, hi) = grid.bin_bounds(b);
            let len = t1.min(hi) - t0.max(lo);
            if len > 0.0 {
                let w = scale * len / (hi - lo);
                match c {
                    Some(c) => out[b].weights[c] += w,
                    None => out[b].overflow += w,
                }
            }
        }
    };

    for ev in log.events.iter().take_while(|e| e.t <= t_end) {
        for (idx, post) in [(ev.i as usize, ev.post_i), (ev.j as usize, ev.post_j)] {
            if idx >= n {
                return Err(KacError::IndexOutOfRange { index: idx, n });
            }
            deposit(&mut out, cell[idx], since[idx], ev.t);
            cell[idx] = grid.cell_of(post);
            since[idx] = ev.t;
        }
    }
    for i in 0..n {
        deposit(&mut out, cell[i], since[i], t_end);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate_logged, SchedulerKind};
    use crate::kernel::KernelSpec;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn grid3() -> GridSpec {
        GridSpec::new(Dim::Three, 2.0, 8, 4, 1.0).unwrap()
    }

    #[test]
    fn indexing_round_trips() {
        let g = grid3();
        assert_eq!(g.h(), 0.5);
        for c in [0, 17, 100, g.len() - 1] {
            let x = g.centre(c);
            assert_eq!(g.cell_of(x), Some(c));
        }
        assert_eq!(g.cell_of(Velocity::new(2.5, 0.0, 0.0)), None);
        assert_eq!(g.time_bin(1.0), 3);
        assert_eq!(g.time_bin(0.26), 1);
        let p = GridSpec::new(Dim::Two, 1.0, 4, 1, 1.0).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p.cell_of(p.centre(7)), Some(7));
    }

    #[test]
    fn default_grid() {
        let g = GridSpec::default_for(Dim::Three, 1.0, 2.0).unwrap();
        assert_eq!(g.n_cells, 32);
        assert!((g.v_max - 4.0 * 2f64.sqrt()).abs() < 1e-15);
        assert!(GridSpec::new(Dim::Three, -1.0, 8, 1, 1.0).is_err());
    }

    #[test]
    fn two_opposite_particles() {
        let e: f64 = 1.0;
        let s = (2.0 * e).sqrt();
        let cfg = Configuration::new(Dim::Three, e, vec![Velocity::new(s, 0.0, 0.0), Velocity::new(-s, 0.0, 0.0)]).unwrap();
        let em = empirical_measure(&cfg, &grid3()).unwrap();
        let sup = em.measure.support();
        assert_eq!(sup.len(), 2);
        for c in sup {
            assert_eq!(em.measure.weights[c], 0.5);
        }
        assert!((em.raw_energy - e).abs() < 1e-15);
        assert!(em.measure.is_probability());
    }

    #[test]
    fn path_averages_are_probabilities_and_match_static_case() {
        let g = grid3();
        let mut rng = stream_rng(4, 4);
        let v: Vec<Velocity> = (0..40)
            .map(|_| Velocity::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let cfg = crate::engine::reproject(&Configuration::new(Dim::Three, 0.5, v).unwrap()).unwrap();
        let empty = EventLog::new(1.0);
        let path = binned_path(&cfg, &empty, &g).unwrap();
        let stat = empirical_measure(&cfg, &g).unwrap().measure;
        for p in &path {
            assert!(p.total_variation(&stat).unwrap() < 1e-12);
        }
        let (log, _) = simulate_logged(&cfg, 1.0, KernelSpec::HardSphere, SchedulerKind::MajorantRejection, &mut rng, &[]).unwrap();
        assert!(!log.is_empty());
        for p in binned_path(&cfg, &log, &g).unwrap() {
            assert!((p.mass() - 1.0).abs() < 1e-12);
        }
    }
}
