//! Energy-conserving collision lattice on cell centres.
//!
//! Two centres x_a, x_b can only exchange momentum along lattice offsets j
//! with x_a + hj, x_b - hj again centres of equal total energy, i.e.
//! j·(j + Δk) = 0 for Δk = k_a - k_b. Quadrature nodes ω are snapped to
//! the nearest such offset and the resulting weights are averaged over the
//! pair exchanges and over Υ. With this kernel
//!
//! * mass, momentum and energy are conserved exactly at centre level,
//! * any f ∝ exp(-β|x|²/2) satisfies f_a f_b = f_c f_d on the support,
//! * Q and Υ#Q are built from the same symmetric weights.

use std::sync::OnceLock;

use crate::error::{invalid, Result};
use crate::geometry::{compensated_sum, CompensatedSum, Velocity};
use crate::kernel::{KernelSpec, SphereQuadrature};
use crate::par;

use super::flux::FluxMeasure;
use super::grid::{CellIndex, GridMeasure, GridSpec};

type Row = Vec<(CellIndex, f64)>;

#[derive(Clone)]
pub struct LatticeKernel {
    grid: GridSpec,
    kernel: KernelSpec,
    quad: SphereQuadrature,
    span: i32,
    raw: Vec<OnceLock<Row>>,
    sym: Vec<OnceLock<Row>>,
}

impl std::fmt::Debug for LatticeKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatticeKernel")
            .field("grid", &self.grid)
            .field("kernel", &self.kernel)
            .field("nodes", &self.quad.len())
            .finish()
    }
}

/// Integer offsets j with j·(j + dk) = 0, in lexicographic order.
pub fn thales_points(dk: CellIndex, three: bool) -> Vec<CellIndex> {
    // y = 2j + dk has |y| = |dk| and the parity of dk componentwise
    let r2: i64 = dk.iter().map(|&x| (x as i64) * (x as i64)).sum();
    let r = (r2 as f64).sqrt().floor() as i64 + 1;
    let par = |x: i64, k: i32| (x - k as i64).rem_euclid(2) == 0;
    let mut out = Vec::new();
    for y0 in -r..=r {
        if !par(y0, dk[0]) || y0 * y0 > r2 {
            continue;
        }
        if three {
            for y1 in -r..=r {
                let rest = r2 - y0 * y0 - y1 * y1;
                if !par(y1, dk[1]) || rest < 0 {
                    continue;
                }
                if let Some(s) = isqrt_exact(rest) {
                    for y2 in if s == 0 { vec![0] } else { vec![-s, s] } {
                        if par(y2, dk[2]) {
                            out.push([
                                ((y0 - dk[0] as i64) / 2) as i32,
                                ((y1 - dk[1] as i64) / 2) as i32,
                                ((y2 - dk[2] as i64) / 2) as i32,
                            ]);
                        }
                    }
                }
            }
        } else {
            let rest = r2 - y0 * y0;
            if let Some(s) = isqrt_exact(rest) {
                for y1 in if s == 0 { vec![0] } else { vec![-s, s] } {
                    if par(y1, dk[1]) {
                        out.push([((y0 - dk[0] as i64) / 2) as i32, ((y1 - dk[1] as i64) / 2) as i32, 0]);
                    }
                }
            }
        }
    }
    out.sort();
    out
}

fn isqrt_exact(x: i64) -> Option<i64> {
    if x < 0 {
        return None;
    }
    let mut s = (x as f64).sqrt().round() as i64;
    while s * s > x {
        s -= 1;
    }
    while (s + 1) * (s + 1) <= x {
        s += 1;
    }
    (s * s == x).then_some(s)
}

#[inline]
fn add(a: CellIndex, b: CellIndex) -> CellIndex {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn sub(a: CellIndex, b: CellIndex) -> CellIndex {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn neg(a: CellIndex) -> CellIndex {
    [-a[0], -a[1], -a[2]]
}

#[inline]
fn scale2(a: CellIndex) -> CellIndex {
    [2 * a[0], 2 * a[1], 2 * a[2]]
}

fn lookup(row: &Row, j: CellIndex) -> f64 {
    row.binary_search_by(|(k, _)| k.cmp(&j)).map_or(0.0, |i| row[i].1)
}

impl LatticeKernel {
    pub fn new(grid: GridSpec, kernel: KernelSpec, n_omega: usize) -> Result<Self> {
        grid.validate()?;
        kernel.validate()?;
        let quad = SphereQuadrature::new(grid.dim, n_omega)?;
        let span = grid.n_cells as i32 - 1;
        let w = (2 * span + 1) as usize;
        let len = w.pow(grid.dim.get() as u32);
        Ok(Self {
            grid,
            kernel,
            quad,
            span,
            raw: (0..len).map(|_| OnceLock::new()).collect(),
            sym: (0..len).map(|_| OnceLock::new()).collect(),
        })
    }

    /// Same geometry and cached rows with a different time binning.
    pub fn retimed(&self, n_t: usize, horizon: f64) -> Result<Self> {
        let grid = GridSpec::new(self.grid.dim, self.grid.v_max, self.grid.n_cells, n_t, horizon)?;
        Ok(Self { grid, ..self.clone() })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    fn slot(&self, dk: CellIndex) -> Option<usize> {
        let s = self.span;
        if dk.iter().any(|&x| x < -s || x > s) {
            return None;
        }
        let w = (2 * s + 1) as usize;
        let i = |x: i32| (x + s) as usize;
        let k2 = if self.grid.dim.get() == 3 { i(dk[2]) } else { 0 };
        Some(i(dk[0]) + w * (i(dk[1]) + w * k2))
    }

    fn raw_row(&self, dk: CellIndex) -> Option<&Row> {
        let s = self.slot(dk)?;
        Some(self.raw[s].get_or_init(|| self.compute_raw(dk)))
    }

    fn compute_raw(&self, dk: CellIndex) -> Row {
        let pts = thales_points(dk, self.grid.dim.get() == 3);
        let dkv = Velocity::new(dk[0] as f64, dk[1] as f64, dk[2] as f64);
        let u = dkv * self.grid.h();
        let axis = if dkv.norm2() > 0.0 { dkv } else { Velocity::new(1.0, 0.0, 0.0) };
        let mut acc = vec![0.0; pts.len()];
        for (omega, w) in self.quad.oriented(axis) {
            let bw = self.kernel.eval(u, omega) * w;
            if bw <= 0.0 {
                continue;
            }
            let jc = omega * (-dkv.dot(omega));
            let mut best = (f64::INFINITY, 0);
            for (n, p) in pts.iter().enumerate() {
                let dist = (Velocity::new(p[0] as f64, p[1] as f64, p[2] as f64) - jc).norm2();
                if dist < best.0 {
                    best = (dist, n);
                }
            }
            acc[best.1] += bw;
        }
        pts.into_iter().zip(acc).filter(|(_, w)| *w > 0.0).collect()
    }

    fn raw_value(&self, dk: CellIndex, j: CellIndex) -> f64 {
        self.raw_row(dk).map_or(0.0, |r| lookup(r, j))
    }

    /// Symmetrized rate weights G(Δk, j) for the transition (a, b) → (a + j, b - j).
    pub fn row(&self, dk: CellIndex) -> &[(CellIndex, f64)] {
        match self.slot(dk) {
            Some(s) => self.sym[s].get_or_init(|| self.compute_sym(dk)),
            None => &[],
        }
    }

    fn compute_sym(&self, dk: CellIndex) -> Row {
        let mut out = Vec::new();
        for j in thales_points(dk, self.grid.dim.get() == 3) {
            let m = add(dk, scale2(j));
            let images = [
                (dk, j),
                (neg(dk), add(j, dk)),
                (dk, sub(neg(dk), j)),
                (neg(dk), neg(j)),
                (m, neg(j)),
                (neg(m), add(dk, j)),
                (m, sub(neg(dk), j)),
                (neg(m), j),
            ];
            let g = 0.125 * images.iter().map(|&(a, b)| self.raw_value(a, b)).sum::<f64>();
            if g > 0.0 {
                out.push((j, g));
            }
        }
        out
    }

    /// Kernel weight of the cell tuple (a, b) → (c, d); zero off the lattice.
    pub fn value(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let g = &self.grid;
        let (ka, kb, kc, kd) = (g.unflat(a), g.unflat(b), g.unflat(c), g.unflat(d));
        let j = sub(kc, ka);
        if sub(kb, kd) != j {
            return 0.0;
        }
        lookup_slice(self.row(sub(ka, kb)), j)
    }

    /// Fills the cache for every offset between occupied cells, in parallel.
    pub fn prepare(&self, support: &[usize]) {
        let mut dks: Vec<CellIndex> = Vec::new();
        let ks: Vec<CellIndex> = support.iter().map(|&c| self.grid.unflat(c)).collect();
        let mut seen = vec![false; self.sym.len()];
        for a in &ks {
            for b in &ks {
                let dk = sub(*a, *b);
                if let Some(s) = self.slot(dk) {
                    if !seen[s] {
                        seen[s] = true;
                        dks.push(dk);
                    }
                }
            }
        }
        par::map_slice(&dks, |&dk| {
            self.raw_row(dk);
        });
        par::map_slice(&dks, |&dk| {
            self.row(dk);
        });
    }

    /// Visits every in-box tuple (a, b, c, d, G) with a, b in the support of `p`.
    pub fn for_each_tuple(&self, p: &GridMeasure, mut f: impl FnMut(usize, usize, usize, usize, f64)) {
        let g = &self.grid;
        let sup = p.support();
        self.prepare(&sup);
        for &a in &sup {
            let ka = g.unflat(a);
            for &b in &sup {
                let kb = g.unflat(b);
                for &(j, w) in self.row(sub(ka, kb)) {
                    let (kc, kd) = (add(ka, j), sub(kb, j));
                    if g.contains(kc) && g.contains(kd) {
                        f(a, b, g.flat(kc), g.flat(kd), w);
                    }
                }
            }
        }
    }

    /// Rate of the transitions leaving each cell, per unit of its own mass.
    pub fn loss_rates(&self, p: &GridMeasure) -> Vec<f64> {
        let mut out = vec![0.0; p.weights.len()];
        self.for_each_tuple(p, |a, b, c, d, w| {
            if !(c == a && d == b) && !(c == b && d == a) {
                // ½ p_a p_b G leaves both a and b; summed over both orderings
                out[a] += p.weights[b] * w;
            }
        });
        out
    }

    /// Largest Δt keeping every cell nonnegative under one Euler step.
    pub fn max_stable_dt(&self, p: &GridMeasure) -> f64 {
        let r = self.loss_rates(p).into_iter().fold(0.0, f64::max);
        if r > 0.0 {
            1.0 / r
        } else {
            f64::INFINITY
        }
    }
}

fn lookup_slice(row: &[(CellIndex, f64)], j: CellIndex) -> f64 {
    row.binary_search_by(|(k, _)| k.cmp(&j)).map_or(0.0, |i| row[i].1)
}

/// Which flux a [`lattice_flux`] builds from the path densities.
///
/// Υ#Q^{P⊗P} is `Product` followed by [`FluxMeasure::upsilon`], since G is
/// Υ-invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeFluxKind {
    /// Q^{P⊗P}: ½ p_a p_b G.
    Product,
    /// R^{P⊗P}: ½ sqrt(p_a p_b p_c p_d) G.
    Geometric,
}

/// Flux on every time bin of `path`, with weights scaled by the bin widths.
pub fn lattice_flux(lk: &LatticeKernel, path: &[GridMeasure], widths: &[f64], kind: LatticeFluxKind) -> Result<FluxMeasure> {
    if path.len() != widths.len() {
        return Err(invalid("widths", "one width per path element"));
    }
    let mut q = FluxMeasure::new(*lk.grid());
    for (tb, (p, &dt)) in path.iter().zip(widths).enumerate() {
        lk.grid().check_same(&p.grid)?;
        let w = &p.weights;
        lk.for_each_tuple(p, |a, b, c, d, g| {
            let v = match kind {
                LatticeFluxKind::Product => w[a] * w[b],
                LatticeFluxKind::Geometric => (w[a] * w[b] * w[c] * w[d]).sqrt(),
            } * 0.5
                * g
                * dt;
            if v > 0.0 {
                q.add([tb as u32, a as u32, b as u32, c as u32, d as u32], v);
            }
        });
    }
    Ok(q)
}

/// 𝒟(p) = Σ G (p_a p_b - sqrt(p_a p_b p_c p_d)) over ordered pairs, as
/// (first, second) sums. Null and swap moves cancel and are left out.
pub fn lattice_dirichlet(lk: &LatticeKernel, p: &GridMeasure) -> (f64, f64) {
    let w = &p.weights;
    let mut first = CompensatedSum::new();
    let mut second = CompensatedSum::new();
    lk.for_each_tuple(p, |a, b, c, d, g| {
        if (c == a && d == b) || (c == b && d == a) {
            return;
        }
        first.add(g * w[a] * w[b]);
        second.add(g * (w[a] * w[b] * w[c] * w[d]).sqrt());
    });
    (first.value(), second.value())
}

/// Total mass of Q^{P⊗P} per unit time restricted to in-box tuples.
pub fn lattice_flux_rate(lk: &LatticeKernel, p: &GridMeasure) -> f64 {
    let w = &p.weights;
    let mut acc = Vec::new();
    lk.for_each_tuple(p, |a, b, _, _, g| acc.push(0.5 * g * w[a] * w[b]));
    compensated_sum(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Dim;
    use crate::kernel::kappa;

    #[test]
    fn thales_points_conserve_energy() {
        for dk in [[1, 0, 0], [2, 0, 0], [1, 1, 0], [3, -2, 1], [0, 0, 0], [4, 4, 2]] {
            let pts = thales_points(dk, true);
            assert!(pts.contains(&[0, 0, 0]));
            assert!(pts.contains(&neg(dk)));
            for j in &pts {
                let dot: i32 = (0..3).map(|a| j[a] * (j[a] + dk[a])).sum();
                assert_eq!(dot, 0);
            }
        }
        // adjacent cells have only the trivial offsets
        assert_eq!(thales_points([1, 0, 0], true).len(), 2);
        assert_eq!(thales_points([2, 0, 0], true).len(), 6);
        let p2 = thales_points([2, 0, 0], false);
        assert_eq!(p2.len(), 4);
    }

    #[test]
    fn rows_carry_the_full_rate() {
        let g = GridSpec::new(Dim::Three, 3.0, 12, 1, 1.0).unwrap();
        let lk = LatticeKernel::new(g, KernelSpec::HardSphere, 64).unwrap();
        let dk = [3, -2, 1];
        let raw: f64 = lk.raw_row(dk).unwrap().iter().map(|x| x.1).sum();
        let speed = g.h() * 14f64.sqrt();
        assert!((raw - 0.5 * kappa(Dim::Three) * speed).abs() < 1e-10 * raw);
    }

    #[test]
    fn value_is_group_invariant() {
        let g = GridSpec::new(Dim::Three, 3.0, 10, 1, 1.0).unwrap();
        let lk = LatticeKernel::new(g, KernelSpec::HardSphere, 32).unwrap();
        let ka = [6, 3, 4];
        let kb = [2, 5, 3];
        let dk = sub(ka, kb);
        let mut checked = 0;
        for &(j, w) in lk.row(dk) {
            let (kc, kd) = (add(ka, j), sub(kb, j));
            if !(g.contains(kc) && g.contains(kd)) {
                continue;
            }
            let (a, b, c, d) = (g.flat(ka), g.flat(kb), g.flat(kc), g.flat(kd));
            for (x, y, z, t) in [(b, a, c, d), (a, b, d, c), (c, d, a, b), (d, c, b, a)] {
                assert!((lk.value(x, y, z, t) - w).abs() < 1e-14 * w);
            }
            checked += 1;
        }
        assert!(checked > 2);
    }
}
