//! Q^{π⊗π} for binned Kac data, evaluated tuple by tuple.
//!
//! The binned empirical flow lives on (bin, c, c*, c', c'*) tuples whose
//! post cells come from exact collisions, not from cell centres. The
//! reference therefore spreads each pre pair over its post cells with a
//! fine rule: every cell is represented by its 2^d sub-cell centres (so a
//! pair inside one cell still has a relative velocity) and ω runs over a
//! rule whose size grows with the pair distance. The resulting weights
//! depend on Δk = k_a - k_b only and are cached per offset.
//!
//! The mollified reference convolves the post slots with the binomial
//! stencil (¼, ½, ¼) per axis.

use std::sync::OnceLock;

use crate::error::Result;
use crate::geometry::Velocity;
use crate::kernel::{KernelSpec, SphereQuadrature};
use crate::par;

use super::flux::{FluxKey, OUTSIDE};
use super::grid::{CellIndex, GridMeasure, GridSpec};

/// Post offsets (j_c, j_d) relative to (k_a, k_b).
type PostKey = [i16; 6];
type Row = Vec<(PostKey, f64)>;

pub struct EmpiricalReference {
    grid: GridSpec,
    kernel: KernelSpec,
    n_min: usize,
    n_max: usize,
    span: i32,
    raw: Vec<OnceLock<Row>>,
    sym: Vec<OnceLock<Row>>,
    rate: Vec<OnceLock<f64>>,
}

impl std::fmt::Debug for EmpiricalReference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmpiricalReference").field("grid", &self.grid).field("kernel", &self.kernel).finish()
    }
}

fn sub_offsets(d: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    let s = [-0.25, 0.25];
    for &x in &s {
        for &y in &s {
            if d == 3 {
                for &z in &s {
                    out.push([x, y, z]);
                }
            } else {
                out.push([x, y, 0.0]);
            }
        }
    }
    out
}

fn lookup(row: &[(PostKey, f64)], k: &PostKey) -> f64 {
    row.binary_search_by(|(x, _)| x.cmp(k)).map_or(0.0, |i| row[i].1)
}

#[inline]
fn key(jc: CellIndex, jd: CellIndex) -> Option<PostKey> {
    let mut k = [0i16; 6];
    for a in 0..3 {
        k[a] = i16::try_from(jc[a]).ok()?;
        k[a + 3] = i16::try_from(jd[a]).ok()?;
    }
    Some(k)
}

impl EmpiricalReference {
    /// `n_min` nodes at short range, growing like 4π(|Δk|+1)² up to `n_max`.
    pub fn new(grid: GridSpec, kernel: KernelSpec, n_min: usize, n_max: usize) -> Result<Self> {
        grid.validate()?;
        kernel.validate()?;
        SphereQuadrature::new(grid.dim, n_min)?;
        let span = grid.n_cells as i32 - 1;
        let w = (2 * span + 1) as usize;
        let len = w.pow(grid.dim.get() as u32);
        Ok(Self {
            grid,
            kernel,
            n_min,
            n_max: n_max.max(n_min),
            span,
            raw: (0..len).map(|_| OnceLock::new()).collect(),
            sym: (0..len).map(|_| OnceLock::new()).collect(),
            rate: (0..len).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
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

    fn nodes_for(&self, dk: CellIndex) -> usize {
        let r = (dk.iter().map(|&x| (x * x) as f64).sum::<f64>()).sqrt() + 1.0;
        let want = match self.grid.dim.get() {
            3 => 4.0 * std::f64::consts::PI * r * r,
            _ => 8.0 * r,
        };
        (want.ceil() as usize).clamp(self.n_min, self.n_max)
    }

    fn compute_raw(&self, dk: CellIndex) -> Row {
        let d = self.grid.dim.get();
        let h = self.grid.h();
        let quad = match SphereQuadrature::new(self.grid.dim, self.nodes_for(dk)) {
            Ok(q) => q,
            Err(_) => return Vec::new(),
        };
        let subs = sub_offsets(d);
        let norm = 1.0 / (subs.len() * subs.len()) as f64;
        let cb = [-dk[0] as f64, -dk[1] as f64, -dk[2] as f64];
        let mut acc: std::collections::BTreeMap<PostKey, f64> = std::collections::BTreeMap::new();
        for sa in &subs {
            let xa = Velocity(*sa) * h;
            for sb in &subs {
                let xb = Velocity([cb[0] + sb[0], cb[1] + sb[1], cb[2] + sb[2]]) * h;
                let u = xa - xb;
                if u.norm2() == 0.0 {
                    continue;
                }
                for (omega, w) in quad.oriented(u) {
                    let bw = self.kernel.eval(u, omega) * w * norm;
                    if bw <= 0.0 {
                        continue;
                    }
                    let s = u.dot(omega);
                    let pc = xa - omega * s;
                    let pd = xb + omega * s;
                    let mut jc = [0i32; 3];
                    let mut jd = [0i32; 3];
                    for a in 0..d {
                        jc[a] = (pc.0[a] / h + 0.5).floor() as i32;
                        jd[a] = (pd.0[a] / h - cb[a] + 0.5).floor() as i32;
                    }
                    if let Some(k) = key(jc, jd) {
                        *acc.entry(k).or_insert(0.0) += bw;
                    }
                }
            }
        }
        acc.into_iter().collect()
    }

    fn raw_row(&self, dk: CellIndex) -> &[(PostKey, f64)] {
        match self.slot(dk) {
            Some(s) => self.raw[s].get_or_init(|| self.compute_raw(dk)),
            None => &[],
        }
    }

    /// Rows averaged over the pre-pair and post-pair exchanges.
    fn sym_row(&self, dk: CellIndex) -> &[(PostKey, f64)] {
        match self.slot(dk) {
            Some(s) => self.sym[s].get_or_init(|| self.compute_sym(dk)),
            None => &[],
        }
    }

    fn compute_sym(&self, dk: CellIndex) -> Row {
        let m = [-dk[0], -dk[1], -dk[2]];
        let fwd = self.raw_row(dk);
        let bwd = self.raw_row(m);
        let mut acc: std::collections::BTreeMap<PostKey, f64> = std::collections::BTreeMap::new();
        let d16 = [dk[0] as i16, dk[1] as i16, dk[2] as i16];
        // (b,a,c,d): (-Δk; jc+Δk, jd-Δk); (a,b,d,c): (Δk; jd-Δk, jc+Δk); (b,a,d,c): (-Δk; jd, jc)
        for (k, w) in fwd {
            *acc.entry(*k).or_insert(0.0) += 0.25 * w;
            let swapped = [
                k[3] - d16[0],
                k[4] - d16[1],
                k[5] - d16[2],
                k[0] + d16[0],
                k[1] + d16[1],
                k[2] + d16[2],
            ];
            *acc.entry(swapped).or_insert(0.0) += 0.25 * w;
        }
        for (k, w) in bwd {
            // entries of the reversed pair seen from (a, b)
            let shifted = [
                k[0] - d16[0],
                k[1] - d16[1],
                k[2] - d16[2],
                k[3] + d16[0],
                k[4] + d16[1],
                k[5] + d16[2],
            ];
            *acc.entry(shifted).or_insert(0.0) += 0.25 * w;
            let crossed = [k[3], k[4], k[5], k[0], k[1], k[2]];
            *acc.entry(crossed).or_insert(0.0) += 0.25 * w;
        }
        acc.into_iter().collect()
    }

    /// Mean of ∫ B dω over the sub-cell pairs of offset Δk.
    fn pair_rate(&self, dk: CellIndex) -> f64 {
        let Some(s) = self.slot(dk) else { return 0.0 };
        *self.rate[s].get_or_init(|| {
            let d = self.grid.dim.get();
            let subs = sub_offsets(d);
            let h = self.grid.h();
            let mut acc = 0.0;
            for sa in &subs {
                for sb in &subs {
                    let mut u2 = 0.0;
                    for a in 0..d {
                        let x = h * (dk[a] as f64 + sa[a] - sb[a]);
                        u2 += x * x;
                    }
                    acc += self.kernel.omega_integral(u2.sqrt(), self.grid.dim);
                }
            }
            acc / (subs.len() * subs.len()) as f64
        })
    }

    /// Fills the row cache for every offset used by `keys`, in parallel.
    pub fn prepare<'a>(&self, keys: impl Iterator<Item = &'a FluxKey>) {
        let mut seen = vec![false; self.raw.len()];
        let mut dks = Vec::new();
        let mut push = |dk: CellIndex| {
            if let Some(s) = self.slot(dk) {
                if !seen[s] {
                    seen[s] = true;
                    dks.push(dk);
                }
            }
        };
        for k in keys {
            if k[1..].contains(&OUTSIDE) {
                continue;
            }
            let g = &self.grid;
            let [ka, kb, kc, kd] = [k[1], k[2], k[3], k[4]].map(|c| g.unflat(c as usize));
            for dk in [diff(ka, kb), diff(kc, kd)] {
                push(dk);
                push([-dk[0], -dk[1], -dk[2]]);
            }
        }
        par::map_slice(&dks, |&dk| {
            self.raw_row(dk);
        });
        par::map_slice(&dks, |&dk| {
            self.sym_row(dk);
        });
    }

    /// Kernel weight of (a, b) → (c, d), optionally mollified on (c, d).
    pub fn kernel_value(&self, a: usize, b: usize, c: usize, d: usize, mollified: bool) -> f64 {
        let g = &self.grid;
        let (ka, kb, kc, kd) = (g.unflat(a), g.unflat(b), g.unflat(c), g.unflat(d));
        let row = self.sym_row(diff(ka, kb));
        let jc = diff(kc, ka);
        let jd = diff(kd, kb);
        if !mollified {
            return key(jc, jd).map_or(0.0, |k| lookup(row, &k));
        }
        let dim = g.dim.get();
        let stencil = stencil(dim);
        let mut acc = 0.0;
        for (sc, wc) in &stencil {
            for (sd, wd) in &stencil {
                let c2 = [jc[0] - sc[0], jc[1] - sc[1], jc[2] - sc[2]];
                let d2 = [jd[0] - sd[0], jd[1] - sd[1], jd[2] - sd[2]];
                if let Some(k) = key(c2, d2) {
                    let v = lookup(row, &k);
                    if v > 0.0 {
                        acc += wc * wd * v;
                    }
                }
            }
        }
        acc
    }

    /// Q^{π⊗π} (or its Υ image) at one tuple: ½ Δt p_a p_b R(a, b → c, d).
    pub fn value(&self, key: &FluxKey, path: &[GridMeasure], widths: &[f64], mollified: bool, reversed: bool) -> f64 {
        let [t, a, b, c, d] = *key;
        if [a, b, c, d].contains(&OUTSIDE) {
            return 0.0;
        }
        let (a, b, c, d) = if reversed { (c, d, a, b) } else { (a, b, c, d) };
        let p = &path[t as usize].weights;
        let pre = p[a as usize] * p[b as usize];
        if pre == 0.0 {
            return 0.0;
        }
        0.5 * widths[t as usize] * pre * self.kernel_value(a as usize, b as usize, c as usize, d as usize, mollified)
    }

    /// Total mass ½ Σ_bins Δt Σ_{a,b} p_a p_b ∫B (posts outside the box included).
    pub fn mass(&self, path: &[GridMeasure], widths: &[f64]) -> f64 {
        let g = &self.grid;
        let per_bin = par::map_indices(path.len(), |t| {
            let p = &path[t];
            let sup = p.support();
            let ks: Vec<CellIndex> = sup.iter().map(|&c| g.unflat(c)).collect();
            let mut s = 0.0;
            for (ia, &a) in sup.iter().enumerate() {
                let mut row = 0.0;
                for (ib, &b) in sup.iter().enumerate() {
                    row += p.weights[b] * self.pair_rate(diff(ks[ia], ks[ib]));
                }
                s += p.weights[a] * row;
            }
            0.5 * widths[t] * s
        });
        per_bin.iter().sum()
    }
}

#[inline]
fn diff(a: CellIndex, b: CellIndex) -> CellIndex {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn stencil(d: usize) -> Vec<([i32; 3], f64)> {
    let w1 = [(-1, 0.25), (0, 0.5), (1, 0.25)];
    let mut out = Vec::new();
    for &(x, wx) in &w1 {
        for &(y, wy) in &w1 {
            if d == 3 {
                for &(z, wz) in &w1 {
                    out.push(([x, y, z], wx * wy * wz));
                }
            } else {
                out.push(([x, y, 0], wx * wy));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Dim;
    use crate::kernel::kappa;

    #[test]
    fn rows_integrate_the_rate() {
        let g = GridSpec::new(Dim::Three, 2.0, 8, 1, 1.0).unwrap();
        let r = EmpiricalReference::new(g, KernelSpec::HardSphere, 32, 512).unwrap();
        for dk in [[0, 0, 0], [1, 0, 0], [2, -1, 3]] {
            let tot: f64 = r.sym_row(dk).iter().map(|x| x.1).sum();
            let want = r.pair_rate(dk);
            assert!((tot - want).abs() < 1e-3 * want, "{dk:?}: {tot} vs {want}");
        }
        // same-cell pairs see relative speeds of order h
        assert!(r.pair_rate([0, 0, 0]) > 0.25 * kappa(Dim::Three) * g.h() * 0.4);
    }

    #[test]
    fn symmetric_under_pair_exchanges() {
        let g = GridSpec::new(Dim::Three, 2.0, 8, 1, 1.0).unwrap();
        let r = EmpiricalReference::new(g, KernelSpec::HardSphere, 32, 256).unwrap();
        let (a, b) = (g.flat([5, 3, 4]), g.flat([2, 4, 4]));
        let row = r.sym_row(diff(g.unflat(a), g.unflat(b))).to_vec();
        let mut n = 0;
        for (k, w) in row.iter().take(40) {
            let kc = [g.unflat(a)[0] + k[0] as i32, g.unflat(a)[1] + k[1] as i32, g.unflat(a)[2] + k[2] as i32];
            let kd = [g.unflat(b)[0] + k[3] as i32, g.unflat(b)[1] + k[4] as i32, g.unflat(b)[2] + k[5] as i32];
            if !(g.contains(kc) && g.contains(kd)) {
                continue;
            }
            let (c, d) = (g.flat(kc), g.flat(kd));
            for m in [false, true] {
                let v = r.kernel_value(a, b, c, d, m);
                for (x, y, z, t) in [(b, a, c, d), (a, b, d, c), (b, a, d, c)] {
                    assert!((r.kernel_value(x, y, z, t, m) - v).abs() < 1e-12 * v.max(1e-300));
                }
            }
            assert!((r.kernel_value(a, b, c, d, false) - w).abs() < 1e-15);
            n += 1;
        }
        assert!(n > 5);
    }
}
