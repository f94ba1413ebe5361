//! Distances between empirical velocity distributions.

use crate::error::Result;
use crate::geometry::{Configuration, Dim, Velocity};
use crate::observables::{empirical_measure, GridMeasure, GridSpec};
use crate::par;

/// Exponents of the ten monomials of each dictionary block.
fn monomials(d: Dim) -> Vec<[u8; 3]> {
    match d {
        Dim::Three => vec![
            [0, 0, 0],
            [1, 0, 0],
            [0, 1, 0],
            [0, 0, 1],
            [2, 0, 0],
            [0, 2, 0],
            [0, 0, 2],
            [1, 1, 0],
            [1, 0, 1],
            [0, 1, 1],
        ],
        Dim::Two => vec![
            [0, 0, 0],
            [1, 0, 0],
            [0, 1, 0],
            [2, 0, 0],
            [1, 1, 0],
            [0, 2, 0],
            [3, 0, 0],
            [2, 1, 0],
            [1, 2, 0],
            [0, 3, 0],
        ],
    }
}

const WIDTHS: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];

#[derive(Debug, Clone, Copy)]
struct Atom {
    alpha: [u8; 3],
    width: f64,
    /// 1 / (sup|f| + Lip f), estimated on a probe lattice.
    inv_norm: f64,
}

/// Fifty functions x^α exp(-|v|²/2s²), x = v/σ₀, σ₀² = 2e/d, with ten
/// monomials of degree ≤ 2 (≤ 3 in the plane) and five widths s/σ₀.
/// Each is scaled to unit bounded-Lipschitz norm, so the dictionary
/// distance is a lower bound for the bounded-Lipschitz metric.
#[derive(Debug, Clone)]
pub struct BlDictionary {
    d: Dim,
    sigma0: f64,
    atoms: Vec<Atom>,
}

fn ipow(x: f64, k: u8) -> f64 {
    (0..k).fold(1.0, |a, _| a * x)
}

impl BlDictionary {
    pub fn new(d: Dim, e: f64) -> Self {
        let sigma0 = (2.0 * e / d.as_f64()).sqrt();
        let mut atoms = Vec::with_capacity(50);
        for &w in &WIDTHS {
            for alpha in monomials(d) {
                atoms.push(Atom {
                    alpha,
                    width: w * sigma0,
                    inv_norm: 1.0,
                });
            }
        }
        let mut me = Self { d, sigma0, atoms };
        let norms = par::map_indices(me.atoms.len(), |i| me.probe_norm(i));
        for (a, n) in me.atoms.iter_mut().zip(norms) {
            a.inv_norm = 1.0 / n;
        }
        me
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    fn raw(&self, i: usize, v: Velocity) -> (f64, Velocity) {
        let a = &self.atoms[i];
        let nd = self.d.get();
        let x: Vec<f64> = (0..nd).map(|k| v.0[k] / self.sigma0).collect();
        let m: f64 = (0..nd).map(|k| ipow(x[k], a.alpha[k])).product();
        let g = (-0.5 * v.norm2() / (a.width * a.width)).exp();
        let mut grad = [0.0; 3];
        for k in 0..nd {
            let dm = if a.alpha[k] == 0 {
                0.0
            } else {
                let rest: f64 = (0..nd).filter(|&l| l != k).map(|l| ipow(x[l], a.alpha[l])).product();
                a.alpha[k] as f64 * ipow(x[k], a.alpha[k] - 1) * rest / self.sigma0
            };
            grad[k] = (dm - m * v.0[k] / (a.width * a.width)) * g;
        }
        (m * g, Velocity(grad))
    }

    fn probe_norm(&self, i: usize) -> f64 {
        let r = 5.0 * self.atoms[i].width;
        let m: usize = 48;
        let nd = self.d.get();
        let coord = |j: usize| -r + 2.0 * r * j as f64 / m as f64;
        let (mut sup, mut lip) = (0.0f64, 0.0f64);
        let total = (m + 1).pow(nd as u32);
        for idx in 0..total {
            let mut v = [0.0; 3];
            let mut rest = idx;
            for c in v.iter_mut().take(nd) {
                *c = coord(rest % (m + 1));
                rest /= m + 1;
            }
            let (f, g) = self.raw(i, Velocity(v));
            sup = sup.max(f.abs());
            lip = lip.max(g.norm());
        }
        sup + lip
    }

    /// Normalized dictionary function i at v.
    pub fn eval(&self, i: usize, v: Velocity) -> f64 {
        self.raw(i, v).0 * self.atoms[i].inv_norm
    }

    /// Empirical means of every dictionary function.
    pub fn means(&self, v: &[Velocity]) -> Vec<f64> {
        let n = v.len() as f64;
        (0..self.len())
            .map(|i| crate::geometry::compensated_sum(v.iter().map(|x| self.eval(i, *x))) / n)
            .collect()
    }

    /// max_i |a_i - b_i| for two mean vectors.
    pub fn distance_of_means(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    pub fn distance(&self, a: &[Velocity], b: &[Velocity]) -> f64 {
        Self::distance_of_means(&self.means(a), &self.means(b))
    }
}

/// Binned total variation between the empirical measures of two configurations.
pub fn tv_binned(a: &Configuration, b: &Configuration, grid: &GridSpec) -> Result<f64> {
    empirical_measure(a, grid)?.measure.total_variation(&empirical_measure(b, grid)?.measure)
}

/// Binned total variation against a grid law.
pub fn tv_to(a: &Configuration, law: &GridMeasure) -> Result<f64> {
    empirical_measure(a, &law.grid)?.measure.total_variation(law)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initial_data::{sample_chaotic, Preset};
    use crate::rng::stream_rng;
    use crate::stats::log_log_slope;

    #[test]
    fn dictionary_has_fifty_unit_functions() {
        for d in [Dim::Two, Dim::Three] {
            let dict = BlDictionary::new(d, 1.0);
            assert_eq!(dict.len(), 50);
            for i in 0..dict.len() {
                // sup|f| ≤ 1 on random probes
                let mut rng = stream_rng(i as u64, 1);
                for _ in 0..200 {
                    let v = Preset::Maxwellian.sample(d, 4.0, &mut rng);
                    assert!(dict.eval(i, v).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dict = BlDictionary::new(Dim::Three, 1.0);
        let v = Velocity::new(0.3, -0.7, 0.4);
        for i in [0, 7, 23, 49] {
            let (_, g) = dict.raw(i, v);
            for k in 0..3 {
                let mut p = v;
                let mut m = v;
                p.0[k] += 1e-6;
                m.0[k] -= 1e-6;
                let fd = (dict.raw(i, p).0 - dict.raw(i, m).0) / 2e-6;
                assert!((fd - g.0[k]).abs() < 1e-6, "{i} {k}: {fd} {}", g.0[k]);
            }
        }
    }

    #[test]
    fn sampling_distance_decays_like_inverse_root_n() {
        let dict = BlDictionary::new(Dim::Three, 1.0);
        let ns = [250usize, 1000, 4000];
        let dist: Vec<f64> = ns
            .iter()
            .map(|&n| {
                (0..40)
                    .map(|r| {
                        let mut rng = stream_rng(100 + r, n as u64);
                        let a = sample_chaotic(n, Dim::Three, 1.0, Preset::TwoBump, &mut rng).unwrap().0;
                        let b = sample_chaotic(n, Dim::Three, 1.0, Preset::TwoBump, &mut rng).unwrap().0;
                        dict.distance(a.velocities(), b.velocities())
                    })
                    .sum::<f64>()
                    / 40.0
            })
            .collect();
        let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let fit = log_log_slope(&x, &dist).unwrap();
        assert!((fit.slope + 0.5).abs() < 0.15, "{fit:?}");
    }

    #[test]
    fn tv_of_identical_configurations_is_zero() {
        let mut rng = stream_rng(1, 0);
        let a = sample_chaotic(500, Dim::Three, 1.0, Preset::Shell, &mut rng).unwrap().0;
        let g = GridSpec::new(Dim::Three, 4.0, 8, 1, 1.0).unwrap();
        assert_eq!(tv_binned(&a, &a, &g).unwrap(), 0.0);
    }
}
