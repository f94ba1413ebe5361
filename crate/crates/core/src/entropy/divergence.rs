//! Ent and its extension E to finite measures, cell by cell.

use std::cmp::Ordering;

use crate::error::{invalid, KacError, Result};
use crate::geometry::CompensatedSum;
use crate::observables::{FluxKey, FluxMeasure, GridMeasure};

/// One cell of E: x ln(x/y) - x + y, nonnegative, +∞ when x > 0 = y.
#[inline]
pub fn ediv_term(x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return y.max(0.0);
    }
    if y <= 0.0 {
        return f64::INFINITY;
    }
    // y φ(x/y) with φ(r) = r ln r - r + 1, written around r = 1
    let r = x / y;
    let t = r - 1.0;
    let v = y * (r * t.ln_1p() - t);
    v.max(0.0)
}

/// One cell of Ent: x ln(x/y) with 0 ln 0 = 0.
#[inline]
pub fn ent_term(x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if y <= 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

/// E(𝒱|𝒱̃) from the values of both measures on the union of their supports.
pub fn ediv_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let mut s = CompensatedSum::new();
    for (x, y) in pairs {
        let t = ediv_term(x, y);
        if t.is_infinite() {
            return f64::INFINITY;
        }
        s.add(t);
    }
    s.value()
}

/// Ent(μ|ν) for probabilities on the same grid; the overflow is one more cell.
pub fn ent_discrete(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    mu.grid.check_same(&nu.grid)?;
    for (m, name) in [(mu, "mu"), (nu, "nu")] {
        if !m.is_probability() {
            return Err(invalid(name, "must have total mass 1"));
        }
    }
    let mut s = CompensatedSum::new();
    for (&x, &y) in mu.weights.iter().zip(&nu.weights).chain(std::iter::once((&mu.overflow, &nu.overflow))) {
        let t = ent_term(x, y);
        if t.is_infinite() {
            return Ok(f64::INFINITY);
        }
        s.add(t);
    }
    Ok(s.value().max(0.0))
}

/// E on grid measures (overflow included as a cell).
pub fn ediv_grid(v: &GridMeasure, vt: &GridMeasure) -> Result<f64> {
    v.grid.check_same(&vt.grid)?;
    Ok(ediv_pairs(
        v.weights.iter().zip(&vt.weights).map(|(&x, &y)| (x, y)).chain(std::iter::once((v.overflow, vt.overflow))),
    ))
}

/// Merge of two sparse flux measures in key order: (key, x, y).
pub fn merged(a: &FluxMeasure, b: &FluxMeasure) -> Vec<(FluxKey, f64, f64)> {
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    let mut ia = a.weights.iter().peekable();
    let mut ib = b.weights.iter().peekable();
    loop {
        match (ia.peek(), ib.peek()) {
            (Some((ka, &xa)), Some((kb, &xb))) => match ka.cmp(kb) {
                Ordering::Less => {
                    out.push((**ka, xa, 0.0));
                    ia.next();
                }
                Ordering::Greater => {
                    out.push((**kb, 0.0, xb));
                    ib.next();
                }
                Ordering::Equal => {
                    out.push((**ka, xa, xb));
                    ia.next();
                    ib.next();
                }
            },
            (Some((ka, &xa)), None) => {
                out.push((**ka, xa, 0.0));
                ia.next();
            }
            (None, Some((kb, &xb))) => {
                out.push((**kb, 0.0, xb));
                ib.next();
            }
            (None, None) => break,
        }
    }
    out
}

/// E on sparse flux measures.
pub fn ediv_flux(q: &FluxMeasure, qt: &FluxMeasure) -> Result<f64> {
    q.grid.check_same(&qt.grid)?;
    Ok(ediv_pairs(merged(q, qt).into_iter().map(|(_, x, y)| (x, y))))
}

/// 𝒱(φ) - 𝒱̃(e^φ - 1) for one bounded φ given on the same cells.
pub fn variational_value(pairs: &[(f64, f64)], phi: &[f64]) -> Result<f64> {
    if pairs.len() != phi.len() {
        return Err(invalid("phi", "one value per cell"));
    }
    if phi.iter().any(|p| !p.is_finite()) {
        return Err(invalid("phi", "must be bounded"));
    }
    let mut s = CompensatedSum::new();
    for (&(x, y), &p) in pairs.iter().zip(phi) {
        s.add(x * p - y * p.exp_m1());
    }
    Ok(s.value())
}

/// max over `family` of 𝒱(φ) - 𝒱̃(e^φ - 1); 0 for an empty family (φ ≡ 0).
pub fn variational_ediv_lower_bound(pairs: &[(f64, f64)], family: &[Vec<f64>]) -> Result<f64> {
    let mut best = 0.0f64;
    for phi in family {
        best = best.max(variational_value(pairs, phi)?);
    }
    Ok(best)
}

/// ln(d𝒱/d𝒱̃) where both are positive; `None` if the supports differ.
pub fn log_likelihood_ratio(pairs: &[(f64, f64)]) -> Option<Vec<f64>> {
    pairs
        .iter()
        .map(|&(x, y)| match (x > 0.0, y > 0.0) {
            (true, true) => Some((x / y).ln()),
            (false, false) => Some(0.0),
            _ => None,
        })
        .collect()
}

/// Pushforward of cell weights under a coarsening map.
pub fn coarsen(pairs: &[(f64, f64)], map: &[usize], target: usize) -> Result<Vec<(f64, f64)>> {
    if map.len() != pairs.len() {
        return Err(KacError::GridMismatch);
    }
    let mut out = vec![(0.0, 0.0); target];
    for (&(x, y), &m) in pairs.iter().zip(map) {
        if m >= target {
            return Err(KacError::IndexOutOfRange { index: m, n: target });
        }
        out[m].0 += x;
        out[m].1 += y;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Dim;
    use crate::observables::GridSpec;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid() -> GridSpec {
        GridSpec::new(Dim::Two, 1.0, 4, 1, 1.0).unwrap()
    }

    #[test]
    fn ent_of_point_mass_against_uniform_is_ln_n() {
        let g = grid();
        let n = g.len();
        let nu = GridMeasure::from_weights(g, vec![1.0 / n as f64; n], 0.0).unwrap();
        let mut w = vec![0.0; n];
        w[5] = 1.0;
        let mu = GridMeasure::from_weights(g, w, 0.0).unwrap();
        assert!((ent_discrete(&mu, &nu).unwrap() - (n as f64).ln()).abs() < 1e-14);
        assert_eq!(ent_discrete(&nu, &nu).unwrap(), 0.0);
        assert_eq!(ent_discrete(&nu, &mu).unwrap(), f64::INFINITY);
    }

    #[test]
    fn doubling_costs_m_times_2ln2_minus_1() {
        let g = grid();
        let mut rng = stream_rng(9, 0);
        let w: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>()).collect();
        let m: f64 = w.iter().sum();
        let vt = GridMeasure::from_weights(g, w.clone(), 0.0).unwrap();
        let v = GridMeasure::from_weights(g, w.iter().map(|x| 2.0 * x).collect(), 0.0).unwrap();
        let e = ediv_grid(&v, &vt).unwrap();
        assert!((e - m * (2.0 * 2f64.ln() - 1.0)).abs() < 1e-12 * m);
        assert_eq!(ediv_grid(&vt, &vt).unwrap(), 0.0);
    }

    #[test]
    fn flux_merge_covers_both_supports() {
        let g = grid();
        let mut a = FluxMeasure::new(g);
        let mut b = FluxMeasure::new(g);
        a.add([0, 1, 2, 3, 4], 1.0);
        b.add([0, 1, 2, 3, 4], 1.0);
        b.add([0, 0, 0, 0, 0], 0.5);
        assert_eq!(merged(&a, &b).len(), 2);
        assert!((ediv_flux(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ediv_flux(&b, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn optimal_test_function_attains_ediv() {
        let mut rng = stream_rng(10, 0);
        let pairs: Vec<(f64, f64)> = (0..50).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let phi = log_likelihood_ratio(&pairs).unwrap();
        let e = ediv_pairs(pairs.iter().copied());
        let v = variational_value(&pairs, &phi).unwrap();
        assert!((v - e).abs() < 1e-12 * e.max(1.0), "{v} {e}");
        assert_eq!(variational_ediv_lower_bound(&pairs, &[]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn ediv_is_nonnegative_and_zero_on_the_diagonal(xs in proptest::collection::vec((0.0f64..5.0, 1e-6f64..5.0), 1..40)) {
            let e = ediv_pairs(xs.iter().copied());
            prop_assert!(e >= 0.0);
            prop_assert_eq!(ediv_pairs(xs.iter().map(|&(_, y)| (y, y))), 0.0);
        }

        #[test]
        fn duality_bound(xs in proptest::collection::vec((0.0f64..5.0, 1e-6f64..5.0), 1..40), seed in 0u64..1000) {
            let mut rng = stream_rng(seed, 1);
            let phi: Vec<f64> = xs.iter().map(|_| rng.random_range(-4.0..4.0)).collect();
            let e = ediv_pairs(xs.iter().copied());
            prop_assert!(variational_value(&xs, &phi).unwrap() <= e + 1e-12 * e.max(1.0));
        }

        #[test]
        fn coarsening_contracts(xs in proptest::collection::vec((0.0f64..5.0, 1e-6f64..5.0), 2..40), seed in 0u64..1000) {
            let mut rng = stream_rng(seed, 2);
            let target = rng.random_range(1..xs.len());
            let map: Vec<usize> = xs.iter().map(|_| rng.random_range(0..target)).collect();
            let e = ediv_pairs(xs.iter().copied());
            let ec = ediv_pairs(coarsen(&xs, &map, target).unwrap());
            prop_assert!(ec <= e + 1e-12 * e.max(1.0));
        }
    }
}
