//! Kozachenko–Leonenko k-nearest-neighbour estimate of H(P) = ∫ f ln f.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::Rng;
use serde::Serialize;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{KacError, Result};
use crate::geometry::{Dim, Velocity};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KnnEstimate {
    /// Estimate of ∫ f ln f in nats (minus the differential entropy).
    pub value: f64,
    pub k: usize,
    pub n: usize,
    /// Points moved by the duplicate jitter.
    pub jittered: usize,
}

/// ln of the volume of the unit ball in ℝ^d.
pub fn ln_unit_ball(d: usize) -> f64 {
    0.5 * d as f64 * PI.ln() - ln_gamma(0.5 * d as f64 + 1.0)
}

/// Moves every repeated point by uniform noise of total width `width` per component.
fn jitter_duplicates<R: Rng + ?Sized>(pts: &mut [Velocity], d: usize, width: f64, rng: &mut R) -> usize {
    let key = |v: &Velocity| [v.0[0].to_bits(), v.0[1].to_bits(), v.0[2].to_bits()];
    let keys: Vec<[u64; 3]> = pts.iter().map(key).collect();
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    let mut moved = 0;
    for w in 1..order.len() {
        if keys[order[w]] == keys[order[w - 1]] {
            for a in 0..d {
                pts[order[w]].0[a] += width * (rng.random::<f64>() - 0.5);
            }
            moved += 1;
        }
    }
    moved
}

fn kth_distances<const K: usize>(pts: &[[f64; K]], k: usize) -> Result<Vec<f64>> {
    let tree: ImmutableKdTree<f64, K> =
        ImmutableKdTree::new_from_slice(pts).map_err(|e| KacError::Io(format!("kd-tree construction: {e:?}")))?;
    let kk = NonZeroUsize::new(k + 1).expect("k + 1 > 0");
    Ok(par::map_slice(pts, |q| {
        let hits = tree.query(q).nearest_n::<SquaredEuclidean<f64>>(kk).execute();
        // the query point itself is the first hit
        hits.last().map_or(f64::NAN, |h| h.distance.sqrt())
    }))
}

/// Estimate of H(P) from samples; duplicates are jittered by `jitter_width`.
///
/// Ĥ = -(ψ(N) - ψ(k) + ln V_d + (d/N) Σ ln ε_i) with ε_i the distance to
/// the k-th neighbour. Scaling all samples by λ shifts Ĥ by -d ln λ.
pub fn diff_entropy_knn<R: Rng + ?Sized>(samples: &[Velocity], d: Dim, k: usize, jitter_width: f64, rng: &mut R) -> Result<KnnEstimate> {
    let n = samples.len();
    if k == 0 || n <= k {
        return Err(KacError::TooFewSamples { k, n });
    }
    let dd = d.get();
    let mut pts = samples.to_vec();
    let jittered = jitter_duplicates(&mut pts, dd, jitter_width, rng);
    let eps = match d {
        Dim::Two => kth_distances(&pts.iter().map(|v| [v.0[0], v.0[1]]).collect::<Vec<_>>(), k)?,
        Dim::Three => kth_distances(&pts.iter().map(|v| v.0).collect::<Vec<_>>(), k)?,
    };
    if eps.iter().any(|e| !(*e > 0.0)) {
        return Err(KacError::Degenerate);
    }
    let mean_ln: f64 = eps.iter().map(|e| e.ln()).sum::<f64>() / n as f64;
    let h_diff = digamma(n as f64) - digamma(k as f64) + ln_unit_ball(dd) + dd as f64 * mean_ln;
    Ok(KnnEstimate {
        value: -h_diff,
        k,
        n,
        jittered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initial_data::Maxwellian;
    use crate::rng::stream_rng;

    #[test]
    fn unit_ball_volumes() {
        assert!((ln_unit_ball(2) - PI.ln()).abs() < 1e-14);
        assert!((ln_unit_ball(3) - (4.0 * PI / 3.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn gaussian_entropy_is_recovered() {
        let m = Maxwellian::new(Dim::Three, 1.0).unwrap();
        let mut rng = stream_rng(11, 0);
        let xs: Vec<Velocity> = (0..10_000).map(|_| m.sample(&mut rng)).collect();
        let est = diff_entropy_knn(&xs, Dim::Three, 4, 1e-12, &mut rng).unwrap();
        // -(3/2)(ln(4π/3) + 1)
        assert!((est.value + 3.648_648).abs() < 0.05, "{est:?}");
    }

    #[test]
    fn uniform_cube_has_zero_entropy() {
        let mut rng = stream_rng(12, 0);
        let cube = |n: usize, rng: &mut crate::rng::SimRng| -> Vec<Velocity> {
            (0..n).map(|_| Velocity::new(rng.random(), rng.random(), rng.random())).collect()
        };
        let xs = cube(10_000, &mut rng);
        let est = diff_entropy_knn(&xs, Dim::Three, 1, 1e-12, &mut rng).unwrap();
        assert!(est.value.abs() < 0.05, "{est:?}");
        // with k = 4 the boundary layer biases the estimate downwards; the
        // bias shrinks with N
        let small = diff_entropy_knn(&cube(1000, &mut rng), Dim::Three, 4, 1e-12, &mut rng).unwrap().value;
        let large = diff_entropy_knn(&xs, Dim::Three, 4, 1e-12, &mut rng).unwrap().value;
        assert!(small < large && large < 0.0 && large > -0.1, "{small} {large}");
    }

    #[test]
    fn scaling_shifts_by_minus_d_ln_lambda() {
        let mut rng = stream_rng(13, 0);
        let xs: Vec<Velocity> = (0..500).map(|_| Velocity::new(rng.random(), rng.random(), rng.random())).collect();
        let lam = 2.5f64;
        let ys: Vec<Velocity> = xs.iter().map(|&v| v * lam).collect();
        let a = diff_entropy_knn(&xs, Dim::Three, 4, 0.0, &mut rng).unwrap().value;
        let b = diff_entropy_knn(&ys, Dim::Three, 4, 0.0, &mut rng).unwrap().value;
        assert!((b - a + 3.0 * lam.ln()).abs() < 1e-10, "{a} {b}");
    }

    #[test]
    fn duplicates_are_jittered_not_fatal() {
        let mut rng = stream_rng(14, 0);
        let mut xs: Vec<Velocity> = (0..200).map(|_| Velocity::planar(rng.random(), rng.random())).collect();
        for i in 0..10 {
            xs.push(xs[i]);
        }
        let est = diff_entropy_knn(&xs, Dim::Two, 1, 1e-12, &mut rng).unwrap();
        assert_eq!(est.jittered, 10);
        assert!(est.value.is_finite());
        assert!(diff_entropy_knn(&xs[..3], Dim::Two, 4, 1e-12, &mut rng).is_err());
    }
}
