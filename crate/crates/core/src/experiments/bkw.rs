//! Bobylev–Krook–Wu solutions for the constant kernel, d = 3.
//!
//! With per-component temperature T = 2e/3 the family is
//!
//!   f_K(v) = G_{KT}(v) [ (5K - 3)/(2K) + (1 - K)/(2K²) |v|²/T ],  K ∈ [3/5, 1],
//!
//! where G_s is the centred Gaussian with per-component variance s. Its
//! fourth moment is 15T²(1 - (1 - K)²).
//!
//! Rate calibration for this engine: a pair collides at rate 4πb/N and the
//! relative velocity is reflected in a uniform plane, u' = u - 2(u·ω)ω.
//! Averaging over ω gives E[u'u'ᵀ] = uuᵀ/5 + (4/15)|u|² I, and summing over
//! pairs of a configuration with Σv = 0, Σ|v|² = 2Ne yields, exactly in N,
//!
//!   d/dt E[M₄] = -γ ( E[M₄] - 8e² + E[tr S²]/N² ),  γ = (4/15)·4πb,
//!
//! with S = Σ v vᵀ. In the limit tr S²/N² → 4e²/3, so (1 - K)² decays at
//! rate γ and 1 - K(t) = (1 - K₀) exp(-γt/2).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::function::erf::erf;

use crate::engine::{simulate, CountingSink, SchedulerKind, SimulationOptions};
use crate::error::{invalid, KacError, Result};
use crate::geometry::{Configuration, Dim, Velocity};
use crate::initial_data::{sample_conditioned, unit_vector};
use crate::kernel::KernelSpec;
use crate::par;
use crate::rng::{stream_rng, stream_id};
use crate::stats::mean_se;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bkw {
    pub e: f64,
    pub b: f64,
    pub k0: f64,
}

/// √(2/π)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl Bkw {
    pub fn new(e: f64, b: f64, k0: f64) -> Result<Self> {
        if !(e > 0.0 && e.is_finite()) {
            return Err(invalid("e", "energy per particle must be positive"));
        }
        KernelSpec::MaxwellConstant { b }.validate()?;
        if !(0.6..=1.0).contains(&k0) {
            return Err(invalid("k0", "must lie in [3/5, 1]"));
        }
        Ok(Self { e, b, k0 })
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::MaxwellConstant { b: self.b }
    }

    pub fn temperature(&self) -> f64 {
        2.0 * self.e / 3.0
    }

    /// Collision rate per particle, 4πb.
    pub fn lambda(&self) -> f64 {
        4.0 * PI * self.b
    }

    /// Relaxation rate γ of the fourth moment.
    pub fn moment_rate(&self) -> f64 {
        4.0 * self.lambda() / 15.0
    }

    pub fn k_at(&self, t: f64) -> f64 {
        1.0 - (1.0 - self.k0) * (-0.5 * self.moment_rate() * t).exp()
    }

    /// Time at which 1 - K has dropped to `fraction` of its initial value.
    pub fn time_at_fraction(&self, fraction: f64) -> f64 {
        -2.0 * fraction.ln() / self.moment_rate()
    }

    pub fn m4_at(&self, t: f64) -> f64 {
        let tt = self.temperature();
        let x = 1.0 - self.k_at(t);
        15.0 * tt * tt * (1.0 - x * x)
    }

    fn coefficients(k: f64) -> (f64, f64) {
        ((5.0 * k - 3.0) / (2.0 * k), (1.0 - k) / (2.0 * k * k))
    }

    pub fn density(&self, v: Velocity, t: f64) -> f64 {
        let k = self.k_at(t);
        let tt = self.temperature();
        let s = k * tt;
        let r2 = v.norm2();
        let (a, c) = Self::coefficients(k);
        (2.0 * PI * s).powf(-1.5) * (-0.5 * r2 / s).exp() * (a + c * r2 / tt)
    }

    /// P(|V| ≤ s) at time t.
    pub fn speed_cdf(&self, s: f64, t: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let k = self.k_at(t);
        let x = s / (k * self.temperature()).sqrt();
        let g = SQRT_2_OVER_PI * (-0.5 * x * x).exp();
        // I₂ = ∫₀ˣ √(2/π) y² e^{-y²/2}, I₄ = 3 I₂ - √(2/π) x³ e^{-x²/2}
        let i2 = erf(x / std::f64::consts::SQRT_2) - g * x;
        let i4 = 3.0 * i2 - g * x * x * x;
        let (a, c) = Self::coefficients(k);
        (a * i2 + c * k * i4).clamp(0.0, 1.0)
    }

    /// One draw from f_{K(t)}: a Gaussian with weight (5K-3)/(2K), else a
    /// χ₅ speed in a uniform direction.
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Velocity {
        let k = self.k_at(t);
        let sigma = (k * self.temperature()).sqrt();
        let (a, _) = Self::coefficients(k);
        let gauss = |r: &mut R| -> f64 { StandardNormal.sample(r) };
        if rng.random::<f64>() < a {
            Velocity::new(sigma * gauss(rng), sigma * gauss(rng), sigma * gauss(rng))
        } else {
            let chi5 = (0..5).map(|_| gauss(rng).powi(2)).sum::<f64>().sqrt();
            unit_vector(Dim::Three, rng) * (sigma * chi5)
        }
    }

    /// N particles from f_{K(t)}, centred and rescaled onto energy e.
    pub fn sample_configuration<R: Rng + ?Sized>(&self, n: usize, t: f64, rng: &mut R) -> Result<Configuration> {
        sample_conditioned(n, Dim::Three, self.e, rng, |r| self.sample(t, r)).map(|(c, _)| c)
    }
}

/// (1/N) Σ|v|⁴ and tr(A²) with A = S/N - (2e/3) I.
fn moment_pair(cfg: &Configuration) -> (f64, f64) {
    let n = cfg.len() as f64;
    let mut m4 = 0.0;
    let mut s = [[0.0; 3]; 3];
    for v in cfg.velocities() {
        m4 += v.norm2() * v.norm2();
        for a in 0..3 {
            for b in 0..3 {
                s[a][b] += v.0[a] * v.0[b];
            }
        }
    }
    let iso = 2.0 * cfg.energy() / 3.0;
    let mut tr = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let x = s[a][b] / n - if a == b { iso } else { 0.0 };
            tr += x * x;
        }
    }
    (m4 / n, tr)
}

/// Brute-force check of the moment rate against small-N simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub replicas: usize,
    pub rate: f64,
    pub times: Vec<f64>,
    pub measured: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Mean of (measured - predicted) per replica over its standard error.
    pub z: Vec<f64>,
    pub max_abs_z: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Simulates `replicas` systems of N particles from f_{K₀} and compares
/// E[M₄(t)] with the finite-N moment equation at relaxation rate `rate`,
/// driven by the measured tr A². Each replica is integrated along its own
/// tr A² path, so the mean of (measured - predicted) is zero for the right
/// rate up to the trapezoid error in the forcing.
pub fn validate_calibration(bkw: &Bkw, rate: f64, n: usize, replicas: usize, times: &[f64], seed: u64, threshold: f64) -> Result<CalibrationReport> {
    if replicas < 2 {
        return Err(invalid("replicas", "at least two replicas"));
    }
    if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("times", "strictly increasing and starting at 0"));
    }
    let horizon = *times.last().unwrap();
    let e = bkw.e;
    let per = par::map_indices(replicas, |r| -> Result<Vec<(f64, f64)>> {
        let mut rng = stream_rng(seed, stream_id(9, 0, r as u32));
        let cfg0 = bkw.sample_configuration(n, 0.0, &mut rng)?;
        let out = simulate(
            &cfg0,
            horizon,
            bkw.kernel(),
            SchedulerKind::MajorantRejection,
            &mut rng,
            times,
            &mut CountingSink::default(),
            SimulationOptions::default(),
        )?;
        Ok(out.snapshots.iter().map(|(_, c)| moment_pair(c)).collect())
    });
    let per: Vec<Vec<(f64, f64)>> = per.into_iter().collect::<Result<_>>()?;
    let target = 20.0 * e * e / 3.0;
    let mut measured = Vec::new();
    let mut predicted = Vec::new();
    let mut z = Vec::new();
    for k in 0..times.len() {
        let mut diffs = Vec::with_capacity(replicas);
        let mut ms = Vec::with_capacity(replicas);
        let mut ps = Vec::with_capacity(replicas);
        for path in &per {
            let mut pred = path[0].0;
            for i in 0..k {
                let c = target - 0.5 * (path[i].1 + path[i + 1].1);
                pred = c + (pred - c) * (-rate * (times[i + 1] - times[i])).exp();
            }
            diffs.push(path[k].0 - pred);
            ms.push(path[k].0);
            ps.push(pred);
        }
        let (dm, dse) = mean_se(&diffs);
        measured.push(mean_se(&ms).0);
        predicted.push(mean_se(&ps).0);
        z.push(if dse > 0.0 { dm / dse } else { 0.0 });
    }
    let max_abs_z = z.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(CalibrationReport {
        n,
        replicas,
        rate,
        times: times.to_vec(),
        measured,
        predicted,
        z,
        max_abs_z,
        threshold,
        passed: max_abs_z <= threshold,
    })
}

/// Runs [`validate_calibration`] at the analytic rate and turns a mismatch
/// into [`KacError::Calibration`].
pub fn calibrate(bkw: &Bkw, n: usize, replicas: usize, points: usize, seed: u64, threshold: f64) -> Result<CalibrationReport> {
    let horizon = 2.0 / bkw.moment_rate();
    let times: Vec<f64> = (0..points.max(2)).map(|k| horizon * k as f64 / (points.max(2) - 1) as f64).collect();
    let rep = validate_calibration(bkw, bkw.moment_rate(), n, replicas, &times, seed, threshold)?;
    if rep.passed {
        Ok(rep)
    } else {
        Err(KacError::Calibration(format!(
            "fourth-moment trajectory off the rate {} by {:.2} standard errors (limit {})",
            rep.rate, rep.max_abs_z, threshold
        )))
    }
}
