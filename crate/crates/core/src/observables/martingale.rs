//! M^{N,F}_t = Q^N_{[0,t]}(F) - ∫_0^t ½ ∬ π_s π_s ∫ B F ds along one path.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::engine::{collide_pair, CollisionEvent, EventLog, EventSink};
use crate::error::{invalid, KacError, Result};
use crate::geometry::{CompensatedSum, Configuration, Dim, Velocity};
use crate::kernel::{KernelSpec, SphereQuadrature};

type PairFn = Arc<dyn Fn(Velocity, Velocity, Velocity, Velocity) -> f64 + Send + Sync>;

/// F(v, v_*, v', v'_*), symmetric under v ↔ v_* and under v' ↔ v'_*.
#[derive(Clone)]
pub struct PairFunction {
    pub name: String,
    f: PairFn,
}

impl fmt::Debug for PairFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PairFunction({})", self.name)
    }
}

impl PairFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(Velocity, Velocity, Velocity, Velocity) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    #[inline]
    pub fn eval(&self, v: Velocity, vs: Velocity, vp: Velocity, vps: Velocity) -> f64 {
        (self.f)(v, vs, vp, vps)
    }

    pub fn zero() -> Self {
        Self::new("zero", |_, _, _, _| 0.0)
    }

    /// F ≡ 1, ∇̄h for a Gaussian h, and a bounded trigonometric product.
    pub fn standard_family() -> Vec<PairFunction> {
        let h = |v: Velocity| (-0.5 * v.norm2()).exp();
        vec![
            PairFunction::new("one", |_, _, _, _| 1.0),
            PairFunction::new("grad_gauss", move |v, vs, vp, vps| h(vp) + h(vps) - h(v) - h(vs)),
            PairFunction::new("trig", |v, vs, vp, vps| {
                v.0[0].cos() * vs.0[0].cos() * vp.0[1].sin() * vps.0[1].sin()
            }),
        ]
    }

    /// Largest asymmetry over a few probe tuples; zero for admissible F.
    pub fn symmetry_defect(&self, probes: &[[Velocity; 4]]) -> f64 {
        probes
            .iter()
            .map(|&[a, b, c, d]| {
                let f = self.eval(a, b, c, d);
                (f - self.eval(b, a, c, d)).abs().max((f - self.eval(a, b, d, c)).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Sampled martingale paths, one row per test function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleSeries {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    /// values[f][k] = M^{N,F_f} at times[k].
    pub values: Vec<Vec<f64>>,
    /// Predictable quadratic variation ⟨M⟩ at the same times.
    pub bracket: Vec<Vec<f64>>,
    /// Q^N_{[0,t]}(F) at the same times.
    pub jumps: Vec<Vec<f64>>,
}

/// Incremental compensator, fed one event at a time.
///
/// g_f[i][j] = Σ_ω w B(v_i - v_j, ω) F_f(v_i, v_j, v_i', v_j') is kept for
/// every pair; after a jump of (i, j) only rows i and j change. The
/// compensator rate (1/N²) Σ_{i<j} g_ij is constant between jumps, so the
/// time integral is exact up to the ω-quadrature. Diagonal terms vanish for
/// the hard-sphere kernel and are left out for the Maxwell kernel, matching
/// the walk (a particle never collides with itself).
pub struct MartingaleTracker {
    n: usize,
    d: Dim,
    kernel: KernelSpec,
    quad: SphereQuadrature,
    fs: Vec<PairFunction>,
    v: Vec<Velocity>,
    g: Vec<Vec<f64>>,
    g2: Vec<Vec<f64>>,
    rate: Vec<f64>,
    rate2: Vec<f64>,
    t: f64,
    comp: Vec<CompensatedSum>,
    bracket: Vec<CompensatedSum>,
    jumps: Vec<CompensatedSum>,
    sample_times: Vec<f64>,
    next_sample: usize,
    events: u64,
    out: MartingaleSeries,
}

impl fmt::Debug for MartingaleTracker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MartingaleTracker").field("n", &self.n).field("t", &self.t).finish()
    }
}

impl MartingaleTracker {
    pub fn new(cfg0: &Configuration, kernel: KernelSpec, n_omega: usize, fs: Vec<PairFunction>, sample_times: &[f64]) -> Result<Self> {
        kernel.validate()?;
        if sample_times.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("sample_times", "must be sorted"));
        }
        let n = cfg0.len();
        let nf = fs.len();
        let mut me = Self {
            n,
            d: cfg0.dim(),
            kernel,
            // B and the post-collision velocities are even in ω
            quad: SphereQuadrature::new(cfg0.dim(), n_omega)?.even_part(),
            v: cfg0.velocities().to_vec(),
            g: vec![vec![0.0; n * n]; nf],
            g2: vec![vec![0.0; n * n]; nf],
            rate: vec![0.0; nf],
            rate2: vec![0.0; nf],
            t: 0.0,
            comp: vec![CompensatedSum::new(); nf],
            bracket: vec![CompensatedSum::new(); nf],
            jumps: vec![CompensatedSum::new(); nf],
            sample_times: sample_times.to_vec(),
            next_sample: 0,
            events: 0,
            out: MartingaleSeries {
                names: fs.iter().map(|f| f.name.clone()).collect(),
                times: Vec::new(),
                values: vec![Vec::new(); nf],
                bracket: vec![Vec::new(); nf],
                jumps: vec![Vec::new(); nf],
            },
            fs,
        };
        let mut buf = vec![(0.0, 0.0); nf];
        for i in 0..n {
            for j in (i + 1)..n {
                me.pair_integrals(i, j, &mut buf);
                for (f, &(a, b)) in buf.iter().enumerate() {
                    me.g[f][i * n + j] = a;
                    me.g[f][j * n + i] = a;
                    me.g2[f][i * n + j] = b;
                    me.g2[f][j * n + i] = b;
                }
            }
        }
        me.resum();
        Ok(me)
    }

    fn resum(&mut self) {
        let n = self.n;
        for f in 0..self.fs.len() {
            let mut s = CompensatedSum::new();
            let mut s2 = CompensatedSum::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    s.add(self.g[f][i * n + j]);
                    s2.add(self.g2[f][i * n + j]);
                }
            }
            self.rate[f] = s.value();
            self.rate2[f] = s2.value();
        }
    }

    /// (∫ B F, ∫ B F²) for the pair (i, j) by the ω-rule.
    fn pair_integrals(&self, i: usize, j: usize, out: &mut [(f64, f64)]) {
        out.iter_mut().for_each(|x| *x = (0.0, 0.0));
        let (vi, vj) = (self.v[i], self.v[j]);
        let u = vi - vj;
        if u.norm2() == 0.0 && matches!(self.kernel, KernelSpec::HardSphere) {
            return;
        }
        let axis = if u.norm2() > 0.0 { u } else { Velocity::new(1.0, 0.0, 0.0) };
        for (omega, w) in self.quad.oriented(axis) {
            let bw = self.kernel.eval(u, omega) * w;
            if bw == 0.0 {
                continue;
            }
            let (pi, pj) = collide_pair(vi, vj, omega);
            for (f, o) in self.fs.iter().zip(out.iter_mut()) {
                let x = f.eval(vi, vj, pi, pj);
                o.0 += bw * x;
                o.1 += bw * x * x;
            }
        }
    }

    fn advance(&mut self, t: f64) {
        while self.next_sample < self.sample_times.len() && self.sample_times[self.next_sample] < t {
            let s = self.sample_times[self.next_sample];
            self.integrate_to(s);
            self.snapshot();
            self.next_sample += 1;
        }
        self.integrate_to(t);
    }

    fn integrate_to(&mut self, t: f64) {
        let dt = t - self.t;
        if dt <= 0.0 {
            return;
        }
        let n2 = (self.n * self.n) as f64;
        for f in 0..self.fs.len() {
            self.comp[f].add(dt * self.rate[f] / n2);
            self.bracket[f].add(dt * self.rate2[f] / (n2 * self.n as f64));
        }
        self.t = t;
    }

    fn snapshot(&mut self) {
        self.out.times.push(self.t);
        for f in 0..self.fs.len() {
            let j = self.jumps[f].value();
            self.out.values[f].push(j - self.comp[f].value());
            self.out.bracket[f].push(self.bracket[f].value());
            self.out.jumps[f].push(j);
        }
    }

    fn jump(&mut self, ev: &CollisionEvent) -> Result<()> {
        let (i, j) = (ev.i as usize, ev.j as usize);
        let n = self.n;
        if i >= n || j >= n {
            return Err(KacError::IndexOutOfRange { index: i.max(j), n });
        }
        self.advance(ev.t);
        let nf = n as f64;
        for (f, s) in self.fs.iter().zip(self.jumps.iter_mut()) {
            s.add(f.eval(ev.pre_i, ev.pre_j, ev.post_i, ev.post_j) / nf);
        }
        self.v[i] = ev.post_i;
        self.v[j] = ev.post_j;
        let m = self.fs.len();
        let mut buf = vec![(0.0, 0.0); m];
        for &a in &[i, j] {
            for k in 0..n {
                if k == a || (a == j && k == i) {
                    continue;
                }
                self.pair_integrals(a, k, &mut buf);
                for (f, &(x, y)) in buf.iter().enumerate() {
                    let old = self.g[f][a * n + k];
                    let old2 = self.g2[f][a * n + k];
                    self.rate[f] += x - old;
                    self.rate2[f] += y - old2;
                    self.g[f][a * n + k] = x;
                    self.g[f][k * n + a] = x;
                    self.g2[f][a * n + k] = y;
                    self.g2[f][k * n + a] = y;
                }
            }
        }
        Ok(())
    }

    /// Closes the path at `horizon` and returns the sampled series.
    pub fn finish(mut self, horizon: f64) -> MartingaleSeries {
        self.advance(horizon);
        while self.next_sample < self.sample_times.len() && self.sample_times[self.next_sample] <= horizon {
            self.snapshot();
            self.next_sample += 1;
        }
        self.out
    }

    pub fn dim(&self) -> Dim {
        self.d
    }
}

impl EventSink for MartingaleTracker {
    fn record(&mut self, ev: &CollisionEvent) -> Result<()> {
        self.jump(ev)?;
        // the running rate sums drift by cancellation; refresh now and then
        self.events += 1;
        if self.events.is_multiple_of(4096) {
            self.resum();
        }
        Ok(())
    }
}

/// Replays `log` from `cfg0` and samples M^{N,F} at `times`.
pub fn martingale_residual(
    cfg0: &Configuration,
    log: &EventLog,
    fs: Vec<PairFunction>,
    kernel: KernelSpec,
    n_omega: usize,
    times: &[f64],
) -> Result<MartingaleSeries> {
    let mut tr = MartingaleTracker::new(cfg0, kernel, n_omega, fs, times)?;
    for ev in &log.events {
        if ev.t > log.horizon {
            break;
        }
        tr.record(ev)?;
    }
    Ok(tr.finish(log.horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{reproject, simulate, simulate_logged, SchedulerKind, SimulationOptions};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn cfg(n: usize, seed: u64) -> Configuration {
        let mut rng = stream_rng(seed, 0);
        let v: Vec<Velocity> = (0..n)
            .map(|_| Velocity::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        reproject(&Configuration::new(Dim::Three, 1.0, v).unwrap()).unwrap()
    }

    #[test]
    fn zero_function_gives_zero_path() {
        let c = cfg(20, 1);
        let mut rng = stream_rng(2, 0);
        let (log, _) = simulate_logged(&c, 1.0, KernelSpec::HardSphere, SchedulerKind::ExactGillespie, &mut rng, &[]).unwrap();
        let s = martingale_residual(&c, &log, vec![PairFunction::zero()], KernelSpec::HardSphere, 16, &[0.5, 1.0]).unwrap();
        assert_eq!(s.values[0], vec![0.0, 0.0]);
    }

    #[test]
    fn standard_family_is_symmetric() {
        let p = [
            Velocity::new(0.1, 0.7, -0.3),
            Velocity::new(-1.0, 0.2, 0.4),
            Velocity::new(0.5, -0.5, 0.9),
            Velocity::new(1.3, 0.0, -0.1),
        ];
        for f in PairFunction::standard_family() {
            assert!(f.symmetry_defect(&[p]) < 1e-15, "{}", f.name);
        }
    }

    #[test]
    fn constant_function_compensator_matches_integrated_rate() {
        // for F ≡ 1 the compensator is ∫ R(t) dt / N
        let c = cfg(30, 3);
        let mut rng = stream_rng(4, 0);
        let mut tr = MartingaleTracker::new(&c, KernelSpec::HardSphere, 32, vec![PairFunction::new("one", |_, _, _, _| 1.0)], &[2.0]).unwrap();
        let out = simulate(&c, 2.0, KernelSpec::HardSphere, SchedulerKind::ExactGillespie, &mut rng, &[], &mut tr, SimulationOptions::default()).unwrap();
        let s = tr.finish(2.0);
        let comp = s.jumps[0][0] - s.values[0][0];
        let expect = out.stats.integrated_rate / 30.0;
        assert!((comp - expect).abs() < 1e-9 * expect, "{comp} {expect}");
        assert!((s.jumps[0][0] - out.stats.events as f64 / 30.0).abs() < 1e-12);
    }
}
