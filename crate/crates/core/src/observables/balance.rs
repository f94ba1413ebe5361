//! Pathwise balance P_T(φ_T) - P_0(φ_0) - ∫ P_t(∂_t φ) dt = Q^N(∇̄φ).

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::engine::EventLog;
use crate::error::{invalid, KacError, Result};
use crate::geometry::{CompensatedSum, Configuration, Velocity};
use crate::kernel::gauss_legendre;

type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type VelFn = Arc<dyn Fn(Velocity) -> f64 + Send + Sync>;

/// One separable piece g(t) h(v) of a test function.
#[derive(Clone)]
pub struct Term {
    pub g: TimeFn,
    pub dg: TimeFn,
    pub h: VelFn,
}

/// φ(t, v) = Σ_m g_m(t) h_m(v).
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub terms: Vec<Term>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TestFunction({}, {} terms)", self.name, self.terms.len())
    }
}

fn term(g: impl Fn(f64) -> f64 + Send + Sync + 'static, dg: impl Fn(f64) -> f64 + Send + Sync + 'static, h: impl Fn(Velocity) -> f64 + Send + Sync + 'static) -> Term {
    Term {
        g: Arc::new(g),
        dg: Arc::new(dg),
        h: Arc::new(h),
    }
}

impl TestFunction {
    pub fn new(name: impl Into<String>, terms: Vec<Term>) -> Self {
        Self { name: name.into(), terms }
    }

    /// Time-independent φ(v).
    pub fn static_fn(name: impl Into<String>, h: impl Fn(Velocity) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(name, vec![term(|_| 1.0, |_| 0.0, h)])
    }

    pub fn value(&self, t: f64, v: Velocity) -> f64 {
        self.terms.iter().map(|m| (m.g)(t) * (m.h)(v)).sum()
    }

    pub fn time_derivative(&self, t: f64, v: Velocity) -> f64 {
        self.terms.iter().map(|m| (m.dg)(t) * (m.h)(v)).sum()
    }

    /// ∇̄φ(t) = φ(v') + φ(v'_*) - φ(v) - φ(v_*).
    pub fn collision_difference(&self, t: f64, v: Velocity, vs: Velocity, vp: Velocity, vps: Velocity) -> f64 {
        self.value(t, vp) + self.value(t, vps) - self.value(t, v) - self.value(t, vs)
    }

    /// The ten smooth functions used by the pathwise balance check.
    pub fn standard_family() -> Vec<TestFunction> {
        let x = |v: Velocity, a: usize| v.0[a];
        vec![
            TestFunction::static_fn("one", |_| 1.0),
            TestFunction::static_fn("speed2", |v| v.norm2()),
            TestFunction::new("t_v1_cubed", vec![term(|t| t, |_| 1.0, move |v| x(v, 0).powi(3))]),
            TestFunction::new("cos_v1_1pt", vec![term(|t| 1.0 + t, |_| 1.0, move |v| x(v, 0).cos())]),
            TestFunction::new("gauss_sin_t", vec![term(f64::sin, f64::cos, |v| (-0.5 * v.norm2()).exp())]),
            TestFunction::new("v1v2_t2", vec![term(|t| t * t, |t| 2.0 * t, move |v| x(v, 0) * x(v, 1))]),
            TestFunction::new("speed4_exp", vec![term(|t| (-t).exp(), |t| -(-t).exp(), |v| v.norm2() * v.norm2())]),
            TestFunction::new(
                "sin_v3_cos_v1",
                vec![term(|t| 1.0 + t * t, |t| 2.0 * t, move |v| x(v, 2).sin() * x(v, 0).cos())],
            ),
            TestFunction::new(
                "v2_cubed_minus_v2_t",
                vec![term(|_| 1.0, |_| 0.0, move |v| x(v, 1).powi(3)), term(|t| -t, |_| -1.0, move |v| x(v, 1))],
            ),
            TestFunction::new(
                "bump_cos_2t",
                vec![term(|t| (2.0 * t).cos(), |t| -2.0 * (2.0 * t).sin(), move |v| (-(x(v, 0) - 0.5).powi(2)).exp())],
            ),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalanceReport {
    /// P_T(φ_T) - P_0(φ_0) - ∫ P_t(∂_t φ) dt.
    pub lhs: f64,
    /// Q^N(∇̄φ).
    pub rhs: f64,
    pub residual: f64,
    pub events: usize,
    /// (#events / N) · ‖∇̄φ‖_∞ with ∇̄φ read as a function of four free
    /// velocities (collision invariants keep a nonzero scale), bounded by
    /// max Σ|φ| over the four velocities of each event.
    pub scale: f64,
}

impl BalanceReport {
    pub fn within(&self, rel: f64) -> bool {
        self.residual.abs() <= rel * self.scale.max(f64::MIN_POSITIVE) || self.residual == 0.0
    }
}

/// Evaluates both sides of the balance on the raw path.
///
/// π^N_t is piecewise constant, so ∫ P_t(∂_t φ) splits into a sum over
/// inter-event intervals of π_k(h_m) ∫ g'_m; the time integrals use a
/// 4-node Gauss–Legendre rule on each interval. π_k(h_m) is updated in
/// O(1) per event.
pub fn balance_residual(cfg0: &Configuration, final_cfg: &Configuration, log: &EventLog, phi: &TestFunction) -> Result<BalanceReport> {
    let n = cfg0.len();
    if final_cfg.len() != n || final_cfg.dim() != cfg0.dim() {
        return Err(invalid("final_cfg", "must match the initial configuration"));
    }
    let horizon = log.horizon;
    let nf = n as f64;
    let (gx, gw) = gauss_legendre(4);
    let mut means: Vec<CompensatedSum> = phi
        .terms
        .iter()
        .map(|m| cfg0.velocities().iter().map(|&v| (m.h)(v)).collect())
        .collect();
    let mut v = cfg0.velocities().to_vec();
    let mut integral = CompensatedSum::new();
    let mut rhs = CompensatedSum::new();
    let mut worst = 0.0f64;
    let mut t = 0.0;
    let advance = |means: &[CompensatedSum], t0: f64, t1: f64, integral: &mut CompensatedSum| {
        if t1 <= t0 {
            return;
        }
        let half = 0.5 * (t1 - t0);
        let mid = 0.5 * (t1 + t0);
        for (m, s) in phi.terms.iter().zip(means) {
            let gint: f64 = gx.iter().zip(&gw).map(|(x, w)| w * (m.dg)(mid + half * x)).sum::<f64>() * half;
            if gint != 0.0 {
                integral.add(gint * s.value() / nf);
            }
        }
    };
    let mut events = 0usize;
    for ev in &log.events {
        if ev.t > horizon {
            break;
        }
        let (i, j) = (ev.i as usize, ev.j as usize);
        if i >= n || j >= n {
            return Err(KacError::IndexOutOfRange { index: i.max(j), n });
        }
        advance(&means, t, ev.t, &mut integral);
        t = ev.t;
        let jump = phi.collision_difference(t, ev.pre_i, ev.pre_j, ev.post_i, ev.post_j);
        let size = [ev.pre_i, ev.pre_j, ev.post_i, ev.post_j].iter().map(|&w| phi.value(t, w).abs()).sum::<f64>();
        worst = worst.max(size);
        rhs.add(jump / nf);
        for (m, s) in phi.terms.iter().zip(means.iter_mut()) {
            s.add((m.h)(ev.post_i) - (m.h)(v[i]));
            s.add((m.h)(ev.post_j) - (m.h)(v[j]));
        }
        v[i] = ev.post_i;
        v[j] = ev.post_j;
        events += 1;
    }
    advance(&means, t, horizon, &mut integral);
    let end: CompensatedSum = final_cfg.velocities().iter().map(|&v| phi.value(horizon, v)).collect();
    let start: CompensatedSum = cfg0.velocities().iter().map(|&v| phi.value(0.0, v)).collect();
    let lhs = (end.value() - start.value()) / nf - integral.value();
    let rhs = rhs.value();
    Ok(BalanceReport {
        lhs,
        rhs,
        residual: lhs - rhs,
        events,
        scale: events as f64 / nf * worst,
    })
}
