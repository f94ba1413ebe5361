//! Exact continuous-time simulation of the Kac walk.
//!
//! Two schedulers produce the same law: [`ExactScheduler`] samples the
//! next pair directly from the maintained pair rates (O(N) per event),
//! [`MajorantScheduler`] thins uniform pair proposals at a dominating
//! rate (O(1) per proposal).

mod event;
mod exact;
mod majorant;
mod simulate;

pub use event::{CollisionEvent, CountingSink, EventLog, EventSink};
pub use exact::{step_exact, ExactScheduler};
pub use majorant::{step_rejection, MajorantScheduler, StepOutcome};
pub use simulate::{simulate, simulate_logged, SimulationOptions, SimulationOutput, SimulationStats};

use serde::{Deserialize, Serialize};

use crate::error::{KacError, Result};
use crate::geometry::{compensated_sum, Configuration, Velocity};
use crate::kernel::{pair_rate, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    ExactGillespie,
    #[default]
    MajorantRejection,
}

impl SchedulerKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::ExactGillespie => "exact_gillespie",
            SchedulerKind::MajorantRejection => "majorant_rejection",
        }
    }
}

/// Post-collision pair for the rule v_i' = v_i + (ω·(v_j - v_i))ω, v_j' = v_j - (ω·(v_j - v_i))ω.
#[inline]
pub fn collide_pair(vi: Velocity, vj: Velocity, omega: Velocity) -> (Velocity, Velocity) {
    let p = omega.dot(vj - vi);
    (vi + omega * p, vj - omega * p)
}

/// Returns a new configuration with the collision (i, j, ω) applied.
pub fn apply_collision(cfg: &Configuration, i: usize, j: usize, omega: Velocity) -> Result<Configuration> {
    let n = cfg.len();
    for idx in [i, j] {
        if idx >= n {
            return Err(KacError::IndexOutOfRange { index: idx, n });
        }
    }
    if i == j {
        return Err(KacError::SameParticle(i));
    }
    let mut out = cfg.clone();
    let v = out.velocities_mut();
    let (a, b) = collide_pair(v[i], v[j], omega);
    v[i] = a;
    v[j] = b;
    Ok(out)
}

/// Σ_{i<j} pair_rate(v_i, v_j), computed from scratch in O(N²).
pub fn total_rate(cfg: &Configuration, kernel: &KernelSpec) -> f64 {
    let v = cfg.velocities();
    let n = v.len();
    let d = cfg.dim();
    compensated_sum((0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| pair_rate(v[i], v[j], kernel, d, n)))
}

/// Projects onto the microcanonical set: zero mean velocity, mean energy exactly `e`.
pub fn reproject(cfg: &Configuration) -> Result<Configuration> {
    let mut out = cfg.clone();
    reproject_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn reproject_in_place(cfg: &mut Configuration) -> Result<()> {
    let e = cfg.energy();
    let n = cfg.len() as f64;
    let mean = cfg.mean_velocity();
    let v = cfg.velocities_mut();
    for x in v.iter_mut() {
        *x -= mean;
    }
    let en = compensated_sum(v.iter().map(|x| 0.5 * x.norm2())) / n;
    if !(en > 0.0) {
        return Err(KacError::Degenerate);
    }
    let s = (e / en).sqrt();
    for x in v.iter_mut() {
        *x = *x * s;
    }
    Ok(())
}
