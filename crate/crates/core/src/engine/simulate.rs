use rand::Rng;
use serde::Serialize;

use super::event::{EventLog, EventSink};
use super::exact::ExactScheduler;
use super::majorant::{MajorantScheduler, StepOutcome};
use super::{reproject, reproject_in_place, SchedulerKind};
use crate::error::{invalid, Result};
use crate::geometry::{Configuration, TOL_CFG};
use crate::kernel::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    /// Relative drift that triggers a projection back onto the microcanonical set.
    pub reproject_threshold: f64,
    /// Accepted events between drift checks; 0 means every N events.
    pub drift_check_interval: u64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            reproject_threshold: TOL_CFG,
            drift_check_interval: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SimulationStats {
    pub events: u64,
    pub proposals: u64,
    pub max_pair_momentum_error: f64,
    pub max_pair_energy_error: f64,
    /// Largest configuration drift observed before any projection.
    pub max_drift_before_reprojection: f64,
    pub reprojections: u64,
    /// ∫_0^T R(t) dt along the path (direct-method scheduler only).
    pub integrated_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub snapshots: Vec<(f64, Configuration)>,
    pub final_config: Configuration,
    pub stats: SimulationStats,
}

enum Engine {
    Exact(ExactScheduler),
    Majorant(MajorantScheduler),
}

impl Engine {
    fn step<R: Rng + ?Sized>(&mut self, cfg: &mut Configuration, t: f64, rng: &mut R) -> Result<StepOutcome> {
        match self {
            Engine::Exact(s) => s.step(cfg, t, rng),
            Engine::Majorant(s) => s.step(cfg, t, rng),
        }
    }

    fn refresh(&mut self, cfg: &Configuration) {
        match self {
            Engine::Exact(s) => s.refresh(cfg),
            Engine::Majorant(s) => s.refresh(cfg),
        }
    }

    fn rate(&self) -> Option<f64> {
        match self {
            Engine::Exact(s) => Some(s.total_rate()),
            Engine::Majorant(_) => None,
        }
    }
}

/// Runs the walk on [0, horizon], streaming every jump into `sink`.
///
/// Snapshots are the configuration at each requested time (after every
/// jump with t ≤ s), projected onto the microcanonical set before export.
pub fn simulate<R: Rng + ?Sized, S: EventSink + ?Sized>(
    cfg0: &Configuration,
    horizon: f64,
    kernel: KernelSpec,
    scheduler: SchedulerKind,
    rng: &mut R,
    snapshot_times: &[f64],
    sink: &mut S,
    options: SimulationOptions,
) -> Result<SimulationOutput> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("T", "horizon must be positive"));
    }
    if snapshot_times.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("snapshot_times", "must be sorted"));
    }
    kernel.validate()?;
    let mut cfg = cfg0.clone();
    let mut engine = match scheduler {
        SchedulerKind::ExactGillespie => Engine::Exact(ExactScheduler::new(&cfg, kernel)),
        SchedulerKind::MajorantRejection => Engine::Majorant(MajorantScheduler::new(&cfg, kernel)),
    };
    let check_every = if options.drift_check_interval == 0 {
        cfg.len() as u64
    } else {
        options.drift_check_interval
    };

    let mut stats = SimulationStats::default();
    let mut snapshots = Vec::with_capacity(snapshot_times.len());
    let mut next_snap = 0;
    let mut t = 0.0;
    let mut since_check = 0u64;

    loop {
        let rate_before = engine.rate();
        let outcome = engine.step(&mut cfg, t, rng)?;
        let t_next = outcome.time();
        let t_end = t_next.min(horizon);
        while next_snap < snapshot_times.len() && snapshot_times[next_snap] < t_next {
            let s = snapshot_times[next_snap];
            if s > horizon {
                break;
            }
            // the pending jump has already been applied to cfg; undo for the snapshot
            let state = match &outcome {
                StepOutcome::Accepted(ev) => {
                    let mut prev = cfg.clone();
                    let v = prev.velocities_mut();
                    v[ev.i as usize] = ev.pre_i;
                    v[ev.j as usize] = ev.pre_j;
                    prev
                }
                StepOutcome::Rejected { .. } => cfg.clone(),
            };
            snapshots.push((s, export(state)?));
            next_snap += 1;
        }
        if let Some(r) = rate_before {
            stats.integrated_rate += r * (t_end - t);
        }
        if t_next > horizon {
            if let StepOutcome::Accepted(ev) = outcome {
                let v = cfg.velocities_mut();
                v[ev.i as usize] = ev.pre_i;
                v[ev.j as usize] = ev.pre_j;
            }
            break;
        }
        t = t_next;
        stats.proposals += 1;
        if let StepOutcome::Accepted(ev) = outcome {
            stats.events += 1;
            let (dp, de) = ev.conservation_errors();
            stats.max_pair_momentum_error = stats.max_pair_momentum_error.max(dp);
            stats.max_pair_energy_error = stats.max_pair_energy_error.max(de);
            sink.record(&ev)?;
            since_check += 1;
            if since_check >= check_every {
                since_check = 0;
                let (de, dm) = cfg.drifts();
                let drift = de.max(dm);
                stats.max_drift_before_reprojection = stats.max_drift_before_reprojection.max(drift);
                if drift > options.reproject_threshold {
                    reproject_in_place(&mut cfg)?;
                    engine.refresh(&cfg);
                    stats.reprojections += 1;
                }
            }
        }
    }
    let (de, dm) = cfg.drifts();
    stats.max_drift_before_reprojection = stats.max_drift_before_reprojection.max(de.max(dm));
    while next_snap < snapshot_times.len() && snapshot_times[next_snap] <= horizon {
        snapshots.push((snapshot_times[next_snap], export(cfg.clone())?));
        next_snap += 1;
    }
    Ok(SimulationOutput {
        snapshots,
        final_config: cfg,
        stats,
    })
}

/// Snapshots leave the engine on the microcanonical set.
fn export(state: Configuration) -> Result<Configuration> {
    if state.validate().passed {
        Ok(state)
    } else {
        reproject(&state)
    }
}

/// [`simulate`] with an in-memory [`EventLog`].
pub fn simulate_logged<R: Rng + ?Sized>(
    cfg0: &Configuration,
    horizon: f64,
    kernel: KernelSpec,
    scheduler: SchedulerKind,
    rng: &mut R,
    snapshot_times: &[f64],
) -> Result<(EventLog, SimulationOutput)> {
    let mut log = EventLog::new(horizon);
    let out = simulate(
        cfg0,
        horizon,
        kernel,
        scheduler,
        rng,
        snapshot_times,
        &mut log,
        SimulationOptions::default(),
    )?;
    Ok((log, out))
}
