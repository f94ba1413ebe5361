use rand::Rng;

use super::collide_pair;
use super::event::CollisionEvent;
use crate::error::{KacError, Result};
use crate::geometry::{Configuration, Dim};
use crate::kernel::{sample_scattering_direction, KernelSpec};

/// Proposals between forced refreshes of the cached maximum speed.
pub const VMAX_REFRESH_INTERVAL: u64 = 100_000;
/// Window over which the rejection fraction is monitored.
const REJECTION_WINDOW: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Accepted(CollisionEvent),
    /// Thinned proposal; the clock still advances to `t`.
    Rejected { t: f64 },
}

impl StepOutcome {
    pub fn time(&self) -> f64 {
        match self {
            StepOutcome::Accepted(ev) => ev.t,
            StepOutcome::Rejected { t } => *t,
        }
    }
}

/// Thinning scheduler with majorant 2·V_max on relative speeds.
///
/// Proposals arrive at rate Λ = (N-1)/2 · ∫B(2 V_max) dω and pick a
/// uniform pair; a proposal for (i, j) is accepted with probability
/// ∫B(|v_i - v_j|) dω / ∫B(2 V_max) dω.
#[derive(Debug, Clone)]
pub struct MajorantScheduler {
    kernel: KernelSpec,
    dim: Dim,
    n: usize,
    vmax: f64,
    proposals: u64,
    window_proposals: u64,
    window_rejections: u64,
    refreshes: u64,
}

impl MajorantScheduler {
    pub fn new(cfg: &Configuration, kernel: KernelSpec) -> Self {
        let mut s = Self {
            kernel,
            dim: cfg.dim(),
            n: cfg.len(),
            vmax: 0.0,
            proposals: 0,
            window_proposals: 0,
            window_rejections: 0,
            refreshes: 0,
        };
        s.refresh(cfg);
        s
    }

    pub fn refresh(&mut self, cfg: &Configuration) {
        self.vmax = cfg.max_speed();
        self.proposals = 0;
        self.window_proposals = 0;
        self.window_rejections = 0;
        self.refreshes += 1;
    }

    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    fn bound(&self) -> f64 {
        self.kernel.omega_integral_bound(2.0 * self.vmax, self.dim)
    }

    /// Proposal rate Λ.
    pub fn proposal_rate(&self) -> f64 {
        let pairs = (self.n * (self.n - 1)) as f64 / 2.0;
        pairs * self.bound() / self.n as f64
    }

    /// Acceptance probability for a pair with relative speed `rel_speed`.
    pub fn acceptance(&self, rel_speed: f64) -> f64 {
        self.kernel.omega_integral(rel_speed, self.dim) / self.bound()
    }

    pub fn step<R: Rng + ?Sized>(&mut self, cfg: &mut Configuration, t_now: f64, rng: &mut R) -> Result<StepOutcome> {
        if self.proposals >= VMAX_REFRESH_INTERVAL
            || (self.window_proposals >= REJECTION_WINDOW
                && self.window_rejections as f64 > 0.99 * self.window_proposals as f64)
        {
            self.refresh(cfg);
        }
        let lambda = self.proposal_rate();
        if !(lambda > 0.0) {
            return Err(KacError::Absorbing);
        }
        let t = t_now - (1.0 - rng.random::<f64>()).ln() / lambda;
        self.proposals += 1;
        self.window_proposals += 1;
        if self.window_proposals > REJECTION_WINDOW {
            self.window_proposals = 1;
            self.window_rejections = 0;
        }

        let n = self.n;
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (i, j) = (a.min(b), a.max(b));
        let (pre_i, pre_j) = {
            let v = cfg.velocities();
            (v[i], v[j])
        };
        let u = pre_i - pre_j;
        let accept = self.acceptance(u.norm());
        debug_assert!(accept <= 1.0 + 1e-12);
        if rng.random::<f64>() >= accept {
            self.window_rejections += 1;
            return Ok(StepOutcome::Rejected { t });
        }
        let omega = sample_scattering_direction(u, self.dim, &self.kernel, rng)?;
        let (post_i, post_j) = collide_pair(pre_i, pre_j, omega);
        {
            let v = cfg.velocities_mut();
            v[i] = post_i;
            v[j] = post_j;
        }
        // the bound must dominate at all times; raising it is always safe
        self.vmax = self.vmax.max(post_i.norm()).max(post_j.norm());
        Ok(StepOutcome::Accepted(CollisionEvent {
            t,
            i: i as u32,
            j: j as u32,
            omega,
            pre_i,
            pre_j,
            post_i,
            post_j,
        }))
    }
}

/// One thinning step on an owned configuration.
pub fn step_rejection<R: Rng + ?Sized>(
    cfg: &Configuration,
    t_now: f64,
    kernel: KernelSpec,
    rng: &mut R,
) -> Result<(StepOutcome, Configuration)> {
    let mut s = MajorantScheduler::new(cfg, kernel);
    let mut out = cfg.clone();
    let o = s.step(&mut out, t_now, rng)?;
    Ok((o, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Velocity;
    use crate::rng::stream_rng;

    #[test]
    fn head_on_always_accepts() {
        let cfg = Configuration::new(
            Dim::Three,
            0.5,
            vec![Velocity::new(1.0, 0.0, 0.0), Velocity::new(-1.0, 0.0, 0.0)],
        )
        .unwrap();
        let s = MajorantScheduler::new(&cfg, KernelSpec::HardSphere);
        assert_eq!(s.vmax(), 1.0);
        assert!((s.acceptance(2.0) - 1.0).abs() < 1e-15);
        let mut rng = stream_rng(2, 2);
        for _ in 0..100 {
            let (o, _) = step_rejection(&cfg, 0.0, KernelSpec::HardSphere, &mut rng).unwrap();
            assert!(matches!(o, StepOutcome::Accepted(_)));
        }
    }

    #[test]
    fn maxwell_never_rejects() {
        let cfg = Configuration::new(
            Dim::Two,
            1.0,
            vec![Velocity::planar(1.0, 0.5), Velocity::planar(-1.0, 0.2), Velocity::planar(0.0, -0.7)],
        )
        .unwrap();
        let s = MajorantScheduler::new(&cfg, KernelSpec::MaxwellConstant { b: 0.3 });
        assert_eq!(s.acceptance(0.1), 1.0);
    }
}
