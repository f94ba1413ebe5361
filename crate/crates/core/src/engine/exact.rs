use rand::Rng;

use super::event::CollisionEvent;
use super::majorant::StepOutcome;
use super::collide_pair;
use crate::error::{KacError, Result};
use crate::geometry::{compensated_sum, Configuration, Dim, Velocity};
use crate::kernel::{pair_rate, sample_scattering_direction, KernelSpec};

/// Full recomputation interval for the incrementally maintained rates.
pub const RATE_REFRESH_INTERVAL: u64 = 100_000;

/// Direct-method scheduler.
///
/// Keeps the per-particle row sums ρ_i = Σ_{j≠i} r_ij; the total rate is
/// Σ_i ρ_i / 2. A pair is drawn by picking i with probability ρ_i / Σρ and
/// then j with probability r_ij / ρ_i, which gives {i, j} probability
/// r_ij / R. After a jump only the rates touching i or j change.
#[derive(Debug, Clone)]
pub struct ExactScheduler {
    kernel: KernelSpec,
    dim: Dim,
    n: usize,
    rows: Vec<f64>,
    row_total: f64,
    since_refresh: u64,
}

impl ExactScheduler {
    pub fn new(cfg: &Configuration, kernel: KernelSpec) -> Self {
        let mut s = Self {
            kernel,
            dim: cfg.dim(),
            n: cfg.len(),
            rows: vec![0.0; cfg.len()],
            row_total: 0.0,
            since_refresh: 0,
        };
        s.refresh(cfg);
        s
    }

    #[inline]
    fn rate(&self, v: Velocity, w: Velocity) -> f64 {
        pair_rate(v, w, &self.kernel, self.dim, self.n)
    }

    /// Recomputes all row sums from scratch, O(N²).
    pub fn refresh(&mut self, cfg: &Configuration) {
        let v = cfg.velocities();
        for i in 0..self.n {
            let vi = v[i];
            self.rows[i] = compensated_sum(
                v.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &vj)| self.rate(vi, vj)),
            );
        }
        self.row_total = compensated_sum(self.rows.iter().copied());
        self.since_refresh = 0;
    }

    pub fn total_rate(&self) -> f64 {
        0.5 * self.row_total
    }

    /// Draws a pair with probability proportional to its rate without jumping.
    pub fn select_pair<R: Rng + ?Sized>(&self, cfg: &Configuration, rng: &mut R) -> Result<(usize, usize)> {
        if !(self.row_total > 0.0) {
            return Err(KacError::Absorbing);
        }
        let v = cfg.velocities();
        let mut target = rng.random::<f64>() * self.row_total;
        let mut i = self.n;
        let mut last_pos = 0;
        for (k, &r) in self.rows.iter().enumerate() {
            if r > 0.0 {
                last_pos = k;
                if target < r {
                    i = k;
                    break;
                }
                target -= r;
            }
        }
        if i == self.n {
            i = last_pos;
        }
        let vi = v[i];
        // the row sum may carry incremental rounding; draw against the exact row
        let row: f64 = v
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &w)| self.rate(vi, w))
            .sum();
        let mut target = rng.random::<f64>() * row;
        let mut j = self.n;
        let mut last_pos = usize::MAX;
        for (k, &w) in v.iter().enumerate() {
            if k == i {
                continue;
            }
            let r = self.rate(vi, w);
            if r > 0.0 {
                last_pos = k;
                if target < r {
                    j = k;
                    break;
                }
                target -= r;
            }
        }
        if j == self.n {
            if last_pos == usize::MAX {
                return Err(KacError::Absorbing);
            }
            j = last_pos;
        }
        Ok((i.min(j), i.max(j)))
    }

    /// Draws the next event and applies it to `cfg`.
    pub fn step<R: Rng + ?Sized>(&mut self, cfg: &mut Configuration, t_now: f64, rng: &mut R) -> Result<StepOutcome> {
        let total = self.total_rate();
        if !(total > 0.0) {
            return Err(KacError::Absorbing);
        }
        let wait = -(1.0 - rng.random::<f64>()).ln() / total;
        let (i, j) = self.select_pair(cfg, rng)?;
        let ev = self.jump(cfg, t_now + wait, i, j, rng)?;
        Ok(StepOutcome::Accepted(ev))
    }

    fn jump<R: Rng + ?Sized>(&mut self, cfg: &mut Configuration, t: f64, i: usize, j: usize, rng: &mut R) -> Result<CollisionEvent> {
        let (pre_i, pre_j) = {
            let v = cfg.velocities();
            (v[i], v[j])
        };
        let omega = sample_scattering_direction(pre_i - pre_j, self.dim, &self.kernel, rng)?;
        let (post_i, post_j) = collide_pair(pre_i, pre_j, omega);
        {
            let v = cfg.velocities_mut();
            v[i] = post_i;
            v[j] = post_j;
        }
        self.update_after_jump(cfg, i, j, (pre_i, pre_j));
        Ok(CollisionEvent {
            t,
            i: i as u32,
            j: j as u32,
            omega,
            pre_i,
            pre_j,
            post_i,
            post_j,
        })
    }

    fn update_after_jump(&mut self, cfg: &Configuration, i: usize, j: usize, old: (Velocity, Velocity)) {
        self.since_refresh += 1;
        if self.since_refresh >= RATE_REFRESH_INTERVAL {
            self.refresh(cfg);
            return;
        }
        let v = cfg.velocities();
        let (mut row_i, mut row_j) = (0.0, 0.0);
        for k in 0..self.n {
            if k == i || k == j {
                continue;
            }
            let vk = v[k];
            let old_sum = self.rate(vk, old.0) + self.rate(vk, old.1);
            let ri = self.rate(vk, v[i]);
            let rj = self.rate(vk, v[j]);
            self.rows[k] += ri + rj - old_sum;
            if self.rows[k] < 0.0 {
                self.rows[k] = 0.0;
            }
            row_i += ri;
            row_j += rj;
        }
        let rij = self.rate(v[i], v[j]);
        self.rows[i] = row_i + rij;
        self.rows[j] = row_j + rij;
        self.row_total = compensated_sum(self.rows.iter().copied());
    }
}

/// One exact step on an owned configuration. O(N²) because the rates are rebuilt.
pub fn step_exact<R: Rng + ?Sized>(
    cfg: &Configuration,
    t_now: f64,
    kernel: KernelSpec,
    rng: &mut R,
) -> Result<(CollisionEvent, Configuration)> {
    let mut s = ExactScheduler::new(cfg, kernel);
    let mut out = cfg.clone();
    match s.step(&mut out, t_now, rng)? {
        StepOutcome::Accepted(ev) => Ok((ev, out)),
        StepOutcome::Rejected { .. } => unreachable!("direct method never rejects"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::total_rate;
    use crate::rng::stream_rng;

    fn cloud(n: usize, seed: u64) -> Configuration {
        let mut rng = stream_rng(seed, 0);
        let v = (0..n)
            .map(|_| Velocity::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        crate::engine::reproject(&Configuration::new(Dim::Three, 1.0, v).unwrap()).unwrap()
    }

    #[test]
    fn head_on_pair_is_always_selected() {
        let cfg = Configuration::new(
            Dim::Three,
            0.5,
            vec![Velocity::new(1.0, 0.0, 0.0), Velocity::new(-1.0, 0.0, 0.0)],
        )
        .unwrap();
        let mut rng = stream_rng(3, 0);
        let (ev, next) = step_exact(&cfg, 0.0, KernelSpec::HardSphere, &mut rng).unwrap();
        assert_eq!((ev.i, ev.j), (0, 1));
        assert!(ev.t > 0.0);
        assert!(next.validate().passed);
    }

    #[test]
    fn incremental_rates_match_recomputation() {
        let mut cfg = cloud(60, 5);
        let k = KernelSpec::HardSphere;
        let mut s = ExactScheduler::new(&cfg, k);
        let mut rng = stream_rng(9, 1);
        let mut t = 0.0;
        for _ in 0..10_000 {
            if let StepOutcome::Accepted(ev) = s.step(&mut cfg, t, &mut rng).unwrap() {
                t = ev.t;
            }
        }
        let scratch = total_rate(&cfg, &k);
        assert!((s.total_rate() - scratch).abs() / scratch < 1e-9);
    }

    #[test]
    fn absorbing_state_is_signalled() {
        let cfg = Configuration::new(Dim::Three, 1.0, vec![Velocity::new(0.1, 0.2, 0.3); 3]).unwrap();
        let mut rng = stream_rng(1, 1);
        assert_eq!(
            step_exact(&cfg, 0.0, KernelSpec::HardSphere, &mut rng).unwrap_err(),
            KacError::Absorbing
        );
    }
}
