use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::Velocity;

/// One jump of the walk. Indices satisfy `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub t: f64,
    pub i: u32,
    pub j: u32,
    pub omega: Velocity,
    pub pre_i: Velocity,
    pub pre_j: Velocity,
    pub post_i: Velocity,
    pub post_j: Velocity,
}

impl CollisionEvent {
    /// Relative pair-momentum and pair-energy errors of the jump.
    pub fn conservation_errors(&self) -> (f64, f64) {
        let e_pre = self.pre_i.norm2() + self.pre_j.norm2();
        let e_post = self.post_i.norm2() + self.post_j.norm2();
        let scale = e_pre.sqrt().max(f64::MIN_POSITIVE);
        let dp = ((self.pre_i + self.pre_j) - (self.post_i + self.post_j)).norm() / scale;
        let de = (e_pre - e_post).abs() / e_pre.max(f64::MIN_POSITIVE);
        (dp, de)
    }

    /// Whether the raw event lies on the conservation set within `tol` (relative).
    pub fn on_conservation_set(&self, tol: f64) -> bool {
        let (dp, de) = self.conservation_errors();
        dp <= tol && de <= tol
    }
}

pub trait EventSink {
    fn record(&mut self, ev: &CollisionEvent) -> Result<()>;
}

/// In-memory, time-ordered event log on [0, horizon].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub horizon: f64,
    pub events: Vec<CollisionEvent>,
}

impl EventLog {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_time_ordered(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t < w[1].t)
            && self.events.iter().all(|e| e.t >= 0.0 && e.t <= self.horizon)
    }
}

impl EventSink for EventLog {
    fn record(&mut self, ev: &CollisionEvent) -> Result<()> {
        self.events.push(*ev);
        Ok(())
    }
}

/// Discards events, keeping only their number.
#[derive(Debug, Clone, Copy, Default)]
pub struct CountingSink {
    pub count: u64,
}

impl EventSink for CountingSink {
    fn record(&mut self, _ev: &CollisionEvent) -> Result<()> {
        self.count += 1;
        Ok(())
    }
}

impl<F: FnMut(&CollisionEvent) -> Result<()>> EventSink for F {
    fn record(&mut self, ev: &CollisionEvent) -> Result<()> {
        self(ev)
    }
}
