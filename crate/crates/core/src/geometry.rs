//! Velocity-space primitives: vectors, the conserved-quantity map and
//! microcanonical configurations.
//!
//! Velocities are stored as `[f64; 3]` for both supported dimensions. In
//! two dimensions the third component is identically zero, and every
//! operation in the crate (collisions, scattering directions) preserves
//! that, so the planar case needs no separate code path.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, KacError, Result};

/// Relative tolerance for membership in the microcanonical set.
pub const TOL_CFG: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    pub fn new(d: usize) -> Result<Self> {
        match d {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            other => Err(KacError::UnsupportedDimension(other)),
        }
    }

    #[inline]
    pub fn get(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    #[inline]
    pub fn as_f64(self) -> f64 {
        self.get() as f64
    }
}

impl TryFrom<usize> for Dim {
    type Error = KacError;
    fn try_from(d: usize) -> Result<Self> {
        Dim::new(d)
    }
}

impl From<Dim> for usize {
    fn from(d: Dim) -> usize {
        d.get()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity(pub [f64; 3]);

impl Velocity {
    pub const ZERO: Velocity = Velocity([0.0; 3]);

    #[inline]
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Velocity([x, y, z])
    }

    #[inline]
    pub fn planar(x: f64, y: f64) -> Self {
        Velocity([x, y, 0.0])
    }

    /// Builds a velocity from `d` components; missing components are zero.
    pub fn from_slice(c: &[f64]) -> Self {
        let mut v = [0.0; 3];
        for (dst, src) in v.iter_mut().zip(c) {
            *dst = *src;
        }
        Velocity(v)
    }

    #[inline]
    pub fn dot(self, o: Velocity) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline]
    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    #[inline]
    pub fn components(&self, d: Dim) -> &[f64] {
        &self.0[..d.get()]
    }
}

impl Add for Velocity {
    type Output = Velocity;
    #[inline]
    fn add(self, o: Velocity) -> Velocity {
        Velocity([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Velocity {
    type Output = Velocity;
    #[inline]
    fn sub(self, o: Velocity) -> Velocity {
        Velocity([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Neg for Velocity {
    type Output = Velocity;
    #[inline]
    fn neg(self) -> Velocity {
        Velocity([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl Mul<f64> for Velocity {
    type Output = Velocity;
    #[inline]
    fn mul(self, s: f64) -> Velocity {
        Velocity([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl AddAssign for Velocity {
    #[inline]
    fn add_assign(&mut self, o: Velocity) {
        *self = *self + o;
    }
}

impl SubAssign for Velocity {
    #[inline]
    fn sub_assign(&mut self, o: Velocity) {
        *self = *self - o;
    }
}

/// Energy and momentum carried by one velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservablePair {
    pub zeta0: f64,
    pub zeta: Velocity,
}

pub fn eval_zeta(v: Velocity) -> ObservablePair {
    ObservablePair {
        zeta0: 0.5 * v.norm2(),
        zeta: v,
    }
}

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// N velocities with a declared energy per particle.
///
/// Construction only checks shape and finiteness; membership in the
/// microcanonical set is checked by [`Configuration::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    dim: Dim,
    energy: f64,
    velocities: Vec<Velocity>,
}

/// Outcome of a microcanonical membership check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    /// |(1/N) sum |v|^2/2 - e| / e
    pub energy_drift: f64,
    /// max over components of |(1/N) sum v| / sqrt(2e)
    pub momentum_drift: f64,
}

impl Configuration {
    pub fn new(dim: Dim, energy: f64, velocities: Vec<Velocity>) -> Result<Self> {
        if velocities.len() < 2 {
            return Err(invalid("N", "N ≥ 2 required"));
        }
        if !(energy > 0.0 && energy.is_finite()) {
            return Err(invalid("e", "energy per particle must be positive"));
        }
        for (i, v) in velocities.iter().enumerate() {
            if !v.is_finite() {
                return Err(KacError::NonFinite(i));
            }
            if dim == Dim::Two && v.0[2] != 0.0 {
                return Err(invalid("velocities", "planar velocity has a third component"));
            }
        }
        Ok(Self {
            dim,
            energy,
            velocities,
        })
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn energy(&self) -> f64 {
        self.energy
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    #[inline]
    pub fn velocities(&self) -> &[Velocity] {
        &self.velocities
    }

    #[inline]
    pub(crate) fn velocities_mut(&mut self) -> &mut [Velocity] {
        &mut self.velocities
    }

    pub fn into_velocities(self) -> Vec<Velocity> {
        self.velocities
    }

    /// (1/N) sum |v_i|^2 / 2 with compensated summation.
    pub fn mean_energy(&self) -> f64 {
        let n = self.len() as f64;
        compensated_sum(self.velocities.iter().map(|v| 0.5 * v.norm2())) / n
    }

    /// (1/N) sum v_i with compensated summation.
    pub fn mean_velocity(&self) -> Velocity {
        let n = self.len() as f64;
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = compensated_sum(self.velocities.iter().map(|v| v.0[k])) / n;
        }
        Velocity(out)
    }

    pub fn drifts(&self) -> (f64, f64) {
        let e = self.energy;
        let energy_drift = (self.mean_energy() - e).abs() / e;
        let m = self.mean_velocity();
        let scale = (2.0 * e).sqrt();
        let momentum_drift = m.0.iter().map(|c| c.abs()).fold(0.0, f64::max) / scale;
        (energy_drift, momentum_drift)
    }

    /// Checks membership in the microcanonical set at tolerance [`TOL_CFG`].
    pub fn validate(&self) -> ValidationReport {
        let (energy_drift, momentum_drift) = self.drifts();
        ValidationReport {
            passed: energy_drift <= TOL_CFG && momentum_drift <= TOL_CFG,
            energy_drift,
            momentum_drift,
        }
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.velocities.iter().map(|v| v.norm()).collect()
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeta_examples() {
        let z = eval_zeta(Velocity::ZERO);
        assert_eq!(z.zeta0, 0.0);
        assert_eq!(z.zeta, Velocity::ZERO);

        let z = eval_zeta(Velocity::new(1.0, 0.0, 0.0));
        assert_eq!(z.zeta0, 0.5);
        assert_eq!(z.zeta, Velocity::new(1.0, 0.0, 0.0));

        let z = eval_zeta(Velocity::planar(3.0, 4.0));
        assert_eq!(z.zeta0, 12.5);
        assert_eq!(z.zeta, Velocity::planar(3.0, 4.0));
    }

    #[test]
    fn dimension_is_restricted() {
        assert!(Dim::new(2).is_ok());
        assert!(Dim::new(3).is_ok());
        assert_eq!(Dim::new(4), Err(KacError::UnsupportedDimension(4)));
        assert_eq!(Dim::new(1), Err(KacError::UnsupportedDimension(1)));
    }

    #[test]
    fn two_particle_head_on_passes() {
        let e: f64 = 1.7;
        let s = (2.0 * e).sqrt();
        let cfg = Configuration::new(
            Dim::Three,
            e,
            vec![Velocity::new(s, 0.0, 0.0), Velocity::new(-s, 0.0, 0.0)],
        )
        .unwrap();
        let r = cfg.validate();
        assert!(r.passed);
        assert!(r.energy_drift < 1e-15);
        assert_eq!(r.momentum_drift, 0.0);
    }

    #[test]
    fn momentum_violation_is_reported() {
        let cfg = Configuration::new(
            Dim::Three,
            1.0,
            vec![Velocity::new(1.0, 0.1, 0.0), Velocity::new(-1.0, 0.0, 0.0)],
        )
        .unwrap();
        let r = cfg.validate();
        assert!(!r.passed);
        assert!((r.momentum_drift - 0.05 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn validate_is_idempotent() {
        let cfg = Configuration::new(
            Dim::Two,
            0.3,
            vec![Velocity::planar(0.2, 0.1), Velocity::planar(-0.4, 0.5)],
        )
        .unwrap();
        let before = cfg.clone();
        assert_eq!(cfg.validate(), cfg.validate());
        assert_eq!(cfg, before);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Configuration::new(Dim::Three, 1.0, vec![Velocity::ZERO]).is_err());
        assert!(Configuration::new(Dim::Three, 0.0, vec![Velocity::ZERO; 2]).is_err());
        assert_eq!(
            Configuration::new(
                Dim::Three,
                1.0,
                vec![Velocity::ZERO, Velocity::new(f64::NAN, 0.0, 0.0)]
            ),
            Err(KacError::NonFinite(1))
        );
        assert!(Configuration::new(Dim::Two, 1.0, vec![Velocity::new(0.0, 0.0, 1.0); 2]).is_err());
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut xs = vec![1.0];
        xs.extend(std::iter::repeat_n(1e-16, 10_000));
        let s = compensated_sum(xs.iter().copied());
        assert!((s - (1.0 + 1e-12)).abs() < 1e-18);
    }

    proptest::proptest! {
        #[test]
        fn zeta0_nonnegative(x in -1e3f64..1e3, y in -1e3f64..1e3, z in -1e3f64..1e3) {
            let v = Velocity::new(x, y, z);
            let z0 = eval_zeta(v).zeta0;
            proptest::prop_assert!(z0 >= 0.0);
            proptest::prop_assert_eq!(z0 == 0.0, v == Velocity::ZERO);
        }
    }
}
