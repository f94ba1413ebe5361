//! Collision kernels, scattering-direction sampling and sphere quadrature.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, KacError, Result};
use crate::geometry::{Dim, Velocity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[derive(Default)]
pub enum KernelSpec {
    /// B(u, ω) = |u·ω| / 2
    #[default]
    HardSphere,
    /// B(u, ω) = b. Only used as a validation oracle.
    MaxwellConstant { b: f64 },
}


/// Surface measure of the unit sphere S^{d-1}.
pub fn sphere_area(d: Dim) -> f64 {
    match d {
        Dim::Two => 2.0 * PI,
        Dim::Three => 4.0 * PI,
    }
}

/// ∫_{S^{d-1}} |ê·ω| dω for any unit vector ê.
pub fn kappa(d: Dim) -> f64 {
    match d {
        Dim::Two => 4.0,
        Dim::Three => 2.0 * PI,
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::HardSphere => Ok(()),
            KernelSpec::MaxwellConstant { b } if b > 0.0 && b.is_finite() => Ok(()),
            KernelSpec::MaxwellConstant { .. } => Err(invalid("kernel.b", "must be positive")),
        }
    }

    #[inline]
    pub fn eval(&self, u: Velocity, omega: Velocity) -> f64 {
        match *self {
            KernelSpec::HardSphere => 0.5 * u.dot(omega).abs(),
            KernelSpec::MaxwellConstant { b } => b,
        }
    }

    /// ∫ B(u, ω) dω as a function of |u|.
    #[inline]
    pub fn omega_integral(&self, speed: f64, d: Dim) -> f64 {
        match *self {
            KernelSpec::HardSphere => 0.5 * kappa(d) * speed,
            KernelSpec::MaxwellConstant { b } => b * sphere_area(d),
        }
    }

    /// Upper bound on `omega_integral` over relative speeds ≤ `max_rel_speed`.
    #[inline]
    pub fn omega_integral_bound(&self, max_rel_speed: f64, d: Dim) -> f64 {
        self.omega_integral(max_rel_speed, d)
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::HardSphere => "hard_sphere",
            KernelSpec::MaxwellConstant { .. } => "maxwell_constant",
        }
    }
}

/// Jump rate of an unordered pair holding velocities `v`, `w` in a system of `n` particles.
#[inline]
pub fn pair_rate(v: Velocity, w: Velocity, kernel: &KernelSpec, d: Dim, n: usize) -> f64 {
    kernel.omega_integral((v - w).norm(), d) / n as f64
}

/// Orthonormal frame (ê, e1, e2) with ê = u/|u|. In the plane e2 is unused.
pub(crate) fn frame(u: Velocity, d: Dim) -> (Velocity, Velocity, Velocity) {
    let n = u.norm();
    let e = if n > 0.0 {
        u * (1.0 / n)
    } else {
        Velocity::new(1.0, 0.0, 0.0)
    };
    match d {
        Dim::Two => (e, Velocity::new(-e.0[1], e.0[0], 0.0), Velocity::ZERO),
        Dim::Three => {
            // pick the axis least aligned with e; near-ties go to the lower
            // index so u and a rounded -u share an axis
            const TIE: f64 = 1e-9;
            let m = e.0.map(f64::abs);
            let a = if m[0] <= m[1] + TIE && m[0] <= m[2] + TIE {
                Velocity::new(1.0, 0.0, 0.0)
            } else if m[1] <= m[2] + TIE {
                Velocity::new(0.0, 1.0, 0.0)
            } else {
                Velocity::new(0.0, 0.0, 1.0)
            };
            let e1 = a - e * a.dot(e);
            let e1 = e1 * (1.0 / e1.norm());
            let e2 = Velocity::new(
                e.0[1] * e1.0[2] - e.0[2] * e1.0[1],
                e.0[2] * e1.0[0] - e.0[0] * e1.0[2],
                e.0[0] * e1.0[1] - e.0[1] * e1.0[0],
            );
            (e, e1, e2)
        }
    }
}

#[inline]
fn direction_from(c: f64, phi: f64, d: Dim, f: &(Velocity, Velocity, Velocity)) -> Velocity {
    let s = (1.0 - c * c).max(0.0).sqrt();
    match d {
        // phi is only a sign in the plane
        Dim::Two => f.0 * c + f.1 * (s * phi.signum()),
        Dim::Three => f.0 * c + f.1 * (s * phi.cos()) + f.2 * (s * phi.sin()),
    }
}

/// Draws ω on S^{d-1} from the ω-marginal of the jump measure for relative velocity `u`.
///
/// Hard sphere: density ∝ |u·ω| by inverse CDF. Maxwell: uniform.
pub fn sample_scattering_direction<R: Rng + ?Sized>(
    u: Velocity,
    d: Dim,
    kernel: &KernelSpec,
    rng: &mut R,
) -> Result<Velocity> {
    let speed = u.norm();
    if matches!(kernel, KernelSpec::HardSphere) && !(speed > 0.0) {
        return Err(KacError::UndefinedDirection);
    }
    let f = frame(u, d);
    let uu: f64 = rng.random();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let omega = match (kernel, d) {
        (KernelSpec::HardSphere, Dim::Three) => {
            let phi = 2.0 * PI * rng.random::<f64>();
            direction_from(sign * uu.sqrt(), phi, d, &f)
        }
        (KernelSpec::HardSphere, Dim::Two) => {
            // θ ∈ (-π/2, π/2) with density cos θ / 2: sin θ = 2U - 1
            let sn = 2.0 * uu - 1.0;
            let c = sign * (1.0 - sn * sn).max(0.0).sqrt();
            f.0 * c + f.1 * sn
        }
        (KernelSpec::MaxwellConstant { .. }, Dim::Three) => {
            let phi = 2.0 * PI * rng.random::<f64>();
            direction_from(2.0 * uu - 1.0, phi, d, &f)
        }
        (KernelSpec::MaxwellConstant { .. }, Dim::Two) => {
            let th = 2.0 * PI * uu;
            f.0 * th.cos() + f.1 * th.sin()
        }
    };
    Ok(omega)
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Quadrature rule on S^{d-1} in the frame of a reference direction.
///
/// Nodes are stored as (cos θ, azimuth) pairs relative to the reference
/// axis; the rule integrates functions of ω against the surface measure.
/// The polar variable is split at cos θ = 0 so that |u·ω| is smooth on
/// each panel.
#[derive(Debug, Clone)]
pub struct SphereQuadrature {
    d: Dim,
    nodes: Vec<(f64, f64, f64)>,
}

impl SphereQuadrature {
    /// Rule with roughly `n_omega` nodes (at least 4).
    pub fn new(d: Dim, n_omega: usize) -> Result<Self> {
        if n_omega < 4 {
            return Err(invalid("n_omega", "at least 4 quadrature nodes required"));
        }
        let mut nodes = Vec::new();
        match d {
            Dim::Three => {
                // even counts: no polar node at cos²θ = 1/4 (posts exactly on
                // cell faces) and an azimuth set closed under φ ↦ π - φ
                let nc = (2 * ((n_omega as f64 / 4.0).sqrt() / 2.0).round() as usize).max(2);
                let nphi = (n_omega / (2 * nc)).max(2).div_ceil(2) * 2;
                let (x, w) = gauss_legendre(nc);
                for half in [-1.0, 1.0] {
                    for (xi, wi) in x.iter().zip(&w) {
                        // map [-1,1] -> [0,1] or [-1,0]
                        let c = half * 0.5 * (xi + 1.0);
                        let wc = 0.5 * wi;
                        for k in 0..nphi {
                            let phi = 2.0 * PI * (k as f64 + 0.5) / nphi as f64;
                            nodes.push((c, phi, wc * 2.0 * PI / nphi as f64));
                        }
                    }
                }
            }
            Dim::Two => {
                let per = (n_omega / 4).max(1);
                let (x, w) = gauss_legendre(per);
                for q in 0..4 {
                    let a = -PI + q as f64 * PI / 2.0;
                    for (xi, wi) in x.iter().zip(&w) {
                        let th = a + PI / 4.0 * (xi + 1.0);
                        nodes.push((th.cos(), th.sin(), wi * PI / 4.0));
                    }
                }
            }
        }
        Ok(Self { d, nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Rule for integrands even in ω: the node set is closed under ω ↦ -ω,
    /// so one node of each pair is kept with twice the weight.
    pub fn even_part(&self) -> Self {
        let nodes = self
            .nodes
            .iter()
            .filter(|n| match self.d {
                Dim::Three => n.0 > 0.0,
                Dim::Two => n.1 > 0.0,
            })
            .map(|&(c, a, w)| (c, a, 2.0 * w))
            .collect();
        Self { d: self.d, nodes }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes `(ω, weight)` in the frame whose polar axis is `axis`.
    pub fn oriented(&self, axis: Velocity) -> impl Iterator<Item = (Velocity, f64)> + '_ {
        let f = frame(axis, self.d);
        self.nodes.iter().map(move |&(c, a, w)| {
            let omega = match self.d {
                Dim::Three => direction_from(c, a, self.d, &f),
                Dim::Two => f.0 * c + f.1 * a,
            };
            (omega, w)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn even_part_halves_the_rule_exactly() {
        let u = Velocity::new(0.7, -1.2, 0.4);
        for d in [Dim::Two, Dim::Three] {
            let u = if d == Dim::Two { Velocity::planar(0.7, -1.2) } else { u };
            for n in [32, 64, 100] {
                let q = SphereQuadrature::new(d, n).unwrap();
                let h = q.even_part();
                assert_eq!(2 * h.len(), q.len());
                let f = |w: Velocity| (u.dot(w)).abs() * (1.0 + (u - w * u.dot(w)).0[0].sin());
                let full: f64 = q.oriented(u).map(|(w, x)| x * f(w)).sum();
                let half: f64 = h.oriented(u).map(|(w, x)| x * f(w)).sum();
                assert!((full - half).abs() < 1e-12 * full.abs(), "{d:?} {n}: {full} {half}");
            }
        }
    }

    #[test]
    fn pair_rate_examples() {
        let v = Velocity::new(0.3, -0.2, 0.9);
        assert_eq!(pair_rate(v, v, &KernelSpec::HardSphere, Dim::Three, 7), 0.0);

        let r = pair_rate(
            Velocity::new(1.0, 0.0, 0.0),
            Velocity::new(-1.0, 0.0, 0.0),
            &KernelSpec::HardSphere,
            Dim::Three,
            2,
        );
        assert!((r - PI).abs() < 1e-15);

        let r = pair_rate(
            Velocity::planar(0.5, 0.0),
            Velocity::planar(-0.5, 0.0),
            &KernelSpec::HardSphere,
            Dim::Two,
            4,
        );
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hard_sphere_evenness() {
        let u = Velocity::new(0.3, -1.2, 0.5);
        let w = Velocity::new(0.6, 0.0, 0.8);
        let k = KernelSpec::HardSphere;
        assert_eq!(k.eval(u, w), k.eval(-u, w));
        assert_eq!(k.eval(u, w), k.eval(u, -w));
        assert_eq!(KernelSpec::MaxwellConstant { b: 0.7 }.eval(u, w), 0.7);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let int = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((int(0) - 2.0).abs() < 1e-14);
        assert!((int(8) - 2.0 / 9.0).abs() < 1e-14);
        assert!(int(7).abs() < 1e-14);
    }

    #[test]
    fn quadrature_recovers_kappa() {
        for d in [Dim::Two, Dim::Three] {
            let q = SphereQuadrature::new(d, 32).unwrap();
            let u = Velocity::from_slice(&[0.3, -0.7, 0.2][..d.get()]);
            let area: f64 = q.oriented(u).map(|(_, w)| w).sum();
            let k: f64 = q.oriented(u).map(|(o, w)| w * (u * (1.0 / u.norm())).dot(o).abs()).sum();
            assert!((area - sphere_area(d)).abs() < 1e-12, "{d:?}");
            assert!((k - kappa(d)).abs() < 1e-12, "{d:?}");
            for (o, _) in q.oriented(u) {
                assert!((o.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert!(SphereQuadrature::new(Dim::Three, 3).is_err());
    }

    fn moments(d: Dim, n: usize) -> (f64, f64, f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = Velocity::from_slice(&[1.0, 2.0, -0.5][..d.get()]);
        let e = u * (1.0 / u.norm());
        let (mut m1, mut m2, mut ma, mut ma2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let o = sample_scattering_direction(u, d, &KernelSpec::HardSphere, &mut rng).unwrap();
            assert!((o.norm() - 1.0).abs() < 1e-12);
            let c = o.dot(e);
            m1 += c;
            m2 += c * c;
            ma += c.abs();
            ma2 += c * c;
        }
        let n = n as f64;
        (m1 / n, m2 / n, ma / n, ma2 / n)
    }

    #[test]
    fn scattering_moments_3d() {
        let n = 100_000;
        let (m1, m2, _, _) = moments(Dim::Three, n);
        // Var(c) = 1/2, Var(c^2) = E c^4 - 1/4 = 1/3 - 1/4
        assert!(m1.abs() < 3.0 * (0.5f64 / n as f64).sqrt());
        assert!((m2 - 0.5).abs() < 3.0 * (1.0f64 / 12.0 / n as f64).sqrt());
    }

    #[test]
    fn scattering_moments_2d() {
        let n = 100_000;
        let (m1, _, ma, ma2) = moments(Dim::Two, n);
        let mean_abs = PI / 4.0;
        // E c^2 = 2/3 under density |cos θ|/4
        let var_abs = ma2 - mean_abs * mean_abs;
        assert!((ma2 - 2.0 / 3.0).abs() < 0.01);
        assert!(m1.abs() < 3.0 * (ma2 / n as f64).sqrt());
        assert!((ma - mean_abs).abs() < 3.0 * (var_abs / n as f64).sqrt());
    }

    #[test]
    fn zero_relative_velocity_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_scattering_direction(Velocity::ZERO, Dim::Three, &KernelSpec::HardSphere, &mut rng),
            Err(KacError::UndefinedDirection)
        );
    }
}
