//! Initial data on the microcanonical set and the reference Maxwellian.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{invalid, KacError, Result};
use crate::geometry::{Configuration, Dim, Velocity};
use crate::observables::{GridMeasure, GridSpec};

/// Centred Gaussian with energy e per particle, β = d/(2e).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Maxwellian {
    pub dim: Dim,
    pub e: f64,
}

pub(crate) fn gaussian<R: Rng + ?Sized>(d: Dim, sigma: f64, rng: &mut R) -> Velocity {
    let mut g = || -> f64 { StandardNormal.sample(rng) };
    match d {
        Dim::Two => Velocity::planar(sigma * g(), sigma * g()),
        Dim::Three => Velocity::new(sigma * g(), sigma * g(), sigma * g()),
    }
}

pub(crate) fn unit_vector<R: Rng + ?Sized>(d: Dim, rng: &mut R) -> Velocity {
    loop {
        let v = gaussian(d, 1.0, rng);
        let n = v.norm();
        if n > 1e-12 {
            return v * (1.0 / n);
        }
    }
}

impl Maxwellian {
    pub fn new(dim: Dim, e: f64) -> Result<Self> {
        if !(e > 0.0 && e.is_finite()) {
            return Err(invalid("e", "energy per particle must be positive"));
        }
        Ok(Self { dim, e })
    }

    pub fn beta(&self) -> f64 {
        self.dim.as_f64() / (2.0 * self.e)
    }

    /// Per-component variance 2e/d.
    pub fn variance(&self) -> f64 {
        1.0 / self.beta()
    }

    pub fn density(&self, v: Velocity) -> f64 {
        let s2 = self.variance();
        (2.0 * PI * s2).powf(-0.5 * self.dim.as_f64()) * (-0.5 * v.norm2() / s2).exp()
    }

    pub fn ln_density(&self, v: Velocity) -> f64 {
        let s2 = self.variance();
        -0.5 * self.dim.as_f64() * (2.0 * PI * s2).ln() - 0.5 * v.norm2() / s2
    }

    /// H(M_e) = ∫ f ln f = -(d/2)(ln(4πe/d) + 1).
    pub fn entropy(&self) -> f64 {
        let d = self.dim.as_f64();
        -0.5 * d * ((4.0 * PI * self.e / d).ln() + 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Velocity {
        gaussian(self.dim, self.variance().sqrt(), rng)
    }

    /// CDF of |V| (Maxwell law for d = 3, Rayleigh for d = 2).
    pub fn speed_cdf(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let x = s / self.variance().sqrt();
        match self.dim {
            Dim::Two => -(-0.5 * x * x).exp_m1(),
            Dim::Three => erf(x / std::f64::consts::SQRT_2) - (2.0 / PI).sqrt() * x * (-0.5 * x * x).exp(),
        }
    }

    /// Exact cell masses (products of one-dimensional erf differences).
    pub fn cell_masses(&self, grid: &GridSpec) -> Result<GridMeasure> {
        if grid.dim != self.dim {
            return Err(KacError::GridMismatch);
        }
        let s = (2.0 * self.variance()).sqrt();
        let h = grid.h();
        let axis: Vec<f64> = (0..grid.n_cells)
            .map(|i| {
                let lo = -grid.v_max + i as f64 * h;
                0.5 * (erf((lo + h) / s) - erf(lo / s))
            })
            .collect();
        let weights: Vec<f64> = (0..grid.len())
            .map(|c| {
                let k = grid.unflat(c);
                (0..self.dim.get()).map(|a| axis[k[a] as usize]).product()
            })
            .collect();
        let inside: f64 = weights.iter().sum();
        GridMeasure::from_weights(*grid, weights, (1.0 - inside).max(0.0))
    }

    /// Density at the cell centres times h^d; the grid surrogate of M_e
    /// used by the grid route of H_e.
    pub fn centre_weights(&self, grid: &GridSpec) -> Vec<f64> {
        let vol = grid.cell_volume();
        (0..grid.len()).map(|c| self.density(grid.centre(c)) * vol).collect()
    }
}

/// Source laws P₀ for chaotic data. All have zero mean and energy e.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Maxwellian,
    /// ½ N(a ê₁, s²) + ½ N(-a ê₁, s²) with a² = e and s² = e/d.
    TwoBump,
    /// Uniform on the sphere of radius √(2e).
    Shell,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Maxwellian => "maxwellian",
            Preset::TwoBump => "two_bump",
            Preset::Shell => "shell",
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, d: Dim, e: f64, rng: &mut R) -> Velocity {
        match self {
            Preset::Maxwellian => gaussian(d, (2.0 * e / d.as_f64()).sqrt(), rng),
            Preset::TwoBump => {
                let s = (e / d.as_f64()).sqrt();
                let a = if rng.random::<bool>() { e.sqrt() } else { -e.sqrt() };
                gaussian(d, s, rng) + Velocity::new(a, 0.0, 0.0)
            }
            Preset::Shell => unit_vector(d, rng) * (2.0 * e).sqrt(),
        }
    }

    /// ∫ f ln f of the one-particle law; `None` for the shell, which has no density.
    ///
    /// The two-bump value reduces to a one-dimensional mixture integral,
    /// done by the midpoint rule on ±(a + 14s).
    pub fn entropy(self, d: Dim, e: f64) -> Option<f64> {
        match self {
            Preset::Maxwellian => Some(Maxwellian { dim: d, e }.entropy()),
            Preset::Shell => None,
            Preset::TwoBump => {
                let s2 = e / d.as_f64();
                let s = s2.sqrt();
                let a = e.sqrt();
                let gauss_h = -0.5 * ((2.0 * PI * s2).ln() + 1.0);
                let n = 200_000;
                let lo = -(a + 14.0 * s);
                let dx = -2.0 * lo / n as f64;
                let c = 1.0 / (2.0 * PI * s2).sqrt();
                let mut h = 0.0;
                for i in 0..n {
                    let x = lo + (i as f64 + 0.5) * dx;
                    let f = 0.5 * c * ((-(x - a).powi(2) / (2.0 * s2)).exp() + (-(x + a).powi(2) / (2.0 * s2)).exp());
                    if f > 0.0 {
                        h += f * f.ln() * dx;
                    }
                }
                Some(h + (d.get() - 1) as f64 * gauss_h)
            }
        }
    }

    /// CDF of the speed |V| under the preset, where a closed form exists.
    pub fn speed_cdf(self, d: Dim, e: f64, s: f64) -> Option<f64> {
        match self {
            Preset::Maxwellian => Some(Maxwellian { dim: d, e }.speed_cdf(s)),
            Preset::Shell => Some(if s < (2.0 * e).sqrt() { 0.0 } else { 1.0 }),
            Preset::TwoBump => None,
        }
    }
}

/// Shift and scale applied to the raw iid draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Conditioning {
    pub shift: Velocity,
    pub shift_norm: f64,
    /// Factor multiplying the centred draw; 1 means no rescaling was needed.
    pub scale: f64,
}

/// Draws N iid from `preset`, subtracts the empirical mean and rescales to energy e.
pub fn sample_chaotic<R: Rng + ?Sized>(n: usize, d: Dim, e: f64, preset: Preset, rng: &mut R) -> Result<(Configuration, Conditioning)> {
    sample_conditioned(n, d, e, rng, |r| preset.sample(d, e, r))
}

/// [`sample_chaotic`] for an arbitrary one-particle sampler.
pub fn sample_conditioned<R: Rng + ?Sized>(
    n: usize,
    d: Dim,
    e: f64,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Velocity,
) -> Result<(Configuration, Conditioning)> {
    if n < 2 {
        return Err(invalid("N", "N ≥ 2 required"));
    }
    if !(e > 0.0 && e.is_finite()) {
        return Err(invalid("e", "energy per particle must be positive"));
    }
    for _ in 0..16 {
        let raw: Vec<Velocity> = (0..n).map(|_| draw(rng)).collect();
        let cfg = Configuration::new(d, e, raw)?;
        let shift = cfg.mean_velocity();
        let mut v = cfg.into_velocities();
        for x in v.iter_mut() {
            *x -= shift;
        }
        let en = crate::geometry::compensated_sum(v.iter().map(|x| 0.5 * x.norm2())) / n as f64;
        if !(en > 0.0) {
            continue;
        }
        let scale = (e / en).sqrt();
        for x in v.iter_mut() {
            *x = *x * scale;
        }
        let out = Configuration::new(d, e, v)?;
        return Ok((
            out,
            Conditioning {
                shift,
                shift_norm: shift.norm(),
                scale,
            },
        ));
    }
    Err(KacError::Degenerate)
}

/// Uniform sample of the microcanonical sphere {Σv = 0, Σ|v|² = 2Ne}.
pub fn sample_microcanonical<R: Rng + ?Sized>(n: usize, d: Dim, e: f64, rng: &mut R) -> Result<Configuration> {
    sample_chaotic(n, d, e, Preset::Maxwellian, rng).map(|(c, _)| c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "source", rename_all = "snake_case")]
pub enum InitialVariant {
    Microcanonical,
    ChaoticFrom(Preset),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialSpec {
    pub variant: InitialVariant,
    pub n: usize,
    pub d: usize,
    pub e: f64,
    pub seed: u64,
}

impl InitialSpec {
    pub fn validate(&self) -> Result<()> {
        Dim::new(self.d)?;
        if self.n < 2 {
            return Err(invalid("N", "N ≥ 2 required"));
        }
        if !(self.e > 0.0 && self.e.is_finite()) {
            return Err(invalid("e", "energy per particle must be positive"));
        }
        Ok(())
    }

    pub fn preset(&self) -> Preset {
        match self.variant {
            InitialVariant::Microcanonical => Preset::Maxwellian,
            InitialVariant::ChaoticFrom(p) => p,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Configuration, Conditioning)> {
        self.validate()?;
        sample_chaotic(self.n, Dim::new(self.d)?, self.e, self.preset(), rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::stats::{ks_test, ks_two_sample, mean_se};

    #[test]
    fn preset_entropies() {
        let m = Preset::Maxwellian.entropy(Dim::Three, 1.0).unwrap();
        assert!((m + 1.5 * ((4.0 * PI / 3.0).ln() + 1.0)).abs() < 1e-12);
        // far-apart bumps: entropy of one Gaussian minus ln 2
        let e = 1.0;
        let tb = Preset::TwoBump.entropy(Dim::Three, e).unwrap();
        let s2 = e / 3.0;
        let single = -1.5 * ((2.0 * PI * s2).ln() + 1.0);
        assert!(tb < single && tb > single - 2f64.ln(), "{tb} {single}");
        assert!(Preset::Shell.entropy(Dim::Three, 1.0).is_none());
    }

    #[test]
    fn two_particles_are_antipodal() {
        let mut rng = stream_rng(3, 0);
        let c = sample_microcanonical(2, Dim::Three, 1.3, &mut rng).unwrap();
        let v = c.velocities();
        assert!((v[0] + v[1]).norm() < 1e-15);
        assert!((v[0].norm() - (2.0f64 * 1.3).sqrt()).abs() < 1e-14);
        assert!(c.validate().passed);
    }

    #[test]
    fn presets_have_energy_e() {
        let mut rng = stream_rng(4, 0);
        for p in [Preset::Maxwellian, Preset::TwoBump, Preset::Shell] {
            for d in [Dim::Two, Dim::Three] {
                let xs: Vec<f64> = (0..40000).map(|_| 0.5 * p.sample(d, 1.0, &mut rng).norm2()).collect();
                let (m, se) = mean_se(&xs);
                assert!((m - 1.0).abs() < 4.0 * se + 1e-12, "{p:?} {d:?} {m}");
            }
        }
    }

    #[test]
    fn microcanonical_marginal_is_maxwellian() {
        let mut rng = stream_rng(5, 0);
        let c = sample_microcanonical(1000, Dim::Three, 1.0, &mut rng).unwrap();
        let m = Maxwellian::new(Dim::Three, 1.0).unwrap();
        let (d, _) = ks_test(&c.speeds(), |s| m.speed_cdf(s));
        assert!(d < 0.03, "{d}");
    }

    #[test]
    fn speed_cdf_matches_closed_form() {
        // d = 3, σ = 1: erf(s/√2) - √(2/π) s e^{-s²/2}
        let m = Maxwellian::new(Dim::Three, 1.5).unwrap();
        for s in [0.3, 1.0, 2.2] {
            let f = erf(s / 2f64.sqrt()) - (2.0 / PI).sqrt() * s * (-0.5 * s * s).exp();
            assert!((m.speed_cdf(s) - f).abs() < 1e-12, "{} {}", m.speed_cdf(s), f);
        }
        let m2 = Maxwellian::new(Dim::Two, 1.0).unwrap();
        assert!((m2.speed_cdf(1.2) - (1.0 - (-0.5f64 * 1.44).exp())).abs() < 1e-12);
    }

    #[test]
    fn standard_gaussian_entropy() {
        let m = Maxwellian::new(Dim::Three, 1.5).unwrap();
        assert!((m.variance() - 1.0).abs() < 1e-15);
        assert!((m.entropy() + 1.5 * ((2.0 * PI).ln() + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn cell_masses_sum_to_one_minus_tail() {
        let g = GridSpec::default_for(Dim::Three, 1.0, 1.0).unwrap();
        let m = Maxwellian::new(Dim::Three, 1.0).unwrap().cell_masses(&g).unwrap();
        assert!((m.mass() - 1.0).abs() < 1e-12);
        assert!(m.overflow < 1e-6);
    }

    #[test]
    fn chaotic_gaussian_agrees_with_microcanonical() {
        let mut r1 = stream_rng(6, 0);
        let mut r2 = stream_rng(6, 1);
        let a = sample_microcanonical(4000, Dim::Three, 1.0, &mut r1).unwrap();
        let (b, _) = sample_chaotic(4000, Dim::Three, 1.0, Preset::Maxwellian, &mut r2).unwrap();
        assert!(ks_two_sample(&a.speeds(), &b.speeds()).1 > 0.01);
    }

    #[test]
    fn rotation_leaves_speed_law_unchanged() {
        let mut rng = stream_rng(7, 0);
        let a = sample_microcanonical(3000, Dim::Three, 1.0, &mut rng).unwrap();
        // rotation by 0.7 rad about ê₃, compared on the first component
        let (s, c) = 0.7f64.sin_cos();
        let rot: Vec<f64> = a.velocities().iter().map(|v| c * v.0[0] - s * v.0[1]).collect();
        let b = sample_microcanonical(3000, Dim::Three, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = b.velocities().iter().map(|v| v.0[0]).collect();
        assert!(ks_two_sample(&rot, &x).1 > 0.01);
    }

    #[test]
    fn shift_shrinks_like_inverse_root_n() {
        let mut rng = stream_rng(8, 0);
        let mut ms = Vec::new();
        for n in [100usize, 400, 1600] {
            let xs: Vec<f64> = (0..200)
                .map(|_| sample_chaotic(n, Dim::Three, 1.0, Preset::TwoBump, &mut rng).unwrap().1.shift_norm.powi(2))
                .collect();
            ms.push(mean_se(&xs).0);
        }
        let f = crate::stats::log_log_slope(&[100.0, 400.0, 1600.0], &ms).unwrap();
        assert!((f.slope + 1.0).abs() < 0.2, "{f:?}");
        // E|shift|² = 2e/N
        assert!((ms[0] * 100.0 / 2.0 - 1.0).abs() < 0.2);
    }
}
