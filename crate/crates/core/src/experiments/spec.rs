//! Study settings and the long-form report they produce.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::SchedulerKind;
use crate::entropy::report::ser_extended;
use crate::error::{invalid, Result};
use crate::geometry::Dim;
use crate::initial_data::{InitialSpec, InitialVariant, Preset};
use crate::kernel::{kappa, sphere_area, KernelSpec};
use crate::observables::GridSpec;
use crate::stats::LineFit;

/// Mean time between collisions of one particle at equilibrium,
/// 1 / E_{M_e⊗M_e}[∫B(v - v_*, ω) dω].
pub fn mean_free_time(kernel: KernelSpec, d: Dim, e: f64) -> f64 {
    let sigma = (2.0 * e / d.as_f64()).sqrt();
    let rate = match kernel {
        KernelSpec::HardSphere => {
            // |U| with U ~ N(0, 2σ² I)
            let mean_rel = match d {
                Dim::Two => sigma * std::f64::consts::PI.sqrt(),
                Dim::Three => 4.0 * sigma / std::f64::consts::PI.sqrt(),
            };
            0.5 * kappa(d) * mean_rel
        }
        KernelSpec::MaxwellConstant { b } => b * sphere_area(d),
    };
    1.0 / rate
}

/// Horizon as an absolute time or in mean free times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Horizon {
    Absolute(f64),
    MeanFreeTimes { mean_free_times: f64 },
}

impl Horizon {
    pub fn resolve(&self, kernel: KernelSpec, d: Dim, e: f64) -> f64 {
        match *self {
            Horizon::Absolute(t) => t,
            Horizon::MeanFreeTimes { mean_free_times } => mean_free_times * mean_free_time(kernel, d, e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSettings {
    pub n_cells: usize,
    /// Box half-width; 4√(2e) when absent.
    pub v_max: Option<f64>,
    pub n_t: usize,
    /// Cells per axis of the grid-Boltzmann reference run.
    pub reference_cells: usize,
    /// Cells per axis for binned total-variation distances.
    pub distance_cells: usize,
    /// Extra cells-per-axis values for the dissipation gap vs h.
    pub refine: Vec<usize>,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            n_cells: 32,
            v_max: None,
            n_t: 10,
            reference_cells: 12,
            distance_cells: 8,
            refine: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    pub k: usize,
    /// Jitter for duplicated samples; 1e-12·√(2e) when absent.
    pub jitter: Option<f64>,
    /// Allowed negative excursion of the mollified gap.
    pub tolerance: f64,
    pub n_omega: usize,
    pub reference_nodes_min: usize,
    pub reference_nodes_max: usize,
    /// Largest N for which flux-check replays the martingale (O(N²) set-up).
    pub martingale_max_n: usize,
    /// ω-rule size of the martingale compensator.
    pub martingale_n_omega: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            k: 4,
            jitter: None,
            tolerance: 0.2,
            n_omega: 32,
            reference_nodes_min: 32,
            reference_nodes_max: 256,
            martingale_max_n: 1000,
            martingale_n_omega: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BkwSettings {
    pub k0: f64,
    pub b: f64,
    /// Values of (1 - K(t)) / (1 - K₀) at which marginals are compared.
    pub fractions: Vec<f64>,
    pub calibration_n: usize,
    pub calibration_replicas: usize,
    pub calibration_points: usize,
    pub calibration_threshold: f64,
}

impl Default for BkwSettings {
    fn default() -> Self {
        Self {
            k0: 0.6,
            b: 15.0 / (8.0 * std::f64::consts::PI),
            fractions: vec![0.75, 0.5, 0.25],
            calibration_n: 24,
            calibration_replicas: 3000,
            calibration_points: 13,
            calibration_threshold: 3.0,
        }
    }
}

/// Everything a study needs besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    #[serde(rename = "N")]
    pub n_list: Vec<usize>,
    pub replicas: usize,
    #[serde(rename = "T")]
    pub horizon: Horizon,
    pub d: usize,
    pub e: f64,
    pub kernel: KernelSpec,
    pub initial: InitialVariant,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerKind,
    /// Equal intervals between snapshots on [0, T].
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    #[serde(default)]
    pub grid: GridSettings,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub bkw: BkwSettings,
}

fn default_scheduler() -> SchedulerKind {
    SchedulerKind::MajorantRejection
}

fn default_snapshots() -> usize {
    4
}

impl StudySpec {
    /// d = 3, e = 1, T = 4 mean free times, N ∈ {10³, 2·10³, 4·10³, 10⁴}, R = 20, grid 32³.
    pub fn desk_default(preset: Preset) -> Self {
        Self {
            n_list: vec![1000, 2000, 4000, 10_000],
            replicas: 20,
            horizon: Horizon::MeanFreeTimes { mean_free_times: 4.0 },
            d: 3,
            e: 1.0,
            kernel: KernelSpec::HardSphere,
            initial: InitialVariant::ChaoticFrom(preset),
            scheduler: default_scheduler(),
            snapshots: default_snapshots(),
            grid: GridSettings::default(),
            estimator: EstimatorSettings::default(),
            bkw: BkwSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = Dim::new(self.d)?;
        if self.n_list.is_empty() {
            return Err(invalid("N", "at least one value"));
        }
        if self.n_list.iter().any(|&n| n < 2) {
            return Err(invalid("N", "N ≥ 2"));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("N", "list must be strictly increasing"));
        }
        if self.replicas == 0 {
            return Err(invalid("replicas", "R ≥ 1"));
        }
        if !(self.e > 0.0 && self.e.is_finite()) {
            return Err(invalid("e", "energy per particle must be positive"));
        }
        self.kernel.validate()?;
        let t = self.horizon();
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid("T", "horizon must be positive"));
        }
        if self.snapshots == 0 {
            return Err(invalid("snapshots", "at least one interval"));
        }
        self.grid_spec()?;
        GridSpec::new(d, self.v_max(), self.grid.reference_cells, 1, t)?;
        GridSpec::new(d, self.v_max(), self.grid.distance_cells, 1, t)?;
        for &c in &self.grid.refine {
            GridSpec::new(d, self.v_max(), c, self.grid.n_t, t)?;
        }
        if self.estimator.k == 0 {
            return Err(invalid("estimator.k", "k ≥ 1"));
        }
        if self.estimator.n_omega < 4 {
            return Err(invalid("estimator.n_omega", "at least 4 nodes"));
        }
        if !(self.estimator.tolerance >= 0.0) {
            return Err(invalid("estimator.tolerance", "must be nonnegative"));
        }
        if self.replicas > u32::MAX as usize || self.n_list.len() > u16::MAX as usize {
            return Err(invalid("replicas", "too many replicas or N values"));
        }
        Ok(())
    }

    pub fn dim(&self) -> Dim {
        Dim::new(self.d).unwrap_or(Dim::Three)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon.resolve(self.kernel, self.dim(), self.e)
    }

    pub fn mean_free_time(&self) -> f64 {
        mean_free_time(self.kernel, self.dim(), self.e)
    }

    pub fn v_max(&self) -> f64 {
        self.grid.v_max.unwrap_or(4.0 * (2.0 * self.e).sqrt())
    }

    pub fn jitter(&self) -> f64 {
        self.estimator.jitter.unwrap_or(1e-12 * (2.0 * self.e).sqrt())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.dim(), self.v_max(), self.grid.n_cells, self.grid.n_t, self.horizon())
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        let t = self.horizon();
        (0..=self.snapshots).map(|k| t * k as f64 / self.snapshots as f64).collect()
    }

    pub fn initial_spec(&self, n: usize, seed: u64) -> InitialSpec {
        InitialSpec {
            variant: self.initial,
            n,
            d: self.d,
            e: self.e,
            seed,
        }
    }
}

/// One line of the long-form CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub n: usize,
    pub replica: usize,
    pub time: f64,
    pub statistic: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub statistic: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub time: f64,
    #[serde(serialize_with = "ser_extended")]
    pub mean: f64,
    #[serde(serialize_with = "ser_extended")]
    pub se: f64,
    pub replicas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub statistic: String,
    pub time: Option<f64>,
    pub fit: LineFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(serialize_with = "ser_extended")]
    pub value: f64,
    pub threshold: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, value: f64, threshold: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            threshold: threshold.into(),
        }
    }
}

/// Per-N series, fitted slopes and pass/fail checks of one study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub study: String,
    pub seed: u64,
    pub spec: StudySpec,
    pub horizon: f64,
    pub mean_free_time: f64,
    pub times: Vec<f64>,
    pub series: Vec<SeriesPoint>,
    pub slopes: Vec<SlopeFit>,
    pub checks: Vec<Check>,
    pub diagnostics: Vec<String>,
    /// Study-specific payloads (entropy reports, calibration, ...).
    pub extras: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    pub rows: Vec<Row>,
}

impl ConvergenceReport {
    pub fn new(study: &str, spec: &StudySpec, seed: u64) -> Self {
        Self {
            study: study.into(),
            seed,
            spec: spec.clone(),
            horizon: spec.horizon(),
            mean_free_time: spec.mean_free_time(),
            times: spec.snapshot_times(),
            series: Vec::new(),
            slopes: Vec::new(),
            checks: Vec::new(),
            diagnostics: Vec::new(),
            extras: BTreeMap::new(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, n: usize, replica: usize, time: f64, statistic: &str, value: f64) {
        self.rows.push(Row {
            n,
            replica,
            time,
            statistic: statistic.into(),
            value,
        });
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Mean of `statistic` at (N, time) from the series.
    pub fn mean(&self, statistic: &str, n: usize, time: f64) -> Option<f64> {
        self.point(statistic, n, time).map(|p| p.mean)
    }

    pub fn point(&self, statistic: &str, n: usize, time: f64) -> Option<&SeriesPoint> {
        self.series
            .iter()
            .find(|p| p.statistic == statistic && p.n == n && (p.time - time).abs() <= 1e-12 * time.abs().max(1.0))
    }

    /// Values of `statistic` at (N, time) ordered by replica.
    pub fn replica_values(&self, statistic: &str, n: usize, time: f64) -> Vec<f64> {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.statistic == statistic && r.n == n && (r.time - time).abs() <= 1e-12 * time.abs().max(1.0))
            .map(|r| (r.replica, r.value))
            .collect();
        v.sort_by_key(|x| x.0);
        v.into_iter().map(|x| x.1).collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("study,N,replica,time,statistic,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", self.study, r.n, r.replica, r.time, r.statistic, r.value);
        }
        out
    }

    pub fn json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `<study>.json` and `<study>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let stem = self.study.replace('-', "_");
        let j = dir.join(format!("{stem}.json"));
        let c = dir.join(format!("{stem}.csv"));
        fs::write(&j, self.json()?)?;
        fs::write(&c, self.csv())?;
        Ok((j, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_sphere_mean_free_time() {
        // 1 / (π E|U|) with E|U| = 4σ/√π, σ² = 2/3
        let tau = mean_free_time(KernelSpec::HardSphere, Dim::Three, 1.0);
        let want = 1.0 / (std::f64::consts::PI * 4.0 * (2.0f64 / 3.0).sqrt() / std::f64::consts::PI.sqrt());
        assert!((tau - want).abs() < 1e-15);
        assert!((tau - 0.1727).abs() < 1e-4);
        let b = 0.25;
        let tm = mean_free_time(KernelSpec::MaxwellConstant { b }, Dim::Three, 1.0);
        assert!((tm - 1.0 / std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn spec_round_trips_and_validates() {
        let s = StudySpec::desk_default(Preset::Shell);
        s.validate().unwrap();
        let j = serde_json::to_string(&s).unwrap();
        let back: StudySpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        let mut bad = s.clone();
        bad.n_list = vec![100, 100];
        assert!(bad.validate().is_err());
        bad.n_list = vec![1];
        assert!(bad.validate().is_err());
        let mut bad = s;
        bad.replicas = 0;
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<StudySpec>(&j.replace("\"replicas\"", "\"replicaz\"")).is_err());
    }
}
