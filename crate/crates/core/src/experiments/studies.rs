//! N-scaling studies. Every (N, replica) task runs on its own RNG stream
//! and results are folded in task order, so reports are bit-identical for
//! a given (spec, seed) regardless of the thread count.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::engine::{simulate, simulate_logged, CountingSink, EventLog, SimulationOptions, SimulationStats};
use crate::entropy::{diff_entropy_knn, dissipation_gap, h_e_from_entropy, EntropyReport, KacGapSettings};
use crate::error::{invalid, Result};
use crate::geometry::{Configuration, Dim};
use crate::initial_data::{InitialVariant, Maxwellian, Preset};
use crate::kernel::KernelSpec;
use crate::observables::{
    balance_residual, empirical_measure, martingale_residual, EmpiricalReference, GridMeasure, GridSpec, LatticeKernel, PairFunction,
    TestFunction,
};
use crate::par;
use crate::rng::{stream_id, stream_rng, SimRng};
use crate::stats::{ks_statistic, log_log_slope, mean_se, variance};

use super::bkw::{validate_calibration, Bkw};
use super::distances::BlDictionary;
use super::grid_dynamics::{preset_grid_measure, run_grid_boltzmann, stable_steps};
use super::spec::{Check, ConvergenceReport, SeriesPoint, SlopeFit, StudySpec};

const TAG_SIMULATE: u16 = 1;
const TAG_CONVERGENCE: u16 = 2;
const TAG_ENTROPY: u16 = 3;
const TAG_DISSIPATION: u16 = 4;
const TAG_FLUX: u16 = 5;
const TAG_BKW: u16 = 6;
const TAG_REFERENCE: u16 = 7;
const TAG_CALIBRATION: u64 = 8;

/// Energy drift allowed at every snapshot, relative to e.
pub const ENERGY_TOL: f64 = 1e-8;
/// Relative tolerance of the pathwise balance.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
struct Task {
    ni: usize,
    n: usize,
    r: usize,
}

fn tasks(spec: &StudySpec) -> Vec<Task> {
    let mut out = Vec::new();
    for (ni, &n) in spec.n_list.iter().enumerate() {
        for r in 0..spec.replicas {
            out.push(Task { ni, n, r });
        }
    }
    out
}

fn task_rng(seed: u64, tag: u16, t: Task) -> SimRng {
    stream_rng(seed, stream_id(tag, t.ni as u16, t.r as u32))
}

fn initial(spec: &StudySpec, t: Task, seed: u64, rng: &mut SimRng) -> Result<Configuration> {
    spec.initial_spec(t.n, seed).sample(rng).map(|(c, _)| c)
}

fn energy_defect(cfg: &Configuration) -> f64 {
    (cfg.mean_energy() - cfg.energy()).abs() / cfg.energy()
}

fn run_snapshots(spec: &StudySpec, cfg0: &Configuration, rng: &mut SimRng, times: &[f64]) -> Result<(Vec<(f64, Configuration)>, SimulationStats)> {
    let out = simulate(
        cfg0,
        spec.horizon(),
        spec.kernel,
        spec.scheduler,
        rng,
        times,
        &mut CountingSink::default(),
        SimulationOptions::default(),
    )?;
    Ok((out.snapshots, out.stats))
}

fn push_series(rep: &mut ConvergenceReport, statistic: &str, n: usize, time: f64, values: &[f64]) {
    let (mean, se) = mean_se(values);
    rep.series.push(SeriesPoint {
        statistic: statistic.into(),
        n,
        time,
        mean,
        se,
        replicas: values.len(),
    });
}

/// Adds a series point per (N, time) from the rows of `statistic`.
fn summarize(rep: &mut ConvergenceReport, statistic: &str, ns: &[usize], times: &[f64]) {
    for &n in ns {
        for &t in times {
            let v = rep.replica_values(statistic, n, t);
            if !v.is_empty() {
                push_series(rep, statistic, n, t, &v);
            }
        }
    }
}

fn speed_ks_maxwell(cfg: &Configuration) -> f64 {
    let m = Maxwellian {
        dim: cfg.dim(),
        e: cfg.energy(),
    };
    ks_statistic(&cfg.speeds(), |s| m.speed_cdf(s))
}

fn energy_check(rep: &mut ConvergenceReport) {
    let worst = rep.rows.iter().filter(|r| r.statistic == "energy_defect").fold(0.0f64, |m, r| m.max(r.value));
    rep.checks.push(Check::new("energy_conserved", worst <= ENERGY_TOL, worst, format!("<= {ENERGY_TOL:e}")));
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

/// One simulated replica, kept for artifact output.
#[derive(Debug, Clone)]
pub struct ReplicaRun {
    pub n: usize,
    pub replica: usize,
    pub initial: Configuration,
    pub snapshots: Vec<(f64, Configuration)>,
    pub log: Option<EventLog>,
    pub stats: SimulationStats,
}

/// Plain simulation: conservation diagnostics, equilibration KS and the
/// raw runs for artifact output. Event logs are kept for N ≤ `max_logged_n`.
pub fn simulate_study(spec: &StudySpec, seed: u64, max_logged_n: usize) -> Result<(ConvergenceReport, Vec<ReplicaRun>)> {
    spec.validate()?;
    let times = spec.snapshot_times();
    let runs = par::map_slice(&tasks(spec), |&t| -> Result<ReplicaRun> {
        let mut rng = task_rng(seed, TAG_SIMULATE, t);
        let cfg0 = initial(spec, t, seed, &mut rng)?;
        let (log, out) = if t.n <= max_logged_n {
            let (log, out) = simulate_logged(&cfg0, spec.horizon(), spec.kernel, spec.scheduler, &mut rng, &times)?;
            (Some(log), out)
        } else {
            let out = simulate(
                &cfg0,
                spec.horizon(),
                spec.kernel,
                spec.scheduler,
                &mut rng,
                &times,
                &mut CountingSink::default(),
                SimulationOptions::default(),
            )?;
            (None, out)
        };
        Ok(ReplicaRun {
            n: t.n,
            replica: t.r,
            initial: cfg0,
            snapshots: out.snapshots,
            log,
            stats: out.stats,
        })
    });
    let runs: Vec<ReplicaRun> = runs.into_iter().collect::<Result<_>>()?;
    let mut rep = ConvergenceReport::new("simulate", spec, seed);
    let horizon = spec.horizon();
    for run in &runs {
        let s = &run.stats;
        for (name, v) in [
            ("events", s.events as f64),
            ("max_pair_energy_error", s.max_pair_energy_error),
            ("max_pair_momentum_error", s.max_pair_momentum_error),
            ("max_drift_before_reprojection", s.max_drift_before_reprojection),
            ("reprojections", s.reprojections as f64),
        ] {
            rep.push_row(run.n, run.replica, horizon, name, v);
        }
        for (t, c) in &run.snapshots {
            rep.push_row(run.n, run.replica, *t, "energy_defect", energy_defect(c));
            rep.push_row(run.n, run.replica, *t, "ks_maxwell", speed_ks_maxwell(c));
        }
    }
    summarize(&mut rep, "events", &spec.n_list, &[horizon]);
    summarize(&mut rep, "energy_defect", &spec.n_list, &times);
    summarize(&mut rep, "ks_maxwell", &spec.n_list, &times);
    energy_check(&mut rep);
    let worst_pair = runs.iter().map(|r| r.stats.max_pair_energy_error.max(r.stats.max_pair_momentum_error)).fold(0.0, f64::max);
    rep.checks.push(Check::new("pair_conservation", worst_pair <= 1e-12, worst_pair, "<= 1e-12"));
    Ok((rep, runs))
}

/// Distances between π^N_t at consecutive N, energy series and relaxation
/// towards M_e.
pub fn self_convergence_study(spec: &StudySpec, seed: u64) -> Result<ConvergenceReport> {
    spec.validate()?;
    if spec.n_list.len() < 3 {
        return Err(invalid("N", "self-convergence needs at least three values"));
    }
    let times = spec.snapshot_times();
    let d = spec.dim();
    let dict = BlDictionary::new(d, spec.e);
    let coarse = GridSpec::new(d, spec.v_max(), spec.grid.distance_cells, 1, spec.horizon())?;
    let law = Maxwellian::new(d, spec.e)?.cell_masses(&coarse)?;
    struct Snap {
        means: Vec<f64>,
        binned: GridMeasure,
        energy_defect: f64,
        ks: f64,
        tv_maxwell: f64,
    }
    let all = tasks(spec);
    let per = par::map_slice(&all, |&t| -> Result<Vec<Snap>> {
        let mut rng = task_rng(seed, TAG_CONVERGENCE, t);
        let cfg0 = initial(spec, t, seed, &mut rng)?;
        let (snaps, _) = run_snapshots(spec, &cfg0, &mut rng, &times)?;
        snaps
            .iter()
            .map(|(_, c)| {
                let binned = empirical_measure(c, &coarse)?.measure;
                Ok(Snap {
                    means: dict.means(c.velocities()),
                    tv_maxwell: binned.total_variation(&law)?,
                    binned,
                    energy_defect: energy_defect(c),
                    ks: speed_ks_maxwell(c),
                })
            })
            .collect()
    });
    let per: Vec<Vec<Snap>> = per.into_iter().collect::<Result<_>>()?;
    let at = |ni: usize, r: usize| &per[ni * spec.replicas + r];

    let mut rep = ConvergenceReport::new("convergence", spec, seed);
    for (ni, &n) in spec.n_list.iter().enumerate() {
        for r in 0..spec.replicas {
            for (k, &t) in times.iter().enumerate() {
                let s = &at(ni, r)[k];
                rep.push_row(n, r, t, "energy_defect", s.energy_defect);
                rep.push_row(n, r, t, "ks_maxwell", s.ks);
                rep.push_row(n, r, t, "tv_maxwell", s.tv_maxwell);
                if ni + 1 < spec.n_list.len() {
                    let o = &at(ni + 1, r)[k];
                    rep.push_row(n, r, t, "bl_next", BlDictionary::distance_of_means(&s.means, &o.means));
                    rep.push_row(n, r, t, "tv_next", s.binned.total_variation(&o.binned)?);
                }
            }
        }
    }
    for stat in ["energy_defect", "ks_maxwell", "tv_maxwell", "bl_next", "tv_next"] {
        summarize(&mut rep, stat, &spec.n_list, &times);
    }
    let fit_ns = &spec.n_list[..spec.n_list.len() - 1];
    let x: Vec<f64> = fit_ns.iter().map(|&n| n as f64).collect();
    for &t in &times {
        for stat in ["bl_next", "tv_next"] {
            let y: Vec<f64> = fit_ns.iter().map(|&n| rep.mean(stat, n, t).unwrap_or(f64::NAN)).collect();
            if let Ok(fit) = log_log_slope(&x, &y) {
                rep.slopes.push(SlopeFit {
                    statistic: stat.into(),
                    time: Some(t),
                    fit,
                });
            }
        }
    }
    energy_check(&mut rep);
    if let Some(s) = rep.slopes.iter().find(|s| s.statistic == "bl_next" && s.time == Some(0.0)) {
        let v = s.fit.slope;
        rep.checks.push(Check::new("sampling_slope_t0", (v + 0.5).abs() <= 0.2, v, "-0.5 ± 0.2"));
    }
    let n_max = *spec.n_list.last().unwrap();
    let q = spec.snapshots;
    let idx: Vec<usize> = if q >= 4 { vec![q / 4, q / 2, q] } else { (1..=q).collect() };
    let tv: Vec<f64> = idx.iter().map(|&k| rep.mean("tv_maxwell", n_max, times[k]).unwrap_or(f64::NAN)).collect();
    let decreasing = tv.windows(2).all(|w| w[1] < w[0]);
    rep.checks.push(Check::new("relaxation_tv_decreasing", decreasing, *tv.last().unwrap(), "strictly decreasing at T/4, T/2, T"));
    let ks_end = rep.mean("ks_maxwell", n_max, *times.last().unwrap()).unwrap_or(f64::NAN);
    rep.checks.push(Check::new("terminal_ks_maxwell", ks_end < 0.03, ks_end, "< 0.03 (mean over replicas, largest N)"));
    Ok(rep)
}

/// Grid-Boltzmann reference Ent(P_t|M_e) at `times` from the preset.
pub fn grid_reference_entropy(spec: &StudySpec, preset: Preset, times: &[f64], seed: u64) -> Result<(Vec<f64>, serde_json::Value)> {
    let d = spec.dim();
    let grid = GridSpec::new(d, spec.v_max(), spec.grid.reference_cells, 1, spec.horizon())?;
    let lk = LatticeKernel::new(grid, spec.kernel, spec.estimator.n_omega)?;
    let mut rng = stream_rng(seed, stream_id(TAG_REFERENCE, 0, 0));
    let p0 = preset_grid_measure(preset, &grid, spec.e, 400_000, &mut rng)?;
    let per = stable_steps(&lk, &p0, spec.horizon(), 0.5).div_ceil(spec.snapshots);
    let steps = per * spec.snapshots;
    let run = run_grid_boltzmann(&lk, &p0, spec.horizon(), steps)?;
    let he = run.he_series(1e-9)?;
    let vals = times
        .iter()
        .map(|&t| {
            let k = ((t / run.stats.dt) + 1e-9).floor() as usize;
            he[k.min(he.len() - 1)]
        })
        .collect();
    let meta = serde_json::json!({
        "cells": spec.grid.reference_cells,
        "steps": steps,
        "stats": to_json(&run.stats)?,
        "grid_energy": p0.energy(),
    });
    Ok((vals, meta))
}

/// kNN estimates of Ent(π^N_t|M_e) per (N, t) against the grid reference.
pub fn entropy_propagation_study(spec: &StudySpec, seed: u64) -> Result<ConvergenceReport> {
    spec.validate()?;
    let times = spec.snapshot_times();
    let d = spec.dim();
    let preset = spec.initial_spec(2, seed).preset();
    let per = par::map_slice(&tasks(spec), |&t| -> Result<Vec<(f64, f64)>> {
        let mut rng = task_rng(seed, TAG_ENTROPY, t);
        let cfg0 = initial(spec, t, seed, &mut rng)?;
        let (snaps, _) = run_snapshots(spec, &cfg0, &mut rng, &times)?;
        snaps
            .iter()
            .map(|(_, c)| {
                let est = diff_entropy_knn(c.velocities(), d, spec.estimator.k, spec.jitter(), &mut rng)?;
                Ok((h_e_from_entropy(est.value, d, spec.e), energy_defect(c)))
            })
            .collect()
    });
    let per: Vec<Vec<(f64, f64)>> = per.into_iter().collect::<Result<_>>()?;
    let mut rep = ConvergenceReport::new("entropy_propagation", spec, seed);
    for (i, t) in tasks(spec).iter().enumerate() {
        for (k, &time) in times.iter().enumerate() {
            rep.push_row(t.n, t.r, time, "ent_knn", per[i][k].0);
            rep.push_row(t.n, t.r, time, "energy_defect", per[i][k].1);
        }
    }
    summarize(&mut rep, "ent_knn", &spec.n_list, &times);
    summarize(&mut rep, "energy_defect", &spec.n_list, &times);
    energy_check(&mut rep);

    match grid_reference_entropy(spec, preset, &times, seed) {
        Ok((reference, meta)) => {
            for (&t, &v) in times.iter().zip(&reference) {
                rep.series.push(SeriesPoint {
                    statistic: "ent_grid_reference".into(),
                    n: 0,
                    time: t,
                    mean: v,
                    se: 0.0,
                    replicas: 1,
                });
                for &n in &spec.n_list {
                    if let Some(m) = rep.mean("ent_knn", n, t) {
                        rep.series.push(SeriesPoint {
                            statistic: "ent_deviation".into(),
                            n,
                            time: t,
                            mean: m - v,
                            se: rep.point("ent_knn", n, t).map_or(f64::NAN, |p| p.se),
                            replicas: spec.replicas,
                        });
                    }
                }
            }
            rep.extras.insert("grid_reference".into(), meta);
        }
        Err(e) => rep.diagnostics.push(format!("grid reference unavailable: {e}")),
    }

    // H-theorem within 3σ bands
    let mut worst = f64::NEG_INFINITY;
    for &n in &spec.n_list {
        for w in times.windows(2) {
            let (a, b) = (rep.point("ent_knn", n, w[0]).unwrap(), rep.point("ent_knn", n, w[1]).unwrap());
            let band = 3.0 * (a.se.powi(2) + b.se.powi(2)).sqrt();
            let band = if band.is_finite() { band } else { 0.0 };
            worst = worst.max(b.mean - a.mean - band);
        }
    }
    rep.checks.push(Check::new("ent_non_increasing", worst <= 0.0, worst, "rise minus 3σ band <= 0"));

    let n_max = *spec.n_list.last().unwrap();
    let t0: Vec<f64> = spec.n_list.iter().map(|&n| rep.mean("ent_knn", n, 0.0).unwrap()).collect();
    match preset.entropy(d, spec.e) {
        Some(h) => {
            let closed = h_e_from_entropy(h, d, spec.e);
            let dev = rep.mean("ent_knn", n_max, 0.0).unwrap() - closed;
            rep.extras.insert("t0_closed_form".into(), serde_json::json!(closed));
            rep.checks.push(Check::new("t0_closed_form", dev.abs() <= 0.05, dev, "|kNN - closed form| <= 0.05"));
        }
        None => {
            // singular initial law: Ent = +∞ and the estimate must keep growing with N
            let growing = t0.windows(2).all(|w| w[1] > w[0]);
            rep.diagnostics.push(format!("{} preset has no density; Ent(P_0|M_e) = +inf", preset.name()));
            rep.checks.push(Check::new("t0_diverges_with_n", growing, *t0.last().unwrap(), "strictly increasing in N"));
        }
    }
    Ok(rep)
}

/// Dissipation-gap reports per (N, replica), paired comparisons across N
/// and the gap on refined grids.
pub fn dissipation_study(spec: &StudySpec, seed: u64) -> Result<ConvergenceReport> {
    spec.validate()?;
    let horizon = spec.horizon();
    let settings = KacGapSettings {
        k: spec.estimator.k,
        jitter_width: spec.jitter(),
        tolerance: spec.estimator.tolerance,
    };
    let mut cells = vec![spec.grid.n_cells];
    cells.extend(spec.grid.refine.iter().copied().filter(|&c| c != spec.grid.n_cells));
    let refs: Vec<EmpiricalReference> = cells
        .iter()
        .map(|&c| {
            let g = GridSpec::new(spec.dim(), spec.v_max(), c, spec.grid.n_t, horizon)?;
            EmpiricalReference::new(g, spec.kernel, spec.estimator.reference_nodes_min, spec.estimator.reference_nodes_max)
        })
        .collect::<Result<_>>()?;
    let all = tasks(spec);
    let per = par::map_slice(&all, |&t| -> Result<(Vec<EntropyReport>, f64)> {
        let mut rng = task_rng(seed, TAG_DISSIPATION, t);
        let cfg0 = initial(spec, t, seed, &mut rng)?;
        let (log, out) = simulate_logged(&cfg0, horizon, spec.kernel, spec.scheduler, &mut rng, &[])?;
        let reports = refs
            .iter()
            .map(|r| dissipation_gap(&cfg0, &out.final_config, &log, r, settings, &mut rng))
            .collect::<Result<_>>()?;
        Ok((reports, energy_defect(&out.final_config)))
    });
    let per: Vec<(Vec<EntropyReport>, f64)> = per.into_iter().collect::<Result<_>>()?;

    let mut rep = ConvergenceReport::new("dissipation", spec, seed);
    rep.times = vec![0.0, horizon];
    let mut by_n: BTreeMap<String, Vec<&EntropyReport>> = BTreeMap::new();
    for (t, (reports, ed)) in all.iter().zip(&per) {
        rep.push_row(t.n, t.r, horizon, "energy_defect", *ed);
        for (ci, (r, &c)) in reports.iter().zip(&cells).enumerate() {
            let sfx = if ci == 0 { String::new() } else { format!("_h{c}") };
            for (name, v) in [
                ("h_start", r.h_start),
                ("h_end", r.h_end),
                ("e_forward", r.e_forward),
                ("e_backward", r.e_backward),
                ("e_forward_mollified", r.e_forward_mollified),
                ("e_backward_mollified", r.e_backward_mollified),
                ("gap", r.gap),
                ("gap_mollified", r.gap_mollified),
                ("flux_mass", r.diagnostics.flux_mass),
                ("out_of_box_flux_mass", r.diagnostics.out_of_box_flux_mass),
                ("max_path_overflow", r.diagnostics.max_path_overflow),
            ] {
                rep.push_row(t.n, t.r, horizon, &format!("{name}{sfx}"), v);
            }
            if ci == 0 {
                by_n.entry(format!("N{}", t.n)).or_default().push(r);
            }
        }
    }
    let stats: Vec<String> = rep.rows.iter().map(|r| r.statistic.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for s in &stats {
        summarize(&mut rep, s, &spec.n_list, &[horizon]);
    }
    energy_check(&mut rep);
    let sign_ok = per.iter().filter(|(r, _)| r[0].sign_ok).count() as f64 / per.len() as f64;
    rep.checks.push(Check::new("gap_sign", sign_ok == 1.0, sign_ok, format!("gap_mollified >= -{} on every run", settings.tolerance)));
    let overflow_ok = per.iter().all(|(r, _)| r[0].overflow_ok);
    rep.checks.push(Check::new("overflow", overflow_ok, if overflow_ok { 1.0 } else { 0.0 }, "< 1e-3 on every run"));

    let paired = |stat: &str, a: usize, b: usize| -> f64 {
        let ea = rep.replica_values(stat, a, horizon);
        let eb = rep.replica_values(stat, b, horizon);
        ea.iter().zip(&eb).filter(|(x, y)| y.abs() < x.abs()).count() as f64 / ea.len().max(1) as f64
    };
    let ns = &spec.n_list;
    let consecutive: Vec<f64> = ns.windows(2).map(|w| paired("e_forward_mollified", w[0], w[1])).collect();
    let (first, last) = (ns[0], *ns.last().unwrap());
    let extremes = (ns.len() >= 2).then(|| (paired("e_forward_mollified", first, last), paired("gap_mollified", first, last)));
    for (w, f) in ns.windows(2).zip(consecutive) {
        rep.series.push(SeriesPoint {
            statistic: "paired_forward_decrease".into(),
            n: w[0],
            time: horizon,
            mean: f,
            se: f64::NAN,
            replicas: spec.replicas,
        });
    }
    if let Some((fwd, gap)) = extremes {
        let rule = format!(">= 0.8 of replicas paired between N = {first} and N = {last}");
        rep.checks.push(Check::new("forward_mollified_decreases_with_n", fwd >= 0.8, fwd, rule.clone()));
        rep.checks.push(Check::new("abs_gap_mollified_decreases_with_n", gap >= 0.8, gap, rule));
    }
    if ns.len() >= 3 {
        let y: Vec<f64> = ns.iter().map(|&n| rep.mean("gap_mollified", n, horizon).unwrap_or(f64::NAN).abs()).collect();
        let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        if let Ok(fit) = log_log_slope(&x, &y) {
            rep.slopes.push(SlopeFit {
                statistic: "abs_gap_mollified".into(),
                time: Some(horizon),
                fit,
            });
        }
    }
    for (k, v) in by_n {
        rep.extras.insert(format!("entropy_reports_{k}"), to_json(&v)?);
    }
    Ok(rep)
}

/// Pathwise balance for the ten standard test functions and, for
/// N up to the estimator's `martingale_max_n`, the martingale residual at T with its
/// variance scaling in N.
pub fn flux_check_study(spec: &StudySpec, seed: u64) -> Result<ConvergenceReport> {
    spec.validate()?;
    let horizon = spec.horizon();
    let fam = TestFunction::standard_family();
    let names: Vec<String> = PairFunction::standard_family().iter().map(|f| f.name.clone()).collect();
    let all = tasks(spec);
    type Out = (Vec<(f64, f64, bool)>, Option<Vec<(f64, f64)>>, usize);
    let per = par::map_slice(&all, |&t| -> Result<Out> {
        let mut rng = task_rng(seed, TAG_FLUX, t);
        let cfg0 = initial(spec, t, seed, &mut rng)?;
        let (log, out) = simulate_logged(&cfg0, horizon, spec.kernel, spec.scheduler, &mut rng, &[])?;
        let bal = fam
            .iter()
            .map(|phi| balance_residual(&cfg0, &out.final_config, &log, phi).map(|b| (b.residual, b.scale, b.within(BALANCE_TOL))))
            .collect::<Result<Vec<_>>>()?;
        let mart = if t.n <= spec.estimator.martingale_max_n {
            let m = martingale_residual(&cfg0, &log, PairFunction::standard_family(), spec.kernel, spec.estimator.martingale_n_omega, &[horizon])?;
            Some(m.values.iter().zip(&m.bracket).map(|(v, b)| (v[0], b[0])).collect())
        } else {
            None
        };
        Ok((bal, mart, log.len()))
    });
    let per: Vec<Out> = per.into_iter().collect::<Result<_>>()?;
    let mut rep = ConvergenceReport::new("flux_check", spec, seed);
    rep.times = vec![horizon];
    let mut all_within = true;
    let mut worst_ratio = 0.0f64;
    for (t, (bal, mart, events)) in all.iter().zip(&per) {
        rep.push_row(t.n, t.r, horizon, "events", *events as f64);
        for (phi, &(res, scale, ok)) in fam.iter().zip(bal) {
            rep.push_row(t.n, t.r, horizon, &format!("balance_residual_{}", phi.name), res);
            rep.push_row(t.n, t.r, horizon, &format!("balance_scale_{}", phi.name), scale);
            all_within &= ok;
            if scale > 0.0 {
                worst_ratio = worst_ratio.max(res.abs() / scale);
            }
        }
        if let Some(m) = mart {
            for (name, &(v, b)) in names.iter().zip(m) {
                rep.push_row(t.n, t.r, horizon, &format!("martingale_{name}"), v);
                rep.push_row(t.n, t.r, horizon, &format!("bracket_{name}"), b);
            }
        }
    }
    rep.checks.push(Check::new("balance", all_within, worst_ratio, format!("|residual| <= {BALANCE_TOL:e} * scale on every run")));
    summarize(&mut rep, "events", &spec.n_list, &[horizon]);

    let mart_ns: Vec<usize> = spec.n_list.iter().copied().filter(|&n| n <= spec.estimator.martingale_max_n).collect();
    if mart_ns.len() < spec.n_list.len() {
        rep.diagnostics.push(format!("martingale residual skipped for N > {}", spec.estimator.martingale_max_n));
    }
    for name in &names {
        let stat = format!("martingale_{name}");
        summarize(&mut rep, &stat, &mart_ns, &[horizon]);
        summarize(&mut rep, &format!("bracket_{name}"), &mart_ns, &[horizon]);
        let mut vars = Vec::new();
        let mut worst_z = 0.0f64;
        for &n in &mart_ns {
            let v = rep.replica_values(&stat, n, horizon);
            let var = variance(&v);
            let (m, se) = mean_se(&v);
            if se > 0.0 {
                worst_z = worst_z.max((m / se).abs());
            }
            rep.series.push(SeriesPoint {
                statistic: format!("martingale_var_{name}"),
                n,
                time: horizon,
                mean: var,
                se: var * (2.0 / (v.len() as f64 - 1.0)).sqrt(),
                replicas: v.len(),
            });
            vars.push(var);
        }
        if spec.replicas >= 2 && !mart_ns.is_empty() {
            rep.checks.push(Check::new(format!("martingale_mean_{name}"), worst_z <= 3.0, worst_z, "|mean| <= 3 SE"));
        }
        if mart_ns.len() >= 2 {
            let x: Vec<f64> = mart_ns.iter().map(|&n| n as f64).collect();
            let fit = log_log_slope(&x, &vars)?;
            rep.checks.push(Check::new(format!("martingale_slope_{name}"), (fit.slope + 1.0).abs() <= 0.2, fit.slope, "-1 ± 0.2"));
            rep.slopes.push(SlopeFit {
                statistic: format!("martingale_var_{name}"),
                time: Some(horizon),
                fit,
            });
        }
    }
    Ok(rep)
}

/// KS distance of simulated speed marginals to the BKW family after the
/// moment-rate calibration has been checked by small-N simulation.
pub fn bkw_oracle_study(spec: &StudySpec, seed: u64) -> Result<ConvergenceReport> {
    spec.validate()?;
    let b = match spec.kernel {
        KernelSpec::MaxwellConstant { b } => b,
        KernelSpec::HardSphere => return Err(invalid("kernel", "the BKW oracle needs the maxwell_constant kernel")),
    };
    if spec.dim() != Dim::Three {
        return Err(invalid("d", "the BKW oracle is implemented for d = 3"));
    }
    let cfg = &spec.bkw;
    let bkw = Bkw::new(spec.e, b, cfg.k0)?;
    if cfg.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
        return Err(invalid("bkw.fractions", "must lie in (0, 1)"));
    }
    let mut rep = ConvergenceReport::new("bkw_oracle", spec, seed);
    if spec.initial != InitialVariant::ChaoticFrom(Preset::Maxwellian) && spec.initial != InitialVariant::Microcanonical {
        rep.diagnostics.push("initial data replaced by the BKW member K0".into());
    }

    let cal_t = 2.0 / bkw.moment_rate();
    let pts = cfg.calibration_points.max(2);
    let cal_times: Vec<f64> = (0..pts).map(|k| cal_t * k as f64 / (pts - 1) as f64).collect();
    let cal = validate_calibration(
        &bkw,
        bkw.moment_rate(),
        cfg.calibration_n,
        cfg.calibration_replicas,
        &cal_times,
        seed ^ (TAG_CALIBRATION << 56),
        cfg.calibration_threshold,
    )?;
    rep.checks.push(Check::new("calibration", cal.passed, cal.max_abs_z, format!("max |z| <= {}", cfg.calibration_threshold)));
    rep.extras.insert("calibration".into(), to_json(&cal)?);
    rep.extras.insert("bkw".into(), to_json(&bkw)?);

    // sampler self-test
    let mut rng = stream_rng(seed, stream_id(TAG_BKW, u16::MAX, 0));
    let s: Vec<f64> = (0..100_000).map(|_| bkw.sample(0.0, &mut rng).norm()).collect();
    let ks0 = ks_statistic(&s, |x| bkw.speed_cdf(x, 0.0));
    rep.checks.push(Check::new("sampler_self_test", ks0 < 0.01, ks0, "< 0.01 at 1e5 samples"));

    let oracle: Vec<f64> = cfg.fractions.iter().map(|&f| bkw.time_at_fraction(f)).collect();
    let terminal = spec.horizon().max(bkw.time_at_fraction(0.01));
    let mut times = vec![0.0];
    times.extend(oracle.iter().copied());
    times.push(terminal);
    times.sort_by(f64::total_cmp);
    times.dedup();
    rep.times = times.clone();
    rep.horizon = terminal;

    let per = par::map_slice(&tasks(spec), |&t| -> Result<Vec<(f64, f64, f64, f64)>> {
        let mut rng = task_rng(seed, TAG_BKW, t);
        let cfg0 = bkw.sample_configuration(t.n, 0.0, &mut rng)?;
        let out = simulate(
            &cfg0,
            terminal,
            bkw.kernel(),
            spec.scheduler,
            &mut rng,
            &times,
            &mut CountingSink::default(),
            SimulationOptions::default(),
        )?;
        Ok(out
            .snapshots
            .iter()
            .map(|(time, c)| {
                let sp = c.speeds();
                let m4 = c.velocities().iter().map(|v| v.norm2() * v.norm2()).sum::<f64>() / c.len() as f64;
                (
                    ks_statistic(&sp, |x| bkw.speed_cdf(x, *time)),
                    speed_ks_maxwell(c),
                    m4,
                    energy_defect(c),
                )
            })
            .collect())
    });
    let per: Vec<Vec<(f64, f64, f64, f64)>> = per.into_iter().collect::<Result<_>>()?;
    for (i, t) in tasks(spec).iter().enumerate() {
        for (k, &time) in times.iter().enumerate() {
            let (a, b2, m4, ed) = per[i][k];
            if cal.passed {
                rep.push_row(t.n, t.r, time, "ks_bkw", a);
            }
            rep.push_row(t.n, t.r, time, "ks_maxwell", b2);
            rep.push_row(t.n, t.r, time, "m4", m4);
            rep.push_row(t.n, t.r, time, "energy_defect", ed);
        }
    }
    for s in ["ks_bkw", "ks_maxwell", "m4", "energy_defect"] {
        summarize(&mut rep, s, &spec.n_list, &times);
    }
    for &t in &times {
        rep.series.push(SeriesPoint {
            statistic: "m4_bkw".into(),
            n: 0,
            time: t,
            mean: bkw.m4_at(t),
            se: 0.0,
            replicas: 1,
        });
    }
    energy_check(&mut rep);
    let n_max = *spec.n_list.last().unwrap();
    if cal.passed {
        let worst = oracle.iter().map(|&t| rep.mean("ks_bkw", n_max, t).unwrap()).fold(0.0, f64::max);
        rep.checks.push(Check::new("ks_bkw_intermediate", worst < 0.02, worst, "< 0.02 at every oracle time (mean over replicas, largest N)"));
        let mut worst_z = 0.0f64;
        for &t in &times {
            let p = rep.point("m4", n_max, t).unwrap();
            if p.se > 0.0 {
                worst_z = worst_z.max(((p.mean - bkw.m4_at(t)) / p.se).abs());
            }
        }
        rep.checks.push(Check::new("m4_within_bands", worst_z <= 3.0, worst_z, "|m4 - ODE| <= 3 SE"));
    } else {
        rep.diagnostics.push(format!(
            "oracle disabled: fourth-moment calibration off by {:.2} standard errors",
            cal.max_abs_z
        ));
    }
    let end = rep.mean("ks_maxwell", n_max, terminal).unwrap();
    rep.checks.push(Check::new("terminal_ks_maxwell", end < 0.02, end, "< 0.02 at the terminal time"));
    Ok(rep)
}
