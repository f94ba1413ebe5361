//! `kacwalk`: runs one study from a JSON config and writes its artifacts.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kacwalk::experiments::{
    bkw_oracle_study, dissipation_study, entropy_propagation_study, flux_check_study, self_convergence_study, simulate_study, ConvergenceReport,
    ReplicaRun,
};
use kacwalk::observables::io::{write_configuration, write_event_log, EventSidecar};
use kacwalk::{par, KacError};
use serde_json::json;

use config::{parse_config, ConfigError, Flags, RunConfig, Study, EVENT_LOG_LIMIT};

#[derive(Debug, Parser)]
#[command(name = "kacwalk", version, about = "Kac walk simulations and entropy diagnostics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate replicas, write snapshots and event logs
    Simulate(Flags),
    /// Pathwise balance and martingale residuals
    FluxCheck(Flags),
    /// kNN entropy per particle against the grid-Boltzmann reference
    EntropyReport(Flags),
    /// Distances between empirical measures at consecutive N
    Convergence(Flags),
    /// Dissipation-gap reports per N
    Dissipation(Flags),
    /// Maxwell-kernel runs against the BKW family
    BkwOracle(Flags),
}

enum Failure {
    Config(ConfigError),
    Run(KacError),
}

impl Failure {
    fn to_json(&self) -> serde_json::Value {
        match self {
            Failure::Config(e) => e.to_json(),
            Failure::Run(e) => json!({ "error": { "kind": "run", "message": e.to_string() } }),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

impl From<KacError> for Failure {
    fn from(e: KacError) -> Self {
        Failure::Run(e)
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), KacError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_runs(rc: &RunConfig, runs: &[ReplicaRun], notes: &mut Vec<String>) -> Result<(), KacError> {
    let snaps = rc.out.join("snapshots");
    let events = rc.out.join("events");
    fs::create_dir_all(&snaps)?;
    let spec = &rc.spec;
    let mut skipped = false;
    for run in runs {
        let tag = format!("N{}_r{}", run.n, run.replica);
        for (k, (t, cfg)) in run.snapshots.iter().enumerate() {
            write_configuration(cfg, *t, rc.seed, &snaps.join(format!("{tag}_s{k}.csv")))?;
        }
        match &run.log {
            Some(log) => {
                fs::create_dir_all(&events)?;
                let side = EventSidecar {
                    n: run.n,
                    d: spec.d,
                    e: spec.e,
                    horizon: spec.horizon(),
                    kernel: spec.kernel,
                    scheduler: spec.scheduler,
                    seed: rc.seed,
                    events: log.len(),
                };
                write_event_log(log, &side, &events.join(format!("{tag}.csv")))?;
            }
            None => skipped = true,
        }
    }
    if skipped {
        notes.push(format!("event logs skipped for N > {EVENT_LOG_LIMIT}; pass --emit-events to write them"));
    }
    Ok(())
}

fn run_study(rc: &RunConfig, notes: &mut Vec<String>) -> Result<ConvergenceReport, KacError> {
    let (spec, seed) = (&rc.spec, rc.seed);
    let rep = match rc.study {
        Study::Simulate => {
            let (rep, runs) = simulate_study(spec, seed, rc.max_logged_n())?;
            write_runs(rc, &runs, notes)?;
            rep
        }
        Study::FluxCheck => flux_check_study(spec, seed)?,
        Study::EntropyReport => entropy_propagation_study(spec, seed)?,
        Study::Convergence => self_convergence_study(spec, seed)?,
        Study::Dissipation => {
            let rep = dissipation_study(spec, seed)?;
            let dir = rc.out.join("entropy_reports");
            fs::create_dir_all(&dir)?;
            for (k, v) in rep.extras.iter().filter(|(k, _)| k.starts_with("entropy_reports_")) {
                write_json(&dir.join(format!("{}.json", k.trim_start_matches("entropy_reports_"))), v)?;
            }
            rep
        }
        Study::BkwOracle => bkw_oracle_study(spec, seed)?,
    };
    rep.write(&rc.out)?;
    Ok(rep)
}

/// Terminal-time means per N of the statistics worth a glance.
fn summary(rc: &RunConfig, rep: &ConvergenceReport, notes: &[String]) -> String {
    const KEY: [&str; 12] = [
        "events",
        "ks_maxwell",
        "tv_maxwell",
        "bl_next",
        "ent_knn",
        "ent_deviation",
        "e_forward_mollified",
        "e_backward_mollified",
        "gap_mollified",
        "ks_bkw",
        "martingale_var_grad_gauss",
        "m4",
    ];
    let mut s = String::new();
    let line = |s: &mut String, t: String| {
        s.push_str(&t);
        s.push('\n');
    };
    line(&mut s, format!("kacwalk {}  seed {}", rc.study.name(), rc.seed));
    line(
        &mut s,
        format!(
            "N {:?}  replicas {}  d {}  e {}  kernel {}  T {:.4} ({:.2} mean free times)",
            rc.spec.n_list,
            rc.spec.replicas,
            rc.spec.d,
            rc.spec.e,
            rc.spec.kernel.name(),
            rep.horizon,
            rep.horizon / rep.mean_free_time
        ),
    );
    let drift = rep.rows.iter().filter(|r| r.statistic == "energy_defect").fold(0.0f64, |m, r| m.max(r.value));
    line(&mut s, format!("max relative energy drift {drift:.3e}"));
    let t_end = rep.series.iter().map(|p| p.time).fold(f64::NEG_INFINITY, f64::max);
    let present: BTreeSet<&str> = rep.series.iter().map(|p| p.statistic.as_str()).collect();
    let stats: Vec<&str> = KEY.iter().copied().filter(|k| present.contains(k)).collect();
    if !stats.is_empty() {
        line(&mut s, format!("\nat t = {t_end:.4} (mean ± se over replicas)"));
        for &n in &rc.spec.n_list {
            let mut row = format!("  N = {n:<7}");
            for st in &stats {
                if let Some(p) = rep.point(st, n, t_end) {
                    row.push_str(&format!("  {st} {:.4}", p.mean));
                    if p.se.is_finite() && p.replicas > 1 {
                        row.push_str(&format!("±{:.4}", p.se));
                    }
                }
            }
            line(&mut s, row);
        }
    }
    if !rep.checks.is_empty() {
        line(&mut s, "\nchecks".into());
        for c in &rep.checks {
            line(
                &mut s,
                format!("  {} {}  value {:.4e}  ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold),
            );
        }
    }
    for d in rep.diagnostics.iter().chain(notes) {
        line(&mut s, format!("note: {d}"));
    }
    line(&mut s, format!("\nartifacts in {}", rc.out.display()));
    s
}

fn execute(study: Study, flags: &Flags) -> Result<(), (Failure, Option<PathBuf>)> {
    let rc = parse_config(study, flags).map_err(|e| (Failure::Config(e), None))?;
    let out = Some(rc.out.clone());
    let fail = |e: KacError| (Failure::Run(e), out.clone());
    for n in &rc.notes {
        eprintln!("note: {n}");
    }
    fs::create_dir_all(&rc.out).map_err(|e| fail(e.into()))?;
    write_json(&rc.out.join("effective_config.json"), &rc.effective()).map_err(fail)?;
    let mut notes = Vec::new();
    let rep = par::with_threads(rc.threads, || run_study(&rc, &mut notes)).map_err(fail)?;
    print!("{}", summary(&rc, &rep, &notes));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (study, flags) = match &cli.cmd {
        Cmd::Simulate(f) => (Study::Simulate, f),
        Cmd::FluxCheck(f) => (Study::FluxCheck, f),
        Cmd::EntropyReport(f) => (Study::EntropyReport, f),
        Cmd::Convergence(f) => (Study::Convergence, f),
        Cmd::Dissipation(f) => (Study::Dissipation, f),
        Cmd::BkwOracle(f) => (Study::BkwOracle, f),
    };
    match execute(study, flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err((f, out)) => {
            let v = f.to_json();
            eprintln!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            if let Some(dir) = out {
                let _ = write_json(&dir.join("error.json"), &v);
            }
            ExitCode::from(f.code())
        }
    }
}
