//! CSV artifacts with JSON sidecars.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{EventLog, SchedulerKind};
use crate::error::{invalid, KacError, Result};
use crate::geometry::{Configuration, Dim, Velocity};
use crate::kernel::KernelSpec;

use super::flux::{FluxMeasure, OUTSIDE};
use super::grid::{GridMeasure, GridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub grid: GridSpec,
    pub overflow: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSidecar {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub e: f64,
    pub t: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSidecar {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub e: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub kernel: KernelSpec,
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub events: usize,
}

/// `<stem>.json` next to `<stem>.csv`.
pub fn sidecar_path(csv: &Path) -> std::path::PathBuf {
    csv.with_extension("json")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn axis_names(prefix: &str, d: usize) -> String {
    (1..=d).map(|a| format!("{prefix}{a}")).collect::<Vec<_>>().join(",")
}

fn push_vel(out: &mut String, v: Velocity, d: usize) {
    for a in 0..d {
        let _ = write!(out, ",{}", v.0[a]);
    }
}

pub fn grid_measure_csv(m: &GridMeasure) -> String {
    let d = m.grid.dim.get();
    let mut out = (0..d).map(|a| format!("k{}", a + 1)).collect::<Vec<_>>().join(",");
    out.push_str(",weight\n");
    for (c, &w) in m.weights.iter().enumerate() {
        if w > 0.0 {
            let k = m.grid.unflat(c);
            for (a, x) in k.iter().take(d).enumerate() {
                if a > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x}");
            }
            let _ = writeln!(out, ",{w}");
        }
    }
    out
}

pub fn write_grid_measure(m: &GridMeasure, csv: &Path) -> Result<()> {
    fs::write(csv, grid_measure_csv(m))?;
    write_json(
        &sidecar_path(csv),
        &GridSidecar {
            grid: m.grid,
            overflow: m.overflow,
            mass: m.mass(),
        },
    )
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| KacError::Io(format!("line {line}: bad number `{s}`")))
}

pub fn read_grid_measure(csv: &Path) -> Result<GridMeasure> {
    let side: GridSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(csv))?)?;
    let g = side.grid;
    g.validate()?;
    let d = g.dim.get();
    let mut w = vec![0.0; g.len()];
    for (ln, line) in fs::read_to_string(csv)?.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 1 {
            return Err(KacError::Io(format!("line {}: expected {} fields", ln + 1, d + 1)));
        }
        let mut k = [0i32; 3];
        for a in 0..d {
            k[a] = f[a].trim().parse().map_err(|_| KacError::Io(format!("line {}: bad index", ln + 1)))?;
        }
        if !g.contains(k) {
            return Err(KacError::Io(format!("line {}: cell outside the grid", ln + 1)));
        }
        w[g.flat(k)] = parse_f64(f[d], ln + 1)?;
    }
    GridMeasure::from_weights(g, w, side.overflow)
}

pub fn flux_measure_csv(q: &FluxMeasure) -> String {
    let mut out = String::from("tbin,c,cs,cp,cps,weight\n");
    let cell = |c: u32| if c == OUTSIDE { -1 } else { c as i64 };
    for (k, w) in &q.weights {
        let _ = writeln!(out, "{},{},{},{},{},{}", k[0], cell(k[1]), cell(k[2]), cell(k[3]), cell(k[4]), w);
    }
    out
}

pub fn write_flux_measure(q: &FluxMeasure, csv: &Path) -> Result<()> {
    fs::write(csv, flux_measure_csv(q))?;
    write_json(
        &sidecar_path(csv),
        &GridSidecar {
            grid: q.grid,
            overflow: 0.0,
            mass: q.mass(),
        },
    )
}

pub fn read_flux_measure(csv: &Path) -> Result<FluxMeasure> {
    let side: GridSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(csv))?)?;
    let mut q = FluxMeasure::new(side.grid);
    for (ln, line) in fs::read_to_string(csv)?.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(KacError::Io(format!("line {}: expected 6 fields", ln + 1)));
        }
        let mut key = [0u32; 5];
        for (s, k) in f[..5].iter().zip(key.iter_mut()) {
            let v: i64 = s.trim().parse().map_err(|_| KacError::Io(format!("line {}: bad index", ln + 1)))?;
            *k = if v < 0 { OUTSIDE } else { v as u32 };
        }
        q.add(key, parse_f64(f[5], ln + 1)?);
    }
    Ok(q)
}

pub fn configuration_csv(cfg: &Configuration) -> String {
    let d = cfg.dim().get();
    let mut out = format!("i,{}\n", axis_names("v", d));
    for (i, &v) in cfg.velocities().iter().enumerate() {
        let _ = write!(out, "{i}");
        push_vel(&mut out, v, d);
        out.push('\n');
    }
    out
}

pub fn write_configuration(cfg: &Configuration, t: f64, seed: u64, csv: &Path) -> Result<()> {
    fs::write(csv, configuration_csv(cfg))?;
    write_json(
        &sidecar_path(csv),
        &ConfigSidecar {
            n: cfg.len(),
            d: cfg.dim().get(),
            e: cfg.energy(),
            t,
            seed,
        },
    )
}

pub fn read_configuration(csv: &Path) -> Result<(Configuration, ConfigSidecar)> {
    let side: ConfigSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(csv))?)?;
    let dim = Dim::new(side.d)?;
    let mut v = Vec::with_capacity(side.n);
    for (ln, line) in fs::read_to_string(csv)?.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != side.d + 1 {
            return Err(KacError::Io(format!("line {}: expected {} fields", ln + 1, side.d + 1)));
        }
        let mut x = [0.0; 3];
        for a in 0..side.d {
            x[a] = parse_f64(f[a + 1], ln + 1)?;
        }
        v.push(Velocity(x));
    }
    if v.len() != side.n {
        return Err(invalid("N", "row count does not match the sidecar"));
    }
    Ok((Configuration::new(dim, side.e, v)?, side))
}

pub fn event_log_csv(log: &EventLog, d: Dim) -> String {
    let d = d.get();
    let mut out = format!(
        "t,i,j,{},{},{},{},{}\n",
        axis_names("w", d),
        axis_names("pre_i", d),
        axis_names("pre_j", d),
        axis_names("post_i", d),
        axis_names("post_j", d)
    );
    for ev in &log.events {
        let _ = write!(out, "{},{},{}", ev.t, ev.i, ev.j);
        for v in [ev.omega, ev.pre_i, ev.pre_j, ev.post_i, ev.post_j] {
            push_vel(&mut out, v, d);
        }
        out.push('\n');
    }
    out
}

pub fn write_event_log(log: &EventLog, sidecar: &EventSidecar, csv: &Path) -> Result<()> {
    let d = Dim::new(sidecar.d)?;
    fs::write(csv, event_log_csv(log, d))?;
    write_json(&sidecar_path(csv), sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::simulate_logged;
    use crate::initial_data::sample_microcanonical;
    use crate::observables::{empirical_flow, empirical_measure};
    use crate::rng::stream_rng;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream_rng(50, 0);
        let cfg = sample_microcanonical(60, Dim::Three, 1.0, &mut rng).unwrap();
        let p = dir.path().join("cfg.csv");
        write_configuration(&cfg, 0.0, 50, &p).unwrap();
        let (back, side) = read_configuration(&p).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(side.seed, 50);

        let g = GridSpec::new(Dim::Three, 4.0, 8, 2, 0.5).unwrap();
        let m = empirical_measure(&cfg, &g).unwrap().measure;
        let gp = dir.path().join("pi.csv");
        write_grid_measure(&m, &gp).unwrap();
        assert_eq!(read_grid_measure(&gp).unwrap(), m);

        let (log, _) = simulate_logged(&cfg, 0.5, KernelSpec::HardSphere, SchedulerKind::MajorantRejection, &mut rng, &[]).unwrap();
        let q = empirical_flow(&log, &g, 60).unwrap();
        let qp = dir.path().join("q.csv");
        write_flux_measure(&q, &qp).unwrap();
        assert_eq!(read_flux_measure(&qp).unwrap(), q);

        let lp = dir.path().join("events.csv");
        let side = EventSidecar {
            n: 60,
            d: 3,
            e: 1.0,
            horizon: 0.5,
            kernel: KernelSpec::HardSphere,
            scheduler: SchedulerKind::MajorantRejection,
            seed: 50,
            events: log.len(),
        };
        write_event_log(&log, &side, &lp).unwrap();
        let text = fs::read_to_string(&lp).unwrap();
        assert!(text.starts_with("t,i,j,w1,w2,w3,pre_i1"));
        assert_eq!(text.lines().count(), log.len() + 1);
    }
}
