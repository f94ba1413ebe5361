//! Run configuration: JSON file plus command-line overrides, checked
//! strictly before anything runs.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use kacwalk::experiments::spec::{BkwSettings, EstimatorSettings, GridSettings};
use kacwalk::experiments::StudySpec;
use kacwalk::KacError;
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Simulate,
    FluxCheck,
    EntropyReport,
    Convergence,
    Dissipation,
    BkwOracle,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Simulate => "simulate",
            Study::FluxCheck => "flux-check",
            Study::EntropyReport => "entropy-report",
            Study::Convergence => "convergence",
            Study::Dissipation => "dissipation",
            Study::BkwOracle => "bkw-oracle",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::value_variants().iter().copied().find(|v| v.name() == s || v.name().replace('-', "_") == s)
    }
}

/// Flags shared by every subcommand. Each one overrides the file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON configuration file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism)
    #[arg(long, value_name = "K")]
    pub threads: Option<usize>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write event logs even above N = 10⁴
    #[arg(long)]
    pub emit_events: bool,
    /// Particle numbers, comma separated
    #[arg(long = "N", value_name = "LIST", value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Energy per particle
    #[arg(long = "e")]
    pub e: Option<f64>,
    /// Velocity dimension (2 or 3)
    #[arg(long = "d")]
    pub d: Option<usize>,
    /// Horizon (absolute time)
    #[arg(long = "T")]
    pub t: Option<f64>,
    #[arg(long)]
    pub replicas: Option<usize>,
    /// hard_sphere or maxwell_constant
    #[arg(long)]
    pub kernel: Option<String>,
    /// microcanonical, maxwellian, two_bump or shell
    #[arg(long)]
    pub initial: Option<String>,
}

/// A rejected configuration, reported as JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
    pub suggestion: Option<String>,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
            suggestion: None,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("kind".into(), json!("config"));
        m.insert("field".into(), json!(self.field));
        m.insert("message".into(), json!(self.message));
        if let Some(s) = &self.suggestion {
            m.insert("suggestion".into(), json!(s));
        }
        json!({ "error": m })
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)?;
        if let Some(s) = &self.suggestion {
            write!(f, " (did you mean `{s}`?)")?;
        }
        Ok(())
    }
}

impl From<KacError> for ConfigError {
    fn from(e: KacError) -> Self {
        match e {
            KacError::InvalidParameter { name, reason } => ConfigError::new(name, reason),
            KacError::UnsupportedDimension(d) => ConfigError::new("d", format!("unsupported dimension {d}; use 2 or 3")),
            other => ConfigError::new("config", other.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub study: Study,
    pub spec: StudySpec,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub emit_events: bool,
    /// Defaults that were filled in, echoed with the config.
    pub notes: Vec<String>,
}

/// Event logs are written up to this N unless `--emit-events` is given.
pub const EVENT_LOG_LIMIT: usize = 10_000;

const TOP_KEYS: &[&str] = &[
    "study",
    "N",
    "replicas",
    "T",
    "d",
    "e",
    "kernel",
    "initial",
    "scheduler",
    "snapshots",
    "grid",
    "estimator",
    "bkw",
    "seed",
    "out",
    "threads",
    "emit_events",
];

const PRESETS: &[&str] = &["microcanonical", "maxwellian", "two_bump", "shell"];

fn suggest<'a>(key: &str, known: impl IntoIterator<Item = &'a str>) -> Option<String> {
    known
        .into_iter()
        .map(|k| (strsim::jaro_winkler(key, k), k))
        .filter(|(s, _)| *s >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string())
}

fn default_keys(v: Value) -> Vec<String> {
    match v {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Names people reach for, mapped to the key that carries them.
const ALIASES: &[(&str, &str)] = &[
    ("temperature", "e"),
    ("energy", "e"),
    ("dimension", "d"),
    ("dim", "d"),
    ("horizon", "T"),
    ("time", "T"),
    ("particles", "N"),
    ("n", "N"),
    ("reps", "replicas"),
];

fn check_keys(obj: &Map<String, Value>, known: &[String], prefix: &str) -> Result<(), ConfigError> {
    for k in obj.keys() {
        if !known.iter().any(|x| x == k) {
            let mut err = ConfigError::new(format!("{prefix}{k}"), "unknown key");
            err.suggestion = suggest(k, known.iter().map(String::as_str)).map(|s| format!("{prefix}{s}"));
            if err.suggestion.is_none() && prefix.is_empty() {
                if let Some(alias) = suggest(k, ALIASES.iter().map(|a| a.0)) {
                    let target = ALIASES.iter().find(|a| a.0 == alias).unwrap().1;
                    err.suggestion = Some(target.to_string());
                    if target == "e" && alias == "temperature" {
                        err.message = "unknown key; the temperature is set through `e` (energy per particle, temperature 2e/d)".into();
                    }
                }
            }
            return Err(err);
        }
    }
    Ok(())
}

fn initial_value(v: &Value) -> Result<Value, ConfigError> {
    match v {
        Value::String(s) => match s.as_str() {
            "microcanonical" => Ok(json!({ "variant": "microcanonical" })),
            p if PRESETS.contains(&p) => Ok(json!({ "variant": "chaotic_from", "source": p })),
            other => {
                let mut e = ConfigError::new("initial", format!("unknown preset `{other}`"));
                e.suggestion = suggest(other, PRESETS.iter().copied());
                Err(e)
            }
        },
        Value::Object(_) => Ok(v.clone()),
        _ => Err(ConfigError::new("initial", "expected a preset name or an object")),
    }
}

fn kernel_value(v: &Value, b: f64) -> Result<Value, ConfigError> {
    match v {
        Value::String(s) => match s.as_str() {
            "hard_sphere" => Ok(json!({ "type": "hard_sphere" })),
            "maxwell_constant" => Ok(json!({ "type": "maxwell_constant", "b": b })),
            other => {
                let mut e = ConfigError::new("kernel", format!("unknown kernel `{other}`"));
                e.suggestion = suggest(other, ["hard_sphere", "maxwell_constant"]);
                Err(e)
            }
        },
        Value::Object(_) => Ok(v.clone()),
        _ => Err(ConfigError::new("kernel", "expected a kernel name or an object")),
    }
}

fn take_u64(obj: &Map<String, Value>, key: &str) -> Result<Option<u64>, ConfigError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or_else(|| ConfigError::new(key, "expected a non-negative integer")),
    }
}

fn read_file(path: &Path) -> Result<Map<String, Value>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ConfigError::new("config", "top level must be an object")),
        Err(e) => Err(ConfigError::new("config", format!("invalid JSON: {e}"))),
    }
}

/// File values, then flags, then defaults; validated against the study.
pub fn parse_config(study: Study, flags: &Flags) -> Result<RunConfig, ConfigError> {
    let mut obj = match &flags.config {
        Some(p) => read_file(p)?,
        None => Map::new(),
    };
    let known: Vec<String> = TOP_KEYS.iter().map(|s| s.to_string()).collect();
    check_keys(&obj, &known, "")?;
    for (key, defaults) in [
        ("grid", default_keys(json!(GridSettings::default()))),
        ("estimator", default_keys(json!(EstimatorSettings::default()))),
        ("bkw", default_keys(json!(BkwSettings::default()))),
    ] {
        match obj.get(key) {
            None => {}
            Some(Value::Object(m)) => check_keys(m, &defaults, &format!("{key}."))?,
            Some(_) => return Err(ConfigError::new(key, "expected an object")),
        }
    }

    if let Some(v) = obj.get("study") {
        let named = v.as_str().and_then(Study::parse).ok_or_else(|| ConfigError::new("study", "unknown study"))?;
        if named != study {
            return Err(ConfigError::new(
                "study",
                format!("config names `{}` but the subcommand is `{}`", named.name(), study.name()),
            ));
        }
    }

    // flags override the file
    let set = |obj: &mut Map<String, Value>, k: &str, v: Value| {
        obj.insert(k.to_string(), v);
    };
    if let Some(n) = &flags.n {
        set(&mut obj, "N", json!(n));
    }
    if let Some(e) = flags.e {
        set(&mut obj, "e", json!(e));
    }
    if let Some(d) = flags.d {
        set(&mut obj, "d", json!(d));
    }
    if let Some(t) = flags.t {
        set(&mut obj, "T", json!(t));
    }
    if let Some(r) = flags.replicas {
        set(&mut obj, "replicas", json!(r));
    }
    if let Some(k) = &flags.kernel {
        set(&mut obj, "kernel", json!(k));
    }
    if let Some(i) = &flags.initial {
        set(&mut obj, "initial", json!(i));
    }

    let mut notes = Vec::new();
    for key in ["N", "e", "d", "T"] {
        if !obj.contains_key(key) {
            return Err(ConfigError::new(key, "required (physical parameters have no defaults)"));
        }
    }
    let n = match obj.remove("N").unwrap() {
        Value::Array(a) => Value::Array(a),
        v @ Value::Number(_) => Value::Array(vec![v]),
        _ => return Err(ConfigError::new("N", "expected an integer or a list of integers")),
    };
    if let Value::Array(a) = &n {
        if a.iter().any(|x| x.as_u64().is_some_and(|v| v < 2)) {
            return Err(ConfigError::new("N", "N ≥ 2"));
        }
    }
    obj.insert("N".into(), n);

    let seed = match flags.seed {
        Some(s) => s,
        None => take_u64(&obj, "seed")?.unwrap_or_else(|| {
            notes.push("seed not given; using 0".into());
            0
        }),
    };
    let threads = match flags.threads {
        Some(t) => t,
        None => take_u64(&obj, "threads")?.unwrap_or(0) as usize,
    };
    let emit_events = flags.emit_events
        || match obj.get("emit_events") {
            None => false,
            Some(v) => v.as_bool().ok_or_else(|| ConfigError::new("emit_events", "expected true or false"))?,
        };
    let out = match &flags.out {
        Some(p) => p.clone(),
        None => match obj.get("out") {
            None => PathBuf::from("kacwalk-out"),
            Some(Value::String(s)) => PathBuf::from(s),
            Some(_) => return Err(ConfigError::new("out", "expected a path")),
        },
    };
    for k in ["study", "seed", "threads", "emit_events", "out"] {
        obj.remove(k);
    }

    let b = obj
        .get("bkw")
        .and_then(|v| v.get("b"))
        .and_then(Value::as_f64)
        .unwrap_or(BkwSettings::default().b);
    let kernel = match obj.get("kernel") {
        Some(v) => kernel_value(v, b)?,
        None if study == Study::BkwOracle => {
            notes.push(format!("kernel not given; bkw-oracle uses maxwell_constant with b = {b}"));
            json!({ "type": "maxwell_constant", "b": b })
        }
        None => {
            notes.push("kernel not given; using hard_sphere".into());
            json!({ "type": "hard_sphere" })
        }
    };
    obj.insert("kernel".into(), kernel);
    let initial = match obj.get("initial") {
        Some(v) => initial_value(v)?,
        None => {
            notes.push("initial not given; using microcanonical".into());
            json!({ "variant": "microcanonical" })
        }
    };
    obj.insert("initial".into(), initial);
    if !obj.contains_key("replicas") {
        notes.push("replicas not given; using 1".into());
        obj.insert("replicas".into(), json!(1));
    }

    let spec: StudySpec = serde_json::from_value(Value::Object(obj)).map_err(|e| ConfigError::new("config", e.to_string()))?;
    spec.validate()?;
    if matches!(study, Study::Convergence) && spec.n_list.len() < 3 {
        return Err(ConfigError::new("N", "convergence needs at least three values"));
    }
    Ok(RunConfig {
        study,
        spec,
        seed,
        out,
        threads,
        emit_events,
        notes,
    })
}

impl RunConfig {
    /// Everything that determines the artifacts. The output directory and
    /// thread count are left out: they do not change any result.
    pub fn effective(&self) -> Value {
        json!({
            "study": self.study.name(),
            "seed": self.seed,
            "emit_events": self.emit_events,
            "spec": self.spec,
            "resolved": {
                "T": self.spec.horizon(),
                "mean_free_time": self.spec.mean_free_time(),
                "v_max": self.spec.v_max(),
            },
            "defaults_applied": self.notes,
        })
    }

    pub fn max_logged_n(&self) -> usize {
        if self.emit_events {
            usize::MAX
        } else {
            EVENT_LOG_LIMIT
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn with_file(text: &str) -> (tempfile::NamedTempFile, Flags) {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        let flags = Flags {
            config: Some(f.path().to_path_buf()),
            ..Flags::default()
        };
        (f, flags)
    }

    #[test]
    fn minimal_config_is_completed() {
        let (_f, flags) = with_file(r#"{"study": "simulate", "N": 100, "e": 1, "d": 3, "T": 1, "seed": 7}"#);
        let rc = parse_config(Study::Simulate, &flags).unwrap();
        assert_eq!(rc.spec.n_list, vec![100]);
        assert_eq!(rc.seed, 7);
        assert_eq!(rc.spec.replicas, 1);
        assert_eq!(rc.spec.kernel, kacwalk::KernelSpec::HardSphere);
        assert!(rc.notes.iter().any(|n| n.contains("hard_sphere")));
    }

    #[test]
    fn n_below_two_is_rejected() {
        let (_f, flags) = with_file(r#"{"N": 1, "e": 1, "d": 3, "T": 1}"#);
        let err = parse_config(Study::Simulate, &flags).unwrap_err();
        assert_eq!(err.field, "N");
        assert!(err.message.contains("N ≥ 2"));
    }

    #[test]
    fn unknown_keys_get_suggestions() {
        let (_f, flags) = with_file(r#"{"N": 10, "e": 1, "d": 3, "T": 1, "temprature": 2}"#);
        let err = parse_config(Study::Simulate, &flags).unwrap_err();
        assert_eq!(err.field, "temprature");
        assert_eq!(err.suggestion.as_deref(), Some("e"));
        let (_f, flags) = with_file(r#"{"N": 10, "e": 1, "d": 3, "T": 1, "grid": {"n_cell": 8}}"#);
        let err = parse_config(Study::Simulate, &flags).unwrap_err();
        assert_eq!(err.suggestion.as_deref(), Some("grid.n_cells"));
        let (_f, flags) = with_file(r#"{"N": 10, "e": 1, "d": 3, "T": 1, "seeed": 3}"#);
        assert_eq!(parse_config(Study::Simulate, &flags).unwrap_err().suggestion.as_deref(), Some("seed"));
    }

    #[test]
    fn physical_parameters_are_required() {
        let (_f, flags) = with_file(r#"{"N": 10, "d": 3, "T": 1}"#);
        assert_eq!(parse_config(Study::Simulate, &flags).unwrap_err().field, "e");
    }

    #[test]
    fn flags_override_the_file() {
        let (_f, mut flags) = with_file(r#"{"N": [10, 20], "e": 1, "d": 3, "T": 1, "seed": 1, "initial": "shell"}"#);
        flags.seed = Some(9);
        flags.e = Some(2.0);
        flags.n = Some(vec![30]);
        let rc = parse_config(Study::Simulate, &flags).unwrap();
        assert_eq!((rc.seed, rc.spec.e, rc.spec.n_list.clone()), (9, 2.0, vec![30]));
        assert_eq!(rc.spec.initial, kacwalk::initial_data::InitialVariant::ChaoticFrom(kacwalk::initial_data::Preset::Shell));
    }

    #[test]
    fn study_mismatch_and_bad_values_are_reported() {
        let (_f, flags) = with_file(r#"{"study": "dissipation", "N": 10, "e": 1, "d": 3, "T": 1}"#);
        assert_eq!(parse_config(Study::Simulate, &flags).unwrap_err().field, "study");
        let (_f, flags) = with_file(r#"{"N": 10, "e": -1, "d": 3, "T": 1}"#);
        assert_eq!(parse_config(Study::Simulate, &flags).unwrap_err().field, "e");
        let (_f, flags) = with_file(r#"{"N": 10, "e": 1, "d": 4, "T": 1}"#);
        assert_eq!(parse_config(Study::Simulate, &flags).unwrap_err().field, "d");
        let (_f, flags) = with_file(r#"{"N": 10, "e": 1, "d": 3, "T": 1, "initial": "shel"}"#);
        assert_eq!(parse_config(Study::Simulate, &flags).unwrap_err().suggestion.as_deref(), Some("shell"));
    }

    #[test]
    fn bkw_oracle_defaults_to_the_maxwell_kernel() {
        let (_f, flags) = with_file(r#"{"N": 100, "e": 1, "d": 3, "T": 1}"#);
        let rc = parse_config(Study::BkwOracle, &flags).unwrap();
        assert!(matches!(rc.spec.kernel, kacwalk::KernelSpec::MaxwellConstant { .. }));
    }
}
