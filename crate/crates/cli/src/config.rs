//! Run configuration: TOML file, then `--set key=value` pairs, then the
//! dedicated flags, each layer overriding the previous one.

use std::path::{Path, PathBuf};

use digflow::measures::DiscrepancyKind;
use digflow::refine::RefineConfig;
use digflow::synthetic::{PerturbMode, TaskSpec};
use digflow::trainer::{GateStrategy, TrainConfig};
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "DIGFLOW_OUT";
pub const VERSION: &str = concat!("digflow ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub episode_len: usize,
    /// Perturbation for `refine-sweep` and the perturbed column of `ablate`.
    pub perturb: PerturbMode,
    /// Base evaluation seed; the run seed is added to it.
    pub seed: u64,
    /// Warm-start the first pass from the previous chunk's gate.
    pub use_previous: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            episode_len: 10,
            perturb: PerturbMode::Both,
            seed: 1000,
            use_previous: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    pub projections: Vec<usize>,
    pub n_refine: Vec<usize>,
    pub discrepancies: Vec<DiscrepancyKind>,
    pub gate_strategies: Vec<GateStrategy>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.2, 0.4, 0.8],
            taus: vec![0.5, 1.0, 2.0],
            projections: vec![4, 8, 32, 128],
            n_refine: (0..=8).collect(),
            discrepancies: vec![
                DiscrepancyKind::SlicedW2 { projections: 32 },
                DiscrepancyKind::Sinkhorn {
                    epsilon: 0.1,
                    max_iters: 5000,
                    tol: 1e-6,
                },
                DiscrepancyKind::MmdRbf { sigma: 1.0 },
                DiscrepancyKind::CosineMean,
            ],
            gate_strategies: vec![
                GateStrategy::Transport,
                GateStrategy::Fixed(0.5),
                GateStrategy::Random,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out: None,
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Overrides with their own flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub g_min: Option<f64>,
    pub projections: Option<usize>,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub width: Option<usize>,
    pub shortcut_fraction: Option<f64>,
    pub n_refine: Option<usize>,
    pub episodes: Option<usize>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigError(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn load(
    path: Option<&Path>,
    sets: &[String],
    flags: &FlagOverrides,
) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| ConfigError(format!("config syntax: {e}")))?;
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects key=value, got `{s}`")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    // Round-trip through text so deserialization errors carry the offending
    // line and key.
    let merged = toml::to_string(&table).expect("table serializes");
    let de = toml::Deserializer::parse(&merged).expect("serialized table reparses");
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        ConfigError(format!("invalid config at `{key}`: {}", e.into_inner()))
    })?;
    apply_flags(&mut cfg, flags);
    validate(&cfg)?;
    Ok(cfg)
}

pub fn apply_flags(cfg: &mut RunConfig, f: &FlagOverrides) {
    if let Some(s) = f.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &f.out {
        cfg.out = Some(o.clone());
    }
    let dig = &mut cfg.train.dig;
    if let Some(v) = f.lambda {
        dig.lambda = v;
    }
    if let Some(v) = f.tau {
        dig.gate.tau = v;
    }
    if let Some(v) = f.g_min {
        dig.gate.g_min = v;
    }
    if let Some(m) = f.projections {
        dig.discrepancy = DiscrepancyKind::SlicedW2 { projections: m };
    }
    if let Some(v) = f.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = f.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.train.optimizer.lr = v;
    }
    if let Some(v) = f.width {
        cfg.train.width = v;
    }
    if let Some(v) = f.shortcut_fraction {
        cfg.task.shortcut_fraction = v;
    }
    if let Some(v) = f.n_refine {
        cfg.refine.n_refine = v;
    }
    if let Some(v) = f.episodes {
        cfg.eval.episodes = v;
    }
}

pub fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let wrap = |e: digflow::Error| ConfigError(e.to_string());
    if cfg.seeds.is_empty() {
        return Err(ConfigError("seeds must list at least one seed".into()));
    }
    cfg.task.validate().map_err(wrap)?;
    cfg.train.validate().map_err(wrap)?;
    cfg.refine.validate().map_err(wrap)?;
    if cfg.eval.episodes == 0 || cfg.eval.episode_len == 0 {
        return Err(ConfigError("eval.episodes and eval.episode_len must be at least 1".into()));
    }
    Ok(())
}

/// `--out`, else the config's `out`, else `$DIGFLOW_OUT/<command>`, else
/// `runs/<command>`.
pub fn output_dir(cfg: &RunConfig, command: &str) -> PathBuf {
    if let Some(o) = &cfg.out {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(command)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}
