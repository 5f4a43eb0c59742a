//! Experiment commands. Each grid point and seed trains independently into
//! its own directory; results are collected in grid order.

use std::fmt;
use std::path::{Path, PathBuf};

use digflow::checkpoint;
use digflow::measures::DiscrepancyKind;
use digflow::refine::{DigPolicy, RefineConfig};
use digflow::rng::derive_seed;
use digflow::synthetic::{eval_policy, PerturbMode, Task, TaskSpec};
use digflow::trainer::{gate_split, train, MetricLog, TrainConfig, TrainState};
use digflow::verify::{self, CheckReport};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{output_dir, to_toml, RunConfig};
use crate::output::{ensure_dir, mean_std, num, write_csv, write_jsonl, write_jsonl_raw, write_plot, Provenance};

/// Samples drawn to measure the clean/shortcut gate split.
const GATE_PROBE: usize = 512;
const GATE_PROBE_TAG: u64 = 0x5917;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(String),
    /// The verification suite ran and at least one check failed.
    ChecksFailed(usize),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(m) => write!(f, "{m}"),
            CliError::ChecksFailed(n) => write!(f, "{n} verification check(s) failed"),
        }
    }
}

impl From<digflow::Error> for CliError {
    fn from(e: digflow::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(format!("i/o: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Discrepancy,
    Gate,
    LambdaTau,
    Projections,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Discrepancy => "discrepancy",
            Axis::Gate => "gate",
            Axis::LambdaTau => "lambda_tau",
            Axis::Projections => "projections",
        }
    }
}

struct Point {
    label: String,
    /// Plot abscissa.
    x: String,
    train: TrainConfig,
}

struct Trained {
    seed: u64,
    task: Task,
    train: TrainConfig,
    state: TrainState,
    log: MetricLog,
}

struct Env<'a> {
    cfg: &'a RunConfig,
    prov: Provenance,
    out: PathBuf,
    pool: rayon::ThreadPool,
}

impl<'a> Env<'a> {
    fn new(cfg: &'a RunConfig, command: &str, jobs: usize) -> CliResult<Self> {
        let out = output_dir(cfg, command);
        ensure_dir(&out)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg,
            prov: Provenance {
                command: command.into(),
                config: cfg.clone(),
            },
            out,
            pool,
        })
    }

    fn task(&self, seed: u64) -> CliResult<Task> {
        Ok(Task::new(TaskSpec {
            seed,
            ..self.cfg.task
        })?)
    }

    fn eval_seed(&self, seed: u64) -> u64 {
        self.cfg.eval.seed.wrapping_add(seed)
    }

    fn mse(&self, m: &Trained, mode: PerturbMode, n_refine: usize) -> CliResult<f64> {
        let policy = DigPolicy {
            state: &m.state,
            train: &m.train,
            refine: RefineConfig {
                n_refine,
                ..self.cfg.refine
            },
            use_previous: self.cfg.eval.use_previous,
        };
        let e = &self.cfg.eval;
        Ok(eval_policy(&policy, &m.task, mode, e.episodes, e.episode_len, self.eval_seed(m.seed))?.mse)
    }

    /// Trains one seed and writes its checkpoint, resolved config and log.
    fn train_one(&self, base: TrainConfig, seed: u64, dir: &Path) -> CliResult<Trained> {
        let task = self.task(seed)?;
        let tc = TrainConfig { seed, ..base };
        let (state, log) = train(&tc, &task)?;
        self.persist(dir, &tc, &state, &log)?;
        Ok(Trained {
            seed,
            task,
            train: tc,
            state,
            log,
        })
    }

    fn persist(&self, dir: &Path, train: &TrainConfig, state: &TrainState, log: &MetricLog) -> CliResult<()> {
        ensure_dir(dir)?;
        checkpoint::save(state, &dir.join("checkpoint.bin"))?;
        let mut run_cfg = self.cfg.clone();
        run_cfg.seeds = vec![train.seed];
        run_cfg.train = *train;
        std::fs::write(dir.join("config.toml"), to_toml(&run_cfg))?;
        let prov = Provenance {
            command: self.prov.command.clone(),
            config: run_cfg,
        };
        write_jsonl_raw(&dir.join("metrics.jsonl"), &prov, &log.to_jsonl())?;
        Ok(())
    }

    /// Trains every (point, seed) pair on the pool, in grid order.
    fn train_grid(&self, points: &[Point]) -> CliResult<Vec<Vec<Trained>>> {
        let jobs: Vec<(usize, u64)> = (0..points.len())
            .flat_map(|p| self.cfg.seeds.iter().map(move |&s| (p, s)))
            .collect();
        let single = points.len() == 1;
        let results: Vec<CliResult<Trained>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(p, s)| {
                    let mut dir = self.out.clone();
                    if !single {
                        dir.push(format!("{p:02}-{}", slug(&points[p].label)));
                    }
                    dir.push(format!("seed-{s}"));
                    self.train_one(points[p].train, s, &dir)
                })
                .collect()
        });
        let mut grid: Vec<Vec<Trained>> = points.iter().map(|_| Vec::new()).collect();
        for ((p, _), r) in jobs.iter().zip(results) {
            grid[*p].push(r?);
        }
        Ok(grid)
    }

    fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> CliResult<R> + Sync + Send) -> CliResult<Vec<R>> {
        self.pool
            .install(|| items.par_iter().map(f).collect::<Vec<_>>())
            .into_iter()
            .collect()
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Per-seed scalar outcomes, in column order.
type Metrics = Vec<(&'static str, f64)>;

fn final_loss(log: &MetricLog) -> f64 {
    let n = log.len();
    log.window_mean(n - (n / 10).max(1), n, |m| m.loss)
}

fn final_d(log: &MetricLog) -> f64 {
    let n = log.len();
    log.window_mean(n - (n / 10).max(1), n, |m| m.mean_d)
}

fn train_metrics(env: &Env, m: &Trained) -> CliResult<Metrics> {
    let (clean, shortcut) = gate_split(
        &m.state,
        &m.train,
        &m.task,
        GATE_PROBE,
        derive_seed(m.seed, &[GATE_PROBE_TAG]),
    )?;
    Ok(vec![
        ("final_loss", final_loss(&m.log)),
        ("final_d", final_d(&m.log)),
        ("gate_clean", clean),
        ("gate_shortcut", shortcut),
        ("clean_mse", env.mse(m, PerturbMode::None, env.cfg.refine.n_refine)?),
        ("perturbed_mse", env.mse(m, env.cfg.eval.perturb, env.cfg.refine.n_refine)?),
    ])
}

struct Row {
    label: String,
    x: String,
    per_seed: Vec<(u64, Metrics)>,
}

impl Row {
    fn stat(&self, key: &str) -> (f64, f64) {
        let v: Vec<f64> = self
            .per_seed
            .iter()
            .map(|(_, m)| m.iter().find(|(k, _)| *k == key).expect("known metric").1)
            .collect();
        mean_std(&v)
    }
}

/// Writes `summary.csv` (mean and stddev over seeds per row) and the
/// top-level `metrics.jsonl` with one record per (row, seed).
fn write_summary(env: &Env, rows: &[Row]) -> CliResult<()> {
    let keys: Vec<&str> = rows[0].per_seed[0].1.iter().map(|(k, _)| *k).collect();
    let mut header = vec!["configuration".to_string(), "seeds".to_string()];
    for k in &keys {
        header.push(format!("{k}_mean"));
        header.push(format!("{k}_std"));
    }
    let mut table = Vec::new();
    let mut records = Vec::new();
    for r in rows {
        let mut line = vec![r.label.clone(), r.per_seed.len().to_string()];
        for k in &keys {
            let (m, s) = r.stat(k);
            line.push(num(m));
            line.push(num(s));
        }
        table.push(line);
        for (seed, ms) in &r.per_seed {
            let mut rec = serde_json::Map::new();
            rec.insert("type".into(), json!("run"));
            rec.insert("configuration".into(), json!(r.label));
            rec.insert("seed".into(), json!(seed));
            for (k, v) in ms {
                rec.insert((*k).into(), json!(v));
            }
            records.push(Value::Object(rec));
        }
    }
    write_csv(&env.out.join("summary.csv"), &env.prov, &header, &table)?;
    write_jsonl(&env.out.join("metrics.jsonl"), &env.prov, &records)?;
    Ok(())
}

fn print_rows(rows: &[Row], key: &str) {
    for r in rows {
        let (m, s) = r.stat(key);
        println!("{:<32} {key} {m:.4} ± {s:.4}", r.label);
    }
}

/// Per-step mean and stddev over seeds.
fn curve(runs: &[Trained], f: impl Fn(&digflow::trainer::StepMetrics) -> f64) -> Vec<(String, f64, f64)> {
    let steps = runs.iter().map(|r| r.log.len()).min().unwrap_or(0);
    (0..steps)
        .map(|i| {
            let v: Vec<f64> = runs.iter().map(|r| f(&r.log.records()[i])).collect();
            let (m, s) = mean_std(&v);
            (runs[0].log.records()[i].step.to_string(), m, s)
        })
        .collect()
}

pub fn train_cmd(cfg: &RunConfig, jobs: usize) -> CliResult<()> {
    let env = Env::new(cfg, "train", jobs)?;
    let point = Point {
        label: "train".into(),
        x: "0".into(),
        train: cfg.train,
    };
    let runs = env.train_grid(std::slice::from_ref(&point))?.remove(0);
    let per_seed = env.par_map(&runs, |m| Ok((m.seed, train_metrics(&env, m)?)))?;
    let rows = [Row {
        label: point.label,
        x: point.x,
        per_seed,
    }];
    write_summary(&env, &rows)?;
    write_plot(&env.out.join("loss_curve.csv"), &env.prov, &curve(&runs, |m| m.loss))?;
    write_plot(&env.out.join("transport_cost.csv"), &env.prov, &curve(&runs, |m| m.mean_d))?;
    print_rows(&rows, "final_loss");
    print_rows(&rows, "perturbed_mse");
    println!("wrote {}", env.out.display());
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig, jobs: usize, ckpt: Option<&Path>) -> CliResult<()> {
    let env = Env::new(cfg, "eval", jobs)?;
    let runs = match ckpt {
        Some(path) => {
            let state = checkpoint::load(path).map_err(|e| match e {
                digflow::Error::Io(io) => CliError::Run(format!("cannot read checkpoint {}: {io}", path.display())),
                other => other.into(),
            })?;
            let seed = state.seed;
            let task = env.task(seed)?;
            let train = TrainConfig { seed, ..cfg.train };
            let expected = TrainState::init(&train, &task)?.dims();
            if state.dims() != expected {
                return Err(CliError::Run(format!(
                    "checkpoint {} has dims {:?}, config implies {:?}",
                    path.display(),
                    state.dims(),
                    expected
                )));
            }
            vec![Trained {
                seed,
                task,
                train,
                state,
                log: MetricLog::new(),
            }]
        }
        None => env
            .train_grid(&[Point {
                label: "eval".into(),
                x: "0".into(),
                train: cfg.train,
            }])?
            .remove(0),
    };
    let per_seed = env.par_map(&runs, |m| {
        Ok((
            m.seed,
            vec![
                ("clean_mse", env.mse(m, PerturbMode::None, cfg.refine.n_refine)?),
                ("perturbed_mse", env.mse(m, cfg.eval.perturb, cfg.refine.n_refine)?),
            ],
        ))
    })?;
    let rows = [Row {
        label: "eval".into(),
        x: "0".into(),
        per_seed,
    }];
    write_summary(&env, &rows)?;
    print_rows(&rows, "clean_mse");
    print_rows(&rows, "perturbed_mse");
    println!("wrote {}", env.out.display());
    Ok(())
}

pub fn refine_sweep_cmd(cfg: &RunConfig, jobs: usize) -> CliResult<()> {
    if cfg.sweep.n_refine.is_empty() {
        return Err(CliError::Config("sweep.n_refine must not be empty".into()));
    }
    let env = Env::new(cfg, "refine-sweep", jobs)?;
    let runs = env
        .train_grid(&[Point {
            label: "refine".into(),
            x: "0".into(),
            train: cfg.train,
        }])?
        .remove(0);
    let pairs: Vec<(usize, usize)> = cfg
        .sweep
        .n_refine
        .iter()
        .flat_map(|&n| (0..runs.len()).map(move |r| (n, r)))
        .collect();
    let evals = env.par_map(&pairs, |&(n, r)| {
        let m = &runs[r];
        Ok((
            m.seed,
            vec![
                ("clean_mse", env.mse(m, PerturbMode::None, n)?),
                ("perturbed_mse", env.mse(m, cfg.eval.perturb, n)?),
            ],
        ))
    })?;
    let mut evals = evals.into_iter();
    let rows: Vec<Row> = cfg
        .sweep
        .n_refine
        .iter()
        .map(|&n| Row {
            label: format!("n_refine={n}"),
            x: n.to_string(),
            per_seed: evals.by_ref().take(runs.len()).collect(),
        })
        .collect();
    write_summary(&env, &rows)?;
    let points: Vec<(String, f64, f64)> = rows
        .iter()
        .map(|r| {
            let (m, s) = r.stat("perturbed_mse");
            (r.x.clone(), m, s)
        })
        .collect();
    write_plot(&env.out.join("refine_curve.csv"), &env.prov, &points)?;
    print_rows(&rows, "perturbed_mse");
    println!("wrote {}", env.out.display());
    Ok(())
}

fn ablation_points(cfg: &RunConfig, axis: Axis) -> CliResult<Vec<Point>> {
    let s = &cfg.sweep;
    let base = cfg.train;
    let empty = |name: &str| CliError::Config(format!("sweep.{name} must not be empty"));
    let points: Vec<Point> = match axis {
        Axis::Discrepancy => s
            .discrepancies
            .iter()
            .map(|k| {
                let mut t = base;
                t.dig.discrepancy = *k;
                Point {
                    label: k.label(),
                    x: k.label(),
                    train: t,
                }
            })
            .collect(),
        Axis::Gate => s
            .gate_strategies
            .iter()
            .map(|g| Point {
                label: g.label(),
                x: g.label(),
                train: TrainConfig {
                    gate_strategy: *g,
                    ..base
                },
            })
            .collect(),
        Axis::LambdaTau => s
            .lambdas
            .iter()
            .flat_map(|&l| s.taus.iter().map(move |&t| (l, t)))
            .map(|(l, t)| {
                let mut tc = base;
                tc.dig.lambda = l;
                tc.dig.gate.tau = t;
                let label = format!("lambda={l};tau={t}");
                Point {
                    label: label.clone(),
                    x: label,
                    train: tc,
                }
            })
            .collect(),
        Axis::Projections => s
            .projections
            .iter()
            .map(|&m| {
                let mut t = base;
                t.dig.discrepancy = DiscrepancyKind::SlicedW2 { projections: m };
                Point {
                    label: format!("projections={m}"),
                    x: m.to_string(),
                    train: t,
                }
            })
            .collect(),
    };
    if points.is_empty() {
        let name = match axis {
            Axis::Discrepancy => "discrepancies",
            Axis::Gate => "gate_strategies",
            Axis::LambdaTau => "lambdas and sweep.taus",
            Axis::Projections => "projections",
        };
        return Err(empty(name));
    }
    for p in &points {
        p.train
            .validate()
            .map_err(|e| CliError::Config(format!("grid point {}: {e}", p.label)))?;
    }
    Ok(points)
}

pub fn ablate_cmd(cfg: &RunConfig, jobs: usize, axis: Axis) -> CliResult<()> {
    let points = ablation_points(cfg, axis)?;
    let env = Env::new(cfg, &format!("ablate-{}", axis.name().replace('_', "-")), jobs)?;
    let grid = env.train_grid(&points)?;
    let flat: Vec<&Trained> = grid.iter().flatten().collect();
    let metrics = env.par_map(&flat, |m| Ok((m.seed, train_metrics(&env, m)?)))?;
    let mut metrics = metrics.into_iter();
    let rows: Vec<Row> = points
        .iter()
        .zip(&grid)
        .map(|(p, runs)| Row {
            label: p.label.clone(),
            x: p.x.clone(),
            per_seed: metrics.by_ref().take(runs.len()).collect(),
        })
        .collect();
    write_summary(&env, &rows)?;
    let plot: Vec<(String, f64, f64)> = rows
        .iter()
        .map(|r| {
            let (m, s) = r.stat("perturbed_mse");
            (r.x.clone(), m, s)
        })
        .collect();
    write_plot(&env.out.join(format!("ablate_{}.csv", axis.name())), &env.prov, &plot)?;
    print_rows(&rows, "perturbed_mse");
    println!("wrote {}", env.out.display());
    Ok(())
}

pub fn verify_table(reports: &[CheckReport]) -> String {
    let mut s = format!(
        "{:<24} {:>8} {:>10} {:>14} {:>10}  result\n",
        "check", "trials", "violations", "worst_margin", "ms"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<24} {:>8} {:>10} {:>14.4e} {:>10.1}  {}\n",
            r.name,
            r.trials,
            r.violations,
            r.worst_margin,
            r.wall_time_ms,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}

pub fn verify_cmd(cfg: &RunConfig) -> CliResult<()> {
    let env = Env::new(cfg, "verify", 1)?;
    let reports = verify::run_all(cfg.seeds[0])?;
    print!("{}", verify_table(&reports));
    let records: Vec<Value> = reports
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("report serializes");
            v["type"] = json!("check");
            v
        })
        .collect();
    write_jsonl(&env.out.join("verify.jsonl"), &env.prov, &records)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use digflow::trainer::GateStrategy;

    #[test]
    fn grids_follow_config_order() {
        let cfg = RunConfig::default();
        let d = ablation_points(&cfg, Axis::Discrepancy).unwrap();
        let labels: Vec<&str> = d.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(
            labels,
            ["sliced_w2(M=32)", "sinkhorn(eps=0.1)", "mmd_rbf(sigma=1)", "cosine_mean"]
        );
        let lt = ablation_points(&cfg, Axis::LambdaTau).unwrap();
        assert_eq!(lt.len(), cfg.sweep.lambdas.len() * cfg.sweep.taus.len());
        assert_eq!(lt[1].label, "lambda=0;tau=1");
        let g = ablation_points(&cfg, Axis::Gate).unwrap();
        assert_eq!(g[1].train.gate_strategy, GateStrategy::Fixed(0.5));
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.sweep.projections.clear();
        assert!(matches!(
            ablation_points(&cfg, Axis::Projections),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("lambda=0.4;tau=1"), "lambda_0.4_tau_1");
        assert_eq!(slug("fixed(0.5)"), "fixed_0.5_");
    }
}
