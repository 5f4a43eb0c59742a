//! Discrepancy-gated flow-matching training.
//!
//! Each step: observation tokens `H` and the broadcast action centroid define
//! two empirical measures; their discrepancy sets a per-element gate `g`
//! (treated as a constant when differentiating); the flow head is conditioned
//! on `H + lambda g R(H)` and trained on `mean_i g_i loss_i`.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{sample_path_point, ActionChunk, ActionEncoder, FieldDims, MlpField, MlpGrad};
use crate::gating::{gate, GateConfig};
use crate::measures::{discrepancy, DiscrepancyKind, EmpiricalMeasure};
use crate::optim::{AdamW, OptimizerConfig};
use crate::residual::{FeatureSequence, ResidualOperator, DEFAULT_POWER_ITERS, DEFAULT_SPECTRAL_BOUND};
use crate::rng::{derive_seed, derived_rng, stream};
use crate::synthetic::{Sample, Task};

pub const DEFAULT_LAMBDA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DigConfig {
    pub gate: GateConfig,
    pub lambda: f64,
    pub spectral_bound: f64,
    pub discrepancy: DiscrepancyKind,
}

impl Default for DigConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            lambda: DEFAULT_LAMBDA,
            spectral_bound: DEFAULT_SPECTRAL_BOUND,
            discrepancy: DiscrepancyKind::default(),
        }
    }
}

impl DigConfig {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be nonnegative, got {}", self.lambda)));
        }
        if !(self.spectral_bound > 0.0 && self.spectral_bound.is_finite()) {
            return Err(invalid(
                "spectral_bound",
                format!("must be positive, got {}", self.spectral_bound),
            ));
        }
        self.discrepancy.validate()
    }
}

/// How the per-element weight is produced.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStrategy {
    /// `max(g_min, exp(-tau D))`.
    #[default]
    Transport,
    /// The same constant for every element.
    Fixed(f64),
    /// Independent `U(0, 1)` draws.
    Random,
}

impl GateStrategy {
    pub fn label(&self) -> String {
        match self {
            GateStrategy::Transport => "transport".into(),
            GateStrategy::Fixed(g) => format!("fixed({g})"),
            GateStrategy::Random => "random".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dig: DigConfig,
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub gate_enabled: bool,
    pub residual_enabled: bool,
    pub gate_strategy: GateStrategy,
    /// One gate per batch from the pooled token and centroid clouds.
    pub batch_gate: bool,
    pub width: usize,
    pub power_iters: usize,
    pub encoder_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dig: DigConfig::default(),
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            batch_size: 64,
            seed: 0,
            gate_enabled: true,
            residual_enabled: true,
            gate_strategy: GateStrategy::Transport,
            batch_gate: false,
            width: 64,
            power_iters: DEFAULT_POWER_ITERS,
            encoder_scale: 0.1,
        }
    }
}

impl TrainConfig {
    /// Plain conditional flow matching: no gate, no residual.
    pub fn ungated(self) -> Self {
        Self {
            gate_enabled: false,
            residual_enabled: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dig.validate()?;
        self.optimizer.validate()?;
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.width == 0 {
            return Err(invalid("width", "must be at least 1"));
        }
        if self.power_iters == 0 {
            return Err(invalid("power_iters", "must be at least 1"));
        }
        if !(self.encoder_scale >= 0.0 && self.encoder_scale.is_finite()) {
            return Err(invalid("encoder_scale", "must be nonnegative"));
        }
        if let GateStrategy::Fixed(g) = self.gate_strategy {
            if !(g > 0.0 && g <= 1.0) {
                return Err(invalid("gate_strategy", format!("fixed gate must lie in (0, 1], got {g}")));
            }
        }
        Ok(())
    }
}

/// Every trainable parameter plus optimizer moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub field: MlpField,
    pub encoder: ActionEncoder,
    pub residual: ResidualOperator,
    pub adam: AdamW,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, task: &Task) -> Result<Self> {
        cfg.validate()?;
        let spec = task.spec();
        let dims = FieldDims {
            chunk_len: spec.chunk_len,
            action_dim: spec.action_dim,
            feature_dim: spec.feature_dim,
            width: cfg.width,
        };
        let field = MlpField::init(dims, derive_seed(cfg.seed, &[stream::INIT, 0]))?;
        let encoder = ActionEncoder::random(
            spec.feature_dim,
            spec.action_dim,
            cfg.encoder_scale,
            derive_seed(cfg.seed, &[stream::INIT, 1]),
        );
        let d = spec.feature_dim;
        let residual = ResidualOperator::new(
            Array2::zeros((d, d)),
            Array1::zeros(d),
            cfg.dig.spectral_bound,
            cfg.power_iters,
        )?;
        let mut state = Self {
            field,
            encoder,
            residual,
            adam: AdamW::new(&[]),
            step: 0,
            seed: cfg.seed,
        };
        state.adam = AdamW::new(&state.block_lens());
        Ok(state)
    }

    /// Optimizer block order: w1, b1, w2, b2, w3, b3, E, W, b.
    pub fn block_lens(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self.field.blocks().iter().map(|b| b.len()).collect();
        lens.extend([self.encoder.e.len(), self.residual.w.len(), self.residual.b.len()]);
        lens
    }

    pub fn is_finite(&self) -> bool {
        self.field.is_finite()
            && self.encoder.e.iter().all(|v| v.is_finite())
            && self.residual.w.iter().chain(self.residual.b.iter()).all(|v| v.is_finite())
    }

    pub fn dims(&self) -> FieldDims {
        self.field.dims()
    }
}

/// `(1/K) sum_k z_k` replicated `tokens` times.
pub fn centroid_broadcast(z: &Array2<f64>, tokens: usize) -> Result<FeatureSequence> {
    if z.nrows() == 0 {
        return Err(Error::Empty("action embeddings"));
    }
    if tokens == 0 {
        return Err(invalid("tokens", "must be at least 1"));
    }
    let mean = z.mean_axis(Axis(0)).expect("nonempty");
    let rows = mean
        .insert_axis(Axis(0))
        .broadcast((tokens, z.ncols()))
        .expect("row broadcast")
        .to_owned();
    FeatureSequence::new(rows)
}

/// Discrepancy between the token cloud and the broadcast centroid of `actions`.
pub fn transport_discrepancy(
    kind: &DiscrepancyKind,
    h: &FeatureSequence,
    encoder: &ActionEncoder,
    actions: &ActionChunk,
    seed: u64,
) -> Result<f64> {
    let z = centroid_broadcast(&encoder.encode(actions)?, h.tokens())?;
    discrepancy(kind, &h.to_measure(), &z.to_measure(), seed)
}

/// The weight for one element under `cfg`, given its discrepancy.
pub fn element_gate(cfg: &TrainConfig, d: f64, seed: u64) -> Result<f64> {
    if !cfg.gate_enabled {
        return Ok(1.0);
    }
    match cfg.gate_strategy {
        GateStrategy::Transport => gate(d, &cfg.dig.gate),
        GateStrategy::Fixed(g) => Ok(g),
        GateStrategy::Random => Ok(derived_rng(seed, &[stream::GATE]).random::<f64>()),
    }
}

/// `mean_pool(H + lambda g R(H))`, computed on the pooled vector (R is affine).
pub fn enhanced_pool(
    cfg: &TrainConfig,
    residual: &ResidualOperator,
    hbar: ndarray::ArrayView1<'_, f64>,
    g: f64,
) -> Array1<f64> {
    if !cfg.residual_enabled || cfg.dig.lambda == 0.0 {
        return hbar.to_owned();
    }
    let r = residual.apply_vector(hbar);
    &hbar + &(r * (cfg.dig.lambda * g))
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub field: MlpGrad,
    pub encoder: Array2<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub d: Vec<f64>,
    pub g: Vec<f64>,
    pub losses: Vec<f64>,
}

impl Gradients {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn mean_objective(&self) -> f64 {
        let j: f64 = self.g.iter().zip(&self.losses).map(|(g, l)| g * l).sum();
        j / self.losses.len() as f64
    }
}

/// Per-element discrepancies and gates for `batch` at `step`.
pub fn batch_gates(
    state: &TrainState,
    cfg: &TrainConfig,
    batch: &[Sample],
    step: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let kind = &cfg.dig.discrepancy;
    let mut ds = Vec::with_capacity(batch.len());
    if cfg.batch_gate {
        let mut hs = Vec::new();
        let mut zs = Vec::new();
        for s in batch {
            hs.push(s.tokens.view().to_owned());
            let z = centroid_broadcast(&state.encoder.encode(&s.actions)?, s.tokens.tokens())?;
            zs.push(z.into_inner());
        }
        let stack = |parts: Vec<Array2<f64>>| {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        };
        let mu = EmpiricalMeasure::new(stack(hs))?;
        let nu = EmpiricalMeasure::new(stack(zs))?;
        let d = discrepancy(kind, &mu, &nu, derive_seed(state.seed, &[stream::SLICE, step]))?;
        ds.resize(batch.len(), d);
    } else {
        for (i, s) in batch.iter().enumerate() {
            let seed = derive_seed(state.seed, &[stream::SLICE, step, i as u64]);
            ds.push(transport_discrepancy(kind, &s.tokens, &state.encoder, &s.actions, seed)?);
        }
    }
    let gate_seed = derive_seed(state.seed, &[stream::GATE, step]);
    let gs = if cfg.batch_gate {
        let g = element_gate(cfg, ds[0], gate_seed)?;
        vec![g; batch.len()]
    } else {
        ds.iter()
            .enumerate()
            .map(|(i, &d)| element_gate(cfg, d, derive_seed(gate_seed, &[i as u64])))
            .collect::<Result<_>>()?
    };
    Ok((ds, gs))
}

/// Gradients of `mean_i g_i loss_i` with the gates held constant.
/// `gate_override` replaces the computed gates (for probing the stop-gradient).
pub fn compute_gradients(
    state: &TrainState,
    cfg: &TrainConfig,
    batch: &[Sample],
    step: u64,
    gate_override: Option<&[f64]>,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = batch.len();
    let dims = state.dims();
    let out = dims.output_dim();
    let (ds, mut gs) = batch_gates(state, cfg, batch, step)?;
    if let Some(over) = gate_override {
        if over.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: over.len(),
            });
        }
        gs = over.to_vec();
    }

    let mut flow_rng = derived_rng(state.seed, &[stream::FLOW, step]);
    let mut xt = Array2::zeros((n, out));
    let mut target = Array2::zeros((n, out));
    let mut ts = Array1::zeros(n);
    let mut hbar = Array2::zeros((n, dims.feature_dim));
    let mut cond = Array2::zeros((n, dims.feature_dim));
    for (i, s) in batch.iter().enumerate() {
        if s.tokens.dim() != dims.feature_dim {
            return Err(Error::DimensionMismatch {
                context: "observation feature dimension",
                expected: dims.feature_dim,
                actual: s.tokens.dim(),
            });
        }
        let fs = sample_path_point(s.actions.flatten(), &mut flow_rng);
        xt.row_mut(i).assign(&fs.xt);
        target.row_mut(i).assign(&fs.target());
        ts[i] = fs.t;
        let pooled = s.tokens.mean_pool();
        cond.row_mut(i)
            .assign(&enhanced_pool(cfg, &state.residual, pooled.view(), gs[i]));
        hbar.row_mut(i).assign(&pooled);
    }
    let weights: Array1<f64> = gs.iter().map(|g| g / n as f64).collect();
    let terms = state
        .field
        .batch_terms(xt.view(), ts.view(), cond.view(), target.view(), weights.view())?;

    let d = dims.feature_dim;
    let (w, b) = if cfg.residual_enabled && cfg.dig.lambda != 0.0 {
        let scale: Array1<f64> = gs.iter().map(|g| cfg.dig.lambda * g).collect();
        let scaled = &terms.d_cond * &scale.insert_axis(Axis(1));
        (scaled.t().dot(&hbar).as_standard_layout().into_owned(), scaled.sum_axis(Axis(0)))
    } else {
        (Array2::zeros((d, d)), Array1::zeros(d))
    };
    Ok(Gradients {
        field: terms.grad,
        encoder: Array2::zeros(state.encoder.e.raw_dim()),
        w,
        b,
        d: ds,
        g: gs,
        losses: terms.losses.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_d: f64,
    pub mean_g: f64,
    pub loss: f64,
    pub objective: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    /// Equality of everything except wall time.
    pub fn same_values(&self, other: &StepMetrics) -> bool {
        self.step == other.step
            && self.mean_d.to_bits() == other.mean_d.to_bits()
            && self.mean_g.to_bits() == other.mean_g.to_bits()
            && self.loss.to_bits() == other.loss.to_bits()
            && self.objective.to_bits() == other.objective.to_bits()
    }
}

/// Append-only per-step records with strictly increasing steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    records: Vec<StepMetrics>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, m: StepMetrics) -> Result<()> {
        if let Some(last) = self.records.last() {
            if m.step <= last.step {
                return Err(invalid(
                    "metric step",
                    format!("{} does not follow {}", m.step, last.step),
                ));
            }
        }
        let values = [m.mean_d, m.mean_g, m.loss, m.objective, m.wall_ms];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric record"));
        }
        self.records.push(m);
        Ok(())
    }

    pub fn extend(&mut self, other: MetricLog) -> Result<()> {
        for m in other.records {
            self.push(m)?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[StepMetrics] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn same_values(&self, other: &MetricLog) -> bool {
        self.len() == other.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.same_values(b))
    }

    /// Mean of `f` over records with index in `[from, to)`.
    pub fn window_mean(&self, from: usize, to: usize, f: impl Fn(&StepMetrics) -> f64) -> f64 {
        let slice = &self.records[from.min(self.len())..to.min(self.len())];
        slice.iter().map(f).sum::<f64>() / slice.len().max(1) as f64
    }

    /// One JSON object per line, tagged `"type": "step"`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.records {
            let mut v = serde_json::to_value(m).expect("plain struct");
            v.as_object_mut()
                .expect("struct is an object")
                .insert("type".into(), "step".into());
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

/// One optimizer step of the gated objective on `batch`.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[Sample],
) -> Result<StepMetrics> {
    let start = Instant::now();
    let step = state.step;
    let grads = compute_gradients(state, cfg, batch, step, None)?;
    if let Some((i, l)) = grads.losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            element: i,
            detail: format!("loss {l}, D {}, g {}", grads.d[i], grads.g[i]),
        });
    }

    let lr = cfg.optimizer.lr_at(step, cfg.steps);
    let TrainState {
        field,
        encoder,
        residual,
        adam,
        ..
    } = state;
    let mut params: Vec<&mut [f64]> = field.blocks_mut().into_iter().collect();
    params.push(encoder.e.as_slice_mut().expect("standard layout"));
    params.push(residual.w.as_slice_mut().expect("standard layout"));
    params.push(residual.b.as_slice_mut().expect("standard layout"));
    let mut gs: Vec<&[f64]> = grads.field.blocks().into_iter().collect();
    gs.push(grads.encoder.as_slice().expect("standard layout"));
    gs.push(grads.w.as_slice().expect("standard layout"));
    gs.push(grads.b.as_slice().expect("standard layout"));
    adam.step(&cfg.optimizer, lr, &mut params, &gs)?;
    residual.project_spectral();
    state.step += 1;

    let n = grads.losses.len() as f64;
    Ok(StepMetrics {
        step,
        mean_d: grads.d.iter().sum::<f64>() / n,
        mean_g: grads.g.iter().sum::<f64>() / n,
        loss: grads.mean_loss(),
        objective: grads.mean_objective(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// The training batch drawn at `step`.
pub fn batch_for_step(task: &Task, cfg: &TrainConfig, step: u64) -> Vec<Sample> {
    task.sample_batch(cfg.batch_size, derive_seed(cfg.seed, &[stream::BATCH, step]))
}

/// Runs `steps` further steps from the state's current step.
pub fn train_steps(
    state: &mut TrainState,
    cfg: &TrainConfig,
    task: &Task,
    steps: u64,
) -> Result<MetricLog> {
    let mut log = MetricLog::new();
    for _ in 0..steps {
        let batch = batch_for_step(task, cfg, state.step);
        log.push(train_step(state, cfg, &batch)?)?;
    }
    Ok(log)
}

/// Fresh state trained for `steps` steps (`cfg.steps` unless given); `Some(0)`
/// returns the initial state and an empty log.
pub fn train_for(cfg: &TrainConfig, task: &Task, steps: Option<u64>) -> Result<(TrainState, MetricLog)> {
    let mut state = TrainState::init(cfg, task)?;
    let log = train_steps(&mut state, cfg, task, steps.unwrap_or(cfg.steps))?;
    Ok((state, log))
}

pub fn train(cfg: &TrainConfig, task: &Task) -> Result<(TrainState, MetricLog)> {
    train_for(cfg, task, None)
}

/// Mean gate over clean and over shortcut samples of a fresh training batch.
pub fn gate_split(
    state: &TrainState,
    cfg: &TrainConfig,
    task: &Task,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let batch = task.sample_batch(n, seed);
    let (_, gs) = batch_gates(state, cfg, &batch, u64::MAX)?;
    let mean = |want: bool| {
        let v: Vec<f64> = batch
            .iter()
            .zip(&gs)
            .filter(|(s, _)| s.is_shortcut == want)
            .map(|(_, g)| *g)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok((mean(false), mean(true)))
}
