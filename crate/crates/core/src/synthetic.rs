//! Seeded toy observation-to-action-chunk task with shortcut corruption and
//! sinusoidal test-time perturbation.
//!
//! A latent `c` drives both the observation tokens and the action chunk through
//! frozen random tanh maps. Shortcut samples see tokens computed from a
//! decorrelated latent, and their nuisance token (row 0) carries a large copy
//! of the action signal. The nuisance is balanced by the other rows so the
//! token mean is unaffected; only the spread of the token cloud (and hence the
//! transport cost to the action centroid) reveals it.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flow::ActionChunk;
use crate::residual::FeatureSequence;
use crate::rng::{derive_seed, derived_rng, rng_from, stream, Rng};

/// Mean and standard deviation of the perturbation coefficients.
pub const PERTURB_MEAN: f64 = 0.01;
pub const PERTURB_STD: f64 = 0.5;

const HIDDEN: usize = 32;
const STANDARDIZE_SAMPLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub latent_dim: usize,
    pub tokens: usize,
    pub feature_dim: usize,
    pub chunk_len: usize,
    pub action_dim: usize,
    pub obs_noise: f64,
    pub shortcut_fraction: f64,
    /// 0 keeps shortcut tokens fully informative, 1 makes them independent of the action.
    pub shortcut_strength: f64,
    /// Magnitude of the action copy planted in the nuisance token.
    pub nuisance_scale: f64,
    /// RMS size of a clean token entry.
    pub feature_scale: f64,
    /// Per-entry standard deviation of the standardized actions.
    pub action_scale: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            tokens: 8,
            feature_dim: 8,
            chunk_len: 4,
            action_dim: 2,
            obs_noise: 0.02,
            shortcut_fraction: 0.3,
            shortcut_strength: 1.0,
            nuisance_scale: 5.0,
            feature_scale: 1.0,
            action_scale: 1.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("tokens", self.tokens),
            ("feature_dim", self.feature_dim),
            ("chunk_len", self.chunk_len),
            ("action_dim", self.action_dim),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if self.tokens < 2 {
            return Err(invalid("tokens", "need a nuisance token plus at least one other"));
        }
        if !(0.0..=1.0).contains(&self.shortcut_fraction) {
            return Err(invalid(
                "shortcut_fraction",
                format!("must lie in [0, 1], got {}", self.shortcut_fraction),
            ));
        }
        if !(0.0..=1.0).contains(&self.shortcut_strength) {
            return Err(invalid(
                "shortcut_strength",
                format!("must lie in [0, 1], got {}", self.shortcut_strength),
            ));
        }
        for (name, v) in [
            ("obs_noise", self.obs_noise),
            ("nuisance_scale", self.nuisance_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [
            ("feature_scale", self.feature_scale),
            ("action_scale", self.action_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `x -> W2 tanh(W1 x + b1)`, frozen.
#[derive(Debug, Clone)]
struct TanhMap {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
}

impl TanhMap {
    fn random(input: usize, output: usize, rng: &mut Rng) -> Self {
        let s1 = 1.5 / (input as f64).sqrt();
        let s2 = 1.0 / (HIDDEN as f64).sqrt();
        let mut normal = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        };
        let w1 = Array2::from_shape_fn((HIDDEN, input), |_| normal(s1));
        let b1 = Array1::from_shape_fn(HIDDEN, |_| normal(0.5));
        let w2 = Array2::from_shape_fn((output, HIDDEN), |_| normal(s2));
        Self { w1, b1, w2 }
    }

    fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w2.dot(&(self.w1.dot(x) + &self.b1).mapv(f64::tanh))
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub tokens: FeatureSequence,
    pub actions: ActionChunk,
    pub is_shortcut: bool,
}

/// A frozen instance of the task family.
#[derive(Debug, Clone)]
pub struct Task {
    spec: TaskSpec,
    features: TanhMap,
    actions: TanhMap,
    action_mean: Array1<f64>,
    action_std: Array1<f64>,
    feature_rms: f64,
    /// `d x (K d_a)`; maps a flattened chunk into one token.
    nuisance: Array2<f64>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = derived_rng(spec.seed, &[stream::INIT, 1]);
        let n_tok = spec.tokens * spec.feature_dim;
        let n_act = spec.chunk_len * spec.action_dim;
        let features = TanhMap::random(spec.latent_dim, n_tok, &mut rng);
        let actions = TanhMap::random(spec.latent_dim, n_act, &mut rng);
        let ps = 1.0 / (n_act as f64).sqrt();
        let nuisance = Array2::from_shape_fn((spec.feature_dim, n_act), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            ps * z
        });

        let mut ref_rng = derived_rng(spec.seed, &[stream::INIT, 2]);
        let mut raw_a = Array2::zeros((STANDARDIZE_SAMPLES, n_act));
        let mut feat_sq = 0.0;
        for mut row in raw_a.rows_mut() {
            let c = latent(spec.latent_dim, &mut ref_rng);
            row.assign(&actions.apply(&c));
            feat_sq += features.apply(&c).mapv(|v| v * v).sum();
        }
        let action_mean = raw_a.mean_axis(Axis(0)).expect("nonempty");
        let action_std = raw_a.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-12));
        let feature_rms = (feat_sq / (STANDARDIZE_SAMPLES * n_tok) as f64).sqrt();
        Ok(Self {
            spec,
            features,
            actions,
            action_mean,
            action_std,
            feature_rms,
            nuisance,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// Standardized action chunk for latent `c`.
    pub fn action_for(&self, c: &Array1<f64>) -> ActionChunk {
        let raw = self.actions.apply(c);
        let flat = (raw - &self.action_mean) / &self.action_std * self.spec.action_scale;
        ActionChunk::from_flat(flat, self.spec.chunk_len, self.spec.action_dim)
            .expect("shape fixed by spec")
    }

    /// Observation tokens for latent `c` with observation noise from `rng`.
    pub fn observe(&self, c: &Array1<f64>, rng: &mut impl rand::Rng) -> FeatureSequence {
        let scale = self.spec.feature_scale / self.feature_rms;
        let mut flat = self.features.apply(c) * scale;
        if self.spec.obs_noise > 0.0 {
            for v in flat.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.spec.obs_noise * z;
            }
        }
        let rows = flat
            .into_shape_with_order((self.spec.tokens, self.spec.feature_dim))
            .expect("shape fixed by spec");
        FeatureSequence::new(rows).expect("finite by construction")
    }

    /// Plants `nuisance_scale * P a` in token 0 and removes its mean from the rest.
    fn plant_nuisance(&self, tokens: FeatureSequence, source: &ActionChunk) -> FeatureSequence {
        let v = self.nuisance.dot(&source.flatten()) * self.spec.nuisance_scale;
        let mut rows = tokens.into_inner();
        let others = (self.spec.tokens - 1) as f64;
        for (j, mut row) in rows.rows_mut().into_iter().enumerate() {
            if j == 0 {
                row += &v;
            } else {
                row.scaled_add(-1.0 / others, &v);
            }
        }
        FeatureSequence::new(rows).expect("finite by construction")
    }

    fn training_sample(&self, rng: &mut Rng) -> Sample {
        let c = latent(self.spec.latent_dim, rng);
        let actions = self.action_for(&c);
        let is_shortcut = rng.random::<f64>() < self.spec.shortcut_fraction;
        if !is_shortcut {
            let tokens = self.observe(&c, rng);
            return Sample {
                tokens,
                actions,
                is_shortcut,
            };
        }
        let s = self.spec.shortcut_strength;
        let xi = latent(self.spec.latent_dim, rng);
        let c_obs = c.mapv(|v| v * (1.0 - s * s).sqrt()) + xi * s;
        let tokens = self.plant_nuisance(self.observe(&c_obs, rng), &actions);
        Sample {
            tokens,
            actions,
            is_shortcut,
        }
    }

    /// Training batch of `n` samples; a fraction `shortcut_fraction` are shortcut samples.
    pub fn sample_batch(&self, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| self.training_sample(&mut rng)).collect()
    }

    /// Test samples: tokens always reflect the true latent. Flagged samples
    /// carry a nuisance copy of an unrelated action, so the shortcut is broken.
    pub fn sample_test(&self, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                let c = latent(self.spec.latent_dim, &mut rng);
                let actions = self.action_for(&c);
                let is_shortcut = rng.random::<f64>() < self.spec.shortcut_fraction;
                let mut tokens = self.observe(&c, &mut rng);
                if is_shortcut {
                    let other = self.action_for(&latent(self.spec.latent_dim, &mut rng));
                    tokens = self.plant_nuisance(tokens, &other);
                }
                Sample {
                    tokens,
                    actions,
                    is_shortcut,
                }
            })
            .collect()
    }

    /// `E |a|^2` of standardized chunks.
    pub fn action_second_moment(&self) -> f64 {
        let s = self.spec.action_scale;
        s * s * (self.spec.chunk_len * self.spec.action_dim) as f64
    }
}

fn latent(dim: usize, rng: &mut impl rand::Rng) -> Array1<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    #[default]
    None,
    Cosine,
    Sine,
    Both,
}

/// Coefficients `(c1, c2, c3, c4)` of the shift `c1 cos(c2 t) + c3 sin(c4 t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub mode: PerturbMode,
    pub coeffs: [f64; 4],
}

impl PerturbSpec {
    pub fn none() -> Self {
        Self {
            mode: PerturbMode::None,
            coeffs: [0.0; 4],
        }
    }

    /// Draws the coefficients i.i.d. from `N(0.01, 0.5^2)`.
    pub fn sample(mode: PerturbMode, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let normal = Normal::new(PERTURB_MEAN, PERTURB_STD).expect("positive std");
        let coeffs = [(); 4].map(|_| normal.sample(&mut rng));
        Self { mode, coeffs }
    }

    pub fn shift(&self, t: f64) -> f64 {
        let [c1, c2, c3, c4] = self.coeffs;
        let cos = c1 * (c2 * t).cos();
        let sin = c3 * (c4 * t).sin();
        match self.mode {
            PerturbMode::None => 0.0,
            PerturbMode::Cosine => cos,
            PerturbMode::Sine => sin,
            PerturbMode::Both => cos + sin,
        }
    }
}

/// Adds the scalar shift at time `t` to every token entry.
pub fn apply_perturbation(h: &FeatureSequence, t: f64, p: &PerturbSpec) -> FeatureSequence {
    if p.mode == PerturbMode::None {
        return h.clone();
    }
    let shift = p.shift(t);
    FeatureSequence::new(h.view().mapv(|v| v + shift)).expect("finite shift of finite tokens")
}

/// Discrepancy and gate used for one generation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub d: f64,
    pub g: f64,
}

#[derive(Debug, Clone)]
pub struct Decision {
    pub chunk: ActionChunk,
    pub trace: Vec<GateTrace>,
}

/// Anything that maps observation tokens to an action chunk.
pub trait Policy {
    /// `previous` is the chunk emitted at the preceding step of the episode.
    fn act(
        &self,
        obs: &FeatureSequence,
        previous: Option<&ActionChunk>,
        seed: u64,
    ) -> Result<Decision>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub mse: f64,
    pub shortcut_steps: usize,
    pub trace: Vec<Vec<GateTrace>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of `|a_hat - a|^2` over every step of every episode.
    pub mse: f64,
    pub episodes: Vec<EpisodeRecord>,
}

/// Rolls `episodes` episodes of `episode_len` fresh test samples through the
/// policy, perturbing the observation at step `t` with coefficients drawn per episode.
pub fn eval_policy(
    policy: &impl Policy,
    task: &Task,
    mode: PerturbMode,
    episodes: usize,
    episode_len: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 || episode_len == 0 {
        return Err(invalid("episodes", "need at least one episode of one step"));
    }
    let mut records = Vec::with_capacity(episodes);
    let mut total = 0.0;
    for ep in 0..episodes as u64 {
        let perturb = PerturbSpec::sample(mode, derive_seed(seed, &[stream::EPISODE, ep, 0]));
        let samples = task.sample_test(episode_len, derive_seed(seed, &[stream::EPISODE, ep, 1]));
        let mut prev: Option<ActionChunk> = None;
        let mut err = 0.0;
        let mut trace = Vec::with_capacity(episode_len);
        for (t, s) in samples.iter().enumerate() {
            let obs = apply_perturbation(&s.tokens, t as f64, &perturb);
            let noise_seed = derive_seed(seed, &[stream::NOISE, ep, t as u64]);
            let decision = policy.act(&obs, prev.as_ref(), noise_seed)?;
            err += decision.chunk.squared_error(&s.actions);
            trace.push(decision.trace);
            prev = Some(decision.chunk);
        }
        total += err;
        records.push(EpisodeRecord {
            mse: err / episode_len as f64,
            shortcut_steps: samples.iter().filter(|s| s.is_shortcut).count(),
            trace,
        });
    }
    Ok(EvalReport {
        mse: total / (episodes * episode_len) as f64,
        episodes: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    struct Oracle(std::cell::RefCell<Vec<ActionChunk>>);

    impl Policy for Oracle {
        fn act(&self, _: &FeatureSequence, _: Option<&ActionChunk>, _: u64) -> Result<Decision> {
            let chunk = self.0.borrow_mut().remove(0);
            Ok(Decision {
                chunk,
                trace: vec![],
            })
        }
    }

    struct Zero(usize, usize);

    impl Policy for Zero {
        fn act(&self, _: &FeatureSequence, _: Option<&ActionChunk>, _: u64) -> Result<Decision> {
            Ok(Decision {
                chunk: ActionChunk::new(Array2::zeros((self.0, self.1))).unwrap(),
                trace: vec![],
            })
        }
    }

    fn bits(batch: &[Sample]) -> Vec<u64> {
        batch
            .iter()
            .flat_map(|s| {
                s.tokens
                    .view()
                    .iter()
                    .chain(s.actions.view().iter())
                    .map(|v| v.to_bits())
                    .chain([s.is_shortcut as u64])
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn no_shortcuts_when_fraction_zero() {
        let task = Task::new(TaskSpec {
            shortcut_fraction: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!(task.sample_batch(500, 3).iter().all(|s| !s.is_shortcut));
        assert!(task.sample_test(500, 3).iter().all(|s| !s.is_shortcut));
    }

    #[test]
    fn noiseless_observation_is_deterministic() {
        let task = Task::new(TaskSpec {
            obs_noise: 0.0,
            ..Default::default()
        })
        .unwrap();
        let c = Array1::from(vec![0.3, -1.2]);
        let a = task.observe(&c, &mut rng_from(1));
        let b = task.observe(&c, &mut rng_from(2));
        assert_eq!(a, b);
        assert_eq!(task.action_for(&c), task.action_for(&c));
    }

    #[test]
    fn batches_are_deterministic_per_seed() {
        let spec = TaskSpec::default();
        let a = Task::new(spec).unwrap().sample_batch(64, 10);
        let b = Task::new(spec).unwrap().sample_batch(64, 10);
        assert_eq!(bits(&a), bits(&b));
        let c = Task::new(spec).unwrap().sample_batch(64, 11);
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn shortcut_fraction_within_three_standard_errors() {
        let spec = TaskSpec {
            shortcut_fraction: 0.3,
            ..Default::default()
        };
        let n = 10_000;
        let count = Task::new(spec)
            .unwrap()
            .sample_batch(n, 4)
            .iter()
            .filter(|s| s.is_shortcut)
            .count();
        let p = spec.shortcut_fraction;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(((count as f64 / n as f64) - p).abs() < 3.0 * se, "{count}");
    }

    #[test]
    fn nuisance_leaves_token_mean_unchanged() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let c = Array1::from(vec![0.5, 0.5]);
        let clean = task.observe(&c, &mut rng_from(0));
        let other = task.action_for(&Array1::from(vec![-1.0, 2.0]));
        let planted = task.plant_nuisance(clean.clone(), &other);
        for (a, b) in clean.mean_pool().iter().zip(planted.mean_pool().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(planted.frobenius_norm() > clean.frobenius_norm());
    }

    #[test]
    fn actions_are_standardized() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let batch = task.sample_batch(4000, 5);
        let n = batch.len() as f64;
        let mut mean = Array1::<f64>::zeros(8);
        let mut sq = Array1::<f64>::zeros(8);
        for s in &batch {
            let f = s.actions.flatten();
            mean += &f;
            sq += &f.mapv(|v| v * v);
        }
        mean /= n;
        sq /= n;
        assert!(mean.iter().all(|m| m.abs() < 0.1), "{mean}");
        assert!(sq.iter().all(|v| (v - 1.0).abs() < 0.15), "{sq}");
    }

    #[test]
    fn perturbation_examples() {
        let h = FeatureSequence::new(Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64))
            .unwrap();
        assert_eq!(apply_perturbation(&h, 4.0, &PerturbSpec::sample(PerturbMode::None, 1)), h);
        let p = PerturbSpec {
            mode: PerturbMode::Cosine,
            coeffs: [0.7, 3.0, 5.0, 1.0],
        };
        let out = apply_perturbation(&h, 0.0, &p);
        for (a, b) in out.view().iter().zip(h.view().iter()) {
            assert_eq!(*a, b + 0.7);
        }
        let both = PerturbSpec {
            mode: PerturbMode::Both,
            coeffs: [1.0, PI, 1.0, PI / 2.0],
        };
        assert!(both.shift(1.0).abs() < 1e-15);
        let sine = PerturbSpec {
            mode: PerturbMode::Sine,
            ..both
        };
        assert!((sine.shift(1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perturbation_preserves_token_covariance() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let h = task.sample_batch(1, 9).remove(0).tokens;
        let p = PerturbSpec::sample(PerturbMode::Both, 2);
        let cov = |x: &FeatureSequence| {
            let centered = &x.view() - &x.mean_pool();
            centered.t().dot(&centered)
        };
        let (a, b) = (cov(&h), cov(&apply_perturbation(&h, 3.0, &p)));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn coefficient_draws_match_moments() {
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .flat_map(|i| PerturbSpec::sample(PerturbMode::Both, i).coeffs)
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / draws.len() as f64;
        assert!((m - PERTURB_MEAN).abs() < 0.01, "{m}");
        assert!((var.sqrt() - PERTURB_STD).abs() < 0.01, "{var}");
    }

    #[test]
    fn oracle_policy_has_zero_error() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let mut truth = Vec::new();
        for ep in 0..3u64 {
            let s = task.sample_test(4, derive_seed(7, &[stream::EPISODE, ep, 1]));
            truth.extend(s.into_iter().map(|s| s.actions));
        }
        let oracle = Oracle(std::cell::RefCell::new(truth));
        let report = eval_policy(&oracle, &task, PerturbMode::Both, 3, 4, 7).unwrap();
        assert_eq!(report.mse, 0.0);
        assert_eq!(report.episodes.len(), 3);
    }

    #[test]
    fn zero_policy_error_is_second_moment() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let report = eval_policy(&Zero(4, 2), &task, PerturbMode::None, 200, 10, 1).unwrap();
        let m2 = task.action_second_moment();
        assert!((report.mse - m2).abs() < 0.1 * m2, "{} vs {m2}", report.mse);
        let again = eval_policy(&Zero(4, 2), &task, PerturbMode::None, 200, 10, 1).unwrap();
        assert_eq!(report, again);
    }
}
