//! Inference with optional iterative refinement, and the fixed-gate
//! contraction harness on synthetic linear fields.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{base_noise, integrate_euler, ActionChunk};
use crate::residual::FeatureSequence;
use crate::rng::{derive_seed, rng_from, stream};
use crate::synthetic::{Decision, GateTrace, Policy};
use crate::trainer::{element_gate, enhanced_pool, transport_discrepancy, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub n_refine: usize,
    pub flow_steps: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            n_refine: 0,
            flow_steps: 10,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.flow_steps == 0 {
            return Err(invalid("flow_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Discrepancy of `h` against `chunk`'s centroid and the resulting gate.
fn gate_from(
    state: &TrainState,
    cfg: &TrainConfig,
    h: &FeatureSequence,
    chunk: &ActionChunk,
    seed: u64,
) -> Result<GateTrace> {
    let d = transport_discrepancy(&cfg.dig.discrepancy, h, &state.encoder, chunk, seed)?;
    let g = element_gate(cfg, d, derive_seed(seed, &[stream::GATE]))?;
    Ok(GateTrace { d, g })
}

/// Generates a chunk from `h`, refining it `n_refine` times. Every pass
/// integrates from the same base noise, drawn from `seed`.
///
/// With `previous`, the first pass already uses features enhanced with the
/// gate of the previous chunk; otherwise it uses the raw tokens.
pub fn infer(
    state: &TrainState,
    cfg: &TrainConfig,
    h: &FeatureSequence,
    previous: Option<&ActionChunk>,
    rc: &RefineConfig,
    seed: u64,
) -> Result<Decision> {
    rc.validate()?;
    if !state.is_finite() {
        return Err(Error::Degenerate("model parameters are not finite".into()));
    }
    let field = &state.field;
    let x0 = base_noise(field.dims().output_dim(), seed);
    let (k, da) = (field.dims().chunk_len, field.dims().action_dim);
    let generate = |pooled: Array1<f64>| {
        let x = integrate_euler(field, x0.clone(), pooled.view(), rc.flow_steps);
        ActionChunk::from_flat(x, k, da)
    };
    let hbar = h.mean_pool();
    let mut trace = Vec::with_capacity(rc.n_refine + 1);
    let mut chunk = match previous {
        Some(prev) if cfg.residual_enabled => {
            let gt = gate_from(state, cfg, h, prev, derive_seed(seed, &[stream::SLICE, 0]))?;
            trace.push(gt);
            generate(enhanced_pool(cfg, &state.residual, hbar.view(), gt.g))?
        }
        _ => generate(hbar.clone())?,
    };
    for i in 1..=rc.n_refine as u64 {
        let gt = gate_from(state, cfg, h, &chunk, derive_seed(seed, &[stream::SLICE, i]))?;
        trace.push(gt);
        chunk = generate(enhanced_pool(cfg, &state.residual, hbar.view(), gt.g))?;
    }
    Ok(Decision { chunk, trace })
}

/// A trained model used as an episode policy.
#[derive(Debug, Clone, Copy)]
pub struct DigPolicy<'a> {
    pub state: &'a TrainState,
    pub train: &'a TrainConfig,
    pub refine: RefineConfig,
    /// Warm-start the first pass from the previous step's chunk.
    pub use_previous: bool,
}

impl Policy for DigPolicy<'_> {
    fn act(
        &self,
        obs: &FeatureSequence,
        previous: Option<&ActionChunk>,
        seed: u64,
    ) -> Result<Decision> {
        let prev = if self.use_previous { previous } else { None };
        infer(self.state, self.train, obs, prev, &self.refine, seed)
    }
}

/// Synthetic linear field `E(Z) = A (Z - Z*)` iterated as `Z <- Z - alpha E(Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionField {
    pub a: Array2<f64>,
    pub z_star: Array1<f64>,
    pub alpha: f64,
    mu: f64,
    l_e: f64,
}

fn spectrum(a: &Array2<f64>) -> Result<(f64, f64)> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(invalid("A", "must be a nonempty square matrix"));
    }
    for i in 0..n {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-12 * (1.0 + a[[i, j]].abs()) {
                return Err(invalid("A", "must be symmetric"));
            }
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(min > 0.0) {
        return Err(invalid("A", format!("must be positive definite, smallest eigenvalue {min}")));
    }
    Ok((min, max))
}

impl ContractionField {
    pub fn new(a: Array2<f64>, z_star: Array1<f64>, alpha: f64) -> Result<Self> {
        if z_star.len() != a.nrows() {
            return Err(Error::DimensionMismatch {
                context: "fixed point",
                expected: a.nrows(),
                actual: z_star.len(),
            });
        }
        let (mu, l_e) = spectrum(&a)?;
        let limit = 2.0 * mu / (l_e * l_e);
        if !(alpha > 0.0 && alpha < limit) {
            return Err(Error::StepOutsideWindow { alpha, limit });
        }
        Ok(Self {
            a,
            z_star,
            alpha,
            mu,
            l_e,
        })
    }

    /// Random field: orthogonal eigenbasis, eigenvalues uniform in `[mu, l_e]`
    /// with both ends attained, and `alpha = frac * 2 mu / l_e^2`.
    pub fn random(dim: usize, mu: f64, l_e: f64, frac: f64, seed: u64) -> Result<Self> {
        if !(mu > 0.0 && mu <= l_e) {
            return Err(invalid("mu", format!("need 0 < mu <= L_E, got {mu} and {l_e}")));
        }
        let mut rng = rng_from(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let g = DMatrix::from_fn(dim, dim, |_, _| normal());
        let q = g.qr().q();
        let eigs: Vec<f64> = (0..dim)
            .map(|i| match i {
                0 => mu,
                1 => l_e,
                _ => mu + (l_e - mu) * (0.5 + 0.5 * normal().tanh()),
            })
            .collect();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigs));
        let a = &q * d * q.transpose();
        let a = Array2::from_shape_fn((dim, dim), |(i, j)| 0.5 * (a[(i, j)] + a[(j, i)]));
        let z_star: Array1<f64> = (0..dim).map(|_| normal()).collect();
        let (mu, l_e) = spectrum(&a)?;
        Self::new(a, z_star, frac * 2.0 * mu / (l_e * l_e))
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn l_e(&self) -> f64 {
        self.l_e
    }

    /// `2 mu / L_E^2`.
    pub fn window(&self) -> f64 {
        2.0 * self.mu / (self.l_e * self.l_e)
    }

    /// `sqrt(1 - 2 alpha mu + alpha^2 L_E^2)`.
    pub fn rho(&self) -> f64 {
        contraction_rate(self.alpha, self.mu, self.l_e)
    }

    pub fn apply(&self, z: &Array1<f64>) -> Array1<f64> {
        self.a.dot(&(z - &self.z_star))
    }
}

pub fn contraction_rate(alpha: f64, mu: f64, l_e: f64) -> f64 {
    (1.0 - 2.0 * alpha * mu + alpha * alpha * l_e * l_e).max(0.0).sqrt()
}

/// Runs `k` iterations; ratio `j` is `|Z^{j+1} - Z*| / |Z^j - Z*|`, or 0 when
/// the denominator vanishes.
pub fn fixed_gate_iterate(
    field: &ContractionField,
    z0: &Array1<f64>,
    k: usize,
) -> Result<(Array1<f64>, Vec<f64>)> {
    if z0.len() != field.z_star.len() {
        return Err(Error::DimensionMismatch {
            context: "initial point",
            expected: field.z_star.len(),
            actual: z0.len(),
        });
    }
    let dist = |z: &Array1<f64>| {
        let e = z - &field.z_star;
        e.dot(&e).sqrt()
    };
    let mut z = z0.clone();
    let mut ratios = Vec::with_capacity(k);
    let mut prev = dist(&z);
    for _ in 0..k {
        let step = field.apply(&z) * field.alpha;
        z -= &step;
        let next = dist(&z);
        ratios.push(if prev == 0.0 { 0.0 } else { next / prev });
        prev = next;
    }
    Ok((z, ratios))
}

/// Geometric mean of the per-step ratios.
pub fn estimate_rate(ratios: &[f64]) -> Result<f64> {
    if ratios.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 ratios, got {}",
            ratios.len()
        )));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::Degenerate(format!(
            "trajectory already converged or invalid (ratio {r})"
        )));
    }
    let log_mean = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
    Ok(log_mean.exp())
}
