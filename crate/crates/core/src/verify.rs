//! Randomized certification of the descent, bracketing, residual-improvement,
//! contraction and concentration properties. Each check returns a
//! [`CheckReport`] with counted violations and the tightest margin seen.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use crate::error::{invalid, Error, Result};
use crate::flow::{interpolate, loss_gradients, FieldDims, FlowSample, MlpField};
use crate::gating::{gate, GateConfig};
use crate::measures::{sliced_w2, EmpiricalMeasure};
use crate::refine::{fixed_gate_iterate, ContractionField};
use crate::residual::FeatureSequence;
use crate::rng::{derive_seed, derived_rng, Rng};

/// Multiplier applied to sampled difference-quotient constants.
pub const SAFETY: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Smallest slack observed, before any tolerance is applied.
    pub worst_margin: f64,
    pub parameters: serde_json::Value,
    pub wall_time_ms: f64,
    pub passed: bool,
}

impl CheckReport {
    fn finish(
        name: &str,
        trials: usize,
        violations: usize,
        worst_margin: f64,
        parameters: serde_json::Value,
        start: Instant,
    ) -> Self {
        Self {
            name: name.to_string(),
            trials,
            violations,
            worst_margin,
            parameters,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            passed: violations == 0,
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_matrix(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| scale * normal(rng))
}

fn normal_vector(rng: &mut Rng, n: usize, scale: f64) -> Array1<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn max_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    SymmetricEigen::new(dm)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn require_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(invalid("trials", "must be at least 1"));
    }
    Ok(())
}

/// `J(theta) = sum_i g_i |A_i theta - b_i|^2 / n`.
#[derive(Debug, Clone)]
pub struct GatedQuadratic {
    pub a: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
    pub g: Vec<f64>,
}

impl GatedQuadratic {
    pub fn value(&self, theta: &Array1<f64>) -> f64 {
        let n = self.a.len() as f64;
        self.a
            .iter()
            .zip(&self.b)
            .zip(&self.g)
            .map(|((a, b), g)| {
                let r = a.dot(theta) - b;
                g * r.dot(&r)
            })
            .sum::<f64>()
            / n
    }

    pub fn gradient(&self, theta: &Array1<f64>) -> Array1<f64> {
        let n = self.a.len() as f64;
        let mut out = Array1::zeros(theta.len());
        for ((a, b), g) in self.a.iter().zip(&self.b).zip(&self.g) {
            let r = a.dot(theta) - b;
            out += &(a.t().dot(&r) * (2.0 * g / n));
        }
        out
    }

    /// `2 sigma_max(sum_i g_i A_i^T A_i / n)`.
    pub fn smoothness(&self) -> f64 {
        let p = self.a[0].ncols();
        let n = self.a.len() as f64;
        let mut m = Array2::zeros((p, p));
        for (a, g) in self.a.iter().zip(&self.g) {
            m += &(a.t().dot(a) * (g / n));
        }
        2.0 * max_eigenvalue(&m).max(0.0)
    }
}

/// Slack `J(theta) - alpha (1 - alpha L / 2) |grad|^2 - J(theta+)` of one
/// gradient step; nonnegative whenever the descent inequality holds.
pub fn descent_slack(j: &GatedQuadratic, theta: &Array1<f64>, alpha: f64, l_j: f64) -> f64 {
    let grad = j.gradient(theta);
    let next = theta - &(&grad * alpha);
    let bound = j.value(theta) - alpha * (1.0 - 0.5 * alpha * l_j) * grad.dot(&grad);
    bound - j.value(&next)
}

pub fn check_gated_descent(trials: usize, seed: u64) -> Result<CheckReport> {
    require_trials(trials)?;
    let start = Instant::now();
    let gate_cfg = GateConfig::default();
    let tol = 1e-10;
    let (mut violations, mut worst) = (0, f64::INFINITY);
    for trial in 0..trials {
        let mut rng = derived_rng(seed, &[trial as u64]);
        let p = rng.random_range(1..=6);
        let m = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let mut j = GatedQuadratic {
            a: Vec::new(),
            b: Vec::new(),
            g: Vec::new(),
        };
        for _ in 0..n {
            j.a.push(normal_matrix(&mut rng, m, p, 1.0));
            j.b.push(normal_vector(&mut rng, m, 1.0));
            let d = -rng.random::<f64>().ln() * 2.0;
            j.g.push(gate(d, &gate_cfg)?);
        }
        let theta = normal_vector(&mut rng, p, 2.0);
        let l_j = j.smoothness();
        if !(l_j > 0.0) {
            continue;
        }
        let alpha = rng.random_range(1e-3..1.0 - 1e-3) * 2.0 / l_j;
        let slack = descent_slack(&j, &theta, alpha, l_j) / j.value(&theta).max(1.0);
        worst = worst.min(slack);
        if slack < -tol {
            violations += 1;
        }
    }
    Ok(CheckReport::finish(
        "gated_descent",
        trials,
        violations,
        worst,
        json!({"tolerance": tol, "g_min": gate_cfg.g_min, "tau": gate_cfg.tau, "seed": seed}),
        start,
    ))
}

/// Returns `(mean loss, mean gated objective)`.
pub fn bracket(losses: &[f64], gates: &[f64]) -> (f64, f64) {
    let n = losses.len() as f64;
    let l = losses.iter().sum::<f64>() / n;
    let j = losses.iter().zip(gates).map(|(l, g)| l * g).sum::<f64>() / n;
    (l, j)
}

pub fn check_bracketing(trials: usize, seed: u64) -> Result<CheckReport> {
    require_trials(trials)?;
    let start = Instant::now();
    let cfg = GateConfig::default();
    let tol = 1e-12;
    let (mut violations, mut worst) = (0, f64::INFINITY);
    for trial in 0..trials {
        let mut rng = derived_rng(seed, &[trial as u64]);
        let n = rng.random_range(1..=64);
        let losses: Vec<f64> = (0..n)
            .map(|_| -rng.random::<f64>().ln() * 10f64.powf(rng.random_range(-3.0..3.0)))
            .collect();
        let gates: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..8) {
                0 => Ok(cfg.g_min),
                1 => Ok(1.0),
                _ => gate(-rng.random::<f64>().ln() * 3.0, &cfg),
            })
            .collect::<Result<_>>()?;
        let (l, j) = bracket(&losses, &gates);
        let scale = l.max(f64::MIN_POSITIVE);
        let margin = ((j - cfg.g_min * l).min(l - j)) / scale;
        worst = worst.min(margin);
        if margin < -tol {
            violations += 1;
        }
    }
    Ok(CheckReport::finish(
        "bracketing",
        trials,
        violations,
        worst,
        json!({"tolerance": tol, "g_min": cfg.g_min, "seed": seed}),
        start,
    ))
}

/// Per-sample loss over feature matrices, with its gradient.
pub trait FeatureLoss {
    fn len(&self) -> usize;
    fn loss_grad(&self, i: usize, h: &Array2<f64>) -> Result<(f64, Array2<f64>)>;
    fn loss(&self, i: usize, h: &Array2<f64>) -> Result<f64> {
        Ok(self.loss_grad(i, h)?.0)
    }
}

/// The flow-matching loss of a fixed field on fixed path points.
pub struct FlowLoss {
    pub field: MlpField,
    pub samples: Vec<FlowSample>,
}

impl FeatureLoss for FlowLoss {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn loss_grad(&self, i: usize, h: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let seq = FeatureSequence::new(h.clone())?;
        let (l, _, gh) = loss_gradients(&self.field, &self.samples[i], &seq)?;
        Ok((l, gh))
    }
}

/// `l_i(H) = |A_i vec(H) - y_i|^2 / 2`, smoothness `max_i sigma_max(A_i^T A_i)`.
pub struct QuadraticLoss {
    pub a: Vec<Array2<f64>>,
    pub y: Vec<Array1<f64>>,
    pub shape: (usize, usize),
}

impl QuadraticLoss {
    pub fn smoothness(&self) -> f64 {
        self.a
            .iter()
            .map(|a| max_eigenvalue(&a.t().dot(a)))
            .fold(0.0, f64::max)
    }
}

impl FeatureLoss for QuadraticLoss {
    fn len(&self) -> usize {
        self.a.len()
    }

    fn loss_grad(&self, i: usize, h: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let v = Array1::from_iter(h.iter().copied());
        let r = self.a[i].dot(&v) - &self.y[i];
        let g = self.a[i].t().dot(&r);
        Ok((0.5 * r.dot(&r), Array2::from_shape_vec(self.shape, g.to_vec()).unwrap()))
    }
}

/// The aligned test residual `-grad / |grad| * |H|` (zero where the gradient is).
pub fn aligned_residual(grad: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
    let gn = norm(grad);
    if gn == 0.0 {
        return Array2::zeros(h.raw_dim());
    }
    grad * (-norm(h) / gn)
}

/// Measured quantities of one residual-improvement instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImprovementConstants {
    pub alpha0: f64,
    pub l_h: f64,
    pub c_h: f64,
    pub b_r: f64,
    pub lambda_max: f64,
}

/// `2 alpha0 / (L_H B_R^2 C_H^2)`.
pub fn lambda_max(alpha0: f64, l_h: f64, b_r: f64, c_h: f64) -> f64 {
    2.0 * alpha0 / (l_h * b_r * b_r * c_h * c_h)
}

/// `alpha0 = -mean_i g_i <grad_i, R_i>` and the residuals themselves.
pub fn descent_coefficient(
    loss: &impl FeatureLoss,
    hs: &[Array2<f64>],
    gates: &[f64],
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut alpha0 = 0.0;
    let mut rs = Vec::with_capacity(hs.len());
    for (i, (h, g)) in hs.iter().zip(gates).enumerate() {
        let (_, grad) = loss.loss_grad(i, h)?;
        let r = aligned_residual(&grad, h);
        alpha0 -= g * (&grad * &r).sum();
        rs.push(r);
    }
    Ok((alpha0 / hs.len() as f64, rs))
}

/// Largest sampled gradient difference quotient along the segments
/// `H_i + s g_i R_i`, `s in [0, reach]`, probed in random and residual
/// directions.
pub fn sampled_smoothness(
    loss: &impl FeatureLoss,
    hs: &[Array2<f64>],
    rs: &[Array2<f64>],
    gates: &[f64],
    reach: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (i, ((h, r), g)) in hs.iter().zip(rs).zip(gates).enumerate() {
        let scale = norm(h).max(1e-12);
        for k in 0..=4 {
            let p = h + &(r * (reach * k as f64 / 4.0 * g));
            let (_, gp) = loss.loss_grad(i, &p)?;
            for probe in 0..4 {
                let mut dir = if probe == 0 && norm(r) > 0.0 {
                    r.clone()
                } else {
                    normal_matrix(rng, h.nrows(), h.ncols(), 1.0)
                };
                let len = scale * [1e-3, 1e-2, 1e-1, 3e-1][probe];
                dir *= len / norm(&dir);
                let (_, gq) = loss.loss_grad(i, &(&p + &dir))?;
                best = best.max(norm(&(gq - &gp)) / len);
            }
        }
    }
    Ok(best)
}

/// Relative slack `(improvement - alpha0 lambda / 2) / (alpha0 lambda / 2)` at
/// each `lambda`.
pub fn improvement_margins(
    loss: &impl FeatureLoss,
    hs: &[Array2<f64>],
    rs: &[Array2<f64>],
    gates: &[f64],
    alpha0: f64,
    lambdas: &[f64],
) -> Result<Vec<f64>> {
    let n = hs.len() as f64;
    let mut base = 0.0;
    for (i, h) in hs.iter().enumerate() {
        base += loss.loss(i, h)?;
    }
    base /= n;
    lambdas
        .iter()
        .map(|&lam| {
            let mut after = 0.0;
            for (i, ((h, r), g)) in hs.iter().zip(rs).zip(gates).enumerate() {
                after += loss.loss(i, &(h + &(r * (lam * g))))?;
            }
            after /= n;
            let want = 0.5 * alpha0 * lam;
            Ok((base - after - want) / want)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImprovementSetup {
    /// Residual spectral bound entering the step-size window.
    pub b_r: f64,
    pub samples: usize,
    pub tokens: usize,
    pub feature_dim: usize,
    pub width: usize,
}

impl Default for ImprovementSetup {
    fn default() -> Self {
        Self {
            b_r: crate::residual::DEFAULT_SPECTRAL_BOUND,
            samples: 8,
            tokens: 4,
            feature_dim: 3,
            width: 8,
        }
    }
}

fn flow_instance(setup: &ImprovementSetup, rng: &mut Rng, seed: u64) -> Result<(FlowLoss, Vec<Array2<f64>>, Vec<f64>)> {
    let dims = FieldDims {
        chunk_len: 2,
        action_dim: 2,
        feature_dim: setup.feature_dim,
        width: setup.width,
    };
    let field = MlpField::init(dims, seed)?;
    let cfg = GateConfig::default();
    let mut samples = Vec::new();
    let mut hs = Vec::new();
    let mut gates = Vec::new();
    for _ in 0..setup.samples {
        let x0 = normal_vector(rng, dims.output_dim(), 1.0);
        let x1 = normal_vector(rng, dims.output_dim(), 1.0);
        samples.push(interpolate(x0, x1, rng.random_range(0.0..=1.0))?);
        hs.push(normal_matrix(rng, setup.tokens, setup.feature_dim, 1.0));
        gates.push(gate(-rng.random::<f64>().ln() * 2.0, &cfg)?);
    }
    Ok((FlowLoss { field, samples }, hs, gates))
}

/// Constants and margins of one instance over the grid `lambda_max * k / grid`.
pub fn improvement_instance(
    loss: &impl FeatureLoss,
    hs: &[Array2<f64>],
    gates: &[f64],
    b_r: f64,
    grid: usize,
    rng: &mut Rng,
) -> Result<(ImprovementConstants, Vec<f64>)> {
    let (alpha0, rs) = descent_coefficient(loss, hs, gates)?;
    if !(alpha0 > 0.0) {
        return Err(Error::Degenerate(format!(
            "descent coefficient alpha0 = {alpha0} is not positive"
        )));
    }
    let c_h = hs.iter().map(norm).fold(0.0, f64::max);
    let mut reach = 1.0;
    let mut l_h = SAFETY * sampled_smoothness(loss, hs, &rs, gates, reach, rng)?;
    let mut lam = lambda_max(alpha0, l_h, b_r, c_h);
    if lam > reach {
        reach = lam;
        l_h = l_h.max(SAFETY * sampled_smoothness(loss, hs, &rs, gates, reach, rng)?);
        lam = lambda_max(alpha0, l_h, b_r, c_h);
    }
    let lambdas: Vec<f64> = (1..=grid).map(|k| lam * k as f64 / grid as f64).collect();
    let margins = improvement_margins(loss, hs, &rs, gates, alpha0, &lambdas)?;
    Ok((
        ImprovementConstants {
            alpha0,
            l_h,
            c_h,
            b_r,
            lambda_max: lam,
        },
        margins,
    ))
}

pub fn check_residual_improvement(
    grid: usize,
    trials: usize,
    seed: u64,
    setup: &ImprovementSetup,
) -> Result<CheckReport> {
    require_trials(trials)?;
    if grid == 0 {
        return Err(invalid("grid", "must be at least 1"));
    }
    let start = Instant::now();
    let (mut violations, mut worst) = (0, f64::INFINITY);
    let (mut lam_lo, mut lam_hi, mut alpha_lo) = (f64::INFINITY, 0.0f64, f64::INFINITY);
    for trial in 0..trials {
        let mut rng = derived_rng(seed, &[trial as u64]);
        let (loss, hs, gates) =
            flow_instance(setup, &mut rng, derive_seed(seed, &[trial as u64, 1]))?;
        let (c, margins) = improvement_instance(&loss, &hs, &gates, setup.b_r, grid, &mut rng)?;
        lam_lo = lam_lo.min(c.lambda_max);
        lam_hi = lam_hi.max(c.lambda_max);
        alpha_lo = alpha_lo.min(c.alpha0);
        for m in margins {
            worst = worst.min(m);
            if m < 0.0 {
                violations += 1;
            }
        }
    }
    Ok(CheckReport::finish(
        "residual_improvement",
        trials,
        violations,
        worst,
        json!({
            "grid": grid,
            "setup": setup,
            "safety": SAFETY,
            "lambda_max_range": [lam_lo, lam_hi],
            "min_alpha0": alpha_lo,
            "seed": seed,
        }),
        start,
    ))
}

pub const CONTRACTION_STEPS: usize = 60;

pub fn check_contraction(trials: usize, seed: u64) -> Result<CheckReport> {
    require_trials(trials)?;
    let start = Instant::now();
    let slack = 1e-9;
    let agree = 1e-8;
    let (mut violations, mut worst) = (0, f64::INFINITY);
    let mut worst_rho: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = derived_rng(seed, &[trial as u64]);
        let dim = rng.random_range(2..=6);
        let mu = rng.random_range(0.2..1.0);
        let l_e = mu * rng.random_range(1.0..4.0);
        let frac = rng.random_range(0.05..0.999);
        let field = ContractionField::random(dim, mu, l_e, frac, derive_seed(seed, &[trial as u64, 1]))?;
        let rho = field.rho();
        worst_rho = worst_rho.max(rho);

        let z0 = &field.z_star + &normal_vector(&mut rng, dim, 3.0);
        let e0 = (&z0 - &field.z_star).dot(&(&z0 - &field.z_star)).sqrt();
        let (_, ratios) = fixed_gate_iterate(&field, &z0, CONTRACTION_STEPS)?;
        let mut bad = false;
        // Below this distance the iterate sits on the rounding lattice of Z*
        // and per-step ratios are noise.
        let z_scale = field.z_star.dot(&field.z_star).sqrt().max(1.0);
        let floor = 64.0 * f64::EPSILON * z_scale;
        let mut err = e0;
        for (k, r) in ratios.iter().enumerate() {
            let step_margin = if err > floor { rho + slack - r } else { f64::INFINITY };
            err *= r;
            let cum_margin = (rho.powi(k as i32 + 1) + slack) * e0 - err;
            worst = worst.min(step_margin).min(cum_margin / e0);
            bad |= step_margin < 0.0 || cum_margin < 0.0;
        }

        // Run long enough that rho^k |e0| is far below the agreement tolerance.
        let k = ((1e-14f64).ln() / rho.ln()).ceil().max(CONTRACTION_STEPS as f64) as usize;
        let z1 = &field.z_star + &normal_vector(&mut rng, dim, 3.0);
        let (a, _) = fixed_gate_iterate(&field, &z0, k)?;
        let (b, _) = fixed_gate_iterate(&field, &z1, k)?;
        let gap = (&a - &b).dot(&(&a - &b)).sqrt();
        worst = worst.min((agree - gap) / agree);
        bad |= gap > agree;
        if bad {
            violations += 1;
        }
    }
    Ok(CheckReport::finish(
        "contraction",
        trials,
        violations,
        worst,
        json!({
            "steps": CONTRACTION_STEPS,
            "slack": slack,
            "ratio_floor": 64.0 * f64::EPSILON,
            "agreement": agree,
            "max_rho": worst_rho,
            "seed": seed,
        }),
        start,
    ))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Degenerate("log-log fit needs >= 2 positive points".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

fn std_dev(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

pub const SLOPE_RANGE: (f64, f64) = (-0.65, -0.35);

/// Fixed pair of point clouds inside the ball of `radius`.
pub fn ball_pair(n: usize, dim: usize, radius: f64, seed: u64) -> Result<(EmpiricalMeasure, EmpiricalMeasure)> {
    let mut rng = derived_rng(seed, &[0]);
    let mut cloud = |shift: f64| -> Result<EmpiricalMeasure> {
        let mut pts = normal_matrix(&mut rng, n, dim, 1.0);
        for mut row in pts.rows_mut() {
            row[0] += shift;
            let len = row.dot(&row).sqrt();
            let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
            row *= r / len;
        }
        EmpiricalMeasure::new(pts)
    };
    let mu = cloud(0.0)?;
    let nu = cloud(1.0)?;
    Ok((mu, nu))
}

pub fn check_concentration_on(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    projections: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<CheckReport> {
    if projections.len() < 2 || repeats < 2 {
        return Err(invalid("projections", "need >= 2 counts and >= 2 repeats"));
    }
    let start = Instant::now();
    let cfg = GateConfig::default();
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut stds = Vec::new();
    for &m in projections {
        let est: Vec<f64> = (0..repeats)
            .map(|r| sliced_w2(mu, nu, m, derive_seed(seed, &[m as u64, r as u64])))
            .collect::<Result<_>>()?;
        let (mean, sd) = std_dev(&est);
        stds.push(sd);
        let g_mean = gate(mean, &cfg)?;
        for d in est {
            let lhs = (gate(d, &cfg)? - g_mean).abs();
            let rhs = cfg.tau * (d - mean).abs();
            let margin = rhs - lhs;
            worst = worst.min(margin);
            if margin < -1e-15 {
                violations += 1;
            }
        }
    }
    let xs: Vec<f64> = projections.iter().map(|&m| m as f64).collect();
    let slope = if stds.iter().all(|s| *s == 0.0) {
        None
    } else {
        let s = log_log_slope(&xs, &stds)?;
        let margin = (s - SLOPE_RANGE.0).min(SLOPE_RANGE.1 - s);
        worst = worst.min(margin);
        if margin < 0.0 {
            violations += 1;
        }
        Some(s)
    };
    Ok(CheckReport::finish(
        "concentration",
        projections.len() * repeats,
        violations,
        worst,
        json!({
            "projections": projections,
            "repeats": repeats,
            "stddev": stds,
            "slope": slope,
            "slope_range": [SLOPE_RANGE.0, SLOPE_RANGE.1],
            "tau": cfg.tau,
            "seed": seed,
        }),
        start,
    ))
}

pub fn check_concentration(projections: &[usize], repeats: usize, seed: u64) -> Result<CheckReport> {
    let (mu, nu) = ball_pair(16, 4, 1.0, seed)?;
    check_concentration_on(&mu, &nu, projections, repeats, seed)
}

/// Default trial counts for the full suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_gated_descent(1000, derive_seed(seed, &[1]))?,
        check_bracketing(10_000, derive_seed(seed, &[2]))?,
        check_residual_improvement(8, 200, derive_seed(seed, &[3]), &ImprovementSetup::default())?,
        check_contraction(50, derive_seed(seed, &[4]))?,
        check_concentration(&[8, 32, 128, 512], 200, derive_seed(seed, &[5]))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn stationary_point_gives_zero_slack() {
        let j = GatedQuadratic {
            a: vec![array![[1.0, 0.0], [0.0, 2.0]]],
            b: vec![array![1.0, 4.0]],
            g: vec![0.7],
        };
        let theta = array![1.0, 2.0];
        let l = j.smoothness();
        assert_eq!(descent_slack(&j, &theta, 0.5 / l, l), 0.0);
    }

    #[test]
    fn scalar_step_to_minimum_is_tight() {
        let j = GatedQuadratic {
            a: vec![array![[1.0]]],
            b: vec![array![0.0]],
            g: vec![1.0],
        };
        assert_eq!(j.smoothness(), 2.0);
        let theta = array![3.0];
        assert_eq!(descent_slack(&j, &theta, 0.5, 2.0), 0.0);
    }

    #[test]
    fn unit_gates_reduce_to_the_classical_lemma() {
        let mut rng = derived_rng(3, &[]);
        for _ in 0..200 {
            let j = GatedQuadratic {
                a: (0..3).map(|_| normal_matrix(&mut rng, 2, 3, 1.0)).collect(),
                b: (0..3).map(|_| normal_vector(&mut rng, 2, 1.0)).collect(),
                g: vec![1.0; 3],
            };
            let theta = normal_vector(&mut rng, 3, 1.0);
            let l = j.smoothness();
            let alpha = rng.random_range(0.01..1.99) / l;
            assert!(descent_slack(&j, &theta, alpha, l) > -1e-10);
        }
    }

    #[test]
    fn descent_suite_passes() {
        let r = check_gated_descent(300, 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(check_gated_descent(0, 1).is_err());
    }

    #[test]
    fn bracketing_endpoints() {
        let losses = [1.0, 2.0, 3.0];
        assert_eq!(bracket(&losses, &[1.0; 3]), (2.0, 2.0));
        let (l, j) = bracket(&losses, &[0.05; 3]);
        assert!((j - 0.05 * l).abs() < 1e-15);
        assert!(check_bracketing(2000, 9).unwrap().passed);
    }

    fn quadratic(rng: &mut Rng, n: usize, shape: (usize, usize)) -> (QuadraticLoss, Vec<Array2<f64>>, Vec<f64>) {
        let p = shape.0 * shape.1;
        let loss = QuadraticLoss {
            a: (0..n).map(|_| normal_matrix(rng, p, p, 0.5)).collect(),
            y: (0..n).map(|_| normal_vector(rng, p, 1.0)).collect(),
            shape,
        };
        let hs = (0..n).map(|_| normal_matrix(rng, shape.0, shape.1, 1.0)).collect();
        let gates = (0..n).map(|_| rng.random_range(0.05..=1.0)).collect();
        (loss, hs, gates)
    }

    #[test]
    fn quadratic_oracle_half_window() {
        // Exact smoothness and unit residual gain: the window midpoint must
        // deliver at least half the first-order decrease.
        let mut rng = derived_rng(21, &[]);
        for _ in 0..200 {
            let (loss, hs, gates) = quadratic(&mut rng, 6, (3, 2));
            let (alpha0, rs) = descent_coefficient(&loss, &hs, &gates).unwrap();
            let c_h = hs.iter().map(norm).fold(0.0, f64::max);
            let lam = lambda_max(alpha0, loss.smoothness(), 1.0, c_h);
            let m = improvement_margins(&loss, &hs, &rs, &gates, alpha0, &[lam / 2.0]).unwrap();
            assert!(m[0] >= -1e-12, "{m:?}");
        }
    }

    #[test]
    fn improvement_vanishes_with_lambda() {
        let mut rng = derived_rng(5, &[]);
        let (loss, hs, gates) = quadratic(&mut rng, 4, (2, 2));
        let (alpha0, rs) = descent_coefficient(&loss, &hs, &gates).unwrap();
        let m = improvement_margins(&loss, &hs, &rs, &gates, alpha0, &[1e-1, 1e-3, 1e-5]).unwrap();
        // Margin tends to +1: improvement ~ alpha0 * lambda.
        assert!(m[0] < m[1] && m[1] < m[2] && (m[2] - 1.0).abs() < 1e-3, "{m:?}");
    }

    #[test]
    fn degenerate_instance_is_an_error() {
        let loss = QuadraticLoss {
            a: vec![Array2::eye(2)],
            y: vec![array![1.0, 2.0]],
            shape: (1, 2),
        };
        let hs = vec![array![[1.0, 2.0]]];
        let mut rng = derived_rng(1, &[]);
        let err = improvement_instance(&loss, &hs, &[1.0], 2.0, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn residual_improvement_small_suite() {
        let r = check_residual_improvement(8, 20, 4, &ImprovementSetup::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn identity_field_halves() {
        let f = ContractionField::new(Array2::eye(3), array![1.0, -1.0, 0.5], 0.5).unwrap();
        assert_eq!(f.rho(), 0.5);
        let (_, ratios) = fixed_gate_iterate(&f, &array![3.0, 1.0, 0.5], 10).unwrap();
        assert!(ratios.iter().all(|r| (r - 0.5).abs() < 1e-15));
    }

    #[test]
    fn window_edge_still_contracts() {
        let a = array![[1.0, 0.0], [0.0, 2.0]];
        let edge = 2.0 * 1.0 / 4.0 - 1e-6;
        let f = ContractionField::new(a, array![0.0, 0.0], edge).unwrap();
        assert!(f.rho() < 1.0);
        let (_, ratios) = fixed_gate_iterate(&f, &array![1.0, 1.0], 60).unwrap();
        assert!(ratios.iter().all(|r| *r <= f.rho() + 1e-9));
    }

    #[test]
    fn contraction_suite_passes() {
        assert!(check_contraction(10, 2).unwrap().passed);
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let xs = [8.0, 32.0, 128.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_measures_concentrate_trivially() {
        let (mu, _) = ball_pair(8, 3, 1.0, 0).unwrap();
        let r = check_concentration_on(&mu, &mu, &[8, 32], 10, 0).unwrap();
        assert!(r.passed);
        assert_eq!(r.parameters["stddev"], json!([0.0, 0.0]));
    }

    #[test]
    fn doubling_projections_shrinks_spread() {
        let (mu, nu) = ball_pair(16, 4, 1.0, 3).unwrap();
        let r = check_concentration_on(&mu, &nu, &[64, 128], 400, 3).unwrap();
        let s: Vec<f64> = serde_json::from_value(r.parameters["stddev"].clone()).unwrap();
        let ratio = s[1] / s[0];
        assert!((ratio - 0.5f64.sqrt()).abs() < 0.25 * 0.5f64.sqrt(), "{ratio}");
    }

    #[test]
    fn reports_serialize() {
        let r = check_bracketing(5, 0).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["name"], "bracketing");
        assert_eq!(v["passed"], true);
    }
}
