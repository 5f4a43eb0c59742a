//! Empirical measures and the discrepancies between them.
//!
//! All measures carry uniform weights `1/n`. The default discrepancy is the
//! sliced squared 2-Wasserstein distance; Sinkhorn, RBF-MMD and a cosine
//! distance between means are available for ablations, and a brute-force
//! assignment oracle backs the tests.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from;

/// Largest point count the permutation oracle accepts (8! = 40320 matchings).
pub const ORACLE_MAX_POINTS: usize = 8;

/// Uniform-weight point cloud in `R^d`, one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Array2<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Empty("measure has no points"));
        }
        if points.ncols() == 0 {
            return Err(Error::Empty("measure points have dimension 0"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measure points"));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Empty("measure has no points"));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "measure rows",
                expected: d,
                actual: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((n, d), flat).expect("shape checked above");
        Self::new(points)
    }

    /// Single Dirac mass.
    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::from_rows(&[x.to_vec()])
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn mean(&self) -> Array1<f64> {
        self.points.mean_axis(Axis(0)).expect("non-empty")
    }

    /// Pushforward onto the line spanned by `direction`.
    pub fn project(&self, direction: ArrayView1<'_, f64>) -> Vec<f64> {
        self.points.dot(&direction).to_vec()
    }
}

/// Which discrepancy `D(mu_H, mu_Z)` to compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscrepancyKind {
    SlicedW2 {
        projections: usize,
    },
    Sinkhorn {
        epsilon: f64,
        max_iters: usize,
        tol: f64,
    },
    MmdRbf {
        sigma: f64,
    },
    CosineMean,
}

impl Default for DiscrepancyKind {
    fn default() -> Self {
        DiscrepancyKind::SlicedW2 { projections: 32 }
    }
}

impl DiscrepancyKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DiscrepancyKind::SlicedW2 { projections } if projections == 0 => {
                Err(invalid("projections", "must be at least 1"))
            }
            DiscrepancyKind::Sinkhorn { epsilon, tol, .. } if !(epsilon > 0.0) || !(tol > 0.0) => {
                Err(invalid("epsilon", "epsilon and tol must be positive"))
            }
            DiscrepancyKind::MmdRbf { sigma } if !(sigma > 0.0) => {
                Err(invalid("sigma", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in sweep outputs.
    pub fn label(&self) -> String {
        match *self {
            DiscrepancyKind::SlicedW2 { projections } => format!("sliced_w2(M={projections})"),
            DiscrepancyKind::Sinkhorn { epsilon, .. } => format!("sinkhorn(eps={epsilon})"),
            DiscrepancyKind::MmdRbf { sigma } => format!("mmd_rbf(sigma={sigma})"),
            DiscrepancyKind::CosineMean => "cosine_mean".to_string(),
        }
    }
}

/// Evaluates `kind` on the pair. `seed` only matters for the sliced estimator.
pub fn discrepancy(
    kind: &DiscrepancyKind,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    seed: u64,
) -> Result<f64> {
    match *kind {
        DiscrepancyKind::SlicedW2 { projections } => sliced_w2(mu, nu, projections, seed),
        DiscrepancyKind::Sinkhorn {
            epsilon,
            max_iters,
            tol,
        } => sinkhorn_divergence(mu, nu, epsilon, max_iters, tol),
        DiscrepancyKind::MmdRbf { sigma } => mmd_rbf(mu, nu, sigma),
        DiscrepancyKind::CosineMean => cosine_mean_discrepancy(mu, nu),
    }
}

fn check_dims(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            context: "measure dimension",
            expected: mu.dim(),
            actual: nu.dim(),
        });
    }
    Ok(())
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Squared 2-Wasserstein distance between two equal-size 1D empirical measures
/// (quantile formula: sort both and average the squared gaps).
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Empty("1d measure"));
    }
    let (a, b) = (sorted(a), sorted(b));
    let total: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(total / a.len() as f64)
}

/// `count` directions drawn uniformly on the unit sphere `S^{dim-1}`
/// (normalized standard-normal vectors), one per row.
pub fn sample_directions(dim: usize, count: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(seed);
    let mut dirs = Array2::<f64>::zeros((count, dim));
    for mut row in dirs.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    dirs
}

/// Per-direction 1D terms of the sliced estimator for explicit directions.
pub fn sliced_w2_terms(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    directions: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    check_dims(mu, nu)?;
    if mu.len() != nu.len() {
        return Err(Error::LengthMismatch {
            left: mu.len(),
            right: nu.len(),
        });
    }
    if directions.ncols() != mu.dim() {
        return Err(Error::DimensionMismatch {
            context: "projection directions",
            expected: mu.dim(),
            actual: directions.ncols(),
        });
    }
    if directions.nrows() == 0 {
        return Err(invalid("projections", "must be at least 1"));
    }
    directions
        .rows()
        .into_iter()
        .map(|dir| w2_1d(&mu.project(dir), &nu.project(dir)))
        .collect()
}

/// Sliced estimator with caller-supplied directions (rows need not be random).
pub fn sliced_w2_with_directions(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    directions: ArrayView2<'_, f64>,
) -> Result<f64> {
    let terms = sliced_w2_terms(mu, nu, directions)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Monte-Carlo sliced squared 2-Wasserstein distance over `projections`
/// random directions derived from `seed`. Measures must have equal size.
pub fn sliced_w2(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if projections == 0 {
        return Err(invalid("projections", "must be at least 1"));
    }
    check_dims(mu, nu)?;
    let dirs = sample_directions(mu.dim(), projections, seed);
    sliced_w2_with_directions(mu, nu, dirs.view())
}

fn sq_dist(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Cost of matching point `i` of `mu` to point `perm[i]` of `nu`.
pub fn assignment_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, perm: &[usize]) -> f64 {
    let (x, y) = (mu.points(), nu.points());
    let total: f64 = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| sq_dist(x.row(i), y.row(j)))
        .sum();
    total / perm.len() as f64
}

/// Exact `W_2^2` between equal-size uniform measures by enumerating every
/// permutation. Intended as a test oracle only.
pub fn exact_w2_oracle(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_dims(mu, nu)?;
    if mu.len() != nu.len() {
        return Err(Error::LengthMismatch {
            left: mu.len(),
            right: nu.len(),
        });
    }
    let n = mu.len();
    if n > ORACLE_MAX_POINTS {
        return Err(Error::OracleTooLarge {
            n,
            limit: ORACLE_MAX_POINTS,
        });
    }
    let best = (0..n)
        .permutations(n)
        .map(|perm| assignment_cost(mu, nu, &perm))
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

fn cost_matrix(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| sq_dist(x.row(i), y.row(j)))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Alternating log-domain updates at one `eps`; returns the row-marginal
/// violation reached.
fn sinkhorn_sweeps(
    cost: &Array2<f64>,
    f: &mut [f64],
    g: &mut [f64],
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> f64 {
    let (n, m) = cost.dim();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut violation = f64::INFINITY;
    for _ in 0..max_iters {
        for i in 0..n {
            let row = cost.row(i);
            f[i] = -eps * log_sum_exp((0..m).map(|j| (g[j] - row[j]) / eps + log_b));
        }
        for j in 0..m {
            let col = cost.column(j);
            g[j] = -eps * log_sum_exp((0..n).map(|i| (f[i] - col[i]) / eps + log_a));
        }
        // Column marginals are exact after the g-update; measure the rows.
        violation = (0..n)
            .map(|i| {
                let row = cost.row(i);
                let mass: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - row[j]) / eps + log_a + log_b).exp())
                    .sum();
                (mass - 1.0 / n as f64).abs()
            })
            .sum();
        if violation <= tol {
            break;
        }
    }
    violation
}

/// Plan entries in the log domain, their row and column sums, and the
/// total marginal violation.
fn plan_marginals(cost: &Array2<f64>, f: &[f64], g: &[f64], eps: f64) -> (Array2<f64>, Vec<f64>, Vec<f64>, f64) {
    let (n, m) = cost.dim();
    let log_ab = -((n * m) as f64).ln();
    let p = Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / eps + log_ab).exp());
    let r: Vec<f64> = p.rows().into_iter().map(|row| row.sum()).collect();
    let c: Vec<f64> = p.columns().into_iter().map(|col| col.sum()).collect();
    let violation = r.iter().map(|v| (v - 1.0 / n as f64).abs()).sum::<f64>()
        + c.iter().map(|v| (v - 1.0 / m as f64).abs()).sum::<f64>();
    (p, r, c, violation)
}

fn dual_objective(p: &Array2<f64>, f: &[f64], g: &[f64], eps: f64) -> f64 {
    let (n, m) = p.dim();
    f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64 - eps * p.sum()
}

/// Damped Newton ascent on the concave dual with `g[m-1]` pinned. Near a
/// permutation-like plan alternating sweeps crawl while Newton converges
/// quadratically. Returns the violation reached; stops early when the
/// linear system is numerically singular or the line search stalls.
fn newton_polish(cost: &Array2<f64>, f: &mut [f64], g: &mut [f64], eps: f64, steps: usize, tol: f64) -> f64 {
    let (n, m) = cost.dim();
    let k = n + m - 1;
    let (mut p, mut r, mut c, mut violation) = plan_marginals(cost, f, g, eps);
    for _ in 0..steps {
        if violation <= tol {
            break;
        }
        let mut h = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for i in 0..n {
            h[(i, i)] = r[i];
            rhs[i] = eps * (1.0 / n as f64 - r[i]);
        }
        for j in 0..m - 1 {
            h[(n + j, n + j)] = c[j];
            rhs[n + j] = eps * (1.0 / m as f64 - c[j]);
            for i in 0..n {
                h[(i, n + j)] = p[[i, j]];
                h[(n + j, i)] = p[[i, j]];
            }
        }
        let Some(chol) = h.cholesky() else { break };
        let delta = chol.solve(&rhs);
        if !delta.iter().all(|v| v.is_finite()) {
            break;
        }
        let slope = rhs.dot(&delta) / eps;
        let base = dual_objective(&p, f, g, eps);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let nf: Vec<f64> = (0..n).map(|i| f[i] + t * delta[i]).collect();
            let ng: Vec<f64> = (0..m).map(|j| g[j] + if j < m - 1 { t * delta[n + j] } else { 0.0 }).collect();
            let trial = plan_marginals(cost, &nf, &ng, eps);
            if dual_objective(&trial.0, &nf, &ng, eps) >= base + 1e-4 * t * slope {
                f.copy_from_slice(&nf);
                g.copy_from_slice(&ng);
                (p, r, c, violation) = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    violation
}

/// Entropic OT value `min <P,C> + eps*KL(P | a x b)`, returned as the dual
/// objective `<a,f> + <b,g>`. The potentials are warm-started along a halving
/// schedule from the cost scale down to `eps`. At the target `eps`, blocks of
/// log-domain Sinkhorn sweeps alternate with Newton polishing; sweeps count
/// against `max_iters`.
fn entropic_ot(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<f64> {
    const BLOCK: usize = 200;
    const NEWTON_STEPS: usize = 30;
    let (n, m) = (x.nrows(), y.nrows());
    let cost = cost_matrix(x, y);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let scale = cost.iter().copied().fold(0.0, f64::max);
    let mut stage = scale;
    while stage > 2.0 * eps {
        sinkhorn_sweeps(&cost, &mut f, &mut g, stage, 50, tol);
        stage *= 0.5;
    }
    let mut used = 0;
    let mut violation = sinkhorn_sweeps(&cost, &mut f, &mut g, eps, BLOCK.min(max_iters), tol);
    used += BLOCK.min(max_iters);
    loop {
        if violation > tol && m > 1 {
            violation = newton_polish(&cost, &mut f, &mut g, eps, NEWTON_STEPS, tol);
        }
        if violation <= tol {
            return Ok(f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64);
        }
        if used >= max_iters {
            return Err(Error::SinkhornNonConvergence {
                iters: max_iters,
                violation,
            });
        }
        let block = BLOCK.min(max_iters - used);
        violation = sinkhorn_sweeps(&cost, &mut f, &mut g, eps, block, tol);
        used += block;
    }
}

/// Symmetric entropic OT `OT_eps(mu, mu)` with the averaged fixed-point update
/// `f <- (f + T(f)) / 2`, which avoids the slowly damped two-cycle of the
/// alternating scheme on symmetric problems.
fn entropic_ot_self(x: ArrayView2<'_, f64>, eps: f64, max_iters: usize, tol: f64) -> Result<f64> {
    let n = x.nrows();
    let cost = cost_matrix(x, x);
    let log_a = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut violation = f64::INFINITY;
    let mut stage = cost.iter().copied().fold(0.0, f64::max).max(eps);
    loop {
        let last = stage <= eps;
        let iters = if last { max_iters } else { 50 };
        for _ in 0..iters {
            let t: Vec<f64> = (0..n)
                .map(|i| {
                    let row = cost.row(i);
                    -stage * log_sum_exp((0..n).map(|j| (f[j] - row[j]) / stage + log_a))
                })
                .collect();
            for (fi, ti) in f.iter_mut().zip(&t) {
                *fi = 0.5 * (*fi + ti);
            }
            violation = (0..n)
                .map(|i| {
                    let row = cost.row(i);
                    let mass: f64 = (0..n)
                        .map(|j| ((f[i] + f[j] - row[j]) / stage + 2.0 * log_a).exp())
                        .sum();
                    (mass - 1.0 / n as f64).abs()
                })
                .sum();
            if violation <= tol {
                break;
            }
        }
        if last {
            break;
        }
        stage = (0.5 * stage).max(eps);
    }
    if violation <= tol {
        Ok(2.0 * f.iter().sum::<f64>() / n as f64)
    } else {
        Err(Error::SinkhornNonConvergence {
            iters: max_iters,
            violation,
        })
    }
}

/// Entropic transport cost `OT_eps(mu, nu)` without debiasing.
pub fn entropic_transport(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    if !(tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    check_dims(mu, nu)?;
    entropic_ot(mu.points(), nu.points(), epsilon, max_iters, tol)
}

/// Debiased Sinkhorn divergence
/// `S_eps = OT_eps(mu,nu) - OT_eps(mu,mu)/2 - OT_eps(nu,nu)/2`.
pub fn sinkhorn_divergence(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    if !(tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    check_dims(mu, nu)?;
    let (x, y) = (mu.points(), nu.points());
    let self_x = entropic_ot_self(x, epsilon, max_iters, tol)?;
    if x == y {
        return Ok(0.0);
    }
    let cross = entropic_ot(x, y, epsilon, max_iters, tol)?;
    let self_y = entropic_ot_self(y, epsilon, max_iters, tol)?;
    // Rounding can leave a tiny negative residue on identical inputs.
    Ok((cross - 0.5 * self_x - 0.5 * self_y).max(0.0))
}

/// Squared MMD with Gaussian kernel `exp(-|x-y|^2 / (2 sigma^2))`, biased
/// V-statistic.
pub fn mmd_rbf(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", "must be positive"));
    }
    check_dims(mu, nu)?;
    let scale = 1.0 / (2.0 * sigma * sigma);
    let mean_kernel = |a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>| -> f64 {
        let total: f64 = a
            .rows()
            .into_iter()
            .map(|x| {
                b.rows()
                    .into_iter()
                    .map(|y| (-sq_dist(x, y) * scale).exp())
                    .sum::<f64>()
            })
            .sum();
        total / (a.nrows() * b.nrows()) as f64
    };
    let (x, y) = (mu.points(), nu.points());
    let value = mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y);
    Ok(value.max(0.0))
}

/// `1 - cos(mean(mu), mean(nu))`, in `[0, 2]`.
pub fn cosine_mean_discrepancy(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_dims(mu, nu)?;
    let (a, b) = (mu.mean(), nu.mean());
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroMean);
    }
    let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn m(rows: &[&[f64]]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn measure_construction_validates() {
        assert!(EmpiricalMeasure::from_rows(&[]).is_err());
        assert!(EmpiricalMeasure::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(EmpiricalMeasure::from_rows(&[vec![f64::NAN]]).is_err());
        let mu = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.dim(), 2);
        assert_eq!(mu.mean(), array![2.0, 3.0]);
    }

    #[test]
    fn w2_1d_examples() {
        assert_eq!(w2_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(w2_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(w2_1d(&[2.0, 0.0], &[1.0, 3.0]).unwrap(), 1.0);
        let x = [0.3, -1.2, 4.0, 0.0];
        assert_eq!(w2_1d(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn w2_1d_brute_force_two_points() {
        // Both matchings of {0,2} to {1,3}: straight (1+1)/2, crossed (9+1)/2.
        let straight = ((0.0f64 - 1.0).powi(2) + (2.0f64 - 3.0).powi(2)) / 2.0;
        let crossed = ((0.0f64 - 3.0).powi(2) + (2.0f64 - 1.0).powi(2)) / 2.0;
        assert_eq!(w2_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), straight.min(crossed));
    }

    #[test]
    fn w2_1d_rejects_unequal_lengths() {
        assert!(matches!(
            w2_1d(&[0.0, 1.0], &[1.0]),
            Err(Error::LengthMismatch { left: 2, right: 1 })
        ));
        assert!(matches!(w2_1d(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn sliced_identity_and_errors() {
        let mu = m(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        assert_eq!(sliced_w2(&mu, &mu, 17, 3).unwrap(), 0.0);
        let nu = m(&[&[0.0, 1.0, 2.0]]);
        assert!(matches!(
            sliced_w2(&mu, &nu, 4, 0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(sliced_w2(&mu, &mu, 0, 0).is_err());
    }

    #[test]
    fn sliced_fixed_direction_is_first_coordinate_w2() {
        let mu = m(&[&[0.0, 5.0], &[2.0, -3.0]]);
        let nu = m(&[&[1.0, 0.0], &[3.0, 7.0]]);
        let e1 = array![[1.0, 0.0]];
        let got = sliced_w2_with_directions(&mu, &nu, e1.view()).unwrap();
        assert_eq!(got, w2_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap());
    }

    #[test]
    fn sliced_deterministic_per_seed() {
        let mu = m(&[&[0.0, 1.0, 0.2], &[2.0, -1.0, 1.0]]);
        let nu = m(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 3.0]]);
        let a = sliced_w2(&mu, &nu, 32, 11).unwrap();
        let b = sliced_w2(&mu, &nu, 32, 11).unwrap();
        let c = sliced_w2(&mu, &nu, 32, 12).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a, c);
    }

    #[test]
    fn directions_are_unit_vectors() {
        let dirs = sample_directions(5, 100, 9);
        for row in dirs.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_examples() {
        let mu = m(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let nu = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(exact_w2_oracle(&mu, &nu).unwrap(), 1.0);
        assert_eq!(exact_w2_oracle(&mu, &mu).unwrap(), 0.0);
        let big = EmpiricalMeasure::new(Array2::zeros((9, 1))).unwrap();
        assert!(matches!(
            exact_w2_oracle(&big, &big),
            Err(Error::OracleTooLarge { n: 9, .. })
        ));
    }

    #[test]
    fn oracle_matches_w2_1d_in_one_dimension() {
        let a = [0.0, 3.0, 1.0, -2.0];
        let b = [5.0, -1.0, 2.0, 2.0];
        let mu = m(&[&[0.0], &[3.0], &[1.0], &[-2.0]]);
        let nu = m(&[&[5.0], &[-1.0], &[2.0], &[2.0]]);
        assert_eq!(exact_w2_oracle(&mu, &nu).unwrap(), w2_1d(&a, &b).unwrap());
    }

    #[test]
    fn sinkhorn_identity_and_single_atoms() {
        let mu = m(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        let tol = 1e-9;
        assert!(sinkhorn_divergence(&mu, &mu, 0.1, 10_000, tol).unwrap() <= tol);
        let d0 = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let d1 = EmpiricalMeasure::dirac(&[1.0]).unwrap();
        let s = sinkhorn_divergence(&d0, &d1, 0.1, 1000, tol).unwrap();
        assert!((s - 1.0).abs() <= 10.0 * tol, "{s}");
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let mu = m(&[&[0.0], &[1.0], &[2.0]]);
        let nu = m(&[&[0.3], &[5.0], &[-2.0]]);
        match sinkhorn_divergence(&mu, &nu, 0.01, 1, 1e-14) {
            Err(Error::SinkhornNonConvergence { iters: 1, violation }) => assert!(violation > 0.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn mmd_examples() {
        let d0 = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let d1 = EmpiricalMeasure::dirac(&[1.0]).unwrap();
        let expect = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((mmd_rbf(&d0, &d1, 1.0).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.7869).abs() < 1e-4);
        let mu = m(&[&[0.0, 1.0], &[2.0, -1.0]]);
        let nu = m(&[&[1.0, 1.0], &[0.0, 0.0], &[4.0, 4.0]]);
        assert_eq!(mmd_rbf(&mu, &mu, 0.7).unwrap(), 0.0);
        let (a, b) = (mmd_rbf(&mu, &nu, 0.7).unwrap(), mmd_rbf(&nu, &mu, 0.7).unwrap());
        assert!((a - b).abs() <= 1e-15 * a.abs());
        assert!(mmd_rbf(&mu, &nu, 0.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = m(&[&[1.0, 0.0], &[3.0, 0.0]]);
        let b = m(&[&[2.0, 0.0]]);
        let c = m(&[&[-1.0, 0.0]]);
        let o = m(&[&[0.0, 4.0]]);
        assert_eq!(cosine_mean_discrepancy(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_mean_discrepancy(&a, &c).unwrap(), 2.0);
        assert_eq!(cosine_mean_discrepancy(&a, &o).unwrap(), 1.0);
        let zero = m(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert!(matches!(
            cosine_mean_discrepancy(&zero, &a),
            Err(Error::ZeroMean)
        ));
    }

    #[test]
    fn kind_validation() {
        assert!(DiscrepancyKind::SlicedW2 { projections: 0 }.validate().is_err());
        assert!(DiscrepancyKind::MmdRbf { sigma: -1.0 }.validate().is_err());
        assert!(DiscrepancyKind::Sinkhorn {
            epsilon: 0.0,
            max_iters: 10,
            tol: 1e-6
        }
        .validate()
        .is_err());
        assert!(DiscrepancyKind::default().validate().is_ok());
    }
}
