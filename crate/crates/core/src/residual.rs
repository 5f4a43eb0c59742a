//! Observation feature sequences and the spectrally bounded residual operator
//! `R(H) = W H + b` used for the gated update `H~ = H + lambda * g * R(H)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::rng::rng_from;

pub const DEFAULT_SPECTRAL_BOUND: f64 = 2.0;
pub const DEFAULT_POWER_ITERS: usize = 50;
/// Relative slack on the spectral invariant `|W|_2 <= B_R`.
pub const SPECTRAL_SLACK: f64 = 1e-6;
const POWER_SEED: u64 = 0x5EC7_2A1;

/// Token features `H` as a `T x d` matrix, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    rows: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature sequence"));
        }
        Ok(Self { rows })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Result<Self> {
        Self::new(Array2::zeros((tokens, dim)))
    }

    pub fn tokens(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.rows
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.rows.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean over tokens.
    pub fn mean_pool(&self) -> Array1<f64> {
        self.rows.mean_axis(Axis(0)).expect("non-empty")
    }

    pub fn to_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.rows.clone()).expect("validated on construction")
    }
}

/// Largest singular value of `w` by power iteration on `W^T W` from a fixed
/// seeded start vector.
pub fn power_iteration_sigma_max(w: ArrayView2<'_, f64>, iters: usize) -> f64 {
    let cols = w.ncols();
    if cols == 0 || w.nrows() == 0 {
        return 0.0;
    }
    let mut rng = rng_from(POWER_SEED);
    let mut v: Array1<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    v /= v.dot(&v).sqrt();
    let mut sigma = w.dot(&v).dot(&w.dot(&v)).sqrt();
    for _ in 0..iters {
        let wv = w.dot(&v);
        let next = w.t().dot(&wv);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = next / norm;
        let wv = w.dot(&v);
        sigma = wv.dot(&wv).sqrt();
    }
    sigma
}

/// Affine map applied row-wise: `row_i -> W h_i + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualOperator {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub bound: f64,
    pub power_iters: usize,
}

impl ResidualOperator {
    pub fn new(w: Array2<f64>, b: Array1<f64>, bound: f64, power_iters: usize) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::DimensionMismatch {
                context: "residual W must be square",
                expected: w.nrows(),
                actual: w.ncols(),
            });
        }
        if b.len() != w.nrows() {
            return Err(Error::DimensionMismatch {
                context: "residual bias",
                expected: w.nrows(),
                actual: b.len(),
            });
        }
        if !(bound > 0.0) {
            return Err(invalid("spectral_bound", "must be positive"));
        }
        if power_iters == 0 {
            return Err(invalid("power_iters", "must be at least 1"));
        }
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual parameters"));
        }
        Ok(Self {
            w,
            b,
            bound,
            power_iters,
        })
    }

    pub fn zeros(dim: usize, bound: f64) -> Result<Self> {
        Self::new(
            Array2::zeros((dim, dim)),
            Array1::zeros(dim),
            bound,
            DEFAULT_POWER_ITERS,
        )
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    fn check_input(&self, h: &FeatureSequence) -> Result<()> {
        if h.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "residual input features",
                expected: self.dim(),
                actual: h.dim(),
            });
        }
        Ok(())
    }

    /// `R(H)`.
    pub fn apply(&self, h: &FeatureSequence) -> Result<FeatureSequence> {
        self.check_input(h)?;
        let out = h.view().dot(&self.w.t()) + &self.b;
        FeatureSequence::new(out)
    }

    /// `R` applied to a single (e.g. pooled) feature vector.
    pub fn apply_vector(&self, h: ArrayView1<'_, f64>) -> Array1<f64> {
        self.w.dot(&h) + &self.b
    }

    pub fn spectral_norm_estimate(&self) -> f64 {
        power_iteration_sigma_max(self.w.view(), self.power_iters)
    }

    /// Rescales `W` onto the ball `|W|_2 <= B_R` when the power-iteration
    /// estimate exceeds it. Returns the estimate before projection.
    pub fn project_spectral(&mut self) -> f64 {
        let sigma = self.spectral_norm_estimate();
        if sigma > self.bound {
            self.w *= self.bound / sigma;
        }
        sigma
    }

    /// By-value form of [`Self::project_spectral`].
    pub fn spectral_project(mut self) -> Self {
        self.project_spectral();
        self
    }
}

/// `H + lambda * g * R(H)`.
pub fn gated_update(
    h: &FeatureSequence,
    g: f64,
    lambda: f64,
    op: &ResidualOperator,
) -> Result<FeatureSequence> {
    if !(lambda > 0.0) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("gate"));
    }
    let r = op.apply(h)?;
    let scale = lambda * g;
    FeatureSequence::new(&h.rows + &(r.rows * scale))
}
