//! Conditional flow matching on action chunks.
//!
//! The probability path is the straight line `x_t = (1-t) x0 + t x1` with
//! target field `x1 - x0`. The learned field is a two-hidden-layer tanh
//! perceptron on `[x_t, t, mean_pool(H)]`, with hand-written reverse-mode
//! gradients for both its parameters and the conditioning features.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::residual::FeatureSequence;
use crate::rng::rng_from;

/// Raw actions `a_{t..t+K-1}` as a `K x d_a` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk(Array2<f64>);

impl ActionChunk {
    pub fn new(actions: Array2<f64>) -> Result<Self> {
        if actions.nrows() == 0 || actions.ncols() == 0 {
            return Err(Error::Empty("action chunk"));
        }
        if actions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action chunk"));
        }
        Ok(Self(actions))
    }

    /// Rebuilds a `chunk_len x action_dim` chunk from its row-major flattening.
    pub fn from_flat(flat: Array1<f64>, chunk_len: usize, action_dim: usize) -> Result<Self> {
        if flat.len() != chunk_len * action_dim {
            return Err(Error::DimensionMismatch {
                context: "flattened action chunk",
                expected: chunk_len * action_dim,
                actual: flat.len(),
            });
        }
        let arr = flat
            .into_shape_with_order((chunk_len, action_dim))
            .expect("length checked");
        Self::new(arr)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn action_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn flatten(&self) -> Array1<f64> {
        self.0.iter().copied().collect()
    }

    pub fn squared_error(&self, other: &ActionChunk) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Linear action encoder `z = E a`, mapping `R^{d_a}` into feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEncoder {
    /// `d x d_a`.
    pub e: Array2<f64>,
}

impl ActionEncoder {
    pub fn new(e: Array2<f64>) -> Result<Self> {
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder"));
        }
        Ok(Self { e })
    }

    pub fn random(feature_dim: usize, action_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let e = Array2::from_shape_fn((feature_dim, action_dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        Self { e }
    }

    pub fn feature_dim(&self) -> usize {
        self.e.nrows()
    }

    /// Row `k` of the result is `E a_k`.
    pub fn encode(&self, chunk: &ActionChunk) -> Result<Array2<f64>> {
        if chunk.action_dim() != self.e.ncols() {
            return Err(Error::DimensionMismatch {
                context: "encoder action dimension",
                expected: self.e.ncols(),
                actual: chunk.action_dim(),
            });
        }
        Ok(chunk.view().dot(&self.e.t()))
    }
}

pub fn encode_actions(enc: &ActionEncoder, chunk: &ActionChunk) -> Result<Array2<f64>> {
    enc.encode(chunk)
}

/// One point on the straight probability path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Array1<f64>,
    pub x1: Array1<f64>,
    pub t: f64,
    pub xt: Array1<f64>,
}

impl FlowSample {
    /// Target field `v*(x_t, t) = x1 - x0`.
    pub fn target(&self) -> Array1<f64> {
        &self.x1 - &self.x0
    }
}

pub fn interpolate(x0: Array1<f64>, x1: Array1<f64>, t: f64) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid("t", format!("must lie in [0, 1], got {t}")));
    }
    if x0.len() != x1.len() {
        return Err(Error::DimensionMismatch {
            context: "flow endpoints",
            expected: x0.len(),
            actual: x1.len(),
        });
    }
    let xt = &x0 * (1.0 - t) + &x1 * t;
    Ok(FlowSample { x0, x1, t, xt })
}

/// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1]` for target `x1`.
pub fn sample_path_point(x1: Array1<f64>, rng: &mut impl rand::Rng) -> FlowSample {
    let x0: Array1<f64> = (0..x1.len()).map(|_| StandardNormal.sample(rng)).collect();
    let t: f64 = rng.random_range(0.0..=1.0);
    interpolate(x0, x1, t).expect("t in range and equal lengths")
}

/// A conditional vector field `v(x, t | c)` over flattened action chunks.
pub trait VectorField {
    /// `(K, d_a)` of the chunks this field generates.
    fn chunk_shape(&self) -> (usize, usize);
    /// Length of the pooled conditioning vector.
    fn cond_dim(&self) -> usize;
    fn velocity(&self, x: ArrayView1<'_, f64>, t: f64, cond: ArrayView1<'_, f64>) -> Array1<f64>;

    fn output_dim(&self) -> usize {
        let (k, da) = self.chunk_shape();
        k * da
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldDims {
    pub chunk_len: usize,
    pub action_dim: usize,
    pub feature_dim: usize,
    pub width: usize,
}

impl FieldDims {
    pub fn output_dim(&self) -> usize {
        self.chunk_len * self.action_dim
    }

    pub fn input_dim(&self) -> usize {
        self.output_dim() + 1 + self.feature_dim
    }

    fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.action_dim == 0 || self.feature_dim == 0 || self.width == 0
        {
            return Err(invalid("field dims", format!("all must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Two-hidden-layer tanh perceptron `[x, t, c] -> R^{K d_a}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    dims: FieldDims,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Gradient with the same layout as [`MlpField`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

struct Activations {
    input: Array1<f64>,
    h1: Array1<f64>,
    h2: Array1<f64>,
    out: Array1<f64>,
}

impl MlpField {
    pub fn zeros(dims: FieldDims) -> Result<Self> {
        dims.validate()?;
        let (i, w, o) = (dims.input_dim(), dims.width, dims.output_dim());
        Ok(Self {
            dims,
            w1: Array2::zeros((w, i)),
            b1: Array1::zeros(w),
            w2: Array2::zeros((w, w)),
            b2: Array1::zeros(w),
            w3: Array2::zeros((o, w)),
            b3: Array1::zeros(o),
        })
    }

    /// Glorot-normal weights, zero biases.
    pub fn init(dims: FieldDims, seed: u64) -> Result<Self> {
        let mut f = Self::zeros(dims)?;
        let mut rng = rng_from(seed);
        for w in [&mut f.w1, &mut f.w2, &mut f.w3] {
            let std = (2.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            w.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            });
        }
        Ok(f)
    }

    pub fn dims(&self) -> FieldDims {
        self.dims
    }

    /// Parameter blocks in declared order: w1, b1, w2, b2, w3, b3.
    pub fn blocks(&self) -> [&[f64]; 6] {
        [
            slice(&self.w1),
            slice1(&self.b1),
            slice(&self.w2),
            slice1(&self.b2),
            slice(&self.w3),
            slice1(&self.b3),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn forward(&self, x: ArrayView1<'_, f64>, t: f64, cond: ArrayView1<'_, f64>) -> Activations {
        let input = concatenate![Axis(0), x, ndarray::arr1(&[t]), cond];
        let h1 = (self.w1.dot(&input) + &self.b1).mapv(f64::tanh);
        let h2 = (self.w2.dot(&h1) + &self.b2).mapv(f64::tanh);
        let out = self.w3.dot(&h2) + &self.b3;
        Activations { input, h1, h2, out }
    }

    /// Backpropagates `d_out = dL/d(out)`; returns parameter gradients and
    /// the gradient with respect to the conditioning vector.
    fn backward(&self, act: &Activations, d_out: &Array1<f64>) -> (MlpGrad, Array1<f64>) {
        let outer =
            |a: &Array1<f64>, b: &Array1<f64>| Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j]);
        let w3 = outer(d_out, &act.h2);
        let d_z2 = self.w3.t().dot(d_out) * act.h2.mapv(|h| 1.0 - h * h);
        let w2 = outer(&d_z2, &act.h1);
        let d_z1 = self.w2.t().dot(&d_z2) * act.h1.mapv(|h| 1.0 - h * h);
        let w1 = outer(&d_z1, &act.input);
        let d_input = self.w1.t().dot(&d_z1);
        let cond_start = self.dims.output_dim() + 1;
        let d_cond = d_input.slice(s![cond_start..]).to_owned();
        let grad = MlpGrad {
            w1,
            b1: d_z1,
            w2,
            b2: d_z2,
            w3,
            b3: d_out.clone(),
        };
        (grad, d_cond)
    }

    fn check(&self, sample: &FlowSample, cond_dim: usize) -> Result<()> {
        let out = self.dims.output_dim();
        if sample.xt.len() != out || sample.x0.len() != out || sample.x1.len() != out {
            return Err(Error::DimensionMismatch {
                context: "flow sample length",
                expected: out,
                actual: sample.xt.len(),
            });
        }
        if cond_dim != self.dims.feature_dim {
            return Err(Error::DimensionMismatch {
                context: "conditioning feature dimension",
                expected: self.dims.feature_dim,
                actual: cond_dim,
            });
        }
        Ok(())
    }

    /// Loss, parameter gradient and gradient with respect to the pooled
    /// conditioning vector.
    pub fn loss_and_grads_pooled(
        &self,
        sample: &FlowSample,
        pooled: ArrayView1<'_, f64>,
    ) -> Result<(f64, MlpGrad, Array1<f64>)> {
        self.check(sample, pooled.len())?;
        let act = self.forward(sample.xt.view(), sample.t, pooled);
        let resid = &act.out - &sample.target();
        let loss = resid.dot(&resid);
        let (grad, d_cond) = self.backward(&act, &(resid * 2.0));
        Ok((loss, grad, d_cond))
    }
}

/// Flow-matching terms for a batch, one row per element.
#[derive(Debug, Clone)]
pub struct BatchTerms {
    /// Unweighted per-element losses.
    pub losses: Array1<f64>,
    /// Gradient of `sum_i w_i loss_i` with respect to the parameters.
    pub grad: MlpGrad,
    /// Row `i` is the gradient of `w_i loss_i` with respect to conditioning row `i`.
    pub d_cond: Array2<f64>,
}

impl MlpField {
    fn batch_input(&self, x: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>, cond: ArrayView2<'_, f64>) -> Array2<f64> {
        concatenate![Axis(1), x, t.insert_axis(Axis(1)), cond]
    }

    /// Row-wise velocities for a batch of states, times and conditioning vectors.
    pub fn velocity_batch(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let u = self.batch_input(x, t, cond);
        let h1 = (u.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh);
        h2.dot(&self.w3.t()) + &self.b3
    }

    /// Losses and weighted gradients for a batch in one pass.
    pub fn batch_terms(
        &self,
        xt: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        cond: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
        weights: ArrayView1<'_, f64>,
    ) -> Result<BatchTerms> {
        let n = xt.nrows();
        let out_dim = self.dims.output_dim();
        if xt.ncols() != out_dim || target.ncols() != out_dim {
            return Err(Error::DimensionMismatch {
                context: "flow sample length",
                expected: out_dim,
                actual: xt.ncols().max(target.ncols()),
            });
        }
        if cond.ncols() != self.dims.feature_dim {
            return Err(Error::DimensionMismatch {
                context: "conditioning feature dimension",
                expected: self.dims.feature_dim,
                actual: cond.ncols(),
            });
        }
        for len in [t.len(), cond.nrows(), target.nrows(), weights.len()] {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        let u = self.batch_input(xt, t, cond);
        let h1 = (u.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh);
        let resid = h2.dot(&self.w3.t()) + &self.b3 - target;
        let losses = resid.map_axis(Axis(1), |r| r.dot(&r));
        let d_out = resid * &(weights.insert_axis(Axis(1)).mapv(|w| 2.0 * w));
        let d_z2 = d_out.dot(&self.w3) * h2.mapv(|h| 1.0 - h * h);
        let d_z1 = d_z2.dot(&self.w2) * h1.mapv(|h| 1.0 - h * h);
        let d_u = d_z1.dot(&self.w1);
        let grad = MlpGrad {
            w1: standard(d_z1.t().dot(&u)),
            b1: d_z1.sum_axis(Axis(0)),
            w2: standard(d_z2.t().dot(&h1)),
            b2: d_z2.sum_axis(Axis(0)),
            w3: standard(d_out.t().dot(&h2)),
            b3: d_out.sum_axis(Axis(0)),
        };
        let d_cond = d_u.slice(s![.., out_dim + 1..]).to_owned();
        Ok(BatchTerms { losses, grad, d_cond })
    }
}

impl VectorField for MlpField {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.dims.chunk_len, self.dims.action_dim)
    }

    fn cond_dim(&self) -> usize {
        self.dims.feature_dim
    }

    fn velocity(&self, x: ArrayView1<'_, f64>, t: f64, cond: ArrayView1<'_, f64>) -> Array1<f64> {
        self.forward(x, t, cond).out
    }
}

impl MlpGrad {
    pub fn zeros_like(field: &MlpField) -> Self {
        Self {
            w1: Array2::zeros(field.w1.raw_dim()),
            b1: Array1::zeros(field.b1.raw_dim()),
            w2: Array2::zeros(field.w2.raw_dim()),
            b2: Array1::zeros(field.b2.raw_dim()),
            w3: Array2::zeros(field.w3.raw_dim()),
            b3: Array1::zeros(field.b3.raw_dim()),
        }
    }

    pub fn blocks(&self) -> [&[f64]; 6] {
        [
            slice(&self.w1),
            slice1(&self.b1),
            slice(&self.w2),
            slice1(&self.b2),
            slice(&self.w3),
            slice1(&self.b3),
        ]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MlpGrad, scale: f64) {
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
        self.w3.scaled_add(scale, &other.w3);
        self.b3.scaled_add(scale, &other.b3);
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn check_field(field: &impl VectorField, sample: &FlowSample, hcond: &FeatureSequence) -> Result<()> {
    if sample.xt.len() != field.output_dim() || sample.x0.len() != field.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "flow sample length",
            expected: field.output_dim(),
            actual: sample.xt.len(),
        });
    }
    if hcond.dim() != field.cond_dim() {
        return Err(Error::DimensionMismatch {
            context: "conditioning feature dimension",
            expected: field.cond_dim(),
            actual: hcond.dim(),
        });
    }
    Ok(())
}

/// `|v(x_t, t | mean_pool(H)) - (x1 - x0)|^2`.
pub fn per_sample_loss(
    field: &impl VectorField,
    sample: &FlowSample,
    hcond: &FeatureSequence,
) -> Result<f64> {
    check_field(field, sample, hcond)?;
    let pooled = hcond.mean_pool();
    let resid = field.velocity(sample.xt.view(), sample.t, pooled.view()) - sample.target();
    Ok(resid.dot(&resid))
}

/// Exact gradients of [`per_sample_loss`] with respect to the field parameters
/// and to every token of `hcond`. Returns `(loss, grad_theta, grad_H)`.
pub fn loss_gradients(
    model: &MlpField,
    sample: &FlowSample,
    hcond: &FeatureSequence,
) -> Result<(f64, MlpGrad, Array2<f64>)> {
    check_field(model, sample, hcond)?;
    let pooled = hcond.mean_pool();
    let (loss, grad, d_pooled) = model.loss_and_grads_pooled(sample, pooled.view())?;
    let per_token = d_pooled / hcond.tokens() as f64;
    let grad_h = per_token
        .insert_axis(Axis(0))
        .broadcast((hcond.tokens(), hcond.dim()))
        .expect("row broadcast")
        .to_owned();
    Ok((loss, grad, grad_h))
}

/// Base noise `x0 ~ N(0, I)` used by [`euler_sample`] for `seed`.
pub fn base_noise(len: usize, seed: u64) -> Array1<f64> {
    let mut rng = rng_from(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Fixed-step explicit Euler from `x0` at `t = 0` to `t = 1`.
pub fn integrate_euler(
    field: &impl VectorField,
    x0: Array1<f64>,
    cond: ArrayView1<'_, f64>,
    steps: usize,
) -> Array1<f64> {
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = field.velocity(x.view(), t, cond);
        x.scaled_add(dt, &v);
    }
    x
}

/// [`integrate_euler`] for many states at once; row `i` of `cond` conditions row `i` of `x0`.
pub fn integrate_euler_batch(
    field: &MlpField,
    x0: Array2<f64>,
    cond: ArrayView2<'_, f64>,
    steps: usize,
) -> Array2<f64> {
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let t = Array1::from_elem(x.nrows(), k as f64 * dt);
        let v = field.velocity_batch(x.view(), t.view(), cond);
        x.scaled_add(dt, &v);
    }
    x
}

/// Generates an action chunk by integrating the field from seeded base noise,
/// conditioned on `mean_pool(hcond)`.
pub fn euler_sample(
    field: &impl VectorField,
    hcond: &FeatureSequence,
    steps: usize,
    seed: u64,
) -> Result<ActionChunk> {
    if steps == 0 {
        return Err(invalid("steps", "must be at least 1"));
    }
    if hcond.dim() != field.cond_dim() {
        return Err(Error::DimensionMismatch {
            context: "conditioning feature dimension",
            expected: field.cond_dim(),
            actual: hcond.dim(),
        });
    }
    let (k, da) = field.chunk_shape();
    let x0 = base_noise(k * da, seed);
    let x1 = integrate_euler(field, x0, hcond.mean_pool().view(), steps);
    ActionChunk::from_flat(x1, k, da)
}
