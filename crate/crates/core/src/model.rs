//! Dense softmax classifiers over flat parameter vectors.
//!
//! The loss is the mean cross-entropy of an MLP (or plain softmax
//! regression when there are no hidden layers). Gradients come from a
//! hand-written backward pass that is generic over [`Scalar`]; running the
//! same pass on forward-mode [`Dual`] numbers seeded with a parameter
//! direction `v` yields, in the tangent parts, the Hessian-vector product
//! and the mixed derivative `d/dx <v, grad_w L>` with respect to the input
//! features. The trajectory-matching meta-gradient is built from those two.
//!
//! Parameter layout: layer `j` maps `in_j -> out_j` and owns one span,
//! holding the row-major `out_j x in_j` weight matrix followed by the
//! `out_j` biases.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::params::{LayerMap, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    /// Second derivative treated as zero everywhere, so Hessian products
    /// and meta-gradients through relu layers are approximate.
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    input_dim: usize,
    layer_sizes: Vec<usize>,
    activation: Activation,
    num_classes: usize,
}

impl ModelSpec {
    /// `layer_sizes` lists every dense layer's output width; the last one is
    /// the number of classes.
    pub fn new(input_dim: usize, layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if input_dim == 0 {
            return Err(FedError::InvalidSpec("input_dim must be positive".into()));
        }
        let Some(&num_classes) = layer_sizes.last() else {
            return Err(FedError::InvalidSpec("at least one layer is required".into()));
        };
        if layer_sizes.contains(&0) {
            return Err(FedError::InvalidSpec("layer widths must be positive".into()));
        }
        if num_classes < 2 {
            return Err(FedError::InvalidSpec("need at least two classes".into()));
        }
        Ok(ModelSpec {
            input_dim,
            layer_sizes,
            activation,
            num_classes,
        })
    }

    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, vec![num_classes], Activation::Tanh)
    }

    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut sizes = hidden.to_vec();
        sizes.push(num_classes);
        Self::new(input_dim, sizes, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    fn shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ins = std::iter::once(self.input_dim).chain(self.layer_sizes.iter().copied());
        ins.zip(self.layer_sizes.iter().copied())
    }

    pub fn param_count(&self) -> usize {
        self.shapes().map(|(i, o)| o * i + o).sum()
    }

    pub fn layer_map(&self) -> LayerMap {
        let lengths: Vec<usize> = self.shapes().map(|(i, o)| o * i + o).collect();
        LayerMap::from_lengths(&lengths).expect("layer widths are positive")
    }

    /// Weights drawn from N(0, 1/fan_in), biases zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, out) in self.shapes() {
            let scale = (1.0 / fan_in as f64).sqrt();
            for _ in 0..out * fan_in {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(scale * z);
            }
            values.extend(std::iter::repeat_n(0.0, out));
        }
        ParamVector::from_parts_unchecked(values, self.layer_map())
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(FedError::DimensionMismatch {
                what: "parameters vs model spec",
                expected: self.param_count(),
                found: params.len(),
            });
        }
        if !params.is_finite() {
            return Err(FedError::NonFinite("model parameters"));
        }
        Ok(())
    }

    pub(crate) fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim != self.input_dim {
            return Err(FedError::DimensionMismatch {
                what: "batch features vs model input",
                expected: self.input_dim,
                found: batch.dim,
            });
        }
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(FedError::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }
}

/// Row-major `n x dim` features with one class label per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(FedError::EmptyDataset);
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(FedError::DimensionMismatch {
                what: "batch features",
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FedError::NonFinite("batch features"));
        }
        Ok(Batch {
            features,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `indices` gathered into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.dim)
    }

    /// Appends the rows of `other`.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if other.dim != self.dim {
            return Err(FedError::DimensionMismatch {
                what: "concatenated batch width",
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Batch {
            features,
            labels,
            dim: self.dim,
        })
    }
}

/// Outputs of one second-order pass in direction `v`.
#[derive(Clone, Debug)]
pub struct SecondOrder {
    pub loss: f64,
    pub grad: ParamVector,
    /// `H v` with `H` the parameter Hessian of the loss.
    pub hvp: ParamVector,
    /// `d/dx <v, grad_w L>` for every feature of the batch (row-major).
    pub mixed_features: Vec<f64>,
}

pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let fwd = forward(spec, params.values(), &batch.features, batch.len());
    let (loss, _) = softmax_xent(&fwd.logits, &batch.labels, spec.num_classes, false);
    Ok(loss)
}

pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let pass = backprop(spec, params.values(), &batch.features, &batch.labels, false);
    Ok((
        pass.loss,
        ParamVector::from_parts_unchecked(pass.grad_params, params.layer_map().clone()),
    ))
}

pub fn grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    loss_and_grad(spec, params, batch).map(|(_, g)| g)
}

pub fn hvp(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
) -> Result<ParamVector> {
    second_order_pass(spec, params, batch, v, false).map(|s| s.hvp)
}

/// Gradient, Hessian-vector product and mixed feature derivative in one
/// forward-over-reverse pass.
pub fn second_order(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
) -> Result<SecondOrder> {
    second_order_pass(spec, params, batch, v, true)
}

fn second_order_pass(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
    want_features: bool,
) -> Result<SecondOrder> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    if v.len() != params.len() {
        return Err(FedError::DimensionMismatch {
            what: "hvp direction",
            expected: params.len(),
            found: v.len(),
        });
    }
    let p: Vec<Dual> = params
        .values()
        .iter()
        .zip(v.values())
        .map(|(&x, &d)| Dual::new(x, d))
        .collect();
    let x: Vec<Dual> = batch.features.iter().map(|&f| Dual::cst(f)).collect();
    let pass = backprop(spec, &p, &x, &batch.labels, want_features);
    let layers = params.layer_map().clone();
    let (g, h): (Vec<f64>, Vec<f64>) = pass.grad_params.iter().map(|d| (d.v, d.d)).unzip();
    let mixed = pass
        .grad_inputs
        .map(|gi| gi.iter().map(|d| d.d).collect())
        .unwrap_or_default();
    Ok(SecondOrder {
        loss: pass.loss.v,
        grad: ParamVector::from_parts_unchecked(g, layers.clone()),
        hvp: ParamVector::from_parts_unchecked(h, layers),
        mixed_features: mixed,
    })
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let fwd = forward(spec, params.values(), &batch.features, batch.len());
    let c = spec.num_classes;
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(s, &y)| argmax(&fwd.logits[s * c..(s + 1) * c]) == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn primal(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn primal(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus(self)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// First-order forward-mode number `v + d·ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual::new(q, (self.d - q * o.d) / o.v)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        self.d += o.d;
    }
}

impl Scalar for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn primal(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (1.0 - t * t))
    }
    #[inline]
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.v);
        Dual::new(s, self.d * s * (1.0 - s))
    }
    #[inline]
    fn softplus(self) -> Self {
        Dual::new(softplus(self.v), self.d * sigmoid(self.v))
    }
}

struct Forward<T> {
    /// Inputs to each layer; `acts[0]` is the batch itself.
    acts: Vec<Vec<T>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<T>>,
    logits: Vec<T>,
}

fn forward<T: Scalar>(spec: &ModelSpec, params: &[T], x: &[T], n: usize) -> Forward<T> {
    let layers = spec.layer_sizes.len();
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(layers);
    let mut pre: Vec<Vec<T>> = Vec::with_capacity(layers.saturating_sub(1));
    acts.push(x.to_vec());
    let mut offset = 0;
    let mut logits = Vec::new();
    for (j, (fan_in, out)) in spec.shapes().enumerate() {
        let w = &params[offset..offset + out * fan_in];
        let b = &params[offset + out * fan_in..offset + out * fan_in + out];
        offset += out * fan_in + out;
        let input = &acts[j];
        let mut z = Vec::with_capacity(n * out);
        for s in 0..n {
            let row = &input[s * fan_in..(s + 1) * fan_in];
            for o in 0..out {
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += row[i] * wr[i];
                }
                z.push(acc);
            }
        }
        if j + 1 == layers {
            logits = z;
        } else {
            let a = z.iter().map(|&v| activate(spec.activation, v)).collect();
            pre.push(z);
            acts.push(a);
        }
    }
    Forward { acts, pre, logits }
}

#[inline]
fn activate<T: Scalar>(act: Activation, z: T) -> T {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Softplus => z.softplus(),
        Activation::Relu => {
            if z.primal() > 0.0 {
                z
            } else {
                T::cst(0.0)
            }
        }
    }
}

#[inline]
fn activation_slope<T: Scalar>(act: Activation, z: T, a: T) -> T {
    match act {
        Activation::Tanh => T::cst(1.0) - a * a,
        Activation::Softplus => z.sigmoid(),
        Activation::Relu => T::cst(if z.primal() > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Mean cross-entropy and, optionally, its gradient w.r.t. the logits.
fn softmax_xent<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
    want_grad: bool,
) -> (T, Vec<T>) {
    let n = labels.len();
    let inv_n = T::cst(1.0 / n as f64);
    let mut total = T::cst(0.0);
    let mut dlogits = if want_grad {
        Vec::with_capacity(logits.len())
    } else {
        Vec::new()
    };
    let mut exps = vec![T::cst(0.0); classes];
    for (s, &y) in labels.iter().enumerate() {
        let z = &logits[s * classes..(s + 1) * classes];
        let mut k = 0;
        for c in 1..classes {
            if z[c].primal() > z[k].primal() {
                k = c;
            }
        }
        let shift = z[k];
        let mut sum = T::cst(0.0);
        for c in 0..classes {
            exps[c] = (z[c] - shift).exp();
            sum += exps[c];
        }
        let lse = shift + sum.ln();
        total += lse - z[y];
        if want_grad {
            for (c, &e) in exps.iter().enumerate() {
                let p = e / sum;
                let g = if c == y { p - T::cst(1.0) } else { p };
                dlogits.push(g * inv_n);
            }
        }
    }
    (total * inv_n, dlogits)
}

struct Backprop<T> {
    loss: T,
    grad_params: Vec<T>,
    grad_inputs: Option<Vec<T>>,
}

fn backprop<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    x: &[T],
    labels: &[usize],
    want_inputs: bool,
) -> Backprop<T> {
    let n = labels.len();
    let fwd = forward(spec, params, x, n);
    let (loss, mut delta) = softmax_xent(&fwd.logits, labels, spec.num_classes, true);

    let shapes: Vec<(usize, usize)> = spec.shapes().collect();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &(i, o) in &shapes {
        offsets.push(off);
        off += o * i + o;
    }

    let mut grad = vec![T::cst(0.0); off];
    let mut grad_inputs = None;
    for j in (0..shapes.len()).rev() {
        let (fan_in, out) = shapes[j];
        let base = offsets[j];
        let input = &fwd.acts[j];
        {
            let (gw, gb) = grad[base..base + out * fan_in + out].split_at_mut(out * fan_in);
            for s in 0..n {
                let row = &input[s * fan_in..(s + 1) * fan_in];
                let ds = &delta[s * out..(s + 1) * out];
                for o in 0..out {
                    let d = ds[o];
                    gb[o] += d;
                    let gwr = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        gwr[i] += d * row[i];
                    }
                }
            }
        }
        if j == 0 && !want_inputs {
            break;
        }
        let w = &params[base..base + out * fan_in];
        let mut d_in = vec![T::cst(0.0); n * fan_in];
        for s in 0..n {
            let ds = &delta[s * out..(s + 1) * out];
            let di = &mut d_in[s * fan_in..(s + 1) * fan_in];
            for o in 0..out {
                let d = ds[o];
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    di[i] += d * wr[i];
                }
            }
        }
        if j == 0 {
            grad_inputs = Some(d_in);
            break;
        }
        let z = &fwd.pre[j - 1];
        let a = &fwd.acts[j];
        for (k, d) in d_in.iter_mut().enumerate() {
            *d = *d * activation_slope(spec.activation, z[k], a[k]);
        }
        delta = d_in;
    }
    Backprop {
        loss,
        grad_params: grad,
        grad_inputs,
    }
}

/// Loss gradient with respect to the batch features (row-major), used by
/// the finite-difference self-checks.
pub fn feature_grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let pass = backprop(spec, params.values(), &batch.features, &batch.labels, true);
    Ok(pass.grad_inputs.unwrap_or_default())
}
