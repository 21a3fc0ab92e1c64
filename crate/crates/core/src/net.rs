//! Small feed-forward networks over flat parameter vectors.
//!
//! Parameter layout is fixed: layers in order, and within each layer the
//! weight matrix (shape `d_out x d_in`, row-major) followed by the bias
//! (length `d_out`, only when the spec has biases). The hidden activation is
//! applied after every hidden layer; the layer producing the features read by
//! the head uses the output activation, which defaults to the same function.
//!
//! Three differentiation routes are provided and are meant to agree exactly:
//! reverse mode ([`grad`], [`vjp`]), forward mode ([`jvp`]) and the dense
//! [`per_output_jacobian`] built from one reverse pass per feature.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codec::{f64_le_bytes, sha256_hex};
use crate::error::{ensure_finite, ensure_len, Error, Result};

/// Default cap on `d * P` for dense Jacobian and GGN construction.
pub const DEFAULT_DENSE_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation. ReLU uses subgradient 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SpecRepr {
    layer_dims: Vec<usize>,
    activation: Activation,
    output_activation: Activation,
    bias: bool,
}

/// Architecture of a feed-forward network `[D, h1, ..., d]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct NetworkSpec {
    layer_dims: Vec<usize>,
    activation: Activation,
    output_activation: Activation,
    bias: bool,
    layers: Vec<LayerLayout>,
    hash: String,
}

/// Location of one layer's parameters inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub d_in: usize,
    pub d_out: usize,
    pub offset: usize,
    pub bias: bool,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.d_in * self.d_out
    }

    pub fn len(&self) -> usize {
        self.weight_len() + if self.bias { self.d_out } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input width including the constant-1 coordinate when biased.
    pub fn d_in_aug(&self) -> usize {
        self.d_in + usize::from(self.bias)
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Flat index of entry `(row, col)` of the bias-augmented `d_out x d_in_aug`
    /// matrix, where column `d_in` is the bias.
    #[inline]
    pub fn aug_index(&self, row: usize, col: usize) -> usize {
        if col < self.d_in {
            self.offset + row * self.d_in + col
        } else {
            self.offset + self.weight_len() + row
        }
    }
}

impl TryFrom<SpecRepr> for NetworkSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        NetworkSpec::new(r.layer_dims, r.activation, r.bias)?.with_output_activation(r.output_activation)
    }
}

impl From<NetworkSpec> for SpecRepr {
    fn from(s: NetworkSpec) -> Self {
        SpecRepr {
            layer_dims: s.layer_dims,
            activation: s.activation,
            output_activation: s.output_activation,
            bias: s.bias,
        }
    }
}

impl NetworkSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, bias: bool) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "network needs at least an input and an output width, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must be positive, got {layer_dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(layer_dims.len() - 1);
        let mut offset = 0;
        for w in layer_dims.windows(2) {
            let l = LayerLayout {
                d_in: w[0],
                d_out: w[1],
                offset,
                bias,
            };
            offset += l.len();
            layers.push(l);
        }
        let mut spec = Self {
            layer_dims,
            activation,
            output_activation: activation,
            bias,
            layers,
            hash: String::new(),
        };
        spec.rehash();
        Ok(spec)
    }

    /// Same architecture with a different activation on the feature layer.
    pub fn with_output_activation(mut self, output: Activation) -> Result<Self> {
        self.output_activation = output;
        self.rehash();
        Ok(self)
    }

    fn rehash(&mut self) {
        let repr = SpecRepr::from(self.clone());
        self.hash = sha256_hex(serde_json::to_string(&repr).expect("spec serializes").as_bytes());
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    #[inline]
    fn layer_activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.activation
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerLayout::len).sum()
    }

    /// Content hash of the architecture.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

/// Flat parameter vector tied to a [`NetworkSpec`] by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    spec_hash: String,
}

impl ParameterVector {
    pub fn new(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        ensure_len("parameter vector", spec.param_count(), values.len())?;
        ensure_finite("parameter vector", &values)?;
        Ok(Self {
            values,
            spec_hash: spec.hash().to_string(),
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            spec_hash: spec.hash().to_string(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spec_hash(&self) -> &str {
        &self.spec_hash
    }

    /// Hash of the spec hash plus the raw 64-bit values.
    pub fn content_hash(&self) -> String {
        let mut bytes = self.spec_hash.as_bytes().to_vec();
        bytes.extend(f64_le_bytes(&self.values));
        sha256_hex(&bytes)
    }

    /// Same spec, new values. Callers guarantee the length matches.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            spec_hash: self.spec_hash.clone(),
        }
    }

    /// Rounds every entry through `f32`, the checkpoint precision.
    pub fn rounded_to_f32(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            spec_hash: self.spec_hash.clone(),
        }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        ensure_len("parameter vector", spec.param_count(), self.values.len())?;
        if self.spec_hash != spec.hash() {
            return Err(Error::HashMismatch {
                what: "network spec",
                task_id: String::new(),
                expected: spec.hash().to_string(),
                found: self.spec_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Splits a flat vector into per-layer (weights, bias) slices.
pub fn unflatten<'a>(spec: &NetworkSpec, flat: &'a [f64]) -> Vec<(&'a [f64], &'a [f64])> {
    spec.layers
        .iter()
        .map(|l| {
            let w = &flat[l.offset..l.offset + l.weight_len()];
            let b = &flat[l.offset + l.weight_len()..l.offset + l.len()];
            (w, b)
        })
        .collect()
}

/// Inverse of [`unflatten`].
pub fn flatten(parts: &[(&[f64], &[f64])]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in parts {
        out.extend_from_slice(w);
        out.extend_from_slice(b);
    }
    out
}

/// Frozen linear classification head `logits = W z + b`, with `W` stored as
/// `classes x features` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    weights: Vec<f64>,
    bias: Vec<f64>,
    features: usize,
    classes: usize,
}

impl Head {
    pub fn new(features: usize, classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if features == 0 || classes == 0 {
            return Err(Error::InvalidConfig("head dimensions must be positive".into()));
        }
        ensure_len("head weights", features * classes, weights.len())?;
        ensure_len("head bias", classes, bias.len())?;
        ensure_finite("head weights", &weights)?;
        ensure_finite("head bias", &bias)?;
        Ok(Self {
            weights,
            bias,
            features,
            classes,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self {
            weights,
            bias: vec![0.0; n],
            features: n,
            classes: n,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.features..(c + 1) * self.features];
                row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + self.bias[c]
            })
            .collect()
    }

    /// `W^T g` for a logit-space cotangent `g`.
    pub(crate) fn pullback(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.features];
        for (c, gc) in g.iter().enumerate() {
            let row = &self.weights[c * self.features..(c + 1) * self.features];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gc;
            }
        }
        out
    }
}

pub fn apply_head(head: &Head, z: &[f64]) -> Result<Vec<f64>> {
    ensure_len("feature vector", head.features, z.len())?;
    Ok(head.logits(z))
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-major view over a set of input vectors.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Inputs<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                what: "input matrix",
                expected: dim,
                actual: data.len(),
            });
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a [f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }
}

/// Objective used by [`grad`].
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// Softmax cross-entropy of `head(f(x))` against integer labels.
    CrossEntropy { head: &'a Head, labels: &'a [usize] },
    /// Squared L2 distance `||f(x) - target||^2` per sample; `targets` is row-major `n x d`.
    MseToTarget { targets: &'a [f64] },
}

/// Cached forward pass: layer inputs and pre-activations.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// `inputs[l]` is the input to layer `l` (length `d_in`).
    pub inputs: Vec<Vec<f64>>,
    /// `pre[l]` is the pre-activation of layer `l` (length `d_out`).
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub(crate) fn forward_trace(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> Trace {
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut pre = Vec::with_capacity(spec.layers.len());
    let mut h = x.to_vec();
    for (li, l) in spec.layers.iter().enumerate() {
        let act = spec.layer_activation(li);
        let w = &params[l.offset..l.offset + l.weight_len()];
        let mut z = vec![0.0; l.d_out];
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &w[i * l.d_in..(i + 1) * l.d_in];
            *zi = row.iter().zip(&h).map(|(a, b)| a * b).sum();
        }
        if l.bias {
            let b = &params[l.offset + l.weight_len()..l.offset + l.len()];
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
        }
        let next: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
        inputs.push(std::mem::replace(&mut h, next));
        pre.push(z);
    }
    Trace {
        inputs,
        pre,
        output: h,
    }
}

pub(crate) fn forward_raw(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, l) in spec.layers.iter().enumerate() {
        let act = spec.layer_activation(li);
        let w = &params[l.offset..l.offset + l.weight_len()];
        let b = if l.bias {
            &params[l.offset + l.weight_len()..l.offset + l.len()]
        } else {
            &[][..]
        };
        h = (0..l.d_out)
            .map(|i| {
                let row = &w[i * l.d_in..(i + 1) * l.d_in];
                let mut z: f64 = row.iter().zip(&h).map(|(a, b)| a * b).sum();
                if l.bias {
                    z += b[i];
                }
                act.apply(z)
            })
            .collect();
    }
    h
}

/// Reverse pass: gradients of `<cot, f(x)>` w.r.t. every layer's pre-activation.
pub(crate) fn backward_deltas(spec: &NetworkSpec, params: &[f64], trace: &Trace, cot: &[f64]) -> Vec<Vec<f64>> {
    let n = spec.layers.len();
    let mut deltas = vec![Vec::new(); n];
    let mut upstream = cot.to_vec();
    for li in (0..n).rev() {
        let l = &spec.layers[li];
        let act = spec.layer_activation(li);
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre[li])
            .map(|(u, &z)| u * act.derivative(z))
            .collect();
        if li > 0 {
            let w = &params[l.offset..l.offset + l.weight_len()];
            let mut prev = vec![0.0; l.d_in];
            for (i, di) in delta.iter().enumerate() {
                if *di == 0.0 {
                    continue;
                }
                let row = &w[i * l.d_in..(i + 1) * l.d_in];
                for (p, wij) in prev.iter_mut().zip(row) {
                    *p += wij * di;
                }
            }
            upstream = prev;
        }
        deltas[li] = delta;
    }
    deltas
}

/// Adds `scale * d<cot, f>/dθ` into `out` given the layer deltas.
pub(crate) fn accumulate_param_grad(spec: &NetworkSpec, trace: &Trace, deltas: &[Vec<f64>], scale: f64, out: &mut [f64]) {
    for (li, l) in spec.layers.iter().enumerate() {
        let a = &trace.inputs[li];
        let delta = &deltas[li];
        for (i, &di) in delta.iter().enumerate() {
            let s = scale * di;
            if s == 0.0 {
                continue;
            }
            let row = &mut out[l.offset + i * l.d_in..l.offset + (i + 1) * l.d_in];
            for (g, aj) in row.iter_mut().zip(a) {
                *g += s * aj;
            }
            if l.bias {
                out[l.offset + l.weight_len() + i] += s;
            }
        }
    }
}

/// Vector-Jacobian product `J(x)^T cot` at `params`, added into `out` with `scale`.
pub(crate) fn vjp_into(spec: &NetworkSpec, params: &[f64], x: &[f64], cot: &[f64], scale: f64, out: &mut [f64]) {
    let trace = forward_trace(spec, params, x);
    let deltas = backward_deltas(spec, params, &trace, cot);
    accumulate_param_grad(spec, &trace, &deltas, scale, out);
}

/// Forward-mode pass propagating a parameter-space tangent. Returns `(f(x), J(x) v)`.
pub(crate) fn forward_with_tangent(spec: &NetworkSpec, params: &[f64], x: &[f64], tangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h = x.to_vec();
    let mut dh = vec![0.0; x.len()];
    for (li, l) in spec.layers.iter().enumerate() {
        let act = spec.layer_activation(li);
        let w = &params[l.offset..l.offset + l.weight_len()];
        let dw = &tangent[l.offset..l.offset + l.weight_len()];
        let mut z = vec![0.0; l.d_out];
        let mut dz = vec![0.0; l.d_out];
        for i in 0..l.d_out {
            let row = &w[i * l.d_in..(i + 1) * l.d_in];
            let drow = &dw[i * l.d_in..(i + 1) * l.d_in];
            let mut acc = 0.0;
            let mut dacc = 0.0;
            for j in 0..l.d_in {
                acc += row[j] * h[j];
                dacc += drow[j] * h[j] + row[j] * dh[j];
            }
            if l.bias {
                acc += params[l.offset + l.weight_len() + i];
                dacc += tangent[l.offset + l.weight_len() + i];
            }
            z[i] = acc;
            dz[i] = dacc;
        }
        h = z.iter().map(|&v| act.apply(v)).collect();
        dh = z.iter().zip(&dz).map(|(&v, &dv)| act.derivative(v) * dv).collect();
    }
    (h, dh)
}

fn check_input(spec: &NetworkSpec, x: &[f64]) -> Result<()> {
    ensure_len("input vector", spec.input_dim(), x.len())?;
    ensure_finite("input vector", x)
}

/// Penultimate representation `f(x; θ)`.
pub fn forward(spec: &NetworkSpec, theta: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
    theta.check(spec)?;
    check_input(spec, x)?;
    Ok(forward_raw(spec, theta.values(), x))
}

/// Exact `J_θ f(x; θ0) v` by forward-mode propagation.
pub fn jvp(spec: &NetworkSpec, theta0: &ParameterVector, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    theta0.check(spec)?;
    check_input(spec, x)?;
    ensure_len("direction", spec.param_count(), v.len())?;
    Ok(forward_with_tangent(spec, theta0.values(), x, v).1)
}

/// `J_θ f(x; θ)^T cot` by one reverse pass.
pub fn vjp(spec: &NetworkSpec, theta: &ParameterVector, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
    theta.check(spec)?;
    check_input(spec, x)?;
    ensure_len("cotangent", spec.feature_dim(), cot.len())?;
    let mut out = vec![0.0; spec.param_count()];
    vjp_into(spec, theta.values(), x, cot, 1.0, &mut out);
    Ok(out)
}

/// Numerically stable softmax cross-entropy. Returns `(loss, dloss/dlogits)`.
pub(crate) fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    g[label] -= 1.0;
    (loss, g)
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    Ok(())
}

/// Mean-over-batch loss and its gradient w.r.t. θ.
pub fn grad(spec: &NetworkSpec, theta: &ParameterVector, inputs: Inputs<'_>, loss: Loss<'_>) -> Result<(f64, Vec<f64>)> {
    theta.check(spec)?;
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    ensure_len("input vector", spec.input_dim(), inputs.dim())?;
    ensure_finite("batch inputs", inputs.data)?;
    let n = inputs.len();
    match loss {
        Loss::CrossEntropy { head, labels } => {
            ensure_len("labels", n, labels.len())?;
            ensure_len("head features", spec.feature_dim(), head.features())?;
            check_labels(labels, head.classes())?;
        }
        Loss::MseToTarget { targets } => {
            ensure_len("targets", n * spec.feature_dim(), targets.len())?;
        }
    }
    Ok(grad_raw(spec, theta.values(), inputs, loss))
}

pub(crate) fn grad_raw(spec: &NetworkSpec, params: &[f64], inputs: Inputs<'_>, loss: Loss<'_>) -> (f64, Vec<f64>) {
    let n = inputs.len();
    let d = spec.feature_dim();
    let scale = 1.0 / n as f64;
    let mut out = vec![0.0; spec.param_count()];
    let mut total = 0.0;
    for (i, x) in inputs.rows().enumerate() {
        let trace = forward_trace(spec, params, x);
        let cot = match loss {
            Loss::CrossEntropy { head, labels } => {
                let (l, g) = softmax_cross_entropy(&head.logits(&trace.output), labels[i]);
                total += l;
                head.pullback(&g)
            }
            Loss::MseToTarget { targets } => {
                let t = &targets[i * d..(i + 1) * d];
                let diff: Vec<f64> = trace.output.iter().zip(t).map(|(a, b)| a - b).collect();
                total += diff.iter().map(|v| v * v).sum::<f64>();
                diff.iter().map(|v| 2.0 * v).collect()
            }
        };
        let deltas = backward_deltas(spec, params, &trace, &cot);
        accumulate_param_grad(spec, &trace, &deltas, scale, &mut out);
    }
    (total * scale, out)
}

/// Dense `d x P` Jacobian of the features at `x`, one reverse pass per row.
pub fn per_output_jacobian(spec: &NetworkSpec, theta0: &ParameterVector, x: &[f64], budget: usize) -> Result<DMatrix<f64>> {
    theta0.check(spec)?;
    check_input(spec, x)?;
    let d = spec.feature_dim();
    let p = spec.param_count();
    if d * p > budget {
        return Err(Error::BudgetExceeded {
            required: d * p,
            allowed: budget,
        });
    }
    Ok(jacobian_raw(spec, theta0.values(), x))
}

pub(crate) fn jacobian_raw(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> DMatrix<f64> {
    let d = spec.feature_dim();
    let p = spec.param_count();
    let trace = forward_trace(spec, params, x);
    let mut jac = DMatrix::zeros(d, p);
    let mut cot = vec![0.0; d];
    let mut row = vec![0.0; p];
    for k in 0..d {
        cot.iter_mut().for_each(|c| *c = 0.0);
        cot[k] = 1.0;
        row.iter_mut().for_each(|r| *r = 0.0);
        let deltas = backward_deltas(spec, params, &trace, &cot);
        accumulate_param_grad(spec, &trace, &deltas, 1.0, &mut row);
        for (j, v) in row.iter().enumerate() {
            jac[(k, j)] = *v;
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Straight-line dense oracle for a biased tanh net with weights given per layer.
    fn dense_oracle(dims: &[usize], flat: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut off = 0;
        for w in dims.windows(2) {
            let (din, dout) = (w[0], w[1]);
            let wm = DMatrix::from_row_slice(dout, din, &flat[off..off + din * dout]);
            off += din * dout;
            let b = nalgebra::DVector::from_column_slice(&flat[off..off + dout]);
            off += dout;
            let z = wm * nalgebra::DVector::from_column_slice(&h) + b;
            h = z.iter().map(|v| v.tanh()).collect();
        }
        h
    }

    #[test]
    fn identity_net_is_identity() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Identity, false).unwrap();
        let theta = ParameterVector::new(&spec, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(forward(&spec, &theta, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negative_outputs() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Relu, false).unwrap();
        let theta = ParameterVector::new(&spec, vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(forward(&spec, &theta, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn tanh_forward_matches_dense_oracle() {
        let dims = [16, 8, 3];
        let spec = NetworkSpec::new(dims.to_vec(), Activation::Tanh, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta = ParameterVector::new(&spec, random_vec(&mut rng, spec.param_count(), 0.5)).unwrap();
        let x = random_vec(&mut rng, 16, 1.0);
        let got = forward(&spec, &theta, &x).unwrap();
        let want = dense_oracle(&dims, theta.values(), &x);
        for (g, w) in got.iter().zip(&want) {
            assert!(rel_err(*g, *w) <= 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let spec = NetworkSpec::new(vec![3, 2], Activation::Tanh, true).unwrap();
        let theta = ParameterVector::zeros(&spec);
        match forward(&spec, &theta, &[1.0, 2.0]) {
            Err(Error::DimensionMismatch { expected, actual, .. }) => {
                assert_eq!((expected, actual), (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            forward(&spec, &theta, &[1.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn apply_head_examples() {
        let head = Head::identity(2);
        assert_eq!(apply_head(&head, &[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        let head = Head::new(2, 3, vec![0.3; 6], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(apply_head(&head, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(apply_head(&head, &[0.0]).is_err());
    }

    #[test]
    fn apply_head_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, c) = (5, 4);
        let w = random_vec(&mut rng, d * c, 1.0);
        let b = random_vec(&mut rng, c, 1.0);
        let z = random_vec(&mut rng, d, 1.0);
        let head = Head::new(d, c, w.clone(), b.clone()).unwrap();
        let want = DMatrix::from_row_slice(c, d, &w) * nalgebra::DVector::from_column_slice(&z)
            + nalgebra::DVector::from_column_slice(&b);
        let got = apply_head(&head, &z).unwrap();
        for k in 0..c {
            assert_relative_eq!(got[k], want[k], max_relative = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for output in [Activation::Tanh, Activation::Identity] {
            gradient_matches_central_differences_with(output);
        }
    }

    fn gradient_matches_central_differences_with(output: Activation) {
        let spec = NetworkSpec::new(vec![4, 5, 3], Activation::Tanh, true).unwrap().with_output_activation(output).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = ParameterVector::new(&spec, random_vec(&mut rng, spec.param_count(), 0.8)).unwrap();
        let xs = random_vec(&mut rng, 4 * 6, 1.5);
        let inputs = Inputs::new(&xs, 4).unwrap();
        let targets = random_vec(&mut rng, 3 * 6, 1.0);
        let head = Head::new(3, 3, random_vec(&mut rng, 9, 1.0), random_vec(&mut rng, 3, 0.2)).unwrap();
        let labels = [0, 1, 2, 2, 1, 0];
        for loss in [
            Loss::MseToTarget { targets: &targets },
            Loss::CrossEntropy { head: &head, labels: &labels },
        ] {
            let (_, g) = grad(&spec, &theta, inputs, loss).unwrap();
            let h = 1e-4;
            for j in 0..spec.param_count() {
                let mut p = theta.values().to_vec();
                p[j] += h;
                let up = grad_raw(&spec, &p, inputs, loss).0;
                p[j] -= 2.0 * h;
                let dn = grad_raw(&spec, &p, inputs, loss).0;
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - g[j]).abs() <= 1e-3 * fd.abs().max(g[j].abs()).max(1e-6),
                    "coord {j}: fd {fd} vs analytic {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_interpolating_optimum() {
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = ParameterVector::new(&spec, random_vec(&mut rng, spec.param_count(), 1.0)).unwrap();
        let xs = random_vec(&mut rng, 9, 1.0);
        let inputs = Inputs::new(&xs, 3).unwrap();
        let targets: Vec<f64> = inputs.rows().flat_map(|x| forward_raw(&spec, theta.values(), x)).collect();
        let (loss, g) = grad(&spec, &theta, inputs, Loss::MseToTarget { targets: &targets }).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-8);
    }

    #[test]
    fn single_sample_batch_equals_per_sample_gradient() {
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Relu, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = ParameterVector::new(&spec, random_vec(&mut rng, spec.param_count(), 1.0)).unwrap();
        let x = random_vec(&mut rng, 3, 1.0);
        let head = Head::identity(2);
        let (_, g) = grad(&spec, &theta, Inputs::new(&x, 3).unwrap(), Loss::CrossEntropy { head: &head, labels: &[1] }).unwrap();
        let logits = head.logits(&forward_raw(&spec, theta.values(), &x));
        let (_, gl) = softmax_cross_entropy(&logits, 1);
        let per_sample = vjp(&spec, &theta, &x, &head.pullback(&gl)).unwrap();
        assert_eq!(g, per_sample);
    }

    #[test]
    fn grad_errors() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Tanh, true).unwrap();
        let theta = ParameterVector::zeros(&spec);
        let head = Head::identity(2);
        assert!(matches!(
            grad(&spec, &theta, Inputs::new(&[], 2).unwrap(), Loss::CrossEntropy { head: &head, labels: &[] }),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            grad(&spec, &theta, Inputs::new(&[0.0, 1.0], 2).unwrap(), Loss::CrossEntropy { head: &head, labels: &[2] }),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn jvp_of_linear_map_is_delta_w_times_x() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Identity, false).unwrap();
        let theta = ParameterVector::new(&spec, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(jvp(&spec, &theta, &[1.0, 2.0], &v).unwrap(), vec![2.0, 0.0]);
        assert_eq!(jvp(&spec, &theta, &[1.0, 2.0], &[0.0; 4]).unwrap(), vec![0.0, 0.0]);
        assert!(jvp(&spec, &theta, &[1.0, 2.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn jvp_matches_central_differences() {
        for output in [Activation::Tanh, Activation::Identity] {
            jvp_matches_central_differences_with(output);
        }
    }

    fn jvp_matches_central_differences_with(output: Activation) {
        let spec = NetworkSpec::new(vec![5, 6, 4], Activation::Tanh, true).unwrap().with_output_activation(output).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = random_vec(&mut rng, spec.param_count(), 0.7);
        let x = random_vec(&mut rng, 5, 1.0);
        let v = random_vec(&mut rng, spec.param_count(), 1.0);
        let eps = 1e-4;
        let plus: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a - eps * b).collect();
        let fp = forward_raw(&spec, &plus, &x);
        let fm = forward_raw(&spec, &minus, &x);
        let theta = ParameterVector::new(&spec, theta).unwrap();
        let got = jvp(&spec, &theta, &x, &v).unwrap();
        for k in 0..4 {
            let fd = (fp[k] - fm[k]) / (2.0 * eps);
            assert!(rel_err(got[k], fd) <= 1e-3);
        }
    }

    #[test]
    fn jacobian_of_linear_layer_is_input() {
        let spec = NetworkSpec::new(vec![2, 1], Activation::Identity, false).unwrap();
        let theta = ParameterVector::new(&spec, vec![0.3, -0.7]).unwrap();
        let j = per_output_jacobian(&spec, &theta, &[1.0, 2.0], DEFAULT_DENSE_BUDGET).unwrap();
        assert_eq!(j.row(0).iter().cloned().collect::<Vec<_>>(), vec![1.0, 2.0]);
    }

    #[test]
    fn jacobian_agrees_with_jvp() {
        for output in [Activation::Tanh, Activation::Identity] {
            jacobian_agrees_with_jvp_with(output);
        }
    }

    fn jacobian_agrees_with_jvp_with(output: Activation) {
        let spec = NetworkSpec::new(vec![4, 6, 3], Activation::Tanh, true).unwrap().with_output_activation(output).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let theta = ParameterVector::new(&spec, random_vec(&mut rng, spec.param_count(), 0.8)).unwrap();
        let x = random_vec(&mut rng, 4, 1.0);
        let j = per_output_jacobian(&spec, &theta, &x, DEFAULT_DENSE_BUDGET).unwrap();
        for _ in 0..10 {
            let v = random_vec(&mut rng, spec.param_count(), 1.0);
            let jv = &j * nalgebra::DVector::from_column_slice(&v);
            let want = jvp(&spec, &theta, &x, &v).unwrap();
            for k in 0..3 {
                assert!(rel_err(jv[k], want[k]) <= 1e-6);
            }
        }
    }

    #[test]
    fn relu_kink_uses_zero_subgradient_in_both_modes() {
        // Pre-activation of the single unit is exactly zero at x = (1, 1).
        let spec = NetworkSpec::new(vec![2, 1], Activation::Relu, false).unwrap();
        let theta = ParameterVector::new(&spec, vec![1.0, -1.0]).unwrap();
        let x = [1.0, 1.0];
        let j = per_output_jacobian(&spec, &theta, &x, DEFAULT_DENSE_BUDGET).unwrap();
        assert_eq!(j.row(0).iter().cloned().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(jvp(&spec, &theta, &x, &[1.0, 0.5]).unwrap(), vec![0.0]);
    }

    #[test]
    fn jacobian_budget_is_enforced() {
        let spec = NetworkSpec::new(vec![4, 3], Activation::Tanh, true).unwrap();
        let theta = ParameterVector::zeros(&spec);
        match per_output_jacobian(&spec, &theta, &[0.0; 4], 10) {
            Err(Error::BudgetExceeded { required, allowed }) => assert_eq!((required, allowed), (45, 10)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![3], Activation::Tanh, true).is_err());
        assert!(NetworkSpec::new(vec![3, 0], Activation::Tanh, true).is_err());
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh, true).unwrap();
        assert_eq!(spec.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        let json = serde_json::to_string(&spec).unwrap();
        let back: NetworkSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flatten_unflatten_round_trips(seed in 0u64..1000, bias in any::<bool>()) {
                let spec = NetworkSpec::new(vec![3, 5, 2], Activation::Tanh, bias).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let flat = random_vec(&mut rng, spec.param_count(), 10.0);
                let back = flatten(&unflatten(&spec, &flat));
                prop_assert_eq!(
                    back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    flat.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }

            #[test]
            fn jvp_is_linear_in_direction(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh, true).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let theta = ParameterVector::new(&spec, random_vec(&mut rng, spec.param_count(), 1.0)).unwrap();
                let x = random_vec(&mut rng, 3, 1.0);
                let v1 = random_vec(&mut rng, spec.param_count(), 1.0);
                let v2 = random_vec(&mut rng, spec.param_count(), 1.0);
                let mix: Vec<f64> = v1.iter().zip(&v2).map(|(p, q)| a * p + b * q).collect();
                let lhs = jvp(&spec, &theta, &x, &mix).unwrap();
                let j1 = jvp(&spec, &theta, &x, &v1).unwrap();
                let j2 = jvp(&spec, &theta, &x, &v2).unwrap();
                for k in 0..2 {
                    let rhs = a * j1[k] + b * j2[k];
                    prop_assert!((lhs[k] - rhs).abs() <= 1e-6 * lhs[k].abs().max(rhs.abs()).max(1e-6));
                }
            }

            #[test]
            fn single_layer_identity_net_is_exactly_linear(seed in 0u64..500, bias in any::<bool>()) {
                let spec = NetworkSpec::new(vec![4, 3], Activation::Identity, bias).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let theta = random_vec(&mut rng, spec.param_count(), 1.0);
                let v = random_vec(&mut rng, spec.param_count(), 1.0);
                let x = random_vec(&mut rng, 4, 2.0);
                let moved: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + b).collect();
                let f0 = forward_raw(&spec, &theta, &x);
                let f1 = forward_raw(&spec, &moved, &x);
                let theta = ParameterVector::new(&spec, theta).unwrap();
                let jv = jvp(&spec, &theta, &x, &v).unwrap();
                for k in 0..3 {
                    let lhs = f1[k] - f0[k];
                    prop_assert!((lhs - jv[k]).abs() <= 1e-6 * lhs.abs().max(jv[k].abs()).max(1.0));
                }
            }
        }
    }
}
