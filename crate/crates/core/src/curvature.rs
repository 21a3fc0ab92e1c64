//! Curvature of the feature map on a reference dataset.
//!
//! * [`exact_ggn`]: the dense `mean_x J(x)^T J(x)` oracle for small networks.
//! * [`kfac_factors`]: per-layer Kronecker factors `A` (bias-augmented input
//!   Gram) and `G` (Gram of the backward signals of all feature outputs).
//! * [`ekfac`]: eigenbases of `A` and `G` with eigenvalues re-fitted to the
//!   per-sample gradients in that basis.
//! * [`drift_loss`] / [`drift_loss_grad`]: the quadratic drift penalty
//!   evaluated in the Kronecker eigenbasis without forming any Kronecker product.
//!
//! Backward signals are exact: one reverse pass per feature output.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arithmetic::TaskVector;
use crate::codec::{f64_le_bytes, read_artifact, sha256_hex, write_artifact, PayloadReader};
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linearize::linear_forward_raw;
use crate::net::{backward_deltas, forward_raw, forward_trace, jacobian_raw, Inputs, LayerLayout, NetworkSpec, ParameterVector};

const EKFAC_FORMAT: &str = "delta-lab/ekfac/v1";

/// Damping added to every corrected eigenvalue unless configured otherwise.
pub const DEFAULT_DAMPING: f64 = 1e-4;

/// Samples per accumulation chunk; partial sums are reduced in chunk order.
const CHUNK: usize = 64;

/// Hash of a set of inputs, used to tie curvature to its dataset.
pub fn inputs_hash(inputs: Inputs<'_>) -> String {
    let mut bytes = (inputs.dim() as u64).to_le_bytes().to_vec();
    for row in inputs.rows() {
        bytes.extend(f64_le_bytes(row));
    }
    sha256_hex(&bytes)
}

#[derive(Debug, Clone)]
pub struct DenseGgn {
    pub matrix: DMatrix<f64>,
    pub dataset_hash: String,
    pub base_hash: String,
}

fn check_dataset(spec: &NetworkSpec, theta0: &ParameterVector, inputs: Inputs<'_>) -> Result<()> {
    theta0.check(spec)?;
    if inputs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    ensure_len("input vector", spec.input_dim(), inputs.dim())?;
    for row in inputs.rows() {
        ensure_finite("dataset", row)?;
    }
    Ok(())
}

/// Sums per-chunk partial results in chunk order.
fn chunked_sum<T, F, R>(n: usize, init: F, fold: R) -> T
where
    T: Send,
    F: Fn() -> T + Sync,
    R: Fn(&mut T, usize) + Sync,
    T: std::ops::AddAssign<T>,
{
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let partials: Vec<T> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut acc = init();
            for i in s..e {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in partials {
        total += p;
    }
    total
}

/// Dense GGN `mean_x J(x)^T J(x)` of the feature map.
pub fn exact_ggn(spec: &NetworkSpec, theta0: &ParameterVector, inputs: Inputs<'_>, budget: usize) -> Result<DenseGgn> {
    check_dataset(spec, theta0, inputs)?;
    let p = spec.param_count();
    let required = spec.feature_dim() * p;
    if required > budget {
        return Err(Error::BudgetExceeded { required, allowed: budget });
    }
    let params = theta0.values();
    let mut sum = chunked_sum(
        inputs.len(),
        || DMatrix::<f64>::zeros(p, p),
        |acc, i| {
            let j = jacobian_raw(spec, params, inputs.row(i));
            acc.gemm_tr(1.0, &j, &j, 1.0);
        },
    );
    sum /= inputs.len() as f64;
    Ok(DenseGgn {
        matrix: sum,
        dataset_hash: inputs_hash(inputs),
        base_hash: theta0.content_hash(),
    })
}

/// Per-sample layer inputs (bias-augmented) and backward signals for every feature output.
struct SampleSignals {
    a: Vec<DVector<f64>>,
    /// `g[l][k]`: gradient of feature `k` w.r.t. the pre-activation of layer `l`.
    g: Vec<Vec<DVector<f64>>>,
}

fn sample_signals(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> SampleSignals {
    let trace = forward_trace(spec, params, x);
    let d = spec.feature_dim();
    let layers = spec.layers();
    let a = layers
        .iter()
        .zip(&trace.inputs)
        .map(|(l, input)| {
            let mut v = input.clone();
            if l.bias {
                v.push(1.0);
            }
            DVector::from_vec(v)
        })
        .collect();
    let mut g: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(d); layers.len()];
    let mut cot = vec![0.0; d];
    for k in 0..d {
        cot.iter_mut().for_each(|c| *c = 0.0);
        cot[k] = 1.0;
        for (li, delta) in backward_deltas(spec, params, &trace, &cot).into_iter().enumerate() {
            g[li].push(DVector::from_vec(delta));
        }
    }
    SampleSignals { a, g }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfacLayer {
    /// `d_in_aug x d_in_aug` input Gram.
    pub a: DMatrix<f64>,
    /// `d_out x d_out` backward-signal Gram.
    pub g: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfacFactors {
    pub layers: Vec<KfacLayer>,
}

struct FactorSums(Vec<KfacLayer>);

impl std::ops::AddAssign for FactorSums {
    fn add_assign(&mut self, rhs: Self) {
        for (l, r) in self.0.iter_mut().zip(rhs.0) {
            l.a += r.a;
            l.g += r.g;
        }
    }
}

pub fn kfac_factors(spec: &NetworkSpec, theta0: &ParameterVector, inputs: Inputs<'_>) -> Result<KfacFactors> {
    check_dataset(spec, theta0, inputs)?;
    let params = theta0.values();
    let layers = spec.layers();
    let init = || {
        FactorSums(
            layers
                .iter()
                .map(|l| KfacLayer {
                    a: DMatrix::zeros(l.d_in_aug(), l.d_in_aug()),
                    g: DMatrix::zeros(l.d_out, l.d_out),
                })
                .collect(),
        )
    };
    let FactorSums(mut sums) = chunked_sum(inputs.len(), init, |acc, i| {
        let sig = sample_signals(spec, params, inputs.row(i));
        for (li, layer) in acc.0.iter_mut().enumerate() {
            layer.a.ger(1.0, &sig.a[li], &sig.a[li], 1.0);
            for gk in &sig.g[li] {
                layer.g.ger(1.0, gk, gk, 1.0);
            }
        }
    });
    let inv = 1.0 / inputs.len() as f64;
    for l in &mut sums {
        l.a *= inv;
        l.g *= inv;
    }
    Ok(KfacFactors { layers: sums })
}

/// Eigendecomposition of `0.5 (M + M^T)` with eigenvalues clipped at zero.
fn sym_eigen(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite factor".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-14, 10_000).ok_or_else(|| Error::Eigen("did not converge".into()))?;
    let values = eig.eigenvalues.map(|v| v.max(0.0));
    Ok((eig.eigenvectors, values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfacLayer {
    pub u_a: DMatrix<f64>,
    pub u_g: DMatrix<f64>,
    /// Corrected eigenvalues (damping included), `d_out x d_in_aug`.
    pub s: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfacState {
    pub layers: Vec<EkfacLayer>,
    pub damping: f64,
    pub spec_hash: String,
    pub base_hash: String,
    pub dataset_hash: String,
    layout: Vec<LayerLayout>,
}

struct SSums(Vec<DMatrix<f64>>);

impl std::ops::AddAssign for SSums {
    fn add_assign(&mut self, rhs: Self) {
        for (l, r) in self.0.iter_mut().zip(rhs.0) {
            *l += r;
        }
    }
}

/// EK-FAC on `inputs` at `θ0`.
pub fn ekfac(spec: &NetworkSpec, theta0: &ParameterVector, inputs: Inputs<'_>, damping: f64) -> Result<EkfacState> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::InvalidConfig(format!("damping must be finite and >= 0, got {damping}")));
    }
    let factors = kfac_factors(spec, theta0, inputs)?;
    let bases: Vec<(DMatrix<f64>, DMatrix<f64>)> = factors
        .layers
        .iter()
        .map(|l| Ok((sym_eigen(&l.a)?.0, sym_eigen(&l.g)?.0)))
        .collect::<Result<_>>()?;
    let params = theta0.values();
    let layers = spec.layers();
    let init = || SSums(layers.iter().map(|l| DMatrix::zeros(l.d_out, l.d_in_aug())).collect());
    let SSums(sums) = chunked_sum(inputs.len(), init, |acc, i| {
        let sig = sample_signals(spec, params, inputs.row(i));
        for (li, s) in acc.0.iter_mut().enumerate() {
            let (u_a, u_g) = &bases[li];
            let q = u_a.tr_mul(&sig.a[li]);
            for gk in &sig.g[li] {
                let r = u_g.tr_mul(gk);
                for b in 0..q.len() {
                    for a in 0..r.len() {
                        let v = r[a] * q[b];
                        s[(a, b)] += v * v;
                    }
                }
            }
        }
    });
    let inv = 1.0 / inputs.len() as f64;
    let layers_out = bases
        .into_iter()
        .zip(sums)
        .map(|((u_a, u_g), s)| EkfacLayer {
            u_a,
            u_g,
            s: s.map(|v| v * inv + damping),
        })
        .collect();
    Ok(EkfacState {
        layers: layers_out,
        damping,
        spec_hash: spec.hash().to_string(),
        base_hash: theta0.content_hash(),
        dataset_hash: inputs_hash(inputs),
        layout: layers.to_vec(),
    })
}

fn layer_matrix(l: &LayerLayout, flat: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(l.d_out, l.d_in_aug(), |i, j| flat[l.aug_index(i, j)])
}

impl EkfacState {
    pub fn param_count(&self) -> usize {
        self.layout.iter().map(LayerLayout::len).sum()
    }

    pub(crate) fn drift_raw(&self, tau: &[f64]) -> f64 {
        let mut total = 0.0;
        for (l, layer) in self.layout.iter().zip(&self.layers) {
            let t = layer_matrix(l, tau);
            let r = layer.u_g.tr_mul(&t) * &layer.u_a;
            total += layer.s.iter().zip(r.iter()).map(|(s, r)| s * r * r).sum::<f64>();
        }
        total
    }

    /// Adds `scale * ∇ drift(τ)` into `out`.
    pub(crate) fn drift_grad_into(&self, tau: &[f64], scale: f64, out: &mut [f64]) {
        for (l, layer) in self.layout.iter().zip(&self.layers) {
            let t = layer_matrix(l, tau);
            let r = layer.u_g.tr_mul(&t) * &layer.u_a;
            let sr = layer.s.component_mul(&r);
            let g = &layer.u_g * sr * layer.u_a.transpose();
            for i in 0..l.d_out {
                for j in 0..l.d_in_aug() {
                    out[l.aug_index(i, j)] += scale * 2.0 * g[(i, j)];
                }
            }
        }
    }

    fn check_tau(&self, tau: &TaskVector) -> Result<()> {
        if tau.spec_hash != self.spec_hash {
            return Err(Error::HashMismatch {
                what: "network spec",
                task_id: tau.task_id.clone(),
                expected: self.spec_hash.clone(),
                found: tau.spec_hash.clone(),
            });
        }
        ensure_len("task vector", self.param_count(), tau.len())
    }

    /// Dense `P x P` block-diagonal matrix represented by this state.
    pub fn dense(&self) -> DMatrix<f64> {
        let p = self.param_count();
        let mut out = DMatrix::zeros(p, p);
        for (l, layer) in self.layout.iter().zip(&self.layers) {
            let (dout, din) = (l.d_out, l.d_in_aug());
            for a in 0..dout {
                for b in 0..din {
                    let s = layer.s[(a, b)];
                    if s == 0.0 {
                        continue;
                    }
                    let v: Vec<(usize, f64)> = (0..dout)
                        .flat_map(|i| (0..din).map(move |j| (i, j)))
                        .map(|(i, j)| (l.aug_index(i, j), layer.u_g[(i, a)] * layer.u_a[(j, b)]))
                        .collect();
                    for &(p1, v1) in &v {
                        for &(p2, v2) in &v {
                            out[(p1, p2)] += s * v1 * v2;
                        }
                    }
                }
            }
        }
        out
    }

    /// Layer-`l` block of a dense `P x P` matrix rotated into this state's
    /// Kronecker eigenbasis, returned as its diagonal shaped `d_out x d_in_aug`.
    pub fn rotated_block_diagonal(&self, dense: &DMatrix<f64>, layer: usize) -> DMatrix<f64> {
        let l = &self.layout[layer];
        let st = &self.layers[layer];
        let (dout, din) = (l.d_out, l.d_in_aug());
        DMatrix::from_fn(dout, din, |a, b| {
            let v: Vec<(usize, f64)> = (0..dout)
                .flat_map(|i| (0..din).map(move |j| (i, j)))
                .map(|(i, j)| (l.aug_index(i, j), st.u_g[(i, a)] * st.u_a[(j, b)]))
                .collect();
            let mut acc = 0.0;
            for &(p1, v1) in &v {
                for &(p2, v2) in &v {
                    acc += v1 * dense[(p1, p2)] * v2;
                }
            }
            acc
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = EkfacMeta {
            spec_hash: self.spec_hash.clone(),
            base_hash: self.base_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            damping: self.damping,
            layers: self.layout.iter().map(|l| LayerDims { d_in: l.d_in, d_out: l.d_out, bias: l.bias }).collect(),
        };
        let mut payload = Vec::new();
        for layer in &self.layers {
            for m in [&layer.u_a, &layer.u_g, &layer.s] {
                payload.extend(f64_le_bytes(&row_major(m)));
            }
        }
        write_artifact(path, EKFAC_FORMAT, &meta, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, bytes): (EkfacMeta, _) = read_artifact(path, EKFAC_FORMAT)?;
        let mut reader = PayloadReader::new(path, &bytes);
        let mut layout = Vec::new();
        let mut layers = Vec::new();
        let mut offset = 0;
        for dims in &meta.layers {
            let l = LayerLayout { d_in: dims.d_in, d_out: dims.d_out, offset, bias: dims.bias };
            offset += l.len();
            let da = l.d_in_aug();
            let u_a = DMatrix::from_row_slice(da, da, &reader.f64s(da * da, "U_A")?);
            let u_g = DMatrix::from_row_slice(l.d_out, l.d_out, &reader.f64s(l.d_out * l.d_out, "U_G")?);
            let s = DMatrix::from_row_slice(l.d_out, da, &reader.f64s(l.d_out * da, "S")?);
            layers.push(EkfacLayer { u_a, u_g, s });
            layout.push(l);
        }
        reader.finish()?;
        Ok(Self {
            layers,
            damping: meta.damping,
            spec_hash: meta.spec_hash,
            base_hash: meta.base_hash,
            dataset_hash: meta.dataset_hash,
            layout,
        })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDims {
    d_in: usize,
    d_out: usize,
    bias: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EkfacMeta {
    spec_hash: String,
    base_hash: String,
    dataset_hash: String,
    damping: f64,
    layers: Vec<LayerDims>,
}

impl KfacFactors {
    /// Dense block-diagonal `A ⊗ G` in the flat parameter layout.
    pub fn dense(&self, spec: &NetworkSpec) -> DMatrix<f64> {
        let p = spec.param_count();
        let mut out = DMatrix::zeros(p, p);
        for (l, f) in spec.layers().iter().zip(&self.layers) {
            for i in 0..l.d_out {
                for j in 0..l.d_in_aug() {
                    for i2 in 0..l.d_out {
                        for j2 in 0..l.d_in_aug() {
                            out[(l.aug_index(i, j), l.aug_index(i2, j2))] = f.a[(j, j2)] * f.g[(i, i2)];
                        }
                    }
                }
            }
        }
        out
    }
}

/// `Σ_l Σ_ab S_ab R_ab²` with `R = U_G^T T U_A`.
pub fn drift_loss(state: &EkfacState, tau: &TaskVector) -> Result<f64> {
    state.check_tau(tau)?;
    Ok(state.drift_raw(tau.values()))
}

/// Exact gradient of [`drift_loss`].
pub fn drift_loss_grad(state: &EkfacState, tau: &TaskVector) -> Result<Vec<f64>> {
    state.check_tau(tau)?;
    let mut out = vec![0.0; tau.len()];
    state.drift_grad_into(tau.values(), 1.0, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    Linearized,
    NonLinear,
}

/// `‖eval(θ0 + α τ_t + α τ_u) − eval(θ0 + α τ_t)‖²` at `x`.
pub fn representation_drift(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    tau_t: &TaskVector,
    tau_u: &TaskVector,
    alpha: f64,
    x: &[f64],
    mode: DriftMode,
) -> Result<f64> {
    theta0.check(spec)?;
    ensure_len("task vector", theta0.len(), tau_t.len())?;
    ensure_len("task vector", theta0.len(), tau_u.len())?;
    ensure_len("input vector", spec.input_dim(), x.len())?;
    let single: Vec<f64> = tau_t.values().to_vec();
    let both: Vec<f64> = tau_t.values().iter().zip(tau_u.values()).map(|(a, b)| a + b).collect();
    let (z_both, z_single) = match mode {
        DriftMode::Linearized => (
            linear_forward_raw(spec, theta0.values(), &both, x, alpha),
            linear_forward_raw(spec, theta0.values(), &single, x, alpha),
        ),
        DriftMode::NonLinear => {
            let at = |v: &[f64]| -> Vec<f64> {
                let p: Vec<f64> = theta0.values().iter().zip(v).map(|(b, t)| b + alpha * t).collect();
                forward_raw(spec, &p, x)
            };
            (at(&both), at(&single))
        }
    };
    Ok(z_both.iter().zip(&z_single).map(|(a, b)| (a - b) * (a - b)).sum())
}
