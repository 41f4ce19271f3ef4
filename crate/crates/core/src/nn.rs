//! Fully connected tanh networks with exact reverse-mode gradients and Adam.
//!
//! `phi(x) = A_L tanh(A_{L-1} tanh(... tanh(A_1 x + b_1) ...) + b_{L-1}) + b_L`
//!
//! Parameters live in one flat buffer, layer by layer: the weight matrix
//! `A_l` (row-major, `d_l x d_{l-1}`) followed by the bias `b_l`. Gradients
//! use the same layout, so optimizers and Polyak averaging work elementwise.
//!
//! Batches are row-major `n x d` matrices, one sample per row.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::env::Policy;
use crate::error::{Error, Result};

/// Layer widths `[d_0, d_1, ..., d_L]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "network needs at least one layer and positive widths, got {layer_dims:?}"
            )));
        }
        Ok(Self { layer_dims })
    }

    /// `input -> hidden... -> output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        Self::new(dims)
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            dims: spec.layer_dims.clone(),
            data: vec![0.0; spec.num_params()],
        }
    }

    /// Same shape as `self`, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn from_flat(spec: &MlpSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.num_params() {
            return Err(Error::ShapeMismatch {
                expected: spec.num_params(),
                got: data.len(),
            });
        }
        Ok(Self {
            dims: spec.layer_dims.clone(),
            data,
        })
    }

    /// Hidden weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with zero hidden
    /// biases; the output layer's weights and bias ~ U(-halfwidth, halfwidth).
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, final_layer_halfwidth: f64, rng: &mut R) -> Result<Self> {
        if !(final_layer_halfwidth > 0.0) {
            return Err(Error::InvalidConfig(
                "final_layer_halfwidth must be positive".into(),
            ));
        }
        let mut params = Self::zeros(spec);
        let layers = params.num_layers();
        for l in 0..layers {
            let fan_in = params.dims[l];
            let (w, b) = params.layer_mut(l);
            if l + 1 == layers {
                for v in w.iter_mut().chain(b.iter_mut()) {
                    *v = rng.random_range(-final_layer_halfwidth..final_layer_halfwidth);
                }
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in w.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(params)
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            layer_dims: self.dims.clone(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.dims[..=l]
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// `(A_l, b_l)` for zero-based layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let start = self.layer_offset(l);
        let (din, dout) = (self.dims[l], self.dims[l + 1]);
        let (w, rest) = self.data[start..].split_at(din * dout);
        (w, &rest[..dout])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let start = self.layer_offset(l);
        let (din, dout) = (self.dims[l], self.dims[l + 1]);
        let (w, rest) = self.data[start..].split_at_mut(din * dout);
        (w, &mut rest[..dout])
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    /// Single-sample forward pass without heap allocation for widths up to 64.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim());
        debug_assert_eq!(out.len(), self.output_dim());
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: feature detected at runtime.
                return unsafe { simd::forward_avx512(self, x, out) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: feature detected at runtime.
                return unsafe { simd::forward_avx2(self, x, out) };
            }
        }
        self.forward_generic(x, out)
    }

    #[inline(always)]
    fn forward_generic(&self, x: &[f64], out: &mut [f64]) {
        let mut cur: SmallVec<[f64; 64]> = SmallVec::from_slice(x);
        let mut next: SmallVec<[f64; 64]> = SmallVec::new();
        let layers = self.num_layers();
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let din = self.dims[l];
            next.clear();
            next.extend(
                w.chunks_exact(din)
                    .zip(b)
                    .map(|(row, &bias)| bias + dot(row, &cur)),
            );
            if l + 1 < layers {
                tanh_slice_generic(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        out.copy_from_slice(&cur);
    }

    /// Scalar network `R -> R`.
    #[inline]
    pub fn forward_scalar(&self, x: f64) -> f64 {
        let mut out = [0.0];
        self.forward_into(&[x], &mut out);
        out[0]
    }

    /// Scalar network `R^2 -> R`.
    #[inline]
    pub fn forward_pair(&self, x0: f64, x1: f64) -> f64 {
        let mut out = [0.0];
        self.forward_into(&[x0, x1], &mut out);
        out[0]
    }

    /// Batched forward pass; `x` is `n x d_0` row-major.
    pub fn forward_batch(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, n)?.output().to_vec())
    }

    /// Batched forward pass keeping every layer's activations for `backward_cached`.
    pub fn forward_cached(&self, x: &[f64], n: usize) -> Result<ForwardCache> {
        if x.len() != n * self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: n * self.input_dim(),
                got: x.len(),
            });
        }
        let layers = self.num_layers();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let mut z = vec![0.0; n * dout];
            for row in z.chunks_exact_mut(dout) {
                row.copy_from_slice(b);
            }
            // Z += X W^T
            gemm(n, din, dout, &acts[l], din, 1, w, 1, din, &mut z, dout, 1, 1.0);
            if l + 1 < layers {
                tanh_in_place(&mut z);
            }
            acts.push(z);
        }
        Ok(ForwardCache { n, acts })
    }

    /// Reverse pass for a batch. Returns the gradient of
    /// `sum_k upstream_k . phi(x_k)` with respect to the parameters (if
    /// `param_grads`) and with respect to each input row (if `input_grads`).
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        param_grads: bool,
        input_grads: bool,
    ) -> Result<BatchGrads> {
        let n = cache.n;
        if upstream.len() != n * self.output_dim() {
            return Err(Error::ShapeMismatch {
                expected: n * self.output_dim(),
                got: upstream.len(),
            });
        }
        let layers = self.num_layers();
        let mut grads = param_grads.then(|| self.zeros_like());
        let mut delta = upstream.to_vec();
        let mut input = None;
        for l in (0..layers).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let a_prev = &cache.acts[l];
            if let Some(g) = grads.as_mut() {
                let (gw, gb) = g.layer_mut(l);
                // dA_l = delta^T A_{l-1}
                gemm(dout, n, din, &delta, 1, dout, a_prev, din, 1, gw, din, 1, 0.0);
                for row in delta.chunks_exact(dout) {
                    for (acc, d) in gb.iter_mut().zip(row) {
                        *acc += d;
                    }
                }
            }
            if l == 0 && !input_grads {
                break;
            }
            let (w, _) = self.layer(l);
            let mut prev = vec![0.0; n * din];
            // delta_{l-1} = delta_l W_l
            gemm(n, dout, din, &delta, dout, 1, w, din, 1, &mut prev, din, 1, 0.0);
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(a_prev) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            } else {
                input = Some(prev);
            }
        }
        Ok(BatchGrads {
            params: grads,
            inputs: input,
        })
    }

    /// Single-sample reverse pass: gradients of `upstream . phi(x)` with
    /// respect to the parameters and the input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let cache = self.forward_cached(x, 1)?;
        let g = self.backward_cached(&cache, upstream, true, true)?;
        Ok((g.params.expect("requested"), g.inputs.expect("requested")))
    }

    /// Text checkpoint: a header with the layer widths, then every weight
    /// matrix row and bias vector in layer order. Values use the shortest
    /// representation that parses back to the identical `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "mlp-params v1");
        let _ = writeln!(out, "dims {}", dims.join(" "));
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let din = self.dims[l];
            let _ = writeln!(out, "layer {} weights {}x{}", l + 1, self.dims[l + 1], din);
            for row in w.chunks_exact(din) {
                let _ = writeln!(out, "{}", join_floats(row));
            }
            let _ = writeln!(out, "layer {} bias {}", l + 1, self.dims[l + 1]);
            let _ = writeln!(out, "{}", join_floats(b));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::ParseParams(msg.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("mlp-params v1") {
            return Err(bad("missing 'mlp-params v1' header"));
        }
        let dims_line = lines.next().ok_or_else(|| bad("missing dims line"))?;
        let dims = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| bad("expected 'dims ...'"))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad("bad layer width")))
            .collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(dims)?;
        let mut data = Vec::with_capacity(spec.num_params());
        for l in 0..spec.layer_dims.len() - 1 {
            let (din, dout) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            lines.next().ok_or_else(|| bad("missing weights header"))?;
            for _ in 0..dout {
                let row = lines.next().ok_or_else(|| bad("missing weight row"))?;
                let before = data.len();
                parse_floats(row, &mut data)?;
                if data.len() - before != din {
                    return Err(bad("weight row has the wrong length"));
                }
            }
            lines.next().ok_or_else(|| bad("missing bias header"))?;
            let row = lines.next().ok_or_else(|| bad("missing bias row"))?;
            let before = data.len();
            parse_floats(row, &mut data)?;
            if data.len() - before != dout {
                return Err(bad("bias row has the wrong length"));
            }
        }
        Self::from_flat(&spec, data)
    }
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_floats(line: &str, out: &mut Vec<f64>) -> Result<()> {
    for tok in line.split_whitespace() {
        out.push(
            tok.parse::<f64>()
                .map_err(|_| Error::ParseParams(format!("bad number '{tok}'")))?,
        );
    }
    Ok(())
}

/// A one-dimensional network is a feedback policy.
impl Policy for MlpParams {
    #[inline]
    fn action(&self, s: f64) -> f64 {
        self.forward_scalar(s)
    }
}

/// Activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    /// `acts[0]` is the input, `acts[L]` the output.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least the input layer")
    }
}

#[derive(Debug, Clone)]
pub struct BatchGrads {
    /// Summed over the batch.
    pub params: Option<MlpParams>,
    /// Per sample, `n x d_0`.
    pub inputs: Option<Vec<f64>>,
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent accumulators over exact chunks so the loop vectorizes.
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `tanh` within a few ulp of `f64::tanh`, written branch-free so that loops
/// over it vectorize. The activation dominates the cost of these narrow
/// networks. Every code path (scalar, AVX2, AVX-512) produces identical bits.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let ax = x.abs();
    let e = exp_nonpositive(-2.0 * ax);
    let closed = (1.0 - e) / (1.0 + e);
    // series near zero, where the closed form cancels
    let x2 = x * x;
    let series = ax
        * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0)))));
    let m = if ax < 1e-2 { series } else { closed };
    let m = if x.is_nan() { x } else { m };
    m.copysign(x)
}

/// `exp(x)` for `x <= 0`; arguments below -40 are clamped (exp(-40) < 5e-18).
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    // round-to-nearest through the mantissa; the low bits of `kf` then hold k
    const SHIFTER: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let x = if x < -40.0 { -40.0 } else { x };
    let kf = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = kf - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor polynomial of degree 12 on |r| <= ln2 / 2
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits((kf.to_bits() as i64).wrapping_add(1023).wrapping_shl(52) as u64);
    p * scale
}

#[inline(always)]
fn tanh_slice_generic(xs: &mut [f64]) {
    for v in xs {
        *v = tanh(*v);
    }
}

/// Applies [`tanh`] elementwise, using the widest SIMD the CPU offers.
pub fn tanh_in_place(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected at runtime.
            return unsafe { simd::tanh_avx512(xs) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature detected at runtime.
            return unsafe { simd::tanh_avx2(xs) };
        }
    }
    tanh_slice_generic(xs)
}

/// Feature-gated copies of the hot loops. Rust never contracts `a * b + c`
/// into an FMA on its own, so these compute exactly what the portable code does.
#[cfg(target_arch = "x86_64")]
mod simd {
    use super::MlpParams;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn tanh_avx512(xs: &mut [f64]) {
        super::tanh_slice_generic(xs)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn tanh_avx2(xs: &mut [f64]) {
        super::tanh_slice_generic(xs)
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn forward_avx512(p: &MlpParams, x: &[f64], out: &mut [f64]) {
        p.forward_generic(x, out)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn forward_avx2(p: &MlpParams, x: &[f64], out: &mut [f64]) {
        p.forward_generic(x, out)
    }
}

/// `C = A B + beta C` with arbitrary strides; thin wrapper over
/// `matrixmultiply::dgemm` that checks every accessed index is in bounds.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Adam with bias-corrected moments. `step` descends along the gradient;
/// negate the gradient to ascend.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<()> {
        params.check_same_shape(grads)?;
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .data
            .iter_mut()
            .zip(&grads.data)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use rand_chacha::ChaCha8Rng;

    fn random_net(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> MlpParams {
        let spec = MlpSpec::new(dims).unwrap();
        let mut p = MlpParams::init(&spec, 0.5, rng).unwrap();
        // hidden biases start at zero; randomize them so the test covers them
        for v in p.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
        p
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-3))
    }

    #[test]
    fn tanh_matches_std() {
        let mut worst: f64 = 0.0;
        let mut x = -30.0;
        while x < 30.0 {
            let (a, b) = (tanh(x), x.tanh());
            worst = worst.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
            x += 1.7e-4;
        }
        assert!(worst < 1e-14, "relative error {worst}");
        for x in [0.0, -0.0, 1e-300, -1e-9, 0.01, 800.0, -800.0] {
            assert!((tanh(x) - x.tanh()).abs() <= 1e-14 * x.tanh().abs());
        }
        assert!(tanh(f64::NAN).is_nan());
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 7.0).collect();
        let mut ys = xs.clone();
        tanh_in_place(&mut ys);
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(tanh(*x).to_bits(), y.to_bits());
        }
    }

    #[test]
    fn param_count_and_layout() {
        let spec = MlpSpec::new(vec![1, 32, 32, 1]).unwrap();
        assert_eq!(spec.num_params(), 32 + 32 + 32 * 32 + 32 + 32 + 1);
        let p = MlpParams::zeros(&spec);
        let (w, b) = p.layer(1);
        assert_eq!((w.len(), b.len()), (1024, 32));
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1]).is_err());
    }

    #[test]
    fn linear_layer_is_affine() {
        let spec = MlpSpec::new(vec![2, 3]).unwrap();
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5, 1.5];
        let p = MlpParams::from_flat(&spec, data).unwrap();
        let y = p.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![-1.0 + 0.5, -1.0 - 0.5, -1.0 + 1.5]);
        let (_, gx) = p.backward(&[1.0, -1.0], &[1.0, 2.0, 3.0]).unwrap();
        // A^T u
        assert_eq!(gx, vec![1.0 + 6.0 + 15.0, 2.0 + 8.0 + 18.0]);
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let spec = MlpSpec::new(vec![1, 4, 1]).unwrap();
        let mut p = MlpParams::zeros(&spec);
        p.layer_mut(1).1[0] = 0.37;
        for x in [-3.0, 0.0, 2.0] {
            assert_eq!(p.forward_scalar(x), 0.37);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = MlpParams::zeros(&MlpSpec::new(vec![2, 3, 1]).unwrap());
        assert!(p.forward(&[1.0]).is_err());
        assert!(p.backward(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(p.forward_batch(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn final_layer_bound_and_determinism() {
        let spec = MlpSpec::new(vec![1, 32, 32, 1]).unwrap();
        let key = StreamKey::new(9, Purpose::Init, 0);
        let a = MlpParams::init(&spec, 1e-2, &mut key.rng(0)).unwrap();
        let b = MlpParams::init(&spec, 1e-2, &mut key.rng(0)).unwrap();
        let c = MlpParams::init(&spec, 1e-2, &mut key.rng(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1e-2 * (32.0 + 1.0);
        let mut rng = key.rng(2);
        for _ in 0..1000 {
            let x = rng.random_range(-10.0..10.0);
            assert!(a.forward_scalar(x).abs() <= bound);
        }
        // hidden biases start at zero, so x = 0 gives zero first-layer activations
        let (_, b1) = a.layer(0);
        assert!(b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_forward_matches_single_forward() {
        let mut rng = StreamKey::new(10, Purpose::Init, 0).rng(0);
        let p = random_net(vec![2, 16, 8, 3], &mut rng);
        let n = 37;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let batch = p.forward_batch(&x, n).unwrap();
        for k in 0..n {
            let single = p.forward(&x[2 * k..2 * k + 2]).unwrap();
            for j in 0..3 {
                assert!((single[j] - batch[3 * k + j]).abs() <= 1e-13 * (1.0 + single[j].abs()));
            }
        }
        // bit-identical on repetition
        assert_eq!(batch, p.forward_batch(&x, n).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = StreamKey::new(11, Purpose::Init, 0).rng(0);
        let p = random_net(vec![3, 8, 2], &mut rng);
        let (gp, gx) = p.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(gp.as_slice().iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    /// Central differences of `u . phi(x)` in every parameter and input.
    fn fd_check(p: &MlpParams, x: &[f64], u: &[f64], h: f64) -> f64 {
        let objective = |q: &MlpParams, x: &[f64]| -> f64 {
            q.forward(x).unwrap().iter().zip(u).map(|(a, b)| a * b).sum()
        };
        let (gp, gx) = p.backward(x, u).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (objective(&plus, x) - objective(&minus, x)) / (2.0 * h);
            worst = worst.max(rel_err(fd, gp.as_slice()[i]));
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (objective(p, &xp) - objective(p, &xm)) / (2.0 * h);
            worst = worst.max(rel_err(fd, gx[i]));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StreamKey::new(12, Purpose::Init, 0).rng(0);
        for _ in 0..100 {
            let depth = rng.random_range(1..=3);
            let mut dims = vec![rng.random_range(1..=3)];
            for _ in 1..depth {
                dims.push(rng.random_range(1..=8));
            }
            dims.push(rng.random_range(1..=2));
            let p = random_net(dims.clone(), &mut rng);
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.5..1.5)).collect();
            let u: Vec<f64> = (0..*dims.last().unwrap())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let worst = fd_check(&p, &x, &u, 1e-5);
            assert!(worst < 1e-4, "dims {dims:?}: relative error {worst}");
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_single_gradients() {
        let mut rng = StreamKey::new(13, Purpose::Init, 0).rng(0);
        let p = random_net(vec![2, 8, 8, 1], &mut rng);
        let n = 20;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cache = p.forward_cached(&x, n).unwrap();
        let g = p.backward_cached(&cache, &u, true, true).unwrap();
        let mut sum = p.zeros_like();
        for k in 0..n {
            let (gp, gx) = p.backward(&x[2 * k..2 * k + 2], &u[k..k + 1]).unwrap();
            sum.add_scaled(1.0, &gp).unwrap();
            let gi = g.inputs.as_ref().unwrap();
            for j in 0..2 {
                assert!((gx[j] - gi[2 * k + j]).abs() < 1e-12);
            }
        }
        let gp = g.params.unwrap();
        for (a, b) in gp.as_slice().iter().zip(sum.as_slice()) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn input_gradient_respects_operator_norm_bound() {
        let mut rng = StreamKey::new(14, Purpose::Init, 0).rng(0);
        for _ in 0..20 {
            let p = random_net(vec![3, 8, 8, 2], &mut rng);
            // Frobenius norms bound the operator norms from above.
            let bound: f64 = (0..p.num_layers())
                .map(|l| p.layer(l).0.iter().map(|w| w * w).sum::<f64>().sqrt())
                .product();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            // ||J^T u|| <= ||J|| ||u|| for unit u along each output axis
            for j in 0..2 {
                let mut u = vec![0.0; 2];
                u[j] = 1.0;
                let (_, gx) = p.backward(&x, &u).unwrap();
                let norm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let spec = MlpSpec::new(vec![1, 4, 1]).unwrap();
        let mut rng = StreamKey::new(15, Purpose::Init, 0).rng(0);
        let mut p = MlpParams::init(&spec, 0.1, &mut rng).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(p.len(), 1e-3);
        let zero = p.zeros_like();
        adam.step(&mut p, &zero).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let spec = MlpSpec::new(vec![1, 3, 1]).unwrap();
        let mut p = MlpParams::zeros(&spec);
        let mut g = p.zeros_like();
        for (i, v) in g.as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64 - 4.5) * 0.3;
        }
        let lr = 5e-4;
        let mut adam = Adam::new(p.len(), lr);
        adam.step(&mut p, &g).unwrap();
        for (dp, gv) in p.as_slice().iter().zip(g.as_slice()) {
            // m_hat = g, v_hat = g^2 after bias correction
            let expected = -lr * gv / (gv.abs() + 1e-8);
            assert!((dp - expected).abs() < 1e-15, "{dp} vs {expected}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let spec = MlpSpec::new(vec![1, 5, 1]).unwrap();
        let run = || {
            let key = StreamKey::new(16, Purpose::Init, 0);
            let mut p = MlpParams::init(&spec, 0.1, &mut key.rng(0)).unwrap();
            let mut adam = Adam::new(p.len(), 1e-2);
            let mut rng = key.rng(1);
            for _ in 0..50 {
                let mut g = p.zeros_like();
                for v in g.as_mut_slice() {
                    *v = rng.random_range(-1.0..1.0);
                }
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn text_checkpoint_round_trips_bit_exactly() {
        let mut rng = StreamKey::new(17, Purpose::Init, 0).rng(0);
        let mut p = random_net(vec![2, 5, 3, 1], &mut rng);
        p.as_mut_slice()[0] = 1e-300;
        p.as_mut_slice()[1] = -0.1 + 0.2;
        let text = p.to_text();
        let back = MlpParams::from_text(&text).unwrap();
        assert_eq!(back.dims(), p.dims());
        for (a, b) in back.as_slice().iter().zip(p.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(MlpParams::from_text("garbage").is_err());
        let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(MlpParams::from_text(&truncated).is_err());
    }
}
