//! Dual-channel attention merge on dense token matrices.
//!
//! A frozen base attention sublayer and a trainable copy of it run side by
//! side; their outputs are mixed per hidden channel by a gate
//! `alpha = sigmoid(a)` that starts at one half everywhere:
//!
//! ```text
//! out[:, j] = alpha_j * base(x)[:, j] + (1 - alpha_j) * plus(x)[:, j]
//! ```
//!
//! Because the plus channel is initialized as an exact copy of the base
//! and `a` starts at zero, the merged output equals the base sublayer
//! output at initialization, so insertion is behavior-preserving. Training
//! touches only the plus channel and the gate; [`dual_backward`] produces
//! gradients for those and nothing else.
//!
//! Each channel is standard multi-head scaled dot-product attention with
//! biases and an output projection. The merge applies to the sublayer
//! output after the output projection, before any residual addition. All
//! math is f64; matrices are row-major `Vec<f64>`.

use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("heads {heads} do not divide hidden dimension {dim}")]
    HeadsDoNotDivide { heads: usize, dim: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// n tokens by d hidden channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self, AttentionError> {
        if d == 0 || data.len() != n * d {
            return Err(AttentionError::DimensionMismatch(format!(
                "token matrix {}x{} needs {} entries, got {}",
                n,
                d,
                n * d,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite("token matrix"));
        }
        Ok(Self { n, d, data })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, data: vec![0.0; n * d] }
    }

    pub fn random(n: usize, d: usize, rng: &mut SeededRng) -> Self {
        let data = (0..n * d).map(|_| rng.next_range_f64(-1.0, 1.0)).collect();
        Self { n, d, data }
    }

    pub fn tokens(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.d + col]
    }

    /// Largest absolute entry difference; infinity norm of (self - other).
    pub fn max_abs_diff(&self, other: &TokenMatrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Weights and biases of one attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl AttentionParams {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self, AttentionError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(AttentionError::HeadsDoNotDivide { heads, dim });
        }
        Ok(Self {
            dim,
            heads,
            w_q: vec![0.0; dim * dim],
            w_k: vec![0.0; dim * dim],
            w_v: vec![0.0; dim * dim],
            w_o: vec![0.0; dim * dim],
            b_q: vec![0.0; dim],
            b_k: vec![0.0; dim],
            b_v: vec![0.0; dim],
            b_o: vec![0.0; dim],
        })
    }

    /// Uniform random parameters in [-scale, scale]; test and audit helper.
    pub fn random(
        dim: usize,
        heads: usize,
        scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self, AttentionError> {
        let mut p = Self::zeros(dim, heads)?;
        for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o] {
            w.iter_mut().for_each(|v| *v = rng.next_range_f64(-scale, scale));
        }
        for b in [&mut p.b_q, &mut p.b_k, &mut p.b_v, &mut p.b_o] {
            b.iter_mut().for_each(|v| *v = rng.next_range_f64(-scale, scale));
        }
        Ok(p)
    }

    fn validate(&self) -> Result<(), AttentionError> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(AttentionError::HeadsDoNotDivide { heads: self.heads, dim: self.dim });
        }
        let d = self.dim;
        let ok = [&self.w_q, &self.w_k, &self.w_v, &self.w_o].iter().all(|w| w.len() == d * d)
            && [&self.b_q, &self.b_k, &self.b_v, &self.b_o].iter().all(|b| b.len() == d);
        if !ok {
            return Err(AttentionError::DimensionMismatch(format!(
                "attention parameter buffers inconsistent with d = {d}"
            )));
        }
        Ok(())
    }

    /// Parameter group names, indexing [`Self::group`] and
    /// [`Self::group_mut`]; drives the finite-difference sweep and the
    /// gradient report.
    pub const GROUP_NAMES: [&'static str; 8] =
        ["w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o"];

    pub fn group(&self, g: usize) -> &[f64] {
        match g {
            0 => &self.w_q,
            1 => &self.w_k,
            2 => &self.w_v,
            3 => &self.w_o,
            4 => &self.b_q,
            5 => &self.b_k,
            6 => &self.b_v,
            _ => &self.b_o,
        }
    }

    pub fn group_mut(&mut self, g: usize) -> &mut [f64] {
        match g {
            0 => &mut self.w_q,
            1 => &mut self.w_k,
            2 => &mut self.w_v,
            3 => &mut self.w_o,
            4 => &mut self.b_q,
            5 => &mut self.b_k,
            6 => &mut self.b_v,
            _ => &mut self.b_o,
        }
    }
}

/// Frozen base channel, trainable plus channel, and the gate vector `a`.
///
/// Invariant kept by [`init_plus_from_base`]: at initialization the plus
/// channel equals the base entrywise and `a` is all zero, so
/// `sigmoid(a) = 0.5` per channel and the merge reproduces the base.
#[derive(Debug, Clone, PartialEq)]
pub struct DualChannelParams {
    pub base: AttentionParams,
    pub plus: AttentionParams,
    pub gate: Vec<f64>,
}

/// Deep-copies the base into the plus channel and zeroes the gate.
pub fn init_plus_from_base(base: AttentionParams) -> DualChannelParams {
    let gate = vec![0.0; base.dim];
    DualChannelParams { plus: base.clone(), base, gate }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// (n x k) . (k x m)
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

// (k x n)^T . (k x m) accumulating over rows of both
fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for l in 0..k {
        for i in 0..n {
            let av = a[l * n + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

// (n x k) . (m x k)^T
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[j * k + l];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

fn add_bias_rows(m: &mut [f64], bias: &[f64], n: usize, d: usize) {
    for i in 0..n {
        for j in 0..d {
            m[i * d + j] += bias[j];
        }
    }
}

struct ForwardCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax weights, heads * n * n, head-major.
    attn: Vec<f64>,
    /// Concatenated per-head outputs before the output projection, n * d.
    heads_out: Vec<f64>,
}

fn forward_impl(
    x: &TokenMatrix,
    p: &AttentionParams,
) -> Result<(TokenMatrix, ForwardCache), AttentionError> {
    p.validate()?;
    if x.d != p.dim {
        return Err(AttentionError::DimensionMismatch(format!(
            "input dimension {} vs parameter dimension {}",
            x.d, p.dim
        )));
    }
    let (n, d, h) = (x.n, x.d, p.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut q = matmul(&x.data, &p.w_q, n, d, d);
    let mut k = matmul(&x.data, &p.w_k, n, d, d);
    let mut v = matmul(&x.data, &p.w_v, n, d, d);
    add_bias_rows(&mut q, &p.b_q, n, d);
    add_bias_rows(&mut k, &p.b_k, n, d);
    add_bias_rows(&mut v, &p.b_v, n, d);

    let mut attn = vec![0.0; h * n * n];
    let mut heads_out = vec![0.0; n * d];
    for head in 0..h {
        let off = head * dh;
        for i in 0..n {
            let scores = &mut attn[head * n * n + i * n..head * n * n + (i + 1) * n];
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += q[i * d + off + c] * k[j * d + off + c];
                }
                scores[j] = acc * scale;
            }
            // stabilized softmax: subtract the row max before exponentiating
            let row_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - row_max).exp();
                sum += *s;
            }
            for s in scores.iter_mut() {
                *s /= sum;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += scores[j] * v[j * d + off + c];
                }
                heads_out[i * d + off + c] = acc;
            }
        }
    }

    let mut out = matmul(&heads_out, &p.w_o, n, d, d);
    add_bias_rows(&mut out, &p.b_o, n, d);
    let out = TokenMatrix { n, d, data: out };
    Ok((out, ForwardCache { q, k, v, attn, heads_out }))
}

/// Multi-head scaled dot-product self-attention with output projection.
pub fn attn_forward(x: &TokenMatrix, p: &AttentionParams) -> Result<TokenMatrix, AttentionError> {
    forward_impl(x, p).map(|(out, _)| out)
}

/// Gated per-channel merge of the two attention channels.
pub fn dual_forward(x: &TokenMatrix, dc: &DualChannelParams) -> Result<TokenMatrix, AttentionError> {
    if dc.gate.len() != dc.base.dim || dc.base.dim != dc.plus.dim {
        return Err(AttentionError::DimensionMismatch(format!(
            "gate length {} vs channel dims {}/{}",
            dc.gate.len(),
            dc.base.dim,
            dc.plus.dim
        )));
    }
    let base_out = attn_forward(x, &dc.base)?;
    let plus_out = attn_forward(x, &dc.plus)?;
    let (n, d) = (x.n, x.d);
    let mut data = vec![0.0; n * d];
    for j in 0..d {
        let alpha = sigmoid(dc.gate[j]);
        for i in 0..n {
            data[i * d + j] =
                alpha * base_out.data[i * d + j] + (1.0 - alpha) * plus_out.data[i * d + j];
        }
    }
    Ok(TokenMatrix { n, d, data })
}

/// Gradients for the trainable side of the merge. The base channel is
/// frozen by contract, so no field for it exists.
#[derive(Debug, Clone, PartialEq)]
pub struct DualChannelGrads {
    pub plus: AttentionParams,
    /// dL/da per hidden channel.
    pub gate: Vec<f64>,
}

impl DualChannelGrads {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self, AttentionError> {
        Ok(Self { plus: AttentionParams::zeros(dim, heads)?, gate: vec![0.0; dim] })
    }
}

/// Analytic gradients of `sum(upstream .* dual_forward(x, dc))` with
/// respect to the plus-channel parameters and the gate vector.
pub fn dual_backward(
    x: &TokenMatrix,
    dc: &DualChannelParams,
    upstream: &TokenMatrix,
) -> Result<DualChannelGrads, AttentionError> {
    if upstream.n != x.n || upstream.d != x.d {
        return Err(AttentionError::DimensionMismatch(format!(
            "upstream {}x{} vs input {}x{}",
            upstream.n, upstream.d, x.n, x.d
        )));
    }
    let base_out = attn_forward(x, &dc.base)?;
    let (plus_out, cache) = forward_impl(x, &dc.plus)?;
    let (n, d, h) = (x.n, x.d, dc.plus.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();

    // gate gradient through the sigmoid, contracted over tokens
    let mut gate_grad = vec![0.0; d];
    for (j, slot) in gate_grad.iter_mut().enumerate() {
        let alpha = sigmoid(dc.gate[j]);
        let mut acc = 0.0;
        for i in 0..n {
            acc += upstream.data[i * d + j]
                * (base_out.data[i * d + j] - plus_out.data[i * d + j]);
        }
        *slot = alpha * (1.0 - alpha) * acc;
    }

    // upstream routed into the plus channel: scaled by (1 - alpha) per column
    let mut d_out = vec![0.0; n * d];
    for j in 0..d {
        let w = 1.0 - sigmoid(dc.gate[j]);
        for i in 0..n {
            d_out[i * d + j] = w * upstream.data[i * d + j];
        }
    }

    let mut grads = DualChannelGrads::zeros(d, h)?;
    grads.gate = gate_grad;

    // output projection
    grads.plus.w_o = matmul_tn(&cache.heads_out, &d_out, n, d, d);
    for j in 0..d {
        grads.plus.b_o[j] = (0..n).map(|i| d_out[i * d + j]).sum();
    }
    let d_heads_out = matmul_nt(&d_out, &dc.plus.w_o, n, d, d);

    // per-head attention backward into q, k, v
    let mut d_q = vec![0.0; n * d];
    let mut d_k = vec![0.0; n * d];
    let mut d_v = vec![0.0; n * d];
    for head in 0..h {
        let off = head * dh;
        let attn = &cache.attn[head * n * n..(head + 1) * n * n];
        // d_attn[i][j] = sum_c d_heads_out[i, off+c] * v[j, off+c]
        let mut d_attn = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += d_heads_out[i * d + off + c] * cache.v[j * d + off + c];
                }
                d_attn[i * n + j] = acc;
            }
        }
        // d_v[j, off+c] += sum_i attn[i][j] * d_heads_out[i, off+c]
        for j in 0..n {
            for c in 0..dh {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += attn[i * n + j] * d_heads_out[i * d + off + c];
                }
                d_v[j * d + off + c] = acc;
            }
        }
        // softmax backward per row, then the 1/sqrt(dh) score scaling
        for i in 0..n {
            let a_row = &attn[i * n..(i + 1) * n];
            let da_row = &d_attn[i * n..(i + 1) * n];
            let dot: f64 = a_row.iter().zip(da_row).map(|(a, da)| a * da).sum();
            for j in 0..n {
                let ds = a_row[j] * (da_row[j] - dot) * scale;
                for c in 0..dh {
                    d_q[i * d + off + c] += ds * cache.k[j * d + off + c];
                    d_k[j * d + off + c] += ds * cache.q[i * d + off + c];
                }
            }
        }
    }

    grads.plus.w_q = matmul_tn(&x.data, &d_q, n, d, d);
    grads.plus.w_k = matmul_tn(&x.data, &d_k, n, d, d);
    grads.plus.w_v = matmul_tn(&x.data, &d_v, n, d, d);
    for j in 0..d {
        grads.plus.b_q[j] = (0..n).map(|i| d_q[i * d + j]).sum();
        grads.plus.b_k[j] = (0..n).map(|i| d_k[i * d + j]).sum();
        grads.plus.b_v[j] = (0..n).map(|i| d_v[i * d + j]).sum();
    }
    Ok(grads)
}

/// Central finite-difference gradients of the same scalar objective
/// `sum(upstream .* dual_forward)`, probing every trainable parameter.
/// Differentiates the forward pass only, independent of
/// [`dual_backward`]'s internals; shared by the gradient audit and tests.
pub fn finite_difference_grads(
    x: &TokenMatrix,
    dc: &DualChannelParams,
    upstream: &TokenMatrix,
    epsilon: f64,
) -> Result<DualChannelGrads, AttentionError> {
    let loss = |dc: &DualChannelParams| -> Result<f64, AttentionError> {
        let out = dual_forward(x, dc)?;
        Ok(out.data.iter().zip(&upstream.data).map(|(o, g)| o * g).sum())
    };
    let mut probe = dc.clone();
    let mut grads = DualChannelGrads::zeros(dc.plus.dim, dc.plus.heads)?;
    for g in 0..AttentionParams::GROUP_NAMES.len() {
        for idx in 0..probe.plus.group(g).len() {
            let original = probe.plus.group(g)[idx];
            probe.plus.group_mut(g)[idx] = original + epsilon;
            let hi = loss(&probe)?;
            probe.plus.group_mut(g)[idx] = original - epsilon;
            let lo = loss(&probe)?;
            probe.plus.group_mut(g)[idx] = original;
            grads.plus.group_mut(g)[idx] = (hi - lo) / (2.0 * epsilon);
        }
    }
    for idx in 0..dc.gate.len() {
        let original = probe.gate[idx];
        probe.gate[idx] = original + epsilon;
        let hi = loss(&probe)?;
        probe.gate[idx] = original - epsilon;
        let lo = loss(&probe)?;
        probe.gate[idx] = original;
        grads.gate[idx] = (hi - lo) / (2.0 * epsilon);
    }
    Ok(grads)
}

/// Relative error with a small floor so near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst relative error per parameter group between analytic and
/// finite-difference gradients.
pub fn gradient_check(
    x: &TokenMatrix,
    dc: &DualChannelParams,
    upstream: &TokenMatrix,
    epsilon: f64,
) -> Result<Vec<(&'static str, f64)>, AttentionError> {
    let analytic = dual_backward(x, dc, upstream)?;
    let numeric = finite_difference_grads(x, dc, upstream, epsilon)?;
    let mut report = Vec::with_capacity(9);
    for (g, &name) in AttentionParams::GROUP_NAMES.iter().enumerate() {
        let worst = analytic
            .plus
            .group(g)
            .iter()
            .zip(numeric.plus.group(g))
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        report.push((name, worst));
    }
    let worst_gate = analytic
        .gate
        .iter()
        .zip(&numeric.gate)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    report.push(("a", worst_gate));
    Ok(report)
}

/// Transformer-encoder shape for the parameter-overhead audit. The
/// `patch_embed_params` and `head_params` fields are plain counts so the
/// audit stays independent of embedding layout details.
#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub name: String,
    pub layers: u64,
    pub width: u64,
    pub heads: u64,
    pub mlp_ratio: f64,
    pub patch_embed_params: u64,
    pub head_params: u64,
}

impl VitConfig {
    /// Attention parameters of one layer: four d x d projections plus
    /// their biases.
    pub fn attention_params_per_layer(&self) -> f64 {
        let d = self.width as f64;
        4.0 * d * d + 4.0 * d
    }

    /// Two-matrix MLP at the given width ratio, with biases.
    pub fn mlp_params_per_layer(&self) -> f64 {
        let d = self.width as f64;
        let r = self.mlp_ratio;
        2.0 * r * d * d + (r + 1.0) * d
    }

    /// Two layer norms, scale and shift each.
    pub fn norm_params_per_layer(&self) -> f64 {
        4.0 * self.width as f64
    }

    pub fn base_params(&self) -> f64 {
        let per_layer = self.attention_params_per_layer()
            + self.mlp_params_per_layer()
            + self.norm_params_per_layer();
        self.patch_embed_params as f64 + self.layers as f64 * per_layer + self.head_params as f64
    }

    /// Parameters the dual-channel insertion adds: one full attention copy
    /// plus a gate vector per layer.
    pub fn added_params(&self) -> f64 {
        let d = self.width as f64;
        self.layers as f64 * (4.0 * d * d + 4.0 * d + d)
    }
}

/// Added parameters as a fraction of the base encoder parameters.
pub fn param_overhead(cfg: &VitConfig) -> f64 {
    let added = cfg.added_params();
    if added == 0.0 {
        return 0.0;
    }
    added / cfg.base_params()
}

/// Conv patch embedding plus positional table (and a class token when the
/// token count includes one).
fn embed_params(patch: u64, width: u64, tokens: u64) -> u64 {
    patch * patch * 3 * width + width + tokens * width
}

/// Shapes approximating four production encoder families. FFN variants
/// (gated or fused) are approximated by the standard ratio-4 MLP unless
/// the family's published hidden width pins a different ratio.
pub fn named_configs() -> Vec<VitConfig> {
    vec![
        VitConfig {
            name: "openclip-vit-g14".into(),
            layers: 48,
            width: 1664,
            heads: 16,
            mlp_ratio: 8192.0 / 1664.0,
            patch_embed_params: embed_params(14, 1664, 257),
            head_params: 1664 * 1280,
        },
        VitConfig {
            name: "siglip2-vit-g16".into(),
            layers: 40,
            width: 1536,
            heads: 16,
            mlp_ratio: 4.0,
            // attention-pool head: one probe token, one attention block,
            // one ratio-4 MLP
            patch_embed_params: embed_params(16, 1536, 196),
            head_params: 28_329_984,
        },
        VitConfig {
            name: "dinov2-vit-g14".into(),
            layers: 40,
            width: 1536,
            heads: 24,
            mlp_ratio: 4.0,
            patch_embed_params: embed_params(14, 1536, 257),
            head_params: 0,
        },
        VitConfig {
            name: "dinov3-vit-7b16".into(),
            layers: 40,
            width: 4096,
            heads: 32,
            mlp_ratio: 4.0,
            patch_embed_params: embed_params(16, 4096, 197),
            head_params: 0,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_instance(seed: u64, n: usize, d: usize, heads: usize) -> (TokenMatrix, DualChannelParams) {
        let mut rng = SeededRng::new(seed);
        let x = TokenMatrix::random(n, d, &mut rng);
        let base = AttentionParams::random(d, heads, 1.0, &mut rng).unwrap();
        let mut dc = init_plus_from_base(base);
        // move off the init point so gradients are informative
        for g in 0..AttentionParams::GROUP_NAMES.len() {
            for v in dc.plus.group_mut(g).iter_mut() {
                *v += rng.next_range_f64(-0.5, 0.5);
            }
        }
        for g in dc.gate.iter_mut() {
            *g = rng.next_range_f64(-1.5, 1.5);
        }
        (x, dc)
    }

    #[test]
    fn single_token_equals_value_path() {
        // with one key the softmax weight is 1, so the query path drops out
        let mut rng = SeededRng::new(1);
        let x = TokenMatrix::random(1, 4, &mut rng);
        let p = AttentionParams::random(4, 2, 1.0, &mut rng).unwrap();
        let out = attn_forward(&x, &p).unwrap();

        let d = 4;
        let mut v = vec![0.0; d];
        for c in 0..d {
            let mut acc = p.b_v[c];
            for l in 0..d {
                acc += x.data()[l] * p.w_v[l * d + c];
            }
            v[c] = acc;
        }
        for c in 0..d {
            let mut acc = p.b_o[c];
            for l in 0..d {
                acc += v[l] * p.w_o[l * d + c];
            }
            assert!((out.data()[c] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_path_gives_zero_output() {
        let mut rng = SeededRng::new(2);
        let x = TokenMatrix::random(3, 4, &mut rng);
        let mut p = AttentionParams::random(4, 1, 1.0, &mut rng).unwrap();
        p.w_v.iter_mut().for_each(|v| *v = 0.0);
        p.b_v.iter_mut().for_each(|v| *v = 0.0);
        p.b_o.iter_mut().for_each(|v| *v = 0.0);
        let out = attn_forward(&x, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        // n=2, d=2, single head, small integer weights; evaluated by an
        // independent scalar loop below
        let x = TokenMatrix::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let mut p = AttentionParams::zeros(2, 1).unwrap();
        p.w_q = vec![1.0, 0.0, 0.0, 1.0];
        p.w_k = vec![0.0, 1.0, 1.0, 0.0];
        p.w_v = vec![1.0, 2.0, 3.0, -1.0];
        p.w_o = vec![2.0, 0.0, 1.0, 1.0];
        p.b_q = vec![0.5, -0.5];
        p.b_k = vec![0.0, 1.0];
        p.b_v = vec![1.0, 0.0];
        p.b_o = vec![0.0, 0.25];
        let out = attn_forward(&x, &p).unwrap();

        // oracle: explicit scalar evaluation
        let q = [
            [1.0 + 0.5, 2.0 - 0.5],
            [-1.0 + 0.5, 0.5 - 0.5],
        ];
        let k = [
            [2.0, 1.0 + 1.0],
            [0.5, -1.0 + 1.0],
        ];
        let v = [
            [1.0 + 2.0 * 3.0 + 1.0, 1.0 * 2.0 + 2.0 * -1.0],
            [-1.0 + 0.5 * 3.0 + 1.0, -1.0 * 2.0 + 0.5 * -1.0],
        ];
        let scale = 1.0 / (2.0f64).sqrt();
        for i in 0..2 {
            let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * scale;
            let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (a0, a1) = (e0 / z, e1 / z);
            let h = [a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]];
            let y0 = h[0] * 2.0 + h[1] * 1.0;
            let y1 = h[0] * 0.0 + h[1] * 1.0 + 0.25;
            assert!((out.get(i, 0) - y0).abs() < 1e-12);
            assert!((out.get(i, 1) - y1).abs() < 1e-12);
        }
    }

    #[test]
    fn init_identity_holds() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let x = TokenMatrix::random(3, 8, &mut rng);
            let base = AttentionParams::random(8, 2, 1.0, &mut rng).unwrap();
            let dc = init_plus_from_base(base.clone());
            let merged = dual_forward(&x, &dc).unwrap();
            let plain = attn_forward(&x, &base).unwrap();
            assert!(merged.max_abs_diff(&plain) <= 1e-12);
        }
    }

    #[test]
    fn init_gate_is_half() {
        let base = AttentionParams::zeros(4, 2).unwrap();
        let dc = init_plus_from_base(base);
        assert!(dc.gate.iter().all(|&a| sigmoid(a) == 0.5));
    }

    #[test]
    fn plus_is_a_copy_not_an_alias() {
        let mut rng = SeededRng::new(9);
        let base = AttentionParams::random(4, 1, 1.0, &mut rng).unwrap();
        let mut dc = init_plus_from_base(base.clone());
        dc.plus.w_q[0] += 100.0;
        assert_eq!(dc.base, base);
    }

    #[test]
    fn saturated_gate_selects_base() {
        let mut rng = SeededRng::new(4);
        let x = TokenMatrix::random(3, 4, &mut rng);
        let base = AttentionParams::random(4, 2, 1.0, &mut rng).unwrap();
        let mut dc = init_plus_from_base(base.clone());
        // diverged plus channel behind a saturated gate
        dc.plus = AttentionParams::random(4, 2, 1.0, &mut rng).unwrap();
        dc.gate.iter_mut().for_each(|a| *a = 50.0);
        let merged = dual_forward(&x, &dc).unwrap();
        let plain = attn_forward(&x, &base).unwrap();
        assert!(merged.max_abs_diff(&plain) <= 1e-9);
    }

    #[test]
    fn dual_forward_matches_entrywise_oracle() {
        let (x, dc) = random_instance(12, 3, 4, 2);
        let merged = dual_forward(&x, &dc).unwrap();
        let b = attn_forward(&x, &dc.base).unwrap();
        let p = attn_forward(&x, &dc.plus).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let alpha = 1.0 / (1.0 + (-dc.gate[j]).exp());
                let expect = alpha * b.get(i, j) + (1.0 - alpha) * p.get(i, j);
                assert!((merged.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn merge_is_convex_per_entry() {
        let (x, dc) = random_instance(13, 4, 6, 3);
        let merged = dual_forward(&x, &dc).unwrap();
        let b = attn_forward(&x, &dc.base).unwrap();
        let p = attn_forward(&x, &dc.plus).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let lo = b.get(i, j).min(p.get(i, j));
                let hi = b.get(i, j).max(p.get(i, j));
                let m = merged.get(i, j);
                assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn gate_gradient_zero_at_init() {
        let mut rng = SeededRng::new(5);
        let x = TokenMatrix::random(3, 4, &mut rng);
        let base = AttentionParams::random(4, 2, 1.0, &mut rng).unwrap();
        let dc = init_plus_from_base(base);
        let upstream = TokenMatrix::random(3, 4, &mut rng);
        let grads = dual_backward(&x, &dc, &upstream).unwrap();
        assert!(grads.gate.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let (x, dc) = random_instance(6, 3, 4, 2);
        let upstream = TokenMatrix::zeros(3, 4);
        let grads = dual_backward(&x, &dc, &upstream).unwrap();
        for g in 0..AttentionParams::GROUP_NAMES.len() {
            assert!(grads.plus.group(g).iter().all(|&v| v == 0.0));
        }
        assert!(grads.gate.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn analytic_matches_finite_differences() {
        for seed in 0..10 {
            let (n, d, h) = match seed % 3 {
                0 => (2, 4, 2),
                1 => (3, 6, 3),
                _ => (4, 8, 2),
            };
            let (x, dc) = random_instance(100 + seed, n, d, h);
            let mut rng = SeededRng::new(777 + seed);
            let upstream = TokenMatrix::random(n, d, &mut rng);
            let report = gradient_check(&x, &dc, &upstream, 1e-5).unwrap();
            for (name, err) in report {
                assert!(err <= 1e-4, "group {name} relative error {err}");
            }
        }
    }

    #[test]
    fn overhead_zero_layers_is_zero() {
        let cfg = VitConfig {
            name: "empty".into(),
            layers: 0,
            width: 4,
            heads: 1,
            mlp_ratio: 4.0,
            patch_embed_params: 0,
            head_params: 0,
        };
        assert_eq!(param_overhead(&cfg), 0.0);
    }

    #[test]
    fn overhead_matches_term_by_term_count() {
        let cfg = VitConfig {
            name: "tiny".into(),
            layers: 1,
            width: 4,
            heads: 1,
            mlp_ratio: 4.0,
            patch_embed_params: 0,
            head_params: 0,
        };
        // independent term-by-term count at d=4, r=4:
        // w_q..w_o 4*16, biases 4*4; mlp W1 4x16 + 16, W2 16x4 + 4;
        // two layer norms 2*(4+4); plus channel repeats attention, gate 4
        let attn = 4 * 16 + 4 * 4;
        let mlp = (4 * 16 + 16) + (16 * 4 + 4);
        let norms = 2 * (4 + 4);
        let base = attn + mlp + norms;
        let added = attn + 4;
        assert_eq!(param_overhead(&cfg), added as f64 / base as f64);
        assert_eq!(base, 244);
        assert_eq!(added, 84);
    }

    #[test]
    fn named_configs_land_in_expected_band() {
        for cfg in named_configs() {
            let f = param_overhead(&cfg);
            assert!(
                (0.20..=0.35).contains(&f),
                "{}: overhead fraction {f:.4} outside [0.20, 0.35]",
                cfg.name
            );
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let x = TokenMatrix::zeros(2, 4);
        let p = AttentionParams::zeros(6, 2).unwrap();
        assert!(matches!(
            attn_forward(&x, &p).unwrap_err(),
            AttentionError::DimensionMismatch(_)
        ));
        assert!(AttentionParams::zeros(4, 3).is_err());
    }
}
