//! Forward pass and input-gradient backward pass.
//!
//! Frozen tensors never receive gradients; the backward pass only propagates
//! to activations, accumulating parameter gradients for the embedding rows
//! that were looked up and for the head.

use alloc::vec;
use alloc::vec::Vec;

use super::model::{Block, HeadMode, LayerNorm, Linear, Reasoner};
use crate::error::CoreError;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `y[r] = W x[r] + b` for rows `start..n`; earlier rows stay zero.
fn linear_rows(lin: &Linear, x: &[f64], n: usize, start: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * lin.n_out];
    for r in start..n {
        let xr = &x[r * lin.n_in..(r + 1) * lin.n_in];
        let yr = &mut y[r * lin.n_out..(r + 1) * lin.n_out];
        for (o, out) in yr.iter_mut().enumerate() {
            *out = lin.bias[o] + dot(&lin.weight[o * lin.n_in..(o + 1) * lin.n_in], xr);
        }
    }
    y
}

/// `dx[r] = W^T dy[r]` for rows `start..n`.
fn linear_input_grad(lin: &Linear, dy: &[f64], n: usize, start: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * lin.n_in];
    for r in start..n {
        let dyr = &dy[r * lin.n_out..(r + 1) * lin.n_out];
        let dxr = &mut dx[r * lin.n_in..(r + 1) * lin.n_in];
        for (o, &g) in dyr.iter().enumerate() {
            if g != 0.0 {
                axpy(dxr, g, &lin.weight[o * lin.n_in..(o + 1) * lin.n_in]);
            }
        }
    }
    dx
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm_rows(ln: &LayerNorm, x: &[f64], n: usize, start: usize) -> (Vec<f64>, LnCache) {
    let d = ln.gain.len();
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for r in start..n {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / libm::sqrt(var + LN_EPS);
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = ln.gain[i] * h + ln.bias[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_input_grad(ln: &LayerNorm, cache: &LnCache, dy: &[f64], n: usize, start: usize) -> Vec<f64> {
    let d = ln.gain.len();
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for r in start..n {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dxhat[i] = dyr[i] * ln.gain[i];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        for i in 0..d {
            dx[r * d + i] = cache.rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
    dx
}

struct BlockCache {
    /// First row whose block output is computed; earlier rows only feed keys and values.
    q_start: usize,
    ln1: LnCache,
    qkv: Vec<f64>,
    /// `n_heads x n x n`, causal entries only.
    probs: Vec<f64>,
    ln2: LnCache,
    pre: Vec<f64>,
}

struct Dims {
    n: usize,
    d: usize,
    heads: usize,
    hd: usize,
}

fn block_forward(block: &Block, x: &[f64], dims: &Dims, q_start: usize) -> (Vec<f64>, BlockCache) {
    let Dims { n, d, heads, hd } = *dims;
    let (a, ln1) = layer_norm_rows(&block.ln1, x, n, 0);
    let qkv = linear_rows(&block.qkv, &a, n, 0);
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut probs = vec![0.0; heads * n * n];
    let mut ctx = vec![0.0; n * d];
    for h in 0..heads {
        for i in q_start..n {
            let q = &qkv[i * 3 * d + h * hd..i * 3 * d + (h + 1) * hd];
            let p = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                let k = &qkv[j * 3 * d + d + h * hd..j * 3 * d + d + (h + 1) * hd];
                *pj = dot(q, k) * scale;
                max = max.max(*pj);
            }
            let mut sum = 0.0;
            for pj in p.iter_mut() {
                *pj = libm::exp(*pj - max);
                sum += *pj;
            }
            let out = &mut ctx[i * d + h * hd..i * d + (h + 1) * hd];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj /= sum;
                let v = &qkv[j * 3 * d + 2 * d + h * hd..j * 3 * d + 2 * d + (h + 1) * hd];
                axpy(out, *pj, v);
            }
        }
    }
    let attn = linear_rows(&block.attn_out, &ctx, n, q_start);
    let mut x_mid = vec![0.0; n * d];
    for i in q_start * d..n * d {
        x_mid[i] = x[i] + attn[i];
    }
    let (m, ln2) = layer_norm_rows(&block.ln2, &x_mid, n, q_start);
    let pre = linear_rows(&block.mlp_in, &m, n, q_start);
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let mlp = linear_rows(&block.mlp_out, &act, n, q_start);
    let mut out = x_mid;
    for i in q_start * d..n * d {
        out[i] += mlp[i];
    }
    (
        out,
        BlockCache {
            q_start,
            ln1,
            qkv,
            probs,
            ln2,
            pre,
        },
    )
}

fn block_backward(block: &Block, cache: &BlockCache, dx_out: &[f64], dims: &Dims) -> Vec<f64> {
    let Dims { n, d, heads, hd } = *dims;
    let qs = cache.q_start;
    let dpre: Vec<f64> = {
        let dact = linear_input_grad(&block.mlp_out, dx_out, n, qs);
        dact.iter().zip(&cache.pre).map(|(g, &p)| g * gelu_grad(p)).collect()
    };
    let dm = linear_input_grad(&block.mlp_in, &dpre, n, qs);
    let mut dx_mid = layer_norm_input_grad(&block.ln2, &cache.ln2, &dm, n, qs);
    for (a, b) in dx_mid.iter_mut().zip(dx_out) {
        *a += b;
    }

    let dctx = linear_input_grad(&block.attn_out, &dx_mid, n, qs);
    let scale = 1.0 / libm::sqrt(hd as f64);
    let qkv = &cache.qkv;
    let mut dqkv = vec![0.0; n * 3 * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        for i in qs..n {
            let g = &dctx[i * d + h * hd..i * d + (h + 1) * hd];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let p = &cache.probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            let mut weighted = 0.0;
            for j in 0..=i {
                let voff = j * 3 * d + 2 * d + h * hd;
                dp[j] = dot(g, &qkv[voff..voff + hd]);
                weighted += p[j] * dp[j];
                axpy(&mut dqkv[voff..voff + hd], p[j], g);
            }
            let qoff = i * 3 * d + h * hd;
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let koff = j * 3 * d + d + h * hd;
                for t in 0..hd {
                    dqkv[qoff + t] += ds * qkv[koff + t];
                    dqkv[koff + t] += ds * qkv[qoff + t];
                }
            }
        }
    }
    let da = linear_input_grad(&block.qkv, &dqkv, n, 0);
    let mut dx = layer_norm_input_grad(&block.ln1, &cache.ln1, &da, n, 0);
    for (a, b) in dx.iter_mut().zip(&dx_mid) {
        *a += b;
    }
    dx
}

pub(crate) struct ForwardCache {
    ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    /// Residual stream after the last block, `n x d`.
    pub hidden: Vec<f64>,
    ln_final: LnCache,
    /// Input to each head layer.
    head_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each head layer; the last is the logits.
    head_pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.head_pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn check_ids(model: &Reasoner, ids: &[usize]) -> Result<(), CoreError> {
    let cfg = &model.config;
    if ids.len() != cfg.seq_len {
        return Err(CoreError::LengthMismatch {
            expected: cfg.seq_len,
            found: ids.len(),
        });
    }
    let vocab = cfg.vocab_size();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(CoreError::IdOutOfRange { id, vocab });
    }
    Ok(())
}

/// Runs the model. With `full_hidden` unset, the last block computes only the final
/// position, which is all the head reads.
pub(crate) fn forward(model: &Reasoner, ids: &[usize], full_hidden: bool) -> Result<ForwardCache, CoreError> {
    check_ids(model, ids)?;
    let cfg = &model.config;
    let dims = Dims {
        n: cfg.seq_len,
        d: cfg.d_model,
        heads: cfg.n_heads,
        hd: cfg.head_dim(),
    };
    let (n, d) = (dims.n, dims.d);
    let mut x = vec![0.0; n * d];
    for (i, &id) in ids.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(&model.trainable.embedding[id * d..(id + 1) * d]);
        axpy(row, 1.0, &model.frozen.positional[i * d..(i + 1) * d]);
    }
    let n_blocks = model.frozen.blocks.len();
    let mut caches = Vec::with_capacity(n_blocks);
    for (l, block) in model.frozen.blocks.iter().enumerate() {
        let q_start = if !full_hidden && l + 1 == n_blocks { n - 1 } else { 0 };
        let (out, cache) = block_forward(block, &x, &dims, q_start);
        x = out;
        caches.push(cache);
    }
    let (h, ln_final) = layer_norm_rows(&model.frozen.ln_final, &x, n, n - 1);
    let mut u = h[(n - 1) * d..].to_vec();
    let mut head_inputs = Vec::new();
    let mut head_pre = Vec::new();
    let layers = model.trainable.head.len();
    for (l, lin) in model.trainable.head.iter().enumerate() {
        let pre = linear_rows(lin, &u, 1, 0);
        head_inputs.push(core::mem::take(&mut u));
        if l + 1 < layers {
            u = pre.iter().map(|&v| gelu(v)).collect();
        }
        head_pre.push(pre);
    }
    Ok(ForwardCache {
        ids: ids.to_vec(),
        blocks: caches,
        hidden: x,
        ln_final,
        head_inputs,
        head_pre,
    })
}

/// Accumulates gradients of the trainable parameters given `d loss / d logits`.
/// `grads` follows [`Trainable::buffers_mut`](super::model::Trainable) order.
pub(crate) fn backward(model: &Reasoner, cache: &ForwardCache, dlogits: &[f64], grads: &mut [Vec<f64>]) {
    let cfg = &model.config;
    let dims = Dims {
        n: cfg.seq_len,
        d: cfg.d_model,
        heads: cfg.n_heads,
        hd: cfg.head_dim(),
    };
    let (n, d) = (dims.n, dims.d);

    let mut g = dlogits.to_vec();
    for (l, lin) in model.trainable.head.iter().enumerate().rev() {
        let input = &cache.head_inputs[l];
        let (gw, rest) = grads[1 + 2 * l..].split_at_mut(1);
        for (o, &go) in g.iter().enumerate() {
            axpy(&mut gw[0][o * lin.n_in..(o + 1) * lin.n_in], go, input);
            rest[0][o] += go;
        }
        let du = linear_input_grad(lin, &g, 1, 0);
        g = if l > 0 {
            du.iter()
                .zip(&cache.head_pre[l - 1])
                .map(|(a, &p)| a * gelu_grad(p))
                .collect()
        } else {
            du
        };
    }

    let mut dh = vec![0.0; n * d];
    dh[(n - 1) * d..].copy_from_slice(&g);
    let mut dx = layer_norm_input_grad(&model.frozen.ln_final, &cache.ln_final, &dh, n, n - 1);
    for (block, bc) in model.frozen.blocks.iter().zip(&cache.blocks).rev() {
        dx = block_backward(block, bc, &dx, &dims);
    }
    let emb = &mut grads[0];
    for (i, &id) in cache.ids.iter().enumerate() {
        axpy(&mut emb[id * d..(id + 1) * d], 1.0, &dx[i * d..(i + 1) * d]);
    }
}

/// Turns logits into the head's output: a distribution or per-category sigmoids.
pub(crate) fn activate(mode: HeadMode, logits: &[f64]) -> Vec<f64> {
    match mode {
        HeadMode::SoftmaxCe => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        HeadMode::SigmoidBce => logits.iter().map(|&z| sigmoid(z)).collect(),
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + libm::log1p(libm::exp(-z.abs()))
}

/// Loss and its gradient with respect to the logits.
pub(crate) fn loss_and_grad(mode: HeadMode, logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    match mode {
        HeadMode::SoftmaxCe => {
            let p = activate(mode, logits);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(logits.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
            let loss = target.iter().zip(logits).map(|(t, z)| t * (lse - z)).sum();
            let grad = p.iter().zip(target).map(|(p, t)| p - t).collect();
            (loss, grad)
        }
        HeadMode::SigmoidBce => {
            let c = logits.len() as f64;
            let loss = logits
                .iter()
                .zip(target)
                .map(|(&z, &t)| softplus(z) - t * z)
                .sum::<f64>()
                / c;
            let grad = logits
                .iter()
                .zip(target)
                .map(|(&z, &t)| (sigmoid(z) - t) / c)
                .collect();
            (loss, grad)
        }
    }
}

impl Reasoner {
    /// Head outputs for one token sequence: a distribution (single-label) or sigmoids (multi-label).
    pub fn forward(&self, ids: &[usize]) -> Result<Vec<f64>, CoreError> {
        let cache = forward(self, ids, false)?;
        Ok(activate(self.config.head_mode, cache.logits()))
    }

    /// Residual stream after the last block at every position, `seq_len x d_model`.
    pub fn hidden_states(&self, ids: &[usize]) -> Result<Vec<f64>, CoreError> {
        Ok(forward(self, ids, true)?.hidden)
    }

    /// Loss of one example, for gradient checks.
    pub fn loss(&self, ids: &[usize], target: &[f64]) -> Result<f64, CoreError> {
        let cache = forward(self, ids, false)?;
        Ok(loss_and_grad(self.config.head_mode, cache.logits(), target).0)
    }

    /// Loss and trainable-parameter gradients for one example, in the order
    /// embedding, then weight and bias of each head layer.
    pub fn loss_and_gradients(&self, ids: &[usize], target: &[f64]) -> Result<(f64, Vec<Vec<f64>>), CoreError> {
        if target.len() != self.config.num_categories {
            return Err(CoreError::ShapeMismatch("target length differs from C"));
        }
        let cache = forward(self, ids, false)?;
        let (loss, dlogits) = loss_and_grad(self.config.head_mode, cache.logits(), target);
        let mut grads = self.trainable.zeros_like();
        backward(self, &cache, &dlogits, &mut grads);
        Ok((loss, grads))
    }
}
