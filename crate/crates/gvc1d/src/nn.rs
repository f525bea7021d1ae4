//! Transformer building blocks: multi-head attention with optional
//! causal masking and 2D rotary embeddings, pre-norm layers, and the
//! local (windowed) / global layer pair used throughout the codec.

use crate::error::{GvcError, Result};
use crate::params::{Init, ParamCtx};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
const W_INIT: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub causal: bool,
    pub capture_weights: bool,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(GvcError::config(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(AttentionConfig {
            dim,
            heads,
            causal: false,
            capture_weights: false,
        })
    }

    pub fn causal(mut self, yes: bool) -> Self {
        self.causal = yes;
        self
    }

    pub fn capture(mut self, yes: bool) -> Self {
        self.capture_weights = yes;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Rotary-embedding parameters for one attention stack.
#[derive(Clone, Copy, Debug)]
pub struct Rope2DParams {
    pub head_dim: usize,
    pub base: f64,
    pub grid: (usize, usize),
}

impl Rope2DParams {
    pub fn new(head_dim: usize, base: f64, grid: (usize, usize)) -> Result<Self> {
        if head_dim % 4 != 0 {
            return Err(GvcError::config(format!(
                "rope head_dim {head_dim} must be divisible by 4"
            )));
        }
        if base <= 0.0 {
            return Err(GvcError::config("rope base must be positive"));
        }
        Ok(Rope2DParams {
            head_dim,
            base,
            grid,
        })
    }
}

/// Head-averaged attention weights: rows are queries, columns keys.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AttentionTrace {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn row_sum(&self, row: usize) -> f64 {
        self.weights[row * self.cols..(row + 1) * self.cols]
            .iter()
            .sum()
    }
}

/// Learned affine layer y = xW + b.
pub fn linear<S: Scalar>(
    ctx: &ParamCtx<S>,
    name: &str,
    x: &Tensor<S>,
    d_in: usize,
    d_out: usize,
) -> Result<Tensor<S>> {
    let w = ctx.get(&format!("{name}.w"), &[d_in, d_out], Init::Normal(W_INIT))?;
    let b = ctx.get(&format!("{name}.b"), &[d_out], Init::Zeros)?;
    x.matmul(&w)?.add(&b)
}

pub fn layernorm<S: Scalar>(
    ctx: &ParamCtx<S>,
    name: &str,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let d = *x.shape().last().unwrap();
    let g = ctx.get(&format!("{name}.g"), &[d], Init::Ones)?;
    let b = ctx.get(&format!("{name}.b"), &[d], Init::Zeros)?;
    x.layernorm(&g, &b, LN_EPS)
}

/// Scaled dot-product multi-head attention with output projection.
///
/// `rope`, when present, supplies per-token (row, col) positions and is
/// applied to queries and keys of every head. The causal mask is an
/// additive -inf, which makes prefix outputs bitwise independent of
/// suffix tokens.
pub fn mha<S: Scalar>(
    ctx: &ParamCtx<S>,
    name: &str,
    x: &Tensor<S>,
    cfg: &AttentionConfig,
    rope: Option<(&Rope2DParams, &[(f64, f64)])>,
) -> Result<(Tensor<S>, Option<AttentionTrace>)> {
    let s = x.shape()[0];
    let d = cfg.dim;
    if x.shape() != [s, d] {
        return Err(GvcError::dim(format!(
            "attention input {:?}, expected [{s}, {d}]",
            x.shape()
        )));
    }
    if let Some((rp, positions)) = rope {
        if positions.len() != s {
            return Err(GvcError::dim(format!(
                "{} positions for {} tokens",
                positions.len(),
                s
            )));
        }
        if rp.head_dim != cfg.head_dim() {
            return Err(GvcError::config(format!(
                "rope head_dim {} vs attention head_dim {}",
                rp.head_dim,
                cfg.head_dim()
            )));
        }
    }
    let q = linear(ctx, &format!("{name}.q"), x, d, d)?;
    let k = linear(ctx, &format!("{name}.k"), x, d, d)?;
    // variance-preserving value path: with near-uniform early attention,
    // token content must survive v then o at full strength or the
    // residual stream carries ~W_INIT^2 of it and routing never learns
    let xavier = 1.0 / (d as f64).sqrt();
    let vw = ctx.get(&format!("{name}.v.w"), &[d, d], Init::Normal(xavier))?;
    let vb = ctx.get(&format!("{name}.v.b"), &[d], Init::Zeros)?;
    let v = x.matmul(&vw)?.add(&vb)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = if cfg.causal {
        let mut m = vec![S::ZERO; s * s];
        for i in 0..s {
            for j in i + 1..s {
                m[i * s + j] = S::from_f64(f64::NEG_INFINITY);
            }
        }
        Some(ctx.tape().constant(m, vec![s, s])?)
    } else {
        None
    };
    let mut head_outs = Vec::with_capacity(cfg.heads);
    let mut trace_acc: Option<Vec<f64>> = if cfg.capture_weights {
        Some(vec![0.0; s * s])
    } else {
        None
    };
    for h in 0..cfg.heads {
        let mut qh = q.slice_cols(h * dh, dh)?;
        let mut kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        if let Some((rp, positions)) = rope {
            qh = qh.rope2d(positions, rp.base)?;
            kh = kh.rope2d(positions, rp.base)?;
        }
        let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        if let Some(m) = &mask {
            scores = scores.add(m)?;
        }
        let attn = scores.softmax(1)?;
        if let Some(acc) = trace_acc.as_mut() {
            attn.with_data(|a| {
                for (dst, &src) in acc.iter_mut().zip(a) {
                    *dst += src.to_f64() / cfg.heads as f64;
                }
            });
        }
        head_outs.push(attn.matmul(&vh)?);
    }
    let refs: Vec<&Tensor<S>> = head_outs.iter().collect();
    let merged = Tensor::concat_cols(&refs)?;
    let ow = ctx.get(&format!("{name}.o.w"), &[d, d], Init::Normal(xavier))?;
    let ob = ctx.get(&format!("{name}.o.b"), &[d], Init::Zeros)?;
    let out = merged.matmul(&ow)?.add(&ob)?;
    let trace = trace_acc.map(|weights| AttentionTrace {
        rows: s,
        cols: s,
        weights,
    });
    Ok((out, trace))
}

/// Pre-norm transformer layer: x + MHA(LN(x)), then + MLP(LN(.)) with
/// a 4x GELU MLP.
pub fn transformer_layer<S: Scalar>(
    ctx: &ParamCtx<S>,
    name: &str,
    x: &Tensor<S>,
    cfg: &AttentionConfig,
    rope: Option<(&Rope2DParams, &[(f64, f64)])>,
) -> Result<(Tensor<S>, Option<AttentionTrace>)> {
    let d = cfg.dim;
    let n1 = layernorm(ctx, &format!("{name}.ln1"), x)?;
    let (a, trace) = mha(ctx, &format!("{name}.attn"), &n1, cfg, rope)?;
    let h = x.add(&a)?;
    let n2 = layernorm(ctx, &format!("{name}.ln2"), &h)?;
    let m1 = linear(ctx, &format!("{name}.mlp1"), &n2, d, 4 * d)?.gelu();
    let m2 = linear(ctx, &format!("{name}.mlp2"), &m1, 4 * d, d)?;
    let out = h.add(&m2)?;
    Ok((out, trace))
}

/// One local layer: the same transformer layer applied to each window
/// independently (shared parameters).
pub fn local_layer<S: Scalar>(
    ctx: &ParamCtx<S>,
    name: &str,
    windows: &[Tensor<S>],
    cfg: &AttentionConfig,
) -> Result<Vec<Tensor<S>>> {
    if windows.is_empty() {
        return Err(GvcError::dim("local layer with zero windows"));
    }
    let shape = windows[0].shape().to_vec();
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        if w.shape() != shape {
            return Err(GvcError::dim(format!(
                "inconsistent window shapes {:?} vs {:?}",
                shape,
                w.shape()
            )));
        }
        let (y, _) = transformer_layer(ctx, name, w, cfg, None)?;
        out.push(y);
    }
    Ok(out)
}

/// One global layer: full-sequence attention over all tokens with 2D
/// rotary positions, enabling cross-window information flow.
pub fn global_layer<S: Scalar>(
    ctx: &ParamCtx<S>,
    name: &str,
    x: &Tensor<S>,
    cfg: &AttentionConfig,
    rope: &Rope2DParams,
    positions: &[(f64, f64)],
) -> Result<(Tensor<S>, Option<AttentionTrace>)> {
    transformer_layer(ctx, name, x, cfg, Some((rope, positions)))
}
