//! The tokenizer pair: encoder mapping a frame plus context to 1D latent
//! tokens, and decoder mapping decoded tokens plus context back to a
//! frame through mask tokens and a patch-expansion output head.
//!
//! Every window contributes one fixed-length segment to the transformer
//! sequence; local layers see windows independently while global layers
//! attend across the whole frame with 2D rotary positions.

use crate::error::{GvcError, Result};
use crate::memory::Context;
use crate::nn::{
    global_layer, linear, local_layer, AttentionConfig, AttentionTrace, Rope2DParams,
};
use crate::params::{Init, ParamCtx};
use crate::tensor::{Scalar, Tensor};

pub const NUM_RATES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecConfig {
    /// Patch side in pixels.
    pub patch: usize,
    /// Window side in patches (W_p).
    pub window: usize,
    /// Latent tokens per window (T_w).
    pub t_w: usize,
    /// Channels per coded latent token.
    pub c_lat: usize,
    /// Transformer model dim.
    pub dim: usize,
    pub heads: usize,
    /// Encoder blocks / local layers per block.
    pub enc_blocks: usize,
    pub enc_local: usize,
    pub dec_blocks: usize,
    pub dec_local: usize,
    /// Memory update/readout depth.
    pub mem_layers: usize,
    pub mem_slots: usize,
    /// Causal layers in the autoregressive entropy model.
    pub em_layers: usize,
    /// Symbols live in [-bound, bound].
    pub symbol_bound: i32,
    pub rope_base: f64,
}

impl CodecConfig {
    pub fn default_full() -> Self {
        CodecConfig {
            patch: 16,
            window: 16,
            t_w: 32,
            c_lat: 16,
            dim: 64,
            heads: 4,
            enc_blocks: 2,
            enc_local: 2,
            dec_blocks: 2,
            dec_local: 2,
            mem_layers: 2,
            mem_slots: crate::memory::MEM_SLOTS,
            em_layers: 2,
            symbol_bound: crate::entropy::SYMBOL_BOUND,
            rope_base: 10000.0,
        }
    }

    /// Desk-scale test configuration (one window on a 64x64 frame).
    pub fn toy() -> Self {
        CodecConfig {
            window: 4,
            t_w: 8,
            c_lat: 4,
            ..Self::default_full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (v, what) in [
            (self.patch, "patch size"),
            (self.window, "window side"),
            (self.t_w, "latent tokens per window"),
            (self.c_lat, "latent channels"),
            (self.enc_blocks, "encoder blocks"),
            (self.enc_local, "encoder local layers"),
            (self.dec_blocks, "decoder blocks"),
            (self.dec_local, "decoder local layers"),
            (self.mem_layers, "memory layers"),
            (self.mem_slots, "memory slots"),
            (self.em_layers, "entropy-model layers"),
        ] {
            if v == 0 {
                return Err(GvcError::config(format!("{what} must be positive")));
            }
        }
        if self.symbol_bound < 1 {
            return Err(GvcError::config("symbol bound must be >= 1"));
        }
        AttentionConfig::new(self.dim, self.heads)?;
        Rope2DParams::new(self.dim / self.heads, self.rope_base, (1, 1))?;
        Ok(())
    }

    pub fn attn(&self) -> AttentionConfig {
        AttentionConfig::new(self.dim, self.heads).expect("validated")
    }

    pub fn geometry(&self, width: usize, height: usize) -> Result<Geometry> {
        let m = self.patch * self.window;
        if width == 0 || height == 0 || width % m != 0 || height % m != 0 {
            return Err(GvcError::config(format!(
                "frame {width}x{height} must have sides that are positive multiples of {m} \
                 (patch {} x window {})",
                self.patch, self.window
            )));
        }
        let h = height / self.patch;
        let w = width / self.patch;
        Ok(Geometry {
            width,
            height,
            h,
            w,
            windows_y: h / self.window,
            windows_x: w / self.window,
            window: self.window,
        })
    }

    /// Tokens contributed by one window to a transformer sequence:
    /// W_p^2 patch-role + W_p^2 short-term + T_w latent-role + T_w
    /// long-term.
    pub fn window_seq_len(&self) -> usize {
        2 * self.window * self.window + 2 * self.t_w
    }
}

/// Patch-grid geometry of one frame under a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    /// Patch grid height/width.
    pub h: usize,
    pub w: usize,
    pub windows_y: usize,
    pub windows_x: usize,
    window: usize,
}

impl Geometry {
    /// N: number of windows.
    pub fn n_windows(&self) -> usize {
        self.windows_y * self.windows_x
    }

    pub fn n_patches(&self) -> usize {
        self.h * self.w
    }

    /// Row-major patch indices covered by window `win`.
    pub fn window_patches(&self, win: usize) -> Vec<usize> {
        let wy = win / self.windows_x;
        let wx = win % self.windows_x;
        let mut idx = Vec::with_capacity(self.window * self.window);
        for r in 0..self.window {
            for c in 0..self.window {
                idx.push((wy * self.window + r) * self.w + wx * self.window + c);
            }
        }
        idx
    }

    /// (row, col) grid position of patch `i`.
    pub fn patch_pos(&self, i: usize) -> (f64, f64) {
        ((i / self.w) as f64, (i % self.w) as f64)
    }

    /// Position assigned to a window's latent/long-term tokens: the
    /// window center in patch coordinates.
    pub fn window_center(&self, win: usize) -> (f64, f64) {
        let wy = win / self.windows_x;
        let wx = win % self.windows_x;
        let half = (self.window as f64 - 1.0) / 2.0;
        (
            wy as f64 * self.window as f64 + half,
            wx as f64 * self.window as f64 + half,
        )
    }

    /// Inverse of window-major token order back to row-major grid order.
    fn grid_from_window_order(&self) -> Vec<usize> {
        let wp2 = self.window * self.window;
        let mut inv = vec![0usize; self.n_patches()];
        for win in 0..self.n_windows() {
            for (k, p) in self.window_patches(win).into_iter().enumerate() {
                inv[p] = win * wp2 + k;
            }
        }
        inv
    }
}

/// Linear patch embedding E_t of a [-1,1]-normalized frame [3,H,W].
pub fn embed<S: Scalar>(
    ctx: &ParamCtx<S>,
    cfg: &CodecConfig,
    geo: &Geometry,
    frame: &Tensor<S>,
) -> Result<Tensor<S>> {
    if frame.shape() != [3, geo.height, geo.width] {
        return Err(GvcError::dim(format!(
            "frame shape {:?}, expected [3, {}, {}]",
            frame.shape(),
            geo.height,
            geo.width
        )));
    }
    let patches = frame.im2patches(cfg.patch)?;
    linear(ctx, "embed", &patches, 3 * cfg.patch * cfg.patch, cfg.dim)
}

fn check_context<S: Scalar>(cfg: &CodecConfig, geo: &Geometry, context: &Context<S>) -> Result<()> {
    let n = geo.n_windows();
    if context.c_l.shape() != [n * cfg.t_w, cfg.dim] {
        return Err(GvcError::dim(format!(
            "long-term context {:?}, expected [{}, {}]",
            context.c_l.shape(),
            n * cfg.t_w,
            cfg.dim
        )));
    }
    if context.c_s.shape() != [geo.n_patches(), cfg.dim] {
        return Err(GvcError::dim(format!(
            "short-term context {:?}, expected [{}, {}]",
            context.c_s.shape(),
            geo.n_patches(),
            cfg.dim
        )));
    }
    Ok(())
}

fn check_rate(rate: usize) -> Result<()> {
    if rate >= NUM_RATES {
        return Err(GvcError::Usage(format!(
            "rate index {rate} out of range 0..{NUM_RATES}"
        )));
    }
    Ok(())
}

/// Per-token (row, col) positions for the full window-major sequence.
/// `first` and `last` are the position sources for the two leading roles
/// of each window segment (grid positions or window center).
fn sequence_positions(cfg: &CodecConfig, geo: &Geometry, latent_first: bool) -> Vec<(f64, f64)> {
    let mut pos = Vec::with_capacity(geo.n_windows() * cfg.window_seq_len());
    for win in 0..geo.n_windows() {
        let grid: Vec<(f64, f64)> = geo
            .window_patches(win)
            .into_iter()
            .map(|p| geo.patch_pos(p))
            .collect();
        let center = geo.window_center(win);
        if latent_first {
            pos.extend(std::iter::repeat(center).take(cfg.t_w));
            pos.extend_from_slice(&grid);
        } else {
            pos.extend_from_slice(&grid);
            pos.extend(std::iter::repeat(center).take(cfg.t_w));
        }
        pos.extend_from_slice(&grid);
        pos.extend(std::iter::repeat(center).take(cfg.t_w));
    }
    pos
}

/// Gather per-window segments of the grid-ordered tensor `full`
/// ([(h.w), D]) and per-window slices of `c_l`, assembling the
/// window-major sequence [role0 | role1 | C_s | C_l] per window.
fn assemble_windows<S: Scalar>(
    cfg: &CodecConfig,
    geo: &Geometry,
    role0: &[Tensor<S>],
    role1: &[Tensor<S>],
    context: &Context<S>,
) -> Result<Vec<Tensor<S>>> {
    let mut out = Vec::with_capacity(geo.n_windows());
    for win in 0..geo.n_windows() {
        let cs = context.c_s.gather_rows(&geo.window_patches(win))?;
        let cl = context.c_l.slice_rows(win * cfg.t_w, cfg.t_w)?;
        out.push(Tensor::concat_rows(&[
            &role0[win], &role1[win], &cs, &cl,
        ])?);
    }
    Ok(out)
}

struct StackOutput<S: Scalar> {
    windows: Vec<Tensor<S>>,
    penultimate: Option<Vec<Tensor<S>>>,
    trace: Option<AttentionTrace>,
}

/// M blocks of (N local layers + 1 global layer) over the window
/// sequence. Captures the state before the final block and the last
/// global attention trace when asked.
fn run_stack<S: Scalar>(
    ctx: &ParamCtx<S>,
    cfg: &CodecConfig,
    geo: &Geometry,
    prefix: &str,
    blocks: usize,
    locals: usize,
    mut windows: Vec<Tensor<S>>,
    positions: &[(f64, f64)],
    capture: bool,
) -> Result<StackOutput<S>> {
    let attn = cfg.attn();
    let rope = Rope2DParams::new(cfg.dim / cfg.heads, cfg.rope_base, (geo.h, geo.w))?;
    let seq_len = cfg.window_seq_len();
    let mut penultimate = None;
    let mut trace = None;
    for b in 0..blocks {
        if b + 1 == blocks && blocks > 1 {
            penultimate = Some(windows.clone());
        }
        for l in 0..locals {
            windows = local_layer(ctx, &format!("{prefix}.b{b}.local{l}"), &windows, &attn)?;
        }
        let refs: Vec<&Tensor<S>> = windows.iter().collect();
        let full = Tensor::concat_rows(&refs)?;
        let want_trace = capture && b + 1 == blocks;
        let cfg_g = if want_trace { attn.capture(true) } else { attn };
        let (full, tr) = global_layer(
            ctx,
            &format!("{prefix}.b{b}.global"),
            &full,
            &cfg_g,
            &rope,
            positions,
        )?;
        if want_trace {
            trace = tr;
        }
        windows = (0..geo.n_windows())
            .map(|w| full.slice_rows(w * seq_len, seq_len))
            .collect::<Result<Vec<_>>>()?;
        if blocks == 1 {
            penultimate = Some(windows.clone());
        }
    }
    Ok(StackOutput {
        windows,
        penultimate,
        trace,
    })
}

/// Encode one frame against its context: continuous latents y_t,
/// shape [(N.T_w), C_lat], window-major.
pub fn encode<S: Scalar>(
    ctx: &ParamCtx<S>,
    cfg: &CodecConfig,
    geo: &Geometry,
    frame: &Tensor<S>,
    context: &Context<S>,
    rate: usize,
) -> Result<Tensor<S>> {
    check_rate(rate)?;
    check_context(cfg, geo, context)?;
    let e_t = embed(ctx, cfg, geo, frame)?;
    let n = geo.n_windows();
    // latent tokens share one window-center position, so their queries can
    // only be told apart by content; a strong init keeps the T_w rows
    // distinct, otherwise gradient descent preserves the near-permutation
    // symmetry and every token learns the same readout
    let latent = ctx.get("latent", &[cfg.t_w, cfg.dim], Init::Normal(0.5))?;
    // per-λ-index embedding, constrained to a line in embedding space:
    // emb(r) = center + (r/(R-1) − ½)·span. Eight free embeddings learn
    // arbitrary per-rate content offsets whose bit costs are non-monotone
    // in λ on held-out clips; a linear family keeps the conditioning
    // monotone in the rate rank, matching the log-linear λ schedule.
    let center = ctx.get("rate_emb.center", &[1, cfg.dim], Init::Normal(0.02))?;
    let span = ctx.get("rate_emb.span", &[1, cfg.dim], Init::Normal(0.02))?;
    let frac = rate as f64 / (NUM_RATES - 1) as f64;
    let emb = center.add(&span.scale(frac - 0.5))?;
    let latent = latent.add(&emb.gather_rows(&vec![0; cfg.t_w])?)?;
    let mut patch_rows = Vec::with_capacity(n);
    let mut latent_rows = Vec::with_capacity(n);
    for win in 0..n {
        patch_rows.push(e_t.gather_rows(&geo.window_patches(win))?);
        latent_rows.push(latent.clone());
    }
    let windows = assemble_windows(cfg, geo, &patch_rows, &latent_rows, context)?;
    let positions = sequence_positions(cfg, geo, false);
    let out = run_stack(
        ctx,
        cfg,
        geo,
        "enc",
        cfg.enc_blocks,
        cfg.enc_local,
        windows,
        &positions,
        false,
    )?;
    let wp2 = cfg.window * cfg.window;
    let mut latents = Vec::with_capacity(n);
    for w in &out.windows {
        latents.push(w.slice_rows(wp2, cfg.t_w)?);
    }
    let refs: Vec<&Tensor<S>> = latents.iter().collect();
    let stacked = Tensor::concat_rows(&refs)?;
    // final norm + wide head init so initial latents span several
    // quantization bins; otherwise rounding zeroes them all and the
    // latent pathway gets no useful gradient, freezing training in a
    // context-only optimum
    let normed = crate::nn::layernorm(ctx, "enc.head.ln", &stacked)?;
    let w = ctx.get("enc.head.w", &[cfg.dim, cfg.c_lat], Init::Normal(0.5))?;
    let b = ctx.get("enc.head.b", &[cfg.c_lat], Init::Zeros)?;
    let y = normed.matmul(&w)?.add(&b)?;
    // per-rate gain = learned quantization step: scaling the latents up
    // means finer effective quantization and more bits, giving each rate
    // index a direct one-parameter rate/distortion knob
    y.mul(&rate_gain(ctx, cfg, rate, n * cfg.t_w, false)?)
}

/// Per-rate latent gain (or its reciprocal) broadcast to [rows, C_lat].
/// The log-gain ladder is monotone in the rate index by construction —
/// log g(r) = base + spread·(r/(R-1) − ½), spread kept positive — so a
/// higher rate index always means finer effective quantization; the
/// base step and the ladder's width are learned per channel.
fn rate_gain<S: Scalar>(
    ctx: &ParamCtx<S>,
    cfg: &CodecConfig,
    rate: usize,
    rows: usize,
    inverse: bool,
) -> Result<Tensor<S>> {
    let base = ctx.get("rate_gain.base", &[1, cfg.c_lat], Init::Zeros)?;
    let spread = ctx.get("rate_gain.spread", &[1, cfg.c_lat], Init::Zeros)?;
    // softplus(spread), scaled so the initial ladder spans ~8x
    let sp = spread.exp().add_scalar(1.0).ln();
    let frac = rate as f64 / (NUM_RATES - 1) as f64;
    let logg = base.add(&sp.scale(3.0 * (frac - 0.5)))?;
    let logg = if inverse { logg.scale(-1.0) } else { logg };
    Ok(logg.gather_rows(&vec![0; rows])?.exp())
}

/// Precision-dependent shrinkage applied to dequantized latents,
/// broadcast to [rows, C_lat]. Coarse quantization steps make the
/// rounded token a noisier estimate of the latent, so the decoder
/// shrinks it toward zero (posterior-mean dequantization); the slope
/// and bias of the confidence curve are learned per channel. Because
/// the factor is purely multiplicative, zero tokens decode identically
/// at every rate.
fn dequant_shrink<S: Scalar>(
    ctx: &ParamCtx<S>,
    cfg: &CodecConfig,
    rate: usize,
    rows: usize,
) -> Result<Tensor<S>> {
    let k0 = ctx.get("dequant_shrink.bias", &[1, cfg.c_lat], Init::Ones)?;
    let k1 = ctx.get("dequant_shrink.slope", &[1, cfg.c_lat], Init::Ones)?;
    let base = ctx.get("rate_gain.base", &[1, cfg.c_lat], Init::Zeros)?;
    let spread = ctx.get("rate_gain.spread", &[1, cfg.c_lat], Init::Zeros)?;
    let sp = spread.exp().add_scalar(1.0).ln();
    let frac = rate as f64 / (NUM_RATES - 1) as f64;
    let logg = base.add(&sp.scale(3.0 * (frac - 0.5)))?;
    let z = k0.add(&k1.mul(&logg)?)?;
    // sigmoid(z) = 1 / (1 + e^{-z})
    let conf = z.neg().exp().add_scalar(1.0).ln().neg().exp();
    Ok(conf.gather_rows(&vec![0; rows])?)
}

#[derive(Clone, Debug)]
pub struct DecodeOutput<S: Scalar> {
    /// Reconstructed frame [3, H, W], clamped to [-1, 1].
    pub frame: Tensor<S>,
    /// Mask-role features before the final decoder block, grid order
    /// [(h.w), D]; the next frame's short-term context.
    pub f_t: Tensor<S>,
    /// Decoded tokens lifted to model dim, [(N.T_w), D]; feeds the
    /// memory update.
    pub lifted: Tensor<S>,
    /// Last global-layer attention, when capture was requested.
    pub trace: Option<AttentionTrace>,
}

/// Decode dequantized latents [(N.T_w), C_lat] back to a frame.
pub fn decode<S: Scalar>(
    ctx: &ParamCtx<S>,
    cfg: &CodecConfig,
    geo: &Geometry,
    tokens: &Tensor<S>,
    context: &Context<S>,
    rate: usize,
    capture: bool,
) -> Result<DecodeOutput<S>> {
    check_rate(rate)?;
    check_context(cfg, geo, context)?;
    let n = geo.n_windows();
    if tokens.shape() != [n * cfg.t_w, cfg.c_lat] {
        return Err(GvcError::dim(format!(
            "latent tokens {:?}, expected [{}, {}]",
            tokens.shape(),
            n * cfg.t_w,
            cfg.c_lat
        )));
    }
    // Rate enters the decoder only multiplicatively, through the inverse
    // gain and a learned precision-dependent shrinkage (posterior-mean
    // style dequantization: coarse steps mean noisier tokens, so they are
    // shrunk toward zero). Zero tokens therefore decode identically at
    // every rate, and quality differences across rates can only come
    // through symbol fidelity.
    let unscaled = tokens
        .mul(&rate_gain(ctx, cfg, rate, n * cfg.t_w, true)?)?
        .mul(&dequant_shrink(ctx, cfg, rate, n * cfg.t_w)?)?;
    let lifted_all = linear(ctx, "dec.lift", &unscaled, cfg.c_lat, cfg.dim)?;
    // per-token identity so mask queries can address "token t" even when
    // the decoded values are near zero; all T_w rows share one position
    let tok_id = ctx.get("dec.tok_id", &[cfg.t_w, cfg.dim], Init::Normal(0.5))?;
    let tok_rows = tok_id.gather_rows(&(0..n * cfg.t_w).map(|i| i % cfg.t_w).collect::<Vec<_>>())?;
    let lifted_all = lifted_all.add(&tok_rows)?;
    let mask = ctx.get(
        "mask",
        &[cfg.window * cfg.window, cfg.dim],
        Init::Normal(0.5),
    )?;
    let mut latent_rows = Vec::with_capacity(n);
    let mut mask_rows = Vec::with_capacity(n);
    for win in 0..n {
        latent_rows.push(lifted_all.slice_rows(win * cfg.t_w, cfg.t_w)?);
        mask_rows.push(mask.clone());
    }
    let windows = assemble_windows(cfg, geo, &latent_rows, &mask_rows, context)?;
    let positions = sequence_positions(cfg, geo, true);
    let out = run_stack(
        ctx,
        cfg,
        geo,
        "dec",
        cfg.dec_blocks,
        cfg.dec_local,
        windows,
        &positions,
        capture,
    )?;
    let wp2 = cfg.window * cfg.window;
    let collect_masks = |windows: &[Tensor<S>]| -> Result<Tensor<S>> {
        let mut parts = Vec::with_capacity(n);
        for w in windows {
            parts.push(w.slice_rows(cfg.t_w, wp2)?);
        }
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        // window-major back to row-major grid order
        Tensor::concat_rows(&refs)?.gather_rows(&geo.grid_from_window_order())
    };
    let final_masks = collect_masks(&out.windows)?;
    let f_t = collect_masks(out.penultimate.as_ref().expect("stack ran at least one block"))?;
    let pixels = linear(
        ctx,
        "out.head",
        &final_masks,
        cfg.dim,
        3 * cfg.patch * cfg.patch,
    )?;
    let frame = pixels
        .patches2im(3, geo.height, geo.width, cfg.patch)?
        .clamp(-1.0, 1.0);
    Ok(DecodeOutput {
        frame,
        f_t,
        lifted: lifted_all,
        trace: out.trace,
    })
}

/// Global-sequence indices of the mask-role rows (queries) and
/// latent-role columns, for attention outflow analysis of a decode
/// trace.
pub fn decoder_role_indices(cfg: &CodecConfig, geo: &Geometry) -> (Vec<usize>, Vec<usize>) {
    let seq = cfg.window_seq_len();
    let wp2 = cfg.window * cfg.window;
    let mut mask_rows = Vec::with_capacity(geo.n_patches());
    let mut latent_cols = Vec::with_capacity(geo.n_windows() * cfg.t_w);
    for win in 0..geo.n_windows() {
        for t in 0..cfg.t_w {
            latent_cols.push(win * seq + t);
        }
        for p in 0..wp2 {
            mask_rows.push(win * seq + cfg.t_w + p);
        }
    }
    (mask_rows, latent_cols)
}

/// For each latent token: the patch (window-major index) whose mask
/// query attends to it most, ties to the lowest index, plus the full
/// attention column over mask rows as a heat map.
pub fn capture_outflow(
    trace: Option<&AttentionTrace>,
    mask_rows: &[usize],
    latent_cols: &[usize],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let trace = trace.ok_or_else(|| {
        GvcError::State("no attention trace captured; decode with capture enabled".into())
    })?;
    let mut out = Vec::with_capacity(latent_cols.len());
    for &j in latent_cols {
        let column: Vec<f64> = mask_rows.iter().map(|&i| trace.at(i, j)).collect();
        let mut best = 0usize;
        for (k, &v) in column.iter().enumerate() {
            if v > column[best] {
                best = k;
            }
        }
        out.push((best, column));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::memory::build_context;
    use crate::params::ParamStore;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Very small config for unit-level checks.
    fn micro() -> CodecConfig {
        CodecConfig {
            patch: 2,
            window: 2,
            t_w: 2,
            c_lat: 2,
            dim: 8,
            heads: 2,
            enc_blocks: 2,
            enc_local: 1,
            dec_blocks: 2,
            dec_local: 1,
            mem_layers: 1,
            mem_slots: 4,
            em_layers: 1,
            symbol_bound: 15,
            rope_base: 100.0,
        }
    }

    fn rand_frame<S: Scalar>(tape: &Tape<S>, h: usize, w: usize, seed: u64) -> Tensor<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<S> = (0..3 * h * w)
            .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)))
            .collect();
        tape.constant(data, vec![3, h, w]).unwrap()
    }

    fn zero_context<S: Scalar>(
        tape: &Tape<S>,
        cfg: &CodecConfig,
        geo: &Geometry,
    ) -> Context<S> {
        build_context(
            tape.zeros(vec![geo.n_patches(), cfg.dim], false),
            tape.zeros(vec![geo.n_windows() * cfg.t_w, cfg.dim], false),
        )
    }

    #[test]
    fn window_count_formula_across_geometries() {
        let mut cfg = CodecConfig::default_full();
        for (width, height, n) in [
            (256usize, 256usize, 1usize),
            (256, 512, 2),
            (512, 512, 4),
            (1024, 256, 4),
            (768, 512, 6),
        ] {
            let geo = cfg.geometry(width, height).unwrap();
            assert_eq!(geo.n_windows(), n, "{width}x{height}");
            assert_eq!(
                geo.n_windows(),
                geo.n_patches() / (cfg.window * cfg.window)
            );
        }
        // toy scale: 64x64 with window side 4 is a single window
        cfg = CodecConfig::toy();
        let geo = cfg.geometry(64, 64).unwrap();
        assert_eq!((geo.h, geo.w, geo.n_windows()), (4, 4, 1));
        assert!(cfg.geometry(60, 64).is_err());
        let msg = cfg.geometry(60, 64).unwrap_err().to_string();
        assert!(msg.contains("64"), "error should name the multiple: {msg}");
    }

    #[test]
    fn encode_output_shape_and_determinism() {
        let cfg = micro();
        let geo = cfg.geometry(8, 8).unwrap(); // h=w=4, N=4
        let run = || {
            let mut store = ParamStore::<f32>::new(5);
            let tape = Tape::new();
            let ctx = ParamCtx::new(&mut store, tape.clone(), false);
            let frame = rand_frame(&tape, 8, 8, 1);
            let context = zero_context(&tape, &cfg, &geo);
            encode(&ctx, &cfg, &geo, &frame, &context, 3).unwrap()
        };
        let y = run();
        assert_eq!(y.shape(), [4 * cfg.t_w, cfg.c_lat]);
        let y2 = run();
        assert_eq!(
            y.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y2.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_head_means_zero_latents() {
        let cfg = micro();
        let geo = cfg.geometry(4, 4).unwrap();
        let mut store = ParamStore::<f32>::new(6);
        store
            .get_or_init("enc.head.w", &[cfg.dim, cfg.c_lat], Init::Zeros)
            .unwrap();
        store
            .get_or_init("enc.head.b", &[cfg.c_lat], Init::Zeros)
            .unwrap();
        let tape = Tape::new();
        let ctx = ParamCtx::new(&mut store, tape.clone(), false);
        let frame = tape.zeros(vec![3, 4, 4], false);
        let context = zero_context(&tape, &cfg, &geo);
        let y = encode(&ctx, &cfg, &geo, &frame, &context, 0).unwrap();
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_shape_and_range() {
        let cfg = micro();
        let geo = cfg.geometry(8, 8).unwrap();
        let mut store = ParamStore::<f32>::new(7);
        let tape = Tape::new();
        let ctx = ParamCtx::new(&mut store, tape.clone(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tok: Vec<f32> = (0..4 * cfg.t_w * cfg.c_lat)
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let tokens = tape.constant(tok, vec![4 * cfg.t_w, cfg.c_lat]).unwrap();
        let context = zero_context(&tape, &cfg, &geo);
        let out = decode(&ctx, &cfg, &geo, &tokens, &context, 3, true).unwrap();
        assert_eq!(out.frame.shape(), [3, 8, 8]);
        assert_eq!(out.f_t.shape(), [geo.n_patches(), cfg.dim]);
        assert_eq!(out.lifted.shape(), [4 * cfg.t_w, cfg.dim]);
        assert!(out
            .frame
            .value()
            .iter()
            .all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(out.trace.is_some());
        // token count mismatch
        let bad = tape.zeros(vec![3, cfg.c_lat], false);
        assert!(decode(&ctx, &cfg, &geo, &bad, &context, 3, false).is_err());
    }

    #[test]
    fn latent_count_is_resolution_decoupled() {
        let cfg = micro();
        let g1 = cfg.geometry(4, 4).unwrap();
        let g2 = cfg.geometry(4, 8).unwrap();
        assert_eq!(g2.n_windows(), 2 * g1.n_windows());
        // per-window token geometry unchanged
        assert_eq!(cfg.window_seq_len(), cfg.window_seq_len());
    }

    #[test]
    fn encoder_latents_grad_check_wrt_frame() {
        let cfg = micro();
        let geo = cfg.geometry(4, 4).unwrap();
        let mut store = ParamStore::<f64>::new(11);
        // materialize params once so the closure only re-binds them
        {
            let tape = Tape::new();
            let ctx = ParamCtx::new(&mut store, tape.clone(), false);
            let frame = rand_frame(&tape, 4, 4, 3);
            let context = zero_context(&tape, &cfg, &geo);
            encode(&ctx, &cfg, &geo, &frame, &context, 1).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame_data: Vec<f64> = (0..48).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let report = grad_check(
            |tape, inputs| {
                let frame = &inputs[0];
                let mut s = store.clone();
                let ctx = ParamCtx::new(&mut s, tape.clone(), false);
                let context = zero_context(tape, &cfg, &geo);
                let y = encode(&ctx, &cfg, &geo, frame, &context, 1)?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[(frame_data, vec![3, 4, 4])],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn outflow_argmax_and_tie_rule() {
        // synthetic trace: 3 mask rows x 2 latent cols inside a 5x5 grid
        let mut weights = vec![0.0; 25];
        let mask_rows = [1usize, 2, 3];
        let latent_cols = [0usize, 4];
        // column 0 uniform over mask rows -> tie, lowest patch index
        for &r in &mask_rows {
            weights[r * 5] = 0.2;
        }
        // column 4 one-hot at mask row 3 (patch 2)
        weights[3 * 5 + 4] = 0.9;
        let trace = AttentionTrace {
            rows: 5,
            cols: 5,
            weights,
        };
        let out = capture_outflow(Some(&trace), &mask_rows, &latent_cols).unwrap();
        assert_eq!(out[0].0, 0);
        assert_eq!(out[1].0, 2);
        assert_eq!(out[0].1.len(), 3);
        assert!(capture_outflow(None, &mask_rows, &latent_cols).is_err());
    }

    #[test]
    fn role_indices_cover_the_sequence() {
        let cfg = micro();
        let geo = cfg.geometry(8, 8).unwrap();
        let (mask_rows, latent_cols) = decoder_role_indices(&cfg, &geo);
        assert_eq!(mask_rows.len(), geo.n_patches());
        assert_eq!(latent_cols.len(), geo.n_windows() * cfg.t_w);
        let seq = cfg.window_seq_len() * geo.n_windows();
        assert!(mask_rows.iter().chain(latent_cols.iter()).all(|&i| i < seq));
    }

    #[test]
    fn toy_window_seq_len() {
        assert_eq!(CodecConfig::toy().window_seq_len(), 48);
        assert_eq!(CodecConfig::default_full().window_seq_len(), 576);
    }
}
