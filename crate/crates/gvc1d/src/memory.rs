//! Temporal context: a fixed-size recurrent 1D memory updated from
//! decoded latent tokens and read out by learnable queries, plus the
//! short-term buffer of previous-frame decoder features.
//!
//! Both halves of the context are functions of decoded quantities only,
//! so encoder and decoder reconstruct them identically.

use crate::error::{GvcError, Result};
use crate::nn::{layernorm, transformer_layer, AttentionConfig};
use crate::params::{Init, ParamCtx};
use crate::tensor::{Scalar, Tensor};

/// Number of memory slots K_m.
pub const MEM_SLOTS: usize = 64;

/// What feeds the memory update (and whether the long-term readout is
/// used at all). `TwoD` is the ablation that updates from flattened
/// previous-frame decoder features instead of decoded latent tokens;
/// `Off` zeroes the long-term context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    OneD,
    TwoD,
    Off,
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryConfig {
    pub slots: usize,
    pub dim: usize,
    pub heads: usize,
    /// D_m: transformer layers in each of the update and readout stacks.
    pub layers: usize,
}

impl MemoryConfig {
    pub fn new(slots: usize, dim: usize, heads: usize, layers: usize) -> Result<Self> {
        if slots == 0 || layers == 0 {
            return Err(GvcError::config("memory needs at least one slot and layer"));
        }
        AttentionConfig::new(dim, heads)?;
        Ok(MemoryConfig {
            slots,
            dim,
            heads,
            layers,
        })
    }

    fn attn(&self) -> AttentionConfig {
        AttentionConfig::new(self.dim, self.heads).expect("validated in new")
    }
}

/// Recurrent memory: `slots` lives on whatever tape the current episode
/// uses, so gradients can flow through a training cascade; between
/// episodes carry the raw values across with `detach_to`.
#[derive(Clone, Debug)]
pub struct MemoryState<S: Scalar> {
    pub slots: Tensor<S>,
    pub frames: usize,
}

impl<S: Scalar> MemoryState<S> {
    /// Re-leaf the slot values onto another tape, cutting gradients at
    /// the frame boundary.
    pub fn detach_to(&self, ctx: &ParamCtx<S>) -> Result<MemoryState<S>> {
        let t = ctx
            .tape()
            .constant(self.slots.value(), self.slots.shape().to_vec())?;
        Ok(MemoryState {
            slots: t,
            frames: self.frames,
        })
    }
}

/// The learnable initial state used before any frame has been decoded.
pub fn initial_state<S: Scalar>(ctx: &ParamCtx<S>, cfg: &MemoryConfig) -> Result<MemoryState<S>> {
    let slots = ctx.get(
        "memory.init",
        &[cfg.slots, cfg.dim],
        Init::Normal(0.02),
    )?;
    Ok(MemoryState { slots, frames: 0 })
}

/// Fold one frame's decoded tokens (lifted to model dim) into the
/// memory: self-attention over [slots ⊕ tokens], reading back the
/// slot-role positions through a final layernorm that bounds slot norms.
pub fn memory_update<S: Scalar>(
    ctx: &ParamCtx<S>,
    cfg: &MemoryConfig,
    state: &MemoryState<S>,
    tokens: &Tensor<S>,
) -> Result<MemoryState<S>> {
    if tokens.shape().len() != 2 || tokens.shape()[1] != cfg.dim {
        return Err(GvcError::dim(format!(
            "memory tokens {:?}, expected [*, {}]",
            tokens.shape(),
            cfg.dim
        )));
    }
    let mut seq = Tensor::concat_rows(&[&state.slots, tokens])?;
    let attn = cfg.attn();
    for l in 0..cfg.layers {
        let (y, _) = transformer_layer(ctx, &format!("memory.update.{l}"), &seq, &attn, None)?;
        seq = y;
    }
    let slots = layernorm(ctx, "memory.update.ln", &seq.slice_rows(0, cfg.slots)?)?;
    Ok(MemoryState {
        slots,
        frames: state.frames + 1,
    })
}

/// Retrieve the long-term context C_l: learnable queries (one per latent
/// position within a window, tiled across windows) cross-attend to the
/// slots. Output is (n_windows·t_w)×D.
pub fn memory_readout<S: Scalar>(
    ctx: &ParamCtx<S>,
    cfg: &MemoryConfig,
    state: &MemoryState<S>,
    n_windows: usize,
    t_w: usize,
) -> Result<Tensor<S>> {
    if n_windows == 0 || t_w == 0 {
        return Err(GvcError::dim("readout needs at least one query"));
    }
    let queries = ctx.get("memory.query", &[t_w, cfg.dim], Init::Normal(0.02))?;
    let idx: Vec<usize> = (0..n_windows * t_w).map(|i| i % t_w).collect();
    let tiled = queries.gather_rows(&idx)?;
    let mut seq = Tensor::concat_rows(&[&tiled, &state.slots])?;
    let attn = cfg.attn();
    for l in 0..cfg.layers {
        let (y, _) = transformer_layer(ctx, &format!("memory.readout.{l}"), &seq, &attn, None)?;
        seq = y;
    }
    seq.slice_rows(0, n_windows * t_w)
}

/// The full conditioning pair C = C_l ⊕ C_s routed into the encoder,
/// entropy model, and decoder.
#[derive(Clone, Debug)]
pub struct Context<S: Scalar> {
    /// Long-term readout, (N·T_w)×D.
    pub c_l: Tensor<S>,
    /// Short-term previous-frame decoder features, (h·w)×D.
    pub c_s: Tensor<S>,
}

pub fn build_context<S: Scalar>(c_s: Tensor<S>, c_l: Tensor<S>) -> Context<S> {
    Context { c_l, c_s }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> MemoryConfig {
        MemoryConfig::new(4, 8, 2, 1).unwrap()
    }

    fn rand_tokens<S: Scalar>(tape: &Tape<S>, rows: usize, dim: usize, seed: u64) -> Tensor<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<S> = (0..rows * dim)
            .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)))
            .collect();
        tape.constant(data, vec![rows, dim]).unwrap()
    }

    #[test]
    fn hundred_updates_keep_size_and_bounded_norm() {
        let cfg = cfg();
        let mut store = ParamStore::<f32>::new(1);
        let tape = Tape::new();
        let ctx = ParamCtx::new(&mut store, tape.clone(), false);
        let mut state = initial_state(&ctx, &cfg).unwrap();
        // layernorm output norm is bounded by the affine parameters
        let g = ctx.get("memory.update.ln.g", &[8], Init::Ones).unwrap();
        let b = ctx.get("memory.update.ln.b", &[8], Init::Zeros).unwrap();
        let gmax = g.value().iter().map(|v| v.abs().to_f64()).fold(0.0, f64::max);
        let bnorm = b
            .value()
            .iter()
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt();
        let bound = gmax * (8.0f64).sqrt() + bnorm + 1e-6;
        for i in 0..100 {
            let tokens = rand_tokens(&tape, 6, 8, i);
            state = memory_update(&ctx, &cfg, &state, &tokens).unwrap();
            assert_eq!(state.slots.shape(), [4, 8]);
            let v = state.slots.value();
            assert!(v.iter().all(|x| x.is_finite()));
            for s in 0..4 {
                let n: f64 = v[s * 8..(s + 1) * 8]
                    .iter()
                    .map(|x| x.to_f64() * x.to_f64())
                    .sum::<f64>()
                    .sqrt();
                assert!(n <= bound, "update {i} slot {s}: norm {n} > bound {bound}");
            }
        }
        assert_eq!(state.frames, 100);
    }

    #[test]
    fn update_is_deterministic() {
        let cfg = cfg();
        let run = || {
            let mut store = ParamStore::<f32>::new(7);
            let tape = Tape::new();
            let ctx = ParamCtx::new(&mut store, tape.clone(), false);
            let state = initial_state(&ctx, &cfg).unwrap();
            let tokens = rand_tokens(&tape, 5, 8, 42);
            memory_update(&ctx, &cfg, &state, &tokens)
                .unwrap()
                .slots
                .value()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn token_dim_mismatch_is_an_error() {
        let cfg = cfg();
        let mut store = ParamStore::<f32>::new(2);
        let tape = Tape::new();
        let ctx = ParamCtx::new(&mut store, tape.clone(), false);
        let state = initial_state(&ctx, &cfg).unwrap();
        let bad = tape.zeros(vec![5, 9], false);
        assert!(memory_update(&ctx, &cfg, &state, &bad).is_err());
    }

    #[test]
    fn readout_shape_and_first_frame_independence() {
        let cfg = cfg();
        let mut store = ParamStore::<f32>::new(3);
        let tape = Tape::new();
        let ctx = ParamCtx::new(&mut store, tape.clone(), false);
        let state = initial_state(&ctx, &cfg).unwrap();
        let a = memory_readout(&ctx, &cfg, &state, 2, 3).unwrap();
        assert_eq!(a.shape(), [6, 8]);
        // no frame input: the first-frame readout is a constant of the params
        let b = memory_readout(&ctx, &cfg, &state, 2, 3).unwrap();
        assert_eq!(
            a.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn detach_carries_values_without_grads() {
        let cfg = cfg();
        let mut store = ParamStore::<f64>::new(4);
        let tape = Tape::new();
        let ctx = ParamCtx::new(&mut store, tape.clone(), true);
        let state = initial_state(&ctx, &cfg).unwrap();
        let tokens = rand_tokens(&tape, 3, 8, 9);
        let next = memory_update(&ctx, &cfg, &state, &tokens).unwrap();

        let mut store2 = store.clone();
        let tape2 = Tape::new();
        let ctx2 = ParamCtx::new(&mut store2, tape2, true);
        let carried = next.detach_to(&ctx2).unwrap();
        assert_eq!(carried.slots.value(), next.slots.value());
        assert_eq!(carried.frames, next.frames);
        assert!(!carried.slots.requires_grad());
    }
}
