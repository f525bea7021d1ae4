//! A complete codec instance: configuration, parameters, rate schedule,
//! checkpoint (de)serialization, and the per-video coding pipeline.
//!
//! The encoder reconstructs every frame from decoded quantities only
//! (decoded symbols, decoded-frame features), so the decoder — given the
//! same checkpoint and bitstream — rebuilds context, frames, and memory
//! bitwise identically.

use std::path::Path;

use crate::bitstream::{self, FrameChunk, SequenceHeader};
use crate::codec::{self, CodecConfig, Geometry, NUM_RATES};
use crate::entropy::Quantizer;
use crate::entropy_model::{self, ArWeights, EntropyMode};
use crate::error::{GvcError, Result};
use crate::memory::{self, Context, MemoryConfig, MemoryMode, MemoryState};
use crate::params::{fnv1a64, Init, ParamCtx, ParamStore};
use crate::serial;
use crate::tensor::{Scalar, Tape};

pub const CKPT_MAGIC: &[u8; 9] = b"GVC1DCKPT";
pub const CKPT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub cfg: CodecConfig,
    pub store: ParamStore<S>,
    pub lambdas: [f64; NUM_RATES],
    pub memory_mode: MemoryMode,
    /// Eval-only ablation: feed zeros for both context streams. Never
    /// serialized; both sides of a transport must agree on it.
    pub zero_context: bool,
}

/// The 8 rate-distortion weights, log-space linear between 0.07 and 1.5.
pub fn lambda_schedule() -> [f64; NUM_RATES] {
    let (lo, hi) = (0.07f64, 1.5f64);
    let mut l = [0.0; NUM_RATES];
    for (i, v) in l.iter_mut().enumerate() {
        *v = lo * crate::detmath::exp(
            crate::detmath::ln(hi / lo) * i as f64 / (NUM_RATES - 1) as f64,
        );
    }
    // pin the endpoints exactly
    l[0] = lo;
    l[NUM_RATES - 1] = hi;
    l
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut m = Model {
            cfg,
            store: ParamStore::new(seed),
            lambdas: lambda_schedule(),
            memory_mode: MemoryMode::OneD,
            zero_context: false,
        };
        m.materialize()?;
        Ok(m)
    }

    /// Touch every parameter the architecture can ever use, so the
    /// store (and thus the fingerprint) no longer depends on which
    /// operations ran first.
    fn materialize(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let side = cfg.patch * cfg.window;
        let geo = cfg.geometry(side, side)?;
        let mem = self.mem_cfg();
        {
            let tape = Tape::new();
            let ctx = ParamCtx::new(&mut self.store, tape.clone(), false);
            let state = memory::initial_state(&ctx, &mem)?;
            let start = ctx.get(
                "start_cs",
                &[cfg.window * cfg.window, cfg.dim],
                Init::Normal(0.02),
            )?;
            let idx: Vec<usize> = (0..geo.n_patches()).collect();
            let c_s = start.gather_rows(&idx)?;
            let c_l = memory::memory_readout(&ctx, &mem, &state, geo.n_windows(), cfg.t_w)?;
            let context = memory::build_context(c_s, c_l);
            let frame = ctx.tape().zeros(vec![3, side, side], false);
            let y = codec::encode(&ctx, &cfg, &geo, &frame, &context, 0)?;
            let out = codec::decode(&ctx, &cfg, &geo, &y, &context, 0, false)?;
            memory::memory_update(&ctx, &mem, &state, &out.lifted)?;
        }
        ArWeights::load(&mut self.store, &cfg)?;
        Ok(())
    }

    pub fn mem_cfg(&self) -> MemoryConfig {
        MemoryConfig::new(
            self.cfg.mem_slots,
            self.cfg.dim,
            self.cfg.heads,
            self.cfg.mem_layers,
        )
        .expect("validated config")
    }
}

fn mode_tag(m: MemoryMode) -> u8 {
    match m {
        MemoryMode::OneD => 0,
        MemoryMode::TwoD => 1,
        MemoryMode::Off => 2,
    }
}

fn tag_mode(t: u8) -> Result<MemoryMode> {
    match t {
        0 => Ok(MemoryMode::OneD),
        1 => Ok(MemoryMode::TwoD),
        2 => Ok(MemoryMode::Off),
        other => Err(GvcError::Format(format!("unknown memory mode tag {other}"))),
    }
}

impl<S: Scalar> Model<S> {
    /// Serialize to the checkpoint wire format (parameters stored f32).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        serial::write_u16(&mut out, CKPT_VERSION)?;
        let c = &self.cfg;
        for v in [
            c.patch, c.window, c.t_w, c.c_lat, c.dim, c.heads, c.enc_blocks, c.enc_local,
            c.dec_blocks, c.dec_local, c.mem_layers, c.mem_slots, c.em_layers,
        ] {
            serial::write_u32(&mut out, v as u32)?;
        }
        serial::write_u32(&mut out, c.symbol_bound as u32)?;
        serial::write_f64(&mut out, c.rope_base)?;
        serial::write_u8(&mut out, mode_tag(self.memory_mode))?;
        serial::write_u64(&mut out, self.store.seed())?;
        for l in self.lambdas {
            serial::write_f64(&mut out, l)?;
        }
        serial::write_u32(&mut out, self.store.len() as u32)?;
        for (name, value) in self.store.iter() {
            serial::write_u32(&mut out, name.len() as u32)?;
            out.extend_from_slice(name.as_bytes());
            let data: Vec<f32> = value.data.iter().map(|v| v.to_f64() as f32).collect();
            serial::write_tensor(&mut out, &value.shape, &data)?;
        }
        let crc = bitstream::crc32(&out);
        serial::write_u32(&mut out, crc)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Checkpoint fingerprint carried in every bitstream header.
    pub fn fingerprint(&self) -> Result<u64> {
        Ok(fnv1a64(&self.to_bytes()?))
    }
}

impl Model<f32> {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CKPT_MAGIC.len() + 6 {
            return Err(GvcError::Format("checkpoint too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if bitstream::crc32(body) != stored {
            return Err(GvcError::Corrupt("checkpoint CRC mismatch".into()));
        }
        let mut r = body;
        let mut magic = [0u8; 9];
        std::io::Read::read_exact(&mut r, &mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(GvcError::Format("bad checkpoint magic".into()));
        }
        let version = serial::read_u16(&mut r)?;
        if version != CKPT_VERSION {
            return Err(GvcError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut u = || serial::read_u32(&mut r).map(|v| v as usize);
        let cfg = CodecConfig {
            patch: u()?,
            window: u()?,
            t_w: u()?,
            c_lat: u()?,
            dim: u()?,
            heads: u()?,
            enc_blocks: u()?,
            enc_local: u()?,
            dec_blocks: u()?,
            dec_local: u()?,
            mem_layers: u()?,
            mem_slots: u()?,
            em_layers: u()?,
            symbol_bound: serial::read_u32(&mut r)? as i32,
            rope_base: serial::read_f64(&mut r)?,
        };
        cfg.validate()?;
        let memory_mode = tag_mode(serial::read_u8(&mut r)?)?;
        let seed = serial::read_u64(&mut r)?;
        let mut lambdas = [0.0; NUM_RATES];
        for l in lambdas.iter_mut() {
            *l = serial::read_f64(&mut r)?;
        }
        let count = serial::read_u32(&mut r)? as usize;
        let mut store = ParamStore::new(seed);
        for _ in 0..count {
            let n = serial::read_u32(&mut r)? as usize;
            if n > 4096 {
                return Err(GvcError::Format(format!("implausible name length {n}")));
            }
            let mut name = vec![0u8; n];
            std::io::Read::read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| GvcError::Format("non-utf8 parameter name".into()))?;
            let (shape, data) = serial::read_tensor(&mut r)?;
            store.insert(
                name,
                crate::params::ParamValue { shape, data },
            );
        }
        if !r.is_empty() {
            return Err(GvcError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Model {
            cfg,
            store,
            lambdas,
            memory_mode,
            zero_context: false,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// video coding pipeline
// ---------------------------------------------------------------------------

/// Rolling decoded-side state; everything in it derives from decoded
/// quantities.
struct PipelineState {
    mem_slots: Vec<f32>,
    mem_frames: usize,
    f_t: Option<Vec<f32>>,
}

pub struct EncodeResult {
    pub header: SequenceHeader,
    pub chunks: Vec<FrameChunk>,
    /// Encoder-side reconstruction, 8-bit planar RGB per frame.
    pub recon: Vec<Vec<u8>>,
    /// Quantized symbols per frame (window-major, token-major,
    /// channel-minor).
    pub symbols: Vec<Vec<i32>>,
    /// Per-frame coded payload bits (segments only).
    pub frame_bits: Vec<usize>,
    /// Per-frame (C_s, C_l) values as seen by the encoder.
    pub contexts: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug)]
pub struct DecodeResult {
    pub recon: Vec<Vec<u8>>,
    pub symbols: Vec<Vec<i32>>,
    /// Per-frame (C_s, C_l) values as rebuilt by the decoder.
    pub contexts: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Model<f32> {
    fn init_state(&mut self) -> Result<PipelineState> {
        let mem = self.mem_cfg();
        let init = self
            .store
            .get_or_init("memory.init", &[mem.slots, mem.dim], Init::Normal(0.02))?;
        Ok(PipelineState {
            mem_slots: init.data.clone(),
            mem_frames: 0,
            f_t: None,
        })
    }

    /// Reconstruct one frame from its decoded symbols, advancing the
    /// pipeline state. Returns the 8-bit frame (and the outflow trace
    /// when `capture`).
    #[allow(clippy::too_many_arguments)]
    fn reconstruct(
        ctx: &ParamCtx<f32>,
        cfg: &CodecConfig,
        mode: MemoryMode,
        geo: &Geometry,
        context: &Context<f32>,
        symbols: &[i32],
        rate: usize,
        state: &mut PipelineState,
        capture: bool,
    ) -> Result<(Vec<u8>, Option<crate::nn::AttentionTrace>)> {
        let q = Quantizer::new(cfg.symbol_bound);
        let values: Vec<f32> = q.dequantize(symbols).iter().map(|&v| v as f32).collect();
        let tokens = ctx
            .tape()
            .constant(values, vec![geo.n_windows() * cfg.t_w, cfg.c_lat])?;
        let out = codec::decode(ctx, cfg, geo, &tokens, context, rate, capture)?;
        if mode != MemoryMode::Off {
            let mem = MemoryConfig::new(cfg.mem_slots, cfg.dim, cfg.heads, cfg.mem_layers)?;
            let slots = ctx
                .tape()
                .constant(state.mem_slots.clone(), vec![mem.slots, mem.dim])?;
            let ms = MemoryState {
                slots,
                frames: state.mem_frames,
            };
            let update_tokens = match mode {
                MemoryMode::OneD => &out.lifted,
                MemoryMode::TwoD => &out.f_t,
                MemoryMode::Off => unreachable!(),
            };
            let next = memory::memory_update(ctx, &mem, &ms, update_tokens)?;
            state.mem_slots = next.slots.value();
            state.mem_frames = next.frames;
        } else {
            state.mem_frames += 1;
        }
        state.f_t = Some(out.f_t.value());
        let bytes = bitstream::denormalize_frame(
            &out.frame.value().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
        );
        Ok((bytes, out.trace))
    }

    fn window_context_slices(
        cfg: &CodecConfig,
        geo: &Geometry,
        context: &Context<f32>,
        win: usize,
    ) -> (Vec<f32>, Vec<f32>) {
        let cl = context.c_l.value();
        let d = cfg.dim;
        let cl_win = cl[win * cfg.t_w * d..(win + 1) * cfg.t_w * d].to_vec();
        let cs = context.c_s.value();
        let mut cs_win = Vec::with_capacity(cfg.window * cfg.window * d);
        for p in geo.window_patches(win) {
            cs_win.extend_from_slice(&cs[p * d..(p + 1) * d]);
        }
        (cl_win, cs_win)
    }

    fn header(
        &self,
        geo: &Geometry,
        frames: usize,
        rate: usize,
    ) -> Result<SequenceHeader> {
        Ok(SequenceHeader {
            width: geo.width as u32,
            height: geo.height as u32,
            frames: frames as u32,
            rate: rate as u8,
            model_hash: self.fingerprint()?,
            window: self.cfg.window as u8,
            t_w: self.cfg.t_w as u8,
            c_lat: self.cfg.c_lat as u8,
            bound: self.cfg.symbol_bound as u8,
        })
    }

    /// Encode a whole video at one rate point. `frames` are 8-bit
    /// planar RGB.
    pub fn encode_video(
        &mut self,
        frames: &[Vec<u8>],
        width: usize,
        height: usize,
        rate: usize,
        mode: EntropyMode,
    ) -> Result<EncodeResult> {
        let cfg = self.cfg;
        let geo = cfg.geometry(width, height)?;
        if rate >= NUM_RATES {
            return Err(GvcError::Usage(format!("rate index {rate} out of range")));
        }
        // fingerprint before any lazy parameter materialization, so it
        // matches what the decoder computes on the loaded checkpoint
        let header = self.header(&geo, frames.len(), rate)?;
        let q = Quantizer::new(cfg.symbol_bound);
        let mut state = self.init_state()?;
        let weights = ArWeights::load(&mut self.store, &cfg)?;
        let mut chunks = Vec::with_capacity(frames.len());
        let mut recon = Vec::with_capacity(frames.len());
        let mut all_symbols = Vec::with_capacity(frames.len());
        let mut frame_bits = Vec::with_capacity(frames.len());
        let mut contexts = Vec::with_capacity(frames.len());
        for (fi, frame) in frames.iter().enumerate() {
            if frame.len() != 3 * width * height {
                return Err(GvcError::dim(format!(
                    "frame {fi} has {} bytes, expected {}",
                    frame.len(),
                    3 * width * height
                )));
            }
            let tape = Tape::new();
            let ctx = ParamCtx::new(&mut self.store, tape.clone(), false);
            let context = {
                // split borrow: context builder needs &mut self only for
                // lazy param init, which ParamCtx serializes internally
                let pixels: Vec<f32> = bitstream::normalize_frame(frame)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect();
                let frame_t = tape.constant(pixels, vec![3, height, width])?;
                let context = Self::build_context_static(
                    &ctx, &cfg, self.memory_mode, self.zero_context, &geo, &state,
                )?;
                let y = codec::encode(&ctx, &cfg, &geo, &frame_t, &context, rate)?;
                let symbols =
                    q.quantize(&y.value().iter().map(|&v| f64::from(v)).collect::<Vec<_>>())?;
                let mut segments = Vec::with_capacity(geo.n_windows());
                let n_sym = entropy_model::window_symbols(&cfg);
                for win in 0..geo.n_windows() {
                    let (cl_win, cs_win) =
                        Self::window_context_slices(&cfg, &geo, &context, win);
                    segments.push(entropy_model::code_window(
                        &weights,
                        mode,
                        rate,
                        &cl_win,
                        &cs_win,
                        &symbols[win * n_sym..(win + 1) * n_sym],
                    )?);
                }
                frame_bits.push(segments.iter().map(|s| s.len() * 8).sum());
                chunks.push(FrameChunk {
                    frame: fi as u32,
                    segments,
                });
                all_symbols.push(symbols);
                context
            };
            contexts.push((context.c_s.value(), context.c_l.value()));
            let ctx = ParamCtx::new(&mut self.store, tape.clone(), false);
            let (bytes, _) = Self::reconstruct(
                &ctx,
                &cfg,
                self.memory_mode,
                &geo,
                &context,
                &all_symbols[fi],
                rate,
                &mut state,
                false,
            )?;
            recon.push(bytes);
        }
        Ok(EncodeResult {
            header,
            chunks,
            recon,
            symbols: all_symbols,
            frame_bits,
            contexts,
        })
    }

    // build_context needs &mut self for lazy init, but encode_video holds
    // other borrows; this static variant takes everything explicitly.
    fn build_context_static(
        ctx: &ParamCtx<f32>,
        cfg: &CodecConfig,
        mode: MemoryMode,
        zero: bool,
        geo: &Geometry,
        state: &PipelineState,
    ) -> Result<Context<f32>> {
        let mem = MemoryConfig::new(cfg.mem_slots, cfg.dim, cfg.heads, cfg.mem_layers)?;
        if zero {
            return Ok(memory::build_context(
                ctx.tape().zeros(vec![geo.n_patches(), cfg.dim], false),
                ctx.tape()
                    .zeros(vec![geo.n_windows() * cfg.t_w, cfg.dim], false),
            ));
        }
        let c_s = match &state.f_t {
            Some(v) => ctx
                .tape()
                .constant(v.clone(), vec![geo.n_patches(), cfg.dim])?,
            None => {
                let start = ctx.get(
                    "start_cs",
                    &[cfg.window * cfg.window, cfg.dim],
                    Init::Normal(0.02),
                )?;
                let idx: Vec<usize> = (0..geo.n_patches())
                    .map(|p| {
                        let (r, c) = (p / geo.w, p % geo.w);
                        (r % cfg.window) * cfg.window + c % cfg.window
                    })
                    .collect();
                start.gather_rows(&idx)?
            }
        };
        let c_l = if mode == MemoryMode::Off {
            ctx.tape()
                .zeros(vec![geo.n_windows() * cfg.t_w, cfg.dim], false)
        } else {
            let slots = ctx
                .tape()
                .constant(state.mem_slots.clone(), vec![mem.slots, mem.dim])?;
            let ms = MemoryState {
                slots,
                frames: state.mem_frames,
            };
            memory::memory_readout(ctx, &mem, &ms, geo.n_windows(), cfg.t_w)?
        };
        Ok(memory::build_context(c_s, c_l))
    }

    /// Decode a parsed stream. Verifies the checkpoint fingerprint.
    pub fn decode_video(
        &mut self,
        header: &SequenceHeader,
        chunks: &[FrameChunk],
        mode: EntropyMode,
    ) -> Result<DecodeResult> {
        let cfg = self.cfg;
        let hash = self.fingerprint()?;
        if header.model_hash != hash {
            return Err(GvcError::Incompatible(format!(
                "stream was coded with checkpoint {:016x}, this model is {:016x}",
                header.model_hash, hash
            )));
        }
        if (header.window as usize, header.t_w as usize, header.c_lat as usize)
            != (cfg.window, cfg.t_w, cfg.c_lat)
            || header.bound as i32 != cfg.symbol_bound
        {
            return Err(GvcError::Incompatible(
                "stream geometry fields disagree with the checkpoint config".into(),
            ));
        }
        let geo = cfg.geometry(header.width as usize, header.height as usize)?;
        let rate = header.rate as usize;
        let weights = ArWeights::load(&mut self.store, &cfg)?;
        let mut state = self.init_state()?;
        let n_sym = entropy_model::window_symbols(&cfg);
        let mut recon = Vec::with_capacity(chunks.len());
        let mut all_symbols = Vec::with_capacity(chunks.len());
        let mut contexts = Vec::with_capacity(chunks.len());
        for chunk in chunks {
            let tape = Tape::new();
            let ctx = ParamCtx::new(&mut self.store, tape.clone(), false);
            let context = Self::build_context_static(
                &ctx, &cfg, self.memory_mode, self.zero_context, &geo, &state,
            )?;
            contexts.push((context.c_s.value(), context.c_l.value()));
            let mut symbols = Vec::with_capacity(geo.n_windows() * n_sym);
            for (win, segment) in chunk.segments.iter().enumerate() {
                let (cl_win, cs_win) = Self::window_context_slices(&cfg, &geo, &context, win);
                symbols.extend(entropy_model::decode_window(
                    &weights, mode, rate, &cl_win, &cs_win, segment,
                )?);
            }
            let ctx2 = ParamCtx::new(&mut self.store, tape.clone(), false);
            let (bytes, _) =
                Self::reconstruct(
                    &ctx2, &cfg, self.memory_mode, &geo, &context, &symbols, rate, &mut state,
                    false,
                )?;
            recon.push(bytes);
            all_symbols.push(symbols);
        }
        Ok(DecodeResult {
            recon,
            symbols: all_symbols,
            contexts,
        })
    }

    /// Run the coding pipeline with attention capture on selected
    /// frames; per captured frame, per latent token: (window-major patch
    /// argmax, full attention column over patches).
    pub fn outflow(
        &mut self,
        frames: &[Vec<u8>],
        width: usize,
        height: usize,
        rate: usize,
        wanted: &[usize],
    ) -> Result<Vec<(usize, Vec<(usize, Vec<f64>)>)>> {
        let cfg = self.cfg;
        let geo = cfg.geometry(width, height)?;
        if let Some(&bad) = wanted.iter().find(|&&f| f >= frames.len()) {
            return Err(GvcError::Usage(format!(
                "frame index {bad} out of range 0..{}",
                frames.len()
            )));
        }
        let q = Quantizer::new(cfg.symbol_bound);
        let mut state = self.init_state()?;
        let mut out = Vec::new();
        for (fi, frame) in frames.iter().enumerate() {
            let tape = Tape::new();
            let ctx = ParamCtx::new(&mut self.store, tape.clone(), false);
            let context =
                Self::build_context_static(&ctx, &cfg, self.memory_mode, self.zero_context, &geo, &state)?;
            let pixels: Vec<f32> = bitstream::normalize_frame(frame)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let frame_t = tape.constant(pixels, vec![3, height, width])?;
            let y = codec::encode(&ctx, &cfg, &geo, &frame_t, &context, rate)?;
            let symbols =
                q.quantize(&y.value().iter().map(|&v| f64::from(v)).collect::<Vec<_>>())?;
            let capture = wanted.contains(&fi);
            let ctx2 = ParamCtx::new(&mut self.store, tape.clone(), false);
            let (_, trace) =
                Self::reconstruct(
                    &ctx2, &cfg, self.memory_mode, &geo, &context, &symbols, rate, &mut state,
                    capture,
                )?;
            if capture {
                let (mask_rows, latent_cols) = codec::decoder_role_indices(&cfg, &geo);
                out.push((
                    fi,
                    codec::capture_outflow(trace.as_ref(), &mask_rows, &latent_cols)?,
                ));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Motif, SyntheticVideoSpec};

    fn toy_model(seed: u64) -> Model<f32> {
        let mut cfg = CodecConfig::toy();
        cfg.dim = 32;
        cfg.heads = 2;
        cfg.enc_blocks = 1;
        cfg.enc_local = 1;
        cfg.dec_blocks = 2;
        cfg.dec_local = 1;
        cfg.mem_layers = 1;
        cfg.mem_slots = 8;
        cfg.em_layers = 1;
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn lambda_schedule_shape() {
        let l = lambda_schedule();
        assert_eq!(l[0], 0.07);
        assert_eq!(l[7], 1.5);
        for w in l.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!((l[3] - 0.2603).abs() < 1e-3, "lambda_3 = {}", l[3]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = toy_model(3);
        // touch some parameters so the blob section is nonempty
        let video = generate(&SyntheticVideoSpec::new(64, 64, 1, Motif::TranslatingSquares, 1));
        m.encode_video(&video, 64, 64, 0, EntropyMode::Ar).unwrap();
        let bytes = m.to_bytes().unwrap();
        let m2 = Model::from_bytes(&bytes).unwrap();
        assert_eq!(m2.cfg, m.cfg);
        assert_eq!(m2.lambdas, m.lambdas);
        assert_eq!(m2.memory_mode, m.memory_mode);
        assert_eq!(m2.store.len(), m.store.len());
        for (name, v) in m.store.iter() {
            let v2 = m2.store.get(name).unwrap();
            assert_eq!(v2.shape, v.shape);
            assert_eq!(
                v2.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                "param {name}"
            );
        }
        assert_eq!(m2.fingerprint().unwrap(), m.fingerprint().unwrap());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let m = toy_model(4);
        let mut bytes = m.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0x01;
        assert!(Model::from_bytes(&bytes).is_err());
        let mut short = m.to_bytes().unwrap();
        short.truncate(10);
        assert!(Model::from_bytes(&short).is_err());
    }

    #[test]
    fn video_round_trip_is_lossless_and_deterministic() {
        let mut m = toy_model(5);
        let video = generate(&SyntheticVideoSpec::new(64, 64, 3, Motif::BouncingCircles, 2));
        let enc = m.encode_video(&video, 64, 64, 2, EntropyMode::Ar).unwrap();
        assert_eq!(enc.chunks.len(), 3);
        assert_eq!(enc.header.rate, 2);

        // container round trip
        let mut buf = Vec::new();
        bitstream::write_stream(&mut buf, &enc.header, &enc.chunks).unwrap();
        let (h2, c2) = bitstream::read_stream(&mut buf.as_slice()).unwrap();

        let mut m2 = Model::from_bytes(&m.to_bytes().unwrap()).unwrap();
        let dec = m2.decode_video(&h2, &c2, EntropyMode::Ar).unwrap();
        assert_eq!(dec.symbols, enc.symbols, "token transport must be lossless");
        assert_eq!(dec.recon, enc.recon, "decoder must match encoder recon");

        // decoding twice is byte-identical
        let mut m3 = Model::from_bytes(&m.to_bytes().unwrap()).unwrap();
        let dec2 = m3.decode_video(&h2, &c2, EntropyMode::Ar).unwrap();
        assert_eq!(dec2.recon, dec.recon);
    }

    #[test]
    fn store_is_complete_at_construction() {
        let mut m = toy_model(21);
        let before = m.store.len();
        let video = generate(&SyntheticVideoSpec::new(64, 64, 2, Motif::BouncingCircles, 6));
        let enc = m.encode_video(&video, 64, 64, 3, EntropyMode::Ar).unwrap();
        m.encode_video(&video, 64, 64, 0, EntropyMode::Factorized).unwrap();
        m.decode_video(&enc.header, &enc.chunks, EntropyMode::Ar).unwrap();
        crate::train::loss_step(&mut m, &video, 64, 64, 5, 1, 1.0, true).unwrap();
        assert_eq!(
            m.store.len(),
            before,
            "an operation materialized parameters missed at construction"
        );
    }

    #[test]
    fn fingerprint_mismatch_is_incompatible() {
        let mut m = toy_model(6);
        let video = generate(&SyntheticVideoSpec::new(64, 64, 1, Motif::TranslatingSquares, 3));
        let enc = m.encode_video(&video, 64, 64, 0, EntropyMode::Ar).unwrap();
        let mut other = toy_model(7);
        let err = other
            .decode_video(&enc.header, &enc.chunks, EntropyMode::Ar)
            .unwrap_err();
        assert!(matches!(err, GvcError::Incompatible(_)), "{err}");
    }

    #[test]
    fn memory_modes_produce_valid_streams() {
        for mode in [MemoryMode::OneD, MemoryMode::TwoD, MemoryMode::Off] {
            let mut m = toy_model(8);
            m.memory_mode = mode;
            let video =
                generate(&SyntheticVideoSpec::new(64, 64, 2, Motif::PeriodicTexture, 4));
            let enc = m.encode_video(&video, 64, 64, 1, EntropyMode::Ar).unwrap();
            let mut m2 = Model::from_bytes(&m.to_bytes().unwrap()).unwrap();
            m2.memory_mode = mode;
            let dec = m2.decode_video(&enc.header, &enc.chunks, EntropyMode::Ar).unwrap();
            assert_eq!(dec.symbols, enc.symbols, "{mode:?}");
        }
    }

    #[test]
    fn outflow_shapes() {
        let mut m = toy_model(9);
        let video = generate(&SyntheticVideoSpec::new(64, 64, 2, Motif::TranslatingSquares, 5));
        let flows = m.outflow(&video, 64, 64, 0, &[1]).unwrap();
        assert_eq!(flows.len(), 1);
        let (fi, tokens) = &flows[0];
        assert_eq!(*fi, 1);
        assert_eq!(tokens.len(), m.cfg.t_w); // one window at 64x64
        for (argmax, heat) in tokens {
            assert!(*argmax < 16);
            assert_eq!(heat.len(), 16);
        }
        assert!(m.outflow(&video, 64, 64, 0, &[5]).is_err());
    }
}
