//! Variable-rate training: rate schedule, decoupled-weight-decay Adam
//! with cosine learning-rate decay, the cascade loss L = (1/T)·Σ(R + λD),
//! the training loop, and rate-distortion sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitstream;
use crate::codec::{self, CodecConfig, Geometry, NUM_RATES};
use crate::entropy::Quantizer;
use crate::entropy_model::{self, EntropyMode};
use crate::error::{GvcError, Result};
use crate::memory::{self, Context, MemoryMode, MemoryState};
use crate::metrics;
use crate::model::{lambda_schedule, Model};
use crate::params::{Init, ParamCtx, ParamStore};
use crate::tensor::{Tape, Tensor};

/// The 8 λ points and their conditioning indices.
#[derive(Clone, Copy, Debug)]
pub struct RateSchedule {
    pub lambdas: [f64; NUM_RATES],
}

impl Default for RateSchedule {
    fn default() -> Self {
        RateSchedule {
            lambdas: lambda_schedule(),
        }
    }
}

impl RateSchedule {
    pub fn lambda(&self, index: usize) -> Result<f64> {
        self.lambdas
            .get(index)
            .copied()
            .ok_or_else(|| GvcError::Usage(format!("rate index {index} out of range")))
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    /// Reconstruction-only pretrain steps before the rate term joins.
    pub stage1_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Cascade length cap; the curriculum runs 2 → 4 → this.
    pub max_cascade: usize,
}

impl TrainConfig {
    pub fn new(steps: usize) -> Self {
        TrainConfig {
            steps,
            stage1_steps: steps / 4,
            lr: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            max_cascade: 8,
        }
    }

    /// Cascade length at a given step: 2, then 4, then max.
    pub fn cascade_at(&self, step: usize) -> usize {
        let t = if step * 3 < self.steps {
            2
        } else if step * 3 < 2 * self.steps {
            4
        } else {
            self.max_cascade
        };
        t.min(self.max_cascade).max(2)
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay and cosine learning-rate decay.
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    total_steps: usize,
    t: usize,
    m: std::collections::BTreeMap<String, Vec<f64>>,
    v: std::collections::BTreeMap<String, Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        AdamW {
            lr,
            weight_decay,
            total_steps,
            t: 0,
            m: Default::default(),
            v: Default::default(),
        }
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        let frac = t as f64 / self.total_steps.max(1) as f64;
        self.lr * 0.5 * (1.0 + crate::detmath::cos(std::f64::consts::PI * frac.min(1.0)))
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[(String, Vec<f32>)],
    ) -> Result<()> {
        let lr_t = self.lr_at(self.t);
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let value = store
                .get_mut(name)
                .ok_or_else(|| GvcError::State(format!("gradient for unknown param {name}")))?;
            if g.len() != value.data.len() {
                return Err(GvcError::dim(format!(
                    "gradient for {name} has {} values, param has {}",
                    g.len(),
                    value.data.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = f64::from(g[i]);
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                let p = f64::from(value.data[i]);
                value.data[i] = (p - lr_t * (update + self.weight_decay * p)) as f32;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// cascade loss
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct LossStats {
    /// (1/T)·Σ_t [R_t + λ·D_t]; R in bits per pixel, D in MSE on the
    /// [-1, 1] pixel scale. Stage 1 drops the R term.
    pub loss: f64,
    pub frame_bits: Vec<f64>,
    pub frame_mse: Vec<f64>,
    pub grads: Vec<(String, Vec<f32>)>,
}

impl LossStats {
    pub fn mean_mse(&self) -> f64 {
        self.frame_mse.iter().sum::<f64>() / self.frame_mse.len() as f64
    }

    pub fn mean_bits(&self) -> f64 {
        self.frame_bits.iter().sum::<f64>() / self.frame_bits.len() as f64
    }
}

fn cascade_context(
    ctx: &ParamCtx<f32>,
    cfg: &CodecConfig,
    mode: MemoryMode,
    geo: &Geometry,
    mem_state: &MemoryState<f32>,
    f_t: &Option<Tensor<f32>>,
) -> Result<Context<f32>> {
    let c_s = match f_t {
        Some(t) => t.clone(),
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
        memory::memory_readout(ctx, &model_mem(cfg)?, mem_state, geo.n_windows(), cfg.t_w)?
    };
    Ok(memory::build_context(c_s, c_l))
}

fn model_mem(cfg: &CodecConfig) -> Result<crate::memory::MemoryConfig> {
    crate::memory::MemoryConfig::new(cfg.mem_slots, cfg.dim, cfg.heads, cfg.mem_layers)
}

/// One training step's loss over a T-frame cascade. The rate term
/// relaxes quantization to additive Uniform(-1/2, 1/2) noise and is
/// teacher-forced on the hard symbols the coder would see; the decoder
/// path uses straight-through rounding so training reconstructions go
/// through the same quantizer as evaluation. `rate_weight` scales the
/// rate term's pull on the encoder (0 during stage 1; the stage-2
/// warm-up ramps it to 1); the entropy-model parameters always receive
/// the full rate gradient via a detached copy of the latents.
/// Gradients flow through the whole cascade, including memory and
/// short-term context.
pub fn loss_step(
    model: &mut Model<f32>,
    frames: &[Vec<u8>],
    width: usize,
    height: usize,
    rate: usize,
    noise_seed: u64,
    rate_weight: f64,
    compute_grads: bool,
) -> Result<LossStats> {
    if frames.len() < 2 {
        return Err(GvcError::Usage(format!(
            "cascade needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let cfg = model.cfg;
    let geo = cfg.geometry(width, height)?;
    let lambda = RateSchedule {
        lambdas: model.lambdas,
    }
    .lambda(rate)?;
    let mem = model_mem(&cfg)?;
    let mode = model.memory_mode;
    let bound = cfg.symbol_bound;
    let q = Quantizer::new(bound);
    let n_sym = entropy_model::window_symbols(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);

    let tape = Tape::new();
    let ctx = ParamCtx::new(&mut model.store, tape.clone(), true);
    let mut mem_state = memory::initial_state(&ctx, &mem)?;
    let mut f_t: Option<Tensor<f32>> = None;
    let mut total: Option<Tensor<f32>> = None;
    let mut frame_bits = Vec::with_capacity(frames.len());
    let mut frame_mse = Vec::with_capacity(frames.len());

    for (fi, frame) in frames.iter().enumerate() {
        if frame.len() != 3 * width * height {
            return Err(GvcError::dim(format!(
                "frame {fi} has {} bytes, expected {}",
                frame.len(),
                3 * width * height
            )));
        }
        let pixels: Vec<f32> = bitstream::normalize_frame(frame)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let x = tape.constant(pixels, vec![3, height, width])?;
        let context = cascade_context(&ctx, &cfg, mode, &geo, &mem_state, &f_t)?;
        let y = codec::encode(&ctx, &cfg, &geo, &x, &context, rate)?;

        // noise-relaxed quantization for the rate term
        let noise: Vec<f32> = (0..y.len())
            .map(|_| (rng.gen::<f64>() - 0.5) as f32)
            .collect();
        let y_noisy = y.add(&tape.constant(noise, vec![y.len()])?.reshape(
            vec![geo.n_windows() * cfg.t_w, cfg.c_lat],
        )?)?;

        // Rate term, split two ways: the "attached" copy backpropagates
        // into the encoder through y_noisy and is scaled by rate_weight;
        // the "detached" copy sees the latents as constants, so the
        // entropy model fits p(symbols) at full strength from step 0
        // (including stage 1) without pushing the encoder toward zero.
        let mut bits_att: Option<Tensor<f32>> = None;
        let mut bits_det: Option<Tensor<f32>> = None;
        {
            let symbols =
                q.quantize(&y.value().iter().map(|&v| f64::from(v)).collect::<Vec<_>>())?;
            for win in 0..geo.n_windows() {
                let sym_idx: Vec<usize> = symbols[win * n_sym..(win + 1) * n_sym]
                    .iter()
                    .map(|&s| q.symbol_index(s))
                    .collect();
                let c_l_win = context.c_l.slice_rows(win * cfg.t_w, cfg.t_w)?;
                let c_s_win = context.c_s.gather_rows(&geo.window_patches(win))?;
                let (mu, sigma) =
                    entropy_model::ar_window_params(&ctx, &cfg, rate, &sym_idx, &c_l_win, &c_s_win)?;
                let y_win = y_noisy
                    .slice_rows(win * cfg.t_w, cfg.t_w)?
                    .reshape(vec![n_sym, 1])?;
                let y_const = tape.constant(y_win.value().to_vec(), vec![n_sym, 1])?;
                let r = entropy_model::rate_bits(&y_win, &mu, &sigma)?;
                let r_det = entropy_model::rate_bits(&y_const, &mu, &sigma)?;
                bits_att = Some(match bits_att {
                    Some(acc) => acc.add(&r)?,
                    None => r,
                });
                bits_det = Some(match bits_det {
                    Some(acc) => acc.add(&r_det)?,
                    None => r_det,
                });
            }
        }
        let bits_val = f64::from(bits_att.as_ref().unwrap().item());
        frame_bits.push(bits_val);

        // distortion on straight-through rounded values: the decoder must
        // read what survives quantization, or the encoder learns to hide
        // content inside the (-0.5, 0.5) dead zone where noise training
        // preserves it but eval rounding erases it
        let y_hat = y.ste_round().clamp(-f64::from(bound), f64::from(bound));
        let out = codec::decode(&ctx, &cfg, &geo, &y_hat, &context, rate, false)?;
        let diff = x.sub(&out.frame)?;
        let d = diff.mul(&diff)?.mean_all();
        let d_val = f64::from(d.item());
        frame_mse.push(d_val);
        if !d_val.is_finite() || !bits_val.is_finite() {
            return Err(GvcError::Numeric(format!(
                "non-finite loss term at rate index {rate}, frame {fi}: \
                 mse={d_val}, bits={bits_val}"
            )));
        }

        let px = (width * height) as f64;
        let mut term = d.scale(lambda);
        if rate_weight > 0.0 {
            term = term.add(&bits_att.unwrap().scale(rate_weight / px))?;
        }
        term = term.add(&bits_det.unwrap().scale((1.0 - rate_weight).max(0.0) / px))?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });

        // advance recurrent state from decoded quantities
        if mode != MemoryMode::Off {
            let tokens = match mode {
                MemoryMode::OneD => &out.lifted,
                MemoryMode::TwoD => &out.f_t,
                MemoryMode::Off => unreachable!(),
            };
            mem_state = memory::memory_update(&ctx, &mem, &mem_state, tokens)?;
        }
        f_t = Some(out.f_t);
    }

    let loss = total.unwrap().scale(1.0 / frames.len() as f64);
    let loss_val = f64::from(loss.item());
    if !loss_val.is_finite() {
        return Err(GvcError::Numeric(format!(
            "non-finite loss at rate index {rate}"
        )));
    }
    let grads = if compute_grads {
        loss.backward()?;
        ctx.grads()
    } else {
        Vec::new()
    };
    Ok(LossStats {
        loss: loss_val,
        frame_bits,
        frame_mse,
        grads,
    })
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StepStat {
    pub step: usize,
    pub rate: usize,
    pub cascade: usize,
    pub loss: f64,
    pub mse: f64,
    pub bpp: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepStat>,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("step,rate_index,cascade,loss,mse,bpp\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.rate, r.cascade, r.loss, r.mse, r.bpp
            ));
        }
        s
    }
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Two-stage training over a set of clips: reconstruction pretrain, then
/// the full rate-distortion objective, with the cascade-length
/// curriculum and a uniformly sampled rate index per step. Deterministic
/// for a given seed.
pub fn train(
    model: &mut Model<f32>,
    videos: &[Vec<Vec<u8>>],
    width: usize,
    height: usize,
    tc: &TrainConfig,
) -> Result<TrainReport> {
    if videos.is_empty() || videos.iter().any(|v| v.len() < 2) {
        return Err(GvcError::Usage(
            "training needs at least one clip of at least 2 frames".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(tc.lr, tc.weight_decay, tc.steps);
    let mut report = TrainReport::default();
    let mut initial_loss: Option<f64> = None;
    let mut high_steps = 0usize;
    for step in 0..tc.steps {
        let video = &videos[rng.gen_range(0..videos.len())];
        let t = tc.cascade_at(step).min(video.len());
        let start = rng.gen_range(0..=video.len() - t);
        let rate = rng.gen_range(0..NUM_RATES);
        let noise_seed = rng.gen::<u64>();
        // warm the rate term in over the first quarter of stage 2; a full-
        // strength bits penalty against a still-untrained entropy model
        // zeroes every symbol before the latent pathway becomes valuable
        let rate_weight = if step < tc.stage1_steps {
            0.0
        } else {
            let ramp = ((tc.steps - tc.stage1_steps) / 4).max(1);
            (((step - tc.stage1_steps) + 1) as f64 / ramp as f64).min(1.0)
        };
        let stats = loss_step(
            model,
            &video[start..start + t],
            width,
            height,
            rate,
            noise_seed,
            rate_weight,
            true,
        )
        .map_err(|e| GvcError::Numeric(format!("step {step}: {e}")))?;
        opt.step(&mut model.store, &stats.grads)?;
        let bpp = stats.mean_bits() / (width * height) as f64;
        report.steps.push(StepStat {
            step,
            rate,
            cascade: t,
            loss: stats.loss,
            mse: stats.mean_mse(),
            bpp,
        });
        // divergence watchdog, evaluated within each stage
        if step == 0 || step == tc.stage1_steps {
            initial_loss = Some(stats.loss.max(1e-12));
            high_steps = 0;
        } else if let Some(init) = initial_loss {
            if stats.loss > DIVERGENCE_FACTOR * init {
                high_steps += 1;
                if high_steps >= DIVERGENCE_PATIENCE {
                    return Err(GvcError::Numeric(format!(
                        "diverged: loss {} > {DIVERGENCE_FACTOR}x initial {init} \
                         for {DIVERGENCE_PATIENCE} steps (step {step}, rate index {rate}, \
                         cascade {t})",
                        stats.loss
                    )));
                }
            } else {
                high_steps = 0;
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// rate-distortion sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct RdPoint {
    pub rate: usize,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut s = String::from("rate_index,lambda,bpp,psnr,ms_ssim\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.rate, p.lambda, p.bpp, p.psnr, p.ms_ssim
        ));
    }
    s
}

/// Inversions against the expected direction in a sequence.
pub fn count_inversions(values: &[f64], increasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

/// Encode/decode a video at one rate point and measure it.
pub fn rd_point(
    model: &mut Model<f32>,
    frames: &[Vec<u8>],
    width: usize,
    height: usize,
    rate: usize,
    mode: EntropyMode,
) -> Result<RdPoint> {
    let enc = model.encode_video(frames, width, height, rate, mode)?;
    let bpp = bitstream::bpp(&enc.header, &enc.chunks)?;
    let mut psnr = 0.0;
    let mut ssim = 0.0;
    for (a, b) in frames.iter().zip(&enc.recon) {
        psnr += metrics::psnr(a, b)?;
        ssim += metrics::ms_ssim(a, b, width, height, 3)?;
    }
    Ok(RdPoint {
        rate,
        lambda: model.lambdas[rate],
        bpp,
        psnr: psnr / frames.len() as f64,
        ms_ssim: ssim / frames.len() as f64,
    })
}

/// Full 8-point sweep.
pub fn rd_sweep(
    model: &mut Model<f32>,
    frames: &[Vec<u8>],
    width: usize,
    height: usize,
    mode: EntropyMode,
) -> Result<Vec<RdPoint>> {
    (0..NUM_RATES)
        .map(|rate| rd_point(model, frames, width, height, rate, mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Motif, SyntheticVideoSpec};

    fn tiny_model(seed: u64) -> Model<f32> {
        let mut cfg = CodecConfig::toy();
        cfg.dim = 16;
        cfg.heads = 2;
        cfg.t_w = 4;
        cfg.c_lat = 2;
        cfg.enc_blocks = 1;
        cfg.enc_local = 1;
        cfg.dec_blocks = 1;
        cfg.dec_local = 1;
        cfg.mem_layers = 1;
        cfg.mem_slots = 4;
        cfg.em_layers = 1;
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_ratios() {
        let s = RateSchedule::default();
        assert_eq!(s.lambdas[0], 0.07);
        assert_eq!(s.lambdas[7], 1.5);
        let r0 = crate::detmath::ln(s.lambdas[1] / s.lambdas[0]);
        for w in s.lambdas.windows(2) {
            let r = crate::detmath::ln(w[1] / w[0]);
            assert!((r - r0).abs() < 1e-12, "{r} vs {r0}");
        }
        assert!(s.lambda(8).is_err());
    }

    #[test]
    fn loss_decomposes_per_frame() {
        let mut m = tiny_model(11);
        let video = generate(&SyntheticVideoSpec::new(64, 64, 2, Motif::TranslatingSquares, 1));
        let s = loss_step(&mut m, &video, 64, 64, 3, 42, 1.0, false).unwrap();
        let lambda = m.lambdas[3];
        let hand: f64 = s
            .frame_bits
            .iter()
            .zip(&s.frame_mse)
            .map(|(&r, &d)| r / (64.0 * 64.0) + lambda * d)
            .sum::<f64>()
            / 2.0;
        assert!(
            (s.loss - hand).abs() < 1e-3 * hand.abs().max(1.0),
            "loss {} vs hand-composed {hand}",
            s.loss
        );
        assert!(s.frame_bits.iter().all(|&b| b >= 0.0));
        assert!(s.frame_mse.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn single_frame_cascade_is_rejected() {
        let mut m = tiny_model(12);
        let video = generate(&SyntheticVideoSpec::new(64, 64, 1, Motif::TranslatingSquares, 1));
        assert!(loss_step(&mut m, &video, 64, 64, 0, 0, 1.0, false).is_err());
    }

    #[test]
    fn gradients_cover_touched_params_and_are_deterministic() {
        let video = generate(&SyntheticVideoSpec::new(64, 64, 2, Motif::BouncingCircles, 2));
        let mut m1 = tiny_model(13);
        let s1 = loss_step(&mut m1, &video, 64, 64, 0, 7, 1.0, true).unwrap();
        assert!(!s1.grads.is_empty());
        assert!(s1.grads.iter().any(|(n, _)| n.starts_with("enc.")));
        assert!(s1.grads.iter().any(|(n, _)| n.starts_with("em.")));
        assert!(s1.grads.iter().any(|(n, _)| n.starts_with("memory.")));
        let mut m2 = tiny_model(13);
        let s2 = loss_step(&mut m2, &video, 64, 64, 0, 7, 1.0, true).unwrap();
        assert_eq!(s1.loss.to_bits(), s2.loss.to_bits());
        for ((n1, g1), (n2, g2)) in s1.grads.iter().zip(&s2.grads) {
            assert_eq!(n1, n2);
            assert_eq!(
                g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn short_training_runs_and_reproduces_bitwise() {
        let video = generate(&SyntheticVideoSpec::new(64, 64, 4, Motif::TranslatingSquares, 3));
        let tc = {
            let mut tc = TrainConfig::new(6);
            tc.stage1_steps = 3;
            tc.seed = 99;
            tc
        };
        let mut m1 = tiny_model(14);
        let r1 = train(&mut m1, &[video.clone()], 64, 64, &tc).unwrap();
        assert_eq!(r1.steps.len(), 6);
        let mut m2 = tiny_model(14);
        let r2 = train(&mut m2, &[video], 64, 64, &tc).unwrap();
        for (a, b) in r1.steps.iter().zip(&r2.steps) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
        }
        assert_eq!(m1.fingerprint().unwrap(), m2.fingerprint().unwrap());
        let csv = r1.csv();
        assert!(csv.starts_with("step,rate_index,cascade,loss,mse,bpp\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn curriculum_grows() {
        let tc = TrainConfig::new(90);
        assert_eq!(tc.cascade_at(0), 2);
        assert_eq!(tc.cascade_at(40), 4);
        assert_eq!(tc.cascade_at(80), 8);
    }

    #[test]
    fn rd_sweep_structure() {
        let mut m = tiny_model(15);
        let video = generate(&SyntheticVideoSpec::new(64, 64, 2, Motif::PeriodicTexture, 4));
        let pts = rd_sweep(&mut m, &video, 64, 64, EntropyMode::Ar).unwrap();
        assert_eq!(pts.len(), 8);
        for w in pts.windows(2) {
            assert!(w[1].lambda > w[0].lambda);
        }
        assert!(pts.iter().all(|p| p.bpp > 0.0));
        let csv = rd_csv(&pts);
        assert!(csv.starts_with("rate_index,lambda,bpp,psnr,ms_ssim\n"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn inversion_counter() {
        assert_eq!(count_inversions(&[1.0, 2.0, 3.0], true), 0);
        assert_eq!(count_inversions(&[1.0, 3.0, 2.0, 4.0], true), 1);
        assert_eq!(count_inversions(&[3.0, 2.0, 2.5], false), 1);
    }

    #[test]
    fn cosine_lr_decays() {
        let opt = AdamW::new(1e-4, 0.0, 100);
        assert!((opt.lr_at(0) - 1e-4).abs() < 1e-18);
        assert!(opt.lr_at(50) < 0.6e-4);
        assert!(opt.lr_at(100) < 1e-9);
    }
}
