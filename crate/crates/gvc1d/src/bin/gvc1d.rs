//! Batch CLI. Exit codes: 0 ok, 2 usage/geometry, 3 checkpoint
//! incompatibility, 4 stream corruption.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gvc1d::bitstream;
use gvc1d::codec::{CodecConfig, NUM_RATES};
use gvc1d::entropy_model::EntropyMode;
use gvc1d::memory::MemoryMode;
use gvc1d::model::Model;
use gvc1d::synth::{generate, Motif, SyntheticVideoSpec};
use gvc1d::train::{self, TrainConfig};
use gvc1d::{GvcError, Result};

#[derive(Parser)]
#[command(name = "gvc1d", about = "1D-token video codec", version)]
struct Cli {
    /// Worker cap (GVC1D_THREADS is the fallback). The current pipeline
    /// is deterministic and single-threaded; values > 1 are accepted
    /// and capped.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a video into a .gvc stream.
    Encode(EncodeArgs),
    /// Decompress a .gvc stream to raw planar RGB.
    Decode(DecodeArgs),
    /// Train a model on synthetic or provided clips.
    Train(TrainArgs),
    /// Rate-distortion evaluation; emits CSV.
    Eval(EvalArgs),
    /// Dump decoder token-to-patch attention as CSV + PGM heat maps.
    AttnDump(AttnDumpArgs),
    /// Encode + decode internally and byte-compare reconstructions.
    RoundtripCheck(RoundtripArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Raw planar-RGB video file, or a directory of .ppm frames.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    /// Frame count; inferred from file size when omitted.
    #[arg(long)]
    frames: Option<usize>,
}

impl InputArgs {
    fn load(&self) -> Result<Vec<Vec<u8>>> {
        if !self.input.exists() {
            return Err(GvcError::Usage(format!(
                "input {} does not exist",
                self.input.display()
            )));
        }
        if self.input.is_dir() {
            return bitstream::read_ppm_dir(&self.input, self.width, self.height);
        }
        let frames = match self.frames {
            Some(f) => f,
            None => {
                let len = std::fs::metadata(&self.input)?.len() as usize;
                let per = 3 * self.width * self.height;
                if per == 0 || len % per != 0 {
                    return Err(GvcError::Usage(format!(
                        "{} bytes is not a whole number of {}x{} RGB frames",
                        len, self.width, self.height
                    )));
                }
                len / per
            }
        };
        bitstream::read_raw_video(&self.input, self.width, self.height, frames)
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Rate point 0..=7 (higher = more bits, better quality).
    #[arg(long, default_value_t = 4)]
    rate: usize,
    #[arg(long, default_value = "ar")]
    entropy: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    /// .gvc stream.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "ar")]
    entropy: String,
    /// Raw planar-RGB output file.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Synthetic data motif (squares | circles | texture); ignored when
    /// --input is given.
    #[arg(long, default_value = "squares")]
    motif: String,
    /// Optional raw RGB clip to train on instead of synthetic data.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Reconstruction-only pretrain steps (default steps/4).
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameter-init seed for a fresh model.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Resume from an existing checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Memory ablation: 1d | 2d | off.
    #[arg(long, default_value = "1d")]
    memory: String,
    /// Model config overrides, repeatable: --config dim=32
    #[arg(long, value_name = "KEY=VALUE")]
    config: Vec<String>,
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Loss-curve CSV (columns: step,rate_index,cascade,loss,mse,bpp).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sweep all 8 rate points.
    #[arg(long)]
    all_rates: bool,
    #[arg(long, default_value_t = 4)]
    rate: usize,
    #[arg(long, default_value = "ar")]
    entropy: String,
    /// RD table CSV (columns: rate_index,lambda,bpp,psnr,ms_ssim).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated frame indices to capture.
    #[arg(long, value_delimiter = ',')]
    frames_at: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    rate: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RoundtripArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    rate: usize,
    #[arg(long, default_value = "ar")]
    entropy: String,
}

fn entropy_mode(s: &str) -> Result<EntropyMode> {
    match s {
        "ar" => Ok(EntropyMode::Ar),
        "factorized" => Ok(EntropyMode::Factorized),
        other => Err(GvcError::Usage(format!(
            "unknown entropy mode '{other}' (ar | factorized)"
        ))),
    }
}

fn check_rate(rate: usize) -> Result<()> {
    if rate >= NUM_RATES {
        return Err(GvcError::Usage(format!(
            "rate index {rate} out of range 0..={}",
            NUM_RATES - 1
        )));
    }
    Ok(())
}

fn apply_config(cfg: &mut CodecConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            GvcError::Usage(format!("--config expects key=value, got '{kv}'"))
        })?;
        let num = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| GvcError::Usage(format!("bad value for {key}: '{value}'")))
        };
        match key {
            "window" => cfg.window = num()?,
            "t_w" => cfg.t_w = num()?,
            "c_lat" => cfg.c_lat = num()?,
            "dim" => cfg.dim = num()?,
            "heads" => cfg.heads = num()?,
            "enc_blocks" => cfg.enc_blocks = num()?,
            "enc_local" => cfg.enc_local = num()?,
            "dec_blocks" => cfg.dec_blocks = num()?,
            "dec_local" => cfg.dec_local = num()?,
            "mem_layers" => cfg.mem_layers = num()?,
            "mem_slots" => cfg.mem_slots = num()?,
            "em_layers" => cfg.em_layers = num()?,
            "symbol_bound" => cfg.symbol_bound = num()? as i32,
            "rope_base" => {
                cfg.rope_base = value
                    .parse()
                    .map_err(|_| GvcError::Usage(format!("bad value for {key}: '{value}'")))?
            }
            other => {
                return Err(GvcError::Usage(format!("unknown config key '{other}'")));
            }
        }
    }
    cfg.validate()
}

fn memory_mode(s: &str) -> Result<MemoryMode> {
    match s {
        "1d" => Ok(MemoryMode::OneD),
        "2d" => Ok(MemoryMode::TwoD),
        "off" => Ok(MemoryMode::Off),
        other => Err(GvcError::Usage(format!(
            "unknown memory mode '{other}' (1d | 2d | off)"
        ))),
    }
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    if !path.exists() {
        return Err(GvcError::Usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Model::load(path)
}

fn run_encode(a: &EncodeArgs) -> Result<()> {
    check_rate(a.rate)?;
    let mode = entropy_mode(&a.entropy)?;
    let frames = a.input.load()?;
    let mut model = load_model(&a.checkpoint)?;
    let enc = model.encode_video(&frames, a.input.width, a.input.height, a.rate, mode)?;
    let mut f = std::fs::File::create(&a.output)?;
    bitstream::write_stream(&mut f, &enc.header, &enc.chunks)?;
    let bpp = bitstream::bpp(&enc.header, &enc.chunks)?;
    let bits: Vec<String> = enc.frame_bits.iter().map(|b| b.to_string()).collect();
    println!(
        "encoded frames={} rate={} bpp={:.6} frame_bits=[{}]",
        frames.len(),
        a.rate,
        bpp,
        bits.join(",")
    );
    Ok(())
}

fn run_decode(a: &DecodeArgs) -> Result<()> {
    let mode = entropy_mode(&a.entropy)?;
    if !a.input.exists() {
        return Err(GvcError::Usage(format!(
            "input {} does not exist",
            a.input.display()
        )));
    }
    let mut f = std::fs::File::open(&a.input)?;
    let (header, chunks) = bitstream::read_stream(&mut f)?;
    let mut model = load_model(&a.checkpoint)?;
    let dec = model.decode_video(&header, &chunks, mode)?;
    bitstream::write_raw_video(&a.output, &dec.recon)?;
    println!(
        "decoded frames={} {}x{} -> {}",
        dec.recon.len(),
        header.width,
        header.height,
        a.output.display()
    );
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let clip = match &a.input {
        Some(path) => InputArgs {
            input: path.clone(),
            width: a.width,
            height: a.height,
            frames: Some(a.frames),
        }
        .load()?,
        None => generate(&SyntheticVideoSpec::new(
            a.width,
            a.height,
            a.frames,
            a.motif.parse::<Motif>()?,
            a.data_seed,
        )),
    };
    let mut model = match &a.resume {
        Some(path) => load_model(path)?,
        None => {
            let mut cfg = CodecConfig::toy();
            apply_config(&mut cfg, &a.config)?;
            Model::new(cfg, a.model_seed)?
        }
    };
    model.memory_mode = memory_mode(&a.memory)?;
    let mut tc = TrainConfig::new(a.steps);
    tc.lr = a.lr;
    tc.seed = a.seed;
    if let Some(s1) = a.stage1_steps {
        tc.stage1_steps = s1;
    }
    let report = train::train(&mut model, &[clip], a.width, a.height, &tc)?;
    model.save(&a.checkpoint_out)?;
    if let Some(csv) = &a.loss_csv {
        std::fs::write(csv, report.csv())?;
    }
    let first = report.steps.first().map(|s| s.mse).unwrap_or(0.0);
    let last = report.steps.last().map(|s| s.mse).unwrap_or(0.0);
    println!(
        "trained steps={} initial_mse={:.6} final_mse={:.6} checkpoint={}",
        a.steps,
        first,
        last,
        a.checkpoint_out.display()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    check_rate(a.rate)?;
    let mode = entropy_mode(&a.entropy)?;
    let frames = a.input.load()?;
    let mut model = load_model(&a.checkpoint)?;
    let points = if a.all_rates {
        train::rd_sweep(&mut model, &frames, a.input.width, a.input.height, mode)?
    } else {
        vec![train::rd_point(
            &mut model,
            &frames,
            a.input.width,
            a.input.height,
            a.rate,
            mode,
        )?]
    };
    let csv = train::rd_csv(&points);
    print!("{csv}");
    if let Some(path) = &a.out {
        std::fs::write(path, &csv)?;
    }
    Ok(())
}

fn run_attn_dump(a: &AttnDumpArgs) -> Result<()> {
    check_rate(a.rate)?;
    if a.frames_at.is_empty() {
        return Err(GvcError::Usage("--frames-at needs at least one index".into()));
    }
    let frames = a.input.load()?;
    let mut model = load_model(&a.checkpoint)?;
    let geo = model.cfg.geometry(a.input.width, a.input.height)?;
    let flows = model.outflow(&frames, a.input.width, a.input.height, a.rate, &a.frames_at)?;
    std::fs::create_dir_all(&a.out)?;
    // window-major patch index -> grid index
    let to_grid: Vec<usize> = (0..geo.n_windows())
        .flat_map(|win| geo.window_patches(win))
        .collect();
    let mut csv = String::from("frame,token,argmax_patch,argmax_row,argmax_col\n");
    for (fi, tokens) in &flows {
        for (ti, (argmax, heat)) in tokens.iter().enumerate() {
            let grid = to_grid[*argmax];
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                fi,
                ti,
                grid,
                grid / geo.w,
                grid % geo.w
            ));
            // grid-ordered heat map, peak-normalized to 8 bits
            let mut gray = vec![0u8; geo.n_patches()];
            let peak = heat.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
            for (k, &v) in heat.iter().enumerate() {
                gray[to_grid[k]] = ((v / peak) * 255.0).round() as u8;
            }
            bitstream::write_pgm(
                &a.out.join(format!("heat_f{fi}_t{ti}.pgm")),
                geo.w,
                geo.h,
                &gray,
            )?;
        }
    }
    std::fs::write(a.out.join("outflow.csv"), &csv)?;
    println!(
        "dumped {} frames x {} tokens to {}",
        flows.len(),
        flows.first().map(|(_, t)| t.len()).unwrap_or(0),
        a.out.display()
    );
    Ok(())
}

fn run_roundtrip(a: &RoundtripArgs) -> Result<()> {
    check_rate(a.rate)?;
    let mode = entropy_mode(&a.entropy)?;
    let frames = a.input.load()?;
    let mut model = load_model(&a.checkpoint)?;
    let enc = model.encode_video(&frames, a.input.width, a.input.height, a.rate, mode)?;
    let mut buf = Vec::new();
    bitstream::write_stream(&mut buf, &enc.header, &enc.chunks)?;
    let (header, chunks) = bitstream::read_stream(&mut buf.as_slice())?;
    let mut decoder = load_model(&a.checkpoint)?;
    let dec = decoder.decode_video(&header, &chunks, mode)?;
    if dec.recon != enc.recon {
        return Err(GvcError::State(
            "decoder reconstruction differs from encoder-side reconstruction".into(),
        ));
    }
    println!(
        "roundtrip ok frames={} bpp={:.6}",
        frames.len(),
        bitstream::bpp(&header, &chunks)?
    );
    Ok(())
}

fn exit_for(e: &GvcError) -> u8 {
    match e {
        GvcError::Usage(_) | GvcError::Dim(_) | GvcError::Config(_) => 2,
        GvcError::Incompatible(_) => 3,
        GvcError::Corrupt(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("GVC1D_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1);
    if threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let result = match &cli.cmd {
        Cmd::Encode(a) => run_encode(a),
        Cmd::Decode(a) => run_decode(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::AttnDump(a) => run_attn_dump(a),
        Cmd::RoundtripCheck(a) => run_roundtrip(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
