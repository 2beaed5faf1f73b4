//! `stereocodec`: encode, decode, train and evaluate.

mod eval;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stereocodec::bitio::{BypassCoder, SymbolCoder};
use stereocodec::codec::container::FLAG_EXTERNAL_CODER;
use stereocodec::codec::frame::{read_sequence_dir, write_sequence_dir};
use stereocodec::codec::{decode_gop, encode_gop, load_model, Container};
use stereocodec::config::CodecConfig;
use stereocodec::evalkit::container_bpp;
use stereocodec::train::{ClipSource, StageConfig, SynthConfig, TrainOptions, Trainer};
use stereocodec::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "stereocodec", version, about = "Neural stereo video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a stereo sequence directory (`left/*.png`, `right/*.png`).
    Encode(EncodeArgs),
    /// Reconstruct a sequence directory from a bitstream.
    Decode(DecodeArgs),
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Code a dataset at several rate points and write RD reports.
    Eval(eval::EvalArgs),
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 32)]
    gop: usize,
    /// Rate point; replaces `{lambda}` in the configured checkpoint path.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drop the attention score from the cross-view modules.
    #[arg(long)]
    no_attention: bool,
    /// Drop the disparity shift from the cross-view modules.
    #[arg(long)]
    no_shift: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage 1 to 4. Stages after the first continue from the configured
    /// checkpoint.
    #[arg(long)]
    stage: u8,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sequence directory to crop training clips from; omitted or
    /// `synthetic` uses generated stereo clips.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256.0)]
    lambda: f64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square crop size for clips cut from `--data`.
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 3)]
    clip_len: usize,
}

fn coder_for(flags: u16) -> Result<Box<dyn SymbolCoder>> {
    if flags & FLAG_EXTERNAL_CODER == 0 {
        return Ok(Box::new(BypassCoder));
    }
    #[cfg(feature = "rangecoder")]
    {
        Ok(Box::new(stereocodec::bitio::linked_range_coder()))
    }
    #[cfg(not(feature = "rangecoder"))]
    Err(Error::Decode("stream uses the range coder, which this build does not include".into()))
}

/// Loads the config (defaults when absent) and applies `{lambda}`.
pub(crate) fn load_config(path: Option<&Path>, lambda: Option<&str>) -> Result<CodecConfig> {
    let mut cfg = match path {
        Some(p) => CodecConfig::load(p)?,
        None => CodecConfig::default(),
    };
    if let (Some(ck), Some(l)) = (cfg.checkpoint.as_mut(), lambda) {
        *ck = ck.replace("{lambda}", l);
    }
    if cfg.checkpoint.as_deref().is_some_and(|c| c.contains("{lambda}")) {
        return Err(Error::Config("checkpoint path has {lambda} but no --lambda was given".into()));
    }
    Ok(cfg)
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.lambda.as_deref())?;
    cfg.attention &= !a.no_attention;
    cfg.shift &= !a.no_shift;
    let frames = read_sequence_dir(&a.input)?;
    let (codec, store) = load_model(cfg)?;
    let coder = coder_for(if cfg!(feature = "rangecoder") { FLAG_EXTERNAL_CODER } else { 0 })?;
    let enc = encode_gop(&codec, &store, &frames, a.gop, coder.as_ref())?;
    std::fs::write(&a.output, enc.container.to_bytes()?)?;
    eprintln!(
        "{} frames, {} bytes, {:.4} bpp",
        frames.len(),
        enc.container.byte_len(),
        container_bpp(&enc.container)?
    );
    Ok(())
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let bytes = std::fs::read(&a.input)?;
    let container = Container::from_bytes(&bytes)?;
    let coder = coder_for(container.flags)?;
    let dec = decode_gop(&container, coder.as_ref())?;
    write_sequence_dir(&a.output, &dec.frames)?;
    eprintln!("{} frames written to {}", dec.frames.len(), a.output.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    if a.stage > 1 && cfg.checkpoint.is_none() {
        return Err(Error::Config(format!("stage {} continues training: the config must name a checkpoint", a.stage)));
    }
    let mut stage = StageConfig::schedule(a.stage)?;
    if let Some(n) = a.iterations {
        stage.iterations = n;
    }
    if let Some(lr) = a.lr {
        stage.lr = lr;
    }
    let source = match a.data.as_deref() {
        None | Some("synthetic") => ClipSource::Synthetic(SynthConfig::default()),
        Some(dir) => ClipSource::Frames {
            frames: read_sequence_dir(Path::new(dir))?,
            crop: (a.crop, a.crop),
            clip_len: a.clip_len,
        },
    };
    let (codec, store) = load_model(cfg)?;
    let mut trainer = Trainer::new(codec, store, a.stage - 1);
    let opts = TrainOptions { lambda: a.lambda, batch: a.batch, seed: a.seed, source };
    let every = (stage.iterations / 20).max(1);
    let mut progress = |it: usize, loss: &stereocodec::train::stage::ClipLoss| {
        if it % every == 0 {
            eprintln!("stage {} iteration {it}: loss {:.4}", a.stage, loss.total);
        }
    };
    let report = trainer.run(&stage, &opts, Some(&mut progress))?;
    checkpoint::save(&a.out, &trainer.store)?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    eprintln!("stage {} done, final loss {last:.4}, checkpoint {}", a.stage, a.out.display());
    Ok(())
}

/// 2 for bad arguments or configuration, 3 for failures while coding.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::ShapeMismatch(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
