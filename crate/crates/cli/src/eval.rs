//! Dataset evaluation through an external codec executable.
//!
//! Every sequence is preprocessed once (color conversion, crop, frame
//! limit) into a temporary `left/`/`right/` PNG directory, then coded and
//! decoded by `--codec-bin` at each λ. Bpp uses the container size over both
//! views of the cropped frames; PSNR is the mean of per-frame, per-view
//! RGB-PSNR.

use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Args;
use stereocodec::codec::frame::read_sequence_dir;
use stereocodec::evalkit::{bpp, emit_report, parse_rd_csv, psnr_frames, DatasetSpec, RdRecord, Rgb8};
use stereocodec::{Error, Result};

#[derive(Args)]
pub struct EvalArgs {
    /// Executable accepting this tool's `encode` and `decode` arguments.
    #[arg(long)]
    codec_bin: PathBuf,
    /// Dataset spec file.
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated rate points, passed to `encode --lambda`.
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<String>,
    /// Label of the curve BD-rates are measured against.
    #[arg(long)]
    anchor: String,
    #[arg(long)]
    out: PathBuf,
    /// Codec config forwarded to `encode`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Label of the evaluated codec's curve.
    #[arg(long, default_value = "ours")]
    label: String,
    /// Extra curves as `label=path.csv` in `sequence,lambda,bpp,psnr` form.
    #[arg(long = "curve")]
    curves: Vec<String>,
    /// GOP override; defaults to the dataset's.
    #[arg(long)]
    gop: Option<usize>,
}

fn run_tool(bin: &Path, args: &[&std::ffi::OsStr]) -> Result<()> {
    let status = Command::new(bin).args(args).status()?;
    if !status.success() {
        return Err(Error::Decode(format!("{} {:?} exited with {status}", bin.display(), args)));
    }
    Ok(())
}

fn write_views(dir: &Path, views: &[Vec<Rgb8>; 2]) -> Result<()> {
    for (name, frames) in ["left", "right"].iter().zip(views) {
        let d = dir.join(name);
        std::fs::create_dir_all(&d)?;
        for (i, f) in frames.iter().enumerate() {
            stereocodec::codec::frame::write_png(&d.join(format!("{i:05}.png")), &f.to_tensor()?)?;
        }
    }
    Ok(())
}

fn code_sequence(a: &EvalArgs, spec: &DatasetSpec, name: &str) -> Result<Vec<RdRecord>> {
    let views = spec.load_sequence(name)?;
    let (frames, w, h) = (views[0].len(), views[0][0].width, views[0][0].height);
    let tmp = tempfile::tempdir()?;
    let src = tmp.path().join("src");
    write_views(&src, &views)?;
    let original = read_sequence_dir(&src)?;
    let gop = a.gop.unwrap_or(spec.gop).to_string();
    let mut out = Vec::new();
    for lambda in &a.lambdas {
        let value: f64 = lambda.parse().map_err(|_| Error::InvalidArgument(format!("bad lambda {lambda:?}")))?;
        let bin = tmp.path().join(format!("{lambda}.bin"));
        let rec = tmp.path().join(format!("rec_{lambda}"));
        let mut args: Vec<&std::ffi::OsStr> = vec![
            "encode".as_ref(),
            "--input".as_ref(),
            src.as_os_str(),
            "--output".as_ref(),
            bin.as_os_str(),
            "--gop".as_ref(),
            gop.as_ref(),
            "--lambda".as_ref(),
            lambda.as_ref(),
        ];
        if let Some(c) = &a.config {
            args.extend(["--config".as_ref(), c.as_os_str()]);
        }
        run_tool(&a.codec_bin, &args)?;
        run_tool(&a.codec_bin, &["decode".as_ref(), "--input".as_ref(), bin.as_os_str(), "--output".as_ref(), rec.as_os_str()])?;
        let decoded = read_sequence_dir(&rec)?;
        if decoded.len() != frames {
            return Err(Error::Decode(format!("{name}: decoded {} of {frames} frames", decoded.len())));
        }
        let mut psnr = 0.0;
        for (x, y) in original.iter().zip(&decoded) {
            psnr += psnr_frames(&x.left, &y.left)? + psnr_frames(&x.right, &y.right)?;
        }
        let bits = 8 * std::fs::metadata(&bin)?.len();
        out.push(RdRecord {
            sequence: name.to_string(),
            lambda: value,
            bpp: bpp(bits, h, w, frames, 2)?,
            psnr: psnr / (2 * frames) as f64,
        });
        eprintln!("{name} λ={lambda}: {:.4} bpp, {:.3} dB", out.last().unwrap().bpp, out.last().unwrap().psnr);
    }
    Ok(out)
}

pub fn run(a: &EvalArgs) -> Result<()> {
    let spec = DatasetSpec::load(&a.dataset)?;
    let mut curves = Vec::new();
    for c in &a.curves {
        let (label, path) = c
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--curve expects label=path, got {c:?}")))?;
        curves.push((label.to_string(), parse_rd_csv(&std::fs::read_to_string(path)?)?));
    }
    if !curves.iter().any(|(l, _)| *l == a.anchor) && a.anchor != a.label {
        return Err(Error::Config(format!("anchor {:?} is neither --label nor a --curve", a.anchor)));
    }
    let mut ours = Vec::new();
    for name in spec.sequence_names()? {
        ours.extend(code_sequence(a, &spec, &name)?);
    }
    curves.insert(0, (a.label.clone(), ours));
    let report = emit_report(&curves, &a.anchor, &a.out)?;
    for (label, bd) in &report.bd_table {
        println!("{label}: BD-rate {bd:+.2}% vs {}", a.anchor);
    }
    Ok(())
}
