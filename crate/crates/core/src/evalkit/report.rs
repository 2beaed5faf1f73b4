//! RD-point CSVs, BD-rate tables and RD plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::bdrate::{bd_rate, RdCurve, RdPoint};

pub const CSV_HEADER: [&str; 4] = ["sequence", "lambda", "bpp", "psnr"];

/// One coded sequence at one rate point.
#[derive(Clone, Debug, PartialEq)]
pub struct RdRecord {
    pub sequence: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
}

pub fn write_rd_csv(records: &[RdRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidArgument(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in records {
        w.write_record([r.sequence.clone(), r.lambda.to_string(), r.bpp.to_string(), r.psnr.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Parses a `sequence,lambda,bpp,psnr` CSV with that exact header.
pub fn parse_rd_csv(text: &str) -> Result<Vec<RdRecord>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::Decode(format!("RD csv: {e}")))?;
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(Error::Decode(format!("RD csv: expected header {}, got {:?}", CSV_HEADER.join(","), header)));
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(|e| Error::Decode(format!("RD csv row {}: {e}", i + 1)))?;
        let num = |k: usize| -> Result<f64> {
            row[k]
                .trim()
                .parse()
                .map_err(|_| Error::Decode(format!("RD csv row {}: bad {} {:?}", i + 1, CSV_HEADER[k], &row[k])))
        };
        out.push(RdRecord { sequence: row[0].to_string(), lambda: num(1)?, bpp: num(2)?, psnr: num(3)? });
    }
    Ok(out)
}

/// Averages bpp and PSNR over sequences at each λ and builds the curve.
pub fn curve_from_records(records: &[RdRecord]) -> Result<RdCurve> {
    let mut groups: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.lambda.to_bits()).or_insert((0.0, 0.0, 0));
        g.0 += r.bpp;
        g.1 += r.psnr;
        g.2 += 1;
    }
    RdCurve::new(
        groups
            .values()
            .map(|&(b, p, n)| RdPoint { bpp: b / n as f64, psnr_db: p / n as f64 })
            .collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Report {
    pub csv_paths: Vec<PathBuf>,
    /// `(label, BD-rate % against the anchor)` in input order.
    pub bd_table: Vec<(String, f64)>,
    pub table_path: PathBuf,
    pub plot_path: PathBuf,
}

/// Writes `<label>.csv` per curve, `bd_rate.csv` against `anchor`, and an
/// RD plot `rd.png` (one color per label in input order, see the table).
pub fn emit_report(curves: &[(String, Vec<RdRecord>)], anchor: &str, out_dir: &Path) -> Result<Report> {
    let anchor_curve = curves
        .iter()
        .find(|(l, _)| l == anchor)
        .ok_or_else(|| Error::Config(format!("anchor {anchor:?} is not among the curves")))?;
    let anchor_curve = curve_from_records(&anchor_curve.1)?;
    std::fs::create_dir_all(out_dir)?;
    let mut csv_paths = Vec::new();
    let mut bd_table = Vec::new();
    let mut rd_curves = Vec::new();
    for (label, records) in curves {
        let path = out_dir.join(format!("{label}.csv"));
        std::fs::write(&path, write_rd_csv(records)?)?;
        csv_paths.push(path);
        let c = curve_from_records(records)?;
        bd_table.push((label.clone(), bd_rate(&anchor_curve, &c)?));
        rd_curves.push(c);
    }
    let mut table = String::from("label,anchor,bd_rate_percent,color\n");
    for (i, (label, bd)) in bd_table.iter().enumerate() {
        let [r, g, b] = PALETTE[i % PALETTE.len()];
        table.push_str(&format!("{label},{anchor},{bd},#{r:02x}{g:02x}{b:02x}\n"));
    }
    let table_path = out_dir.join("bd_rate.csv");
    std::fs::write(&table_path, table)?;
    let plot_path = out_dir.join("rd.png");
    plot_rd(&rd_curves, 640, 480)
        .save(&plot_path)
        .map_err(|e| Error::Image(format!("{}: {e}", plot_path.display())))?;
    Ok(Report { csv_paths, bd_table, table_path, plot_path })
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

/// Bpp on x, PSNR on y, axes fitted to the data with a 5% margin.
pub fn plot_rd(curves: &[RdCurve], width: u32, height: u32) -> image::RgbImage {
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let pad = 40.0;
    let (w, h) = (f64::from(width), f64::from(height));
    let pts = curves.iter().flat_map(|c| c.points());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.psnr_db);
        y1 = y1.max(p.psnr_db);
    }
    if x0 > x1 {
        return img;
    }
    let (mx, my) = (0.05 * (x1 - x0).max(1e-9), 0.05 * (y1 - y0).max(1e-9));
    let (x0, x1, y0, y1) = (x0 - mx, x1 + mx, y0 - my, y1 + my);
    let map = |p: &RdPoint| {
        (pad + (p.bpp - x0) / (x1 - x0) * (w - 2.0 * pad), h - pad - (p.psnr_db - y0) / (y1 - y0) * (h - 2.0 * pad))
    };
    let black = [0, 0, 0];
    line(&mut img, (pad, h - pad), (w - pad, h - pad), black);
    line(&mut img, (pad, pad), (pad, h - pad), black);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let screen: Vec<(f64, f64)> = c.points().iter().map(map).collect();
        for seg in screen.windows(2) {
            line(&mut img, seg[0], seg[1], color);
        }
        for &(x, y) in &screen {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, x + f64::from(dx), y + f64::from(dy), color);
                }
            }
        }
    }
    img
}

fn put(img: &mut image::RgbImage, x: f64, y: f64, c: [u8; 3]) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
    }
}
