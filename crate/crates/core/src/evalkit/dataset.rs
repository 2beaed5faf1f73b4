//! Evaluation datasets: crop rules, color pipelines and sequence loading.
//!
//! A dataset spec file uses the same `key = value` form as codec configs:
//!
//! ```text
//! preset = kitti            # cityscapes | kitti | nagoya, fills defaults
//! name = kitti2012
//! root = /data/kitti2012    # one sub-directory per sequence
//! crop = bottom_right 1216 320   # or: margins T B L R | identity
//! gop = 21
//! frames = 21               # 0 keeps every frame
//! views = left right
//! format = png              # or: yuv420 1024x768
//! sequences = a, b          # default: every sub-directory of root
//! ```
//!
//! PNG sequences live in `<root>/<seq>/<view>/*.png` (sorted by name); YUV
//! sequences in `<root>/<seq>/<view>.yuv` as packed 8-bit 4:2:0 frames.

use std::path::{Path, PathBuf};

use crate::codec::frame::png_paths;
use crate::error::{Error, Result};

use super::color::{yuv420_to_rgb_bt709, Rgb8, Yuv420};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropRule {
    Identity,
    /// Pixels removed from each side.
    Margins { top: usize, bottom: usize, left: usize, right: usize },
    /// Keeps the bottom-right `width × height` region.
    BottomRight { width: usize, height: usize },
}

impl CropRule {
    /// Output size and top-left offset for a `width × height` source.
    pub fn window(&self, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
        let undersized = || Error::InvalidArgument(format!("{width}x{height} source too small for crop {self:?}"));
        let (w, h, x0, y0) = match *self {
            CropRule::Identity => (width, height, 0, 0),
            CropRule::Margins { top, bottom, left, right } => {
                let w = width.checked_sub(left + right).ok_or_else(undersized)?;
                let h = height.checked_sub(top + bottom).ok_or_else(undersized)?;
                (w, h, left, top)
            }
            CropRule::BottomRight { width: cw, height: ch } => {
                let x0 = width.checked_sub(cw).ok_or_else(undersized)?;
                let y0 = height.checked_sub(ch).ok_or_else(undersized)?;
                (cw, ch, x0, y0)
            }
        };
        if w == 0 || h == 0 {
            return Err(undersized());
        }
        Ok((w, h, x0, y0))
    }

    pub fn apply(&self, img: &Rgb8) -> Result<Rgb8> {
        let (w, h, x0, y0) = self.window(img.width, img.height)?;
        let mut data = Vec::with_capacity(3 * w * h);
        for row in y0..y0 + h {
            let start = 3 * (row * img.width + x0);
            data.extend_from_slice(&img.data[start..start + 3 * w]);
        }
        Rgb8::new(w, h, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorPipeline {
    /// 8-bit RGB PNG files.
    Png,
    /// Packed 4:2:0 files converted with limited-range BT.709.
    Yuv420 { width: usize, height: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub crop: CropRule,
    pub gop: usize,
    /// Frames evaluated per sequence; `None` keeps all.
    pub frames: Option<usize>,
    pub views: [String; 2],
    pub color: ColorPipeline,
    pub root: Option<PathBuf>,
    pub sequences: Vec<String>,
}

impl DatasetSpec {
    /// 2048×1024 frames, 64 rows off the top, 256 off the bottom and 128
    /// columns off the left, leaving 1920×704; 30-frame GOPs.
    pub fn cityscapes() -> Self {
        DatasetSpec {
            name: "cityscapes".into(),
            crop: CropRule::Margins { top: 64, bottom: 256, left: 128, right: 0 },
            gop: 30,
            frames: Some(30),
            views: ["left".into(), "right".into()],
            color: ColorPipeline::Png,
            root: None,
            sequences: Vec::new(),
        }
    }

    /// Bottom-right 1216×320 window; 21-frame GOPs.
    pub fn kitti() -> Self {
        DatasetSpec {
            name: "kitti".into(),
            crop: CropRule::BottomRight { width: 1216, height: 320 },
            gop: 21,
            frames: Some(21),
            ..Self::cityscapes()
        }
    }

    /// Full 1024×768 frames, first 96 frames of views 1 and 3, converted
    /// from 4:2:0; 32-frame GOPs.
    pub fn nagoya() -> Self {
        DatasetSpec {
            name: "nagoya".into(),
            crop: CropRule::Identity,
            gop: 32,
            frames: Some(96),
            views: ["view1".into(), "view3".into()],
            color: ColorPipeline::Yuv420 { width: 1024, height: 768 },
            ..Self::cityscapes()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cityscapes" => Ok(Self::cityscapes()),
            "kitti" => Ok(Self::kitti()),
            "nagoya" => Ok(Self::nagoya()),
            _ => Err(Error::Config(format!("unknown dataset preset {name:?}"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut spec = match entries.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => Self::preset(v)?,
            None => Self::cityscapes(),
        };
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
        };
        for (k, v) in &entries {
            let words: Vec<&str> = v.split_whitespace().collect();
            match k.as_str() {
                "preset" => {}
                "name" => spec.name = v.clone(),
                "root" => spec.root = Some(PathBuf::from(v)),
                "gop" => spec.gop = num(k, v)?,
                "frames" => spec.frames = Some(num(k, v)?).filter(|&n| n > 0),
                "views" => match words.as_slice() {
                    [a, b] => spec.views = [a.to_string(), b.to_string()],
                    _ => return Err(Error::Config(format!("views: expected two names, got {v:?}"))),
                },
                "sequences" => {
                    spec.sequences = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
                }
                "crop" => {
                    spec.crop = match words.as_slice() {
                        ["identity"] => CropRule::Identity,
                        ["margins", t, b, l, r] => CropRule::Margins {
                            top: num(k, t)?,
                            bottom: num(k, b)?,
                            left: num(k, l)?,
                            right: num(k, r)?,
                        },
                        ["bottom_right", w, h] => CropRule::BottomRight { width: num(k, w)?, height: num(k, h)? },
                        _ => return Err(Error::Config(format!("crop: cannot parse {v:?}"))),
                    }
                }
                "format" => {
                    spec.color = match words.as_slice() {
                        ["png"] => ColorPipeline::Png,
                        ["yuv420", dims] => {
                            let (w, h) = dims
                                .split_once('x')
                                .ok_or_else(|| Error::Config(format!("format: expected WxH, got {dims:?}")))?;
                            ColorPipeline::Yuv420 { width: num(k, w)?, height: num(k, h)? }
                        }
                        _ => return Err(Error::Config(format!("format: cannot parse {v:?}"))),
                    }
                }
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gop == 0 {
            return Err(Error::Config("gop must be positive".into()));
        }
        if let CropRule::BottomRight { width: 0, .. } | CropRule::BottomRight { height: 0, .. } = self.crop {
            return Err(Error::Config("crop dimensions must be positive".into()));
        }
        if let ColorPipeline::Yuv420 { width, height } = self.color {
            if width == 0 || height == 0 {
                return Err(Error::Config("yuv420 dimensions must be positive".into()));
            }
            self.crop.window(width, height).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Sequence names: the explicit list, else every sub-directory of root.
    pub fn sequence_names(&self) -> Result<Vec<String>> {
        if !self.sequences.is_empty() {
            return Ok(self.sequences.clone());
        }
        let root = self.root()?;
        let mut names = Vec::new();
        for entry in std::fs::read_dir(root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    }

    fn root(&self) -> Result<&Path> {
        self.root.as_deref().ok_or_else(|| Error::Config("dataset spec has no root".into()))
    }

    /// Loads, converts and crops one sequence: `[left frames, right frames]`.
    pub fn load_sequence(&self, name: &str) -> Result<[Vec<Rgb8>; 2]> {
        let dir = self.root()?.join(name);
        let mut out: [Vec<Rgb8>; 2] = Default::default();
        for (slot, view) in out.iter_mut().zip(&self.views) {
            let raw = match self.color {
                ColorPipeline::Png => load_png_dir(&dir.join(view), self.frames)?,
                ColorPipeline::Yuv420 { width, height } => {
                    load_yuv(&dir.join(format!("{view}.yuv")), width, height, self.frames)?
                }
            };
            *slot = raw.iter().map(|f| crop_dataset(f, self)).collect::<Result<_>>()?;
        }
        if out[0].len() != out[1].len() || out[0].is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sequence {name}: {} left and {} right frames",
                out[0].len(),
                out[1].len()
            )));
        }
        Ok(out)
    }
}

pub fn crop_dataset(frame: &Rgb8, spec: &DatasetSpec) -> Result<Rgb8> {
    spec.crop.apply(frame)
}

fn load_png_dir(dir: &Path, limit: Option<usize>) -> Result<Vec<Rgb8>> {
    let paths = png_paths(dir)?;
    let n = limit.map_or(paths.len(), |l| l.min(paths.len()));
    paths[..n]
        .iter()
        .map(|p| {
            let img = image::open(p).map_err(|e| Error::Image(format!("{}: {e}", p.display())))?.into_rgb8();
            Rgb8::new(img.width() as usize, img.height() as usize, img.into_raw())
        })
        .collect()
}

fn load_yuv(path: &Path, width: usize, height: usize, limit: Option<usize>) -> Result<Vec<Rgb8>> {
    let bytes = std::fs::read(path)?;
    let frame = Yuv420::frame_len(width, height);
    if bytes.len() % frame != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: {} bytes is not a whole number of {width}x{height} frames",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / frame;
    let n = limit.map_or(n, |l| l.min(n));
    bytes
        .chunks_exact(frame)
        .take(n)
        .map(|c| yuv420_to_rgb_bt709(&Yuv420::from_packed(c, width, height)?))
        .collect()
}
