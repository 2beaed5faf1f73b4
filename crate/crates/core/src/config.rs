//! Codec configuration and its `key = value` text form.
//!
//! Blank lines and text after `#` are ignored. Unknown keys are rejected so
//! that typos do not silently fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;

use crate::em::{EmConfig, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::fer::{FerConfig, FerMode, FRAME_MAX_DISPARITY};

/// Frame dimensions must be multiples of this after padding.
pub const FRAME_ALIGN: usize = 64;
/// Spatial stride of the main latents.
pub const LATENT_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntraKind {
    /// Learned factorized-prior autoencoder.
    Factorized,
    /// 8-bit samples stored verbatim (24 bits per pixel).
    Passthrough,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub context_channels: usize,
    pub feature_channels: usize,
    pub motion_channels: usize,
    pub motion_latent_channels: usize,
    pub hyper_channels: usize,
    pub slices: usize,
    pub phi_channels: usize,
    pub prior_channels: usize,
    pub est_hidden: usize,
    pub fusion_channels: usize,
    pub sigma_min: f64,
    /// Full-resolution maximum disparity.
    pub max_disparity: usize,
    /// Internal downsampling factor of the feature enhancement blocks.
    pub fer_downsample: usize,
    /// Autoencoder strides after which enhancement blocks are inserted.
    pub fer_strides: Vec<usize>,
    /// Shift planes in the entropy model alignment.
    pub em_disparity: usize,
    pub fer: bool,
    pub attention: bool,
    pub shift: bool,
    pub cross_view: bool,
    pub intra: IntraKind,
    pub intra_channels: usize,
    pub me_levels: usize,
    pub me_radius: usize,
    pub seed: u64,
    pub checkpoint: Option<String>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_channels: 96,
            context_channels: 48,
            feature_channels: 48,
            motion_channels: 48,
            motion_latent_channels: 64,
            hyper_channels: 32,
            slices: 4,
            phi_channels: 16,
            prior_channels: 16,
            est_hidden: 32,
            fusion_channels: 32,
            sigma_min: SIGMA_MIN,
            max_disparity: FRAME_MAX_DISPARITY,
            fer_downsample: 2,
            fer_strides: vec![4, 8],
            em_disparity: 12,
            fer: true,
            attention: true,
            shift: true,
            cross_view: true,
            intra: IntraKind::Factorized,
            intra_channels: 32,
            me_levels: 3,
            me_radius: 2,
            seed: 0,
            checkpoint: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl CodecConfig {
    /// Small widths suitable for CPU training in tests.
    pub fn tiny() -> Self {
        CodecConfig {
            latent_channels: 16,
            context_channels: 8,
            feature_channels: 8,
            motion_channels: 8,
            motion_latent_channels: 8,
            hyper_channels: 8,
            slices: 4,
            phi_channels: 4,
            prior_channels: 4,
            est_hidden: 8,
            fusion_channels: 8,
            em_disparity: 2,
            intra_channels: 8,
            ..Self::default()
        }
    }

    pub fn mode(&self) -> FerMode {
        match (self.attention, self.shift) {
            (_, false) => FerMode::NoShift,
            (false, true) => FerMode::NoAttention,
            (true, true) => FerMode::Full,
        }
    }

    pub fn fer_block(&self, stride: usize) -> FerConfig {
        FerConfig {
            s: self.fer_downsample,
            d_feat: self.max_disparity.div_ceil(stride * self.fer_downsample * 2).max(1),
            mode: self.mode(),
        }
    }

    fn em(&self, latent: usize, context: Option<[usize; 3]>) -> EmConfig {
        EmConfig {
            latent_channels: latent,
            slices: self.slices,
            hyper_channels: self.hyper_channels,
            phi_channels: self.phi_channels,
            prior_channels: self.prior_channels,
            est_hidden: self.est_hidden,
            d_feat: self.em_disparity,
            context,
            fusion_channels: self.fusion_channels,
            sigma_min: self.sigma_min,
            cross_view: self.cross_view,
            mode: self.mode(),
        }
    }

    pub fn motion_em(&self) -> EmConfig {
        self.em(self.motion_latent_channels, None)
    }

    pub fn context_em(&self) -> EmConfig {
        let c = self.context_channels;
        self.em(self.latent_channels, Some([c, c, c]))
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("latent_channels", self.latent_channels),
            ("context_channels", self.context_channels),
            ("feature_channels", self.feature_channels),
            ("motion_channels", self.motion_channels),
            ("motion_latent_channels", self.motion_latent_channels),
            ("intra_channels", self.intra_channels),
            ("fer_downsample", self.fer_downsample),
            ("me_levels", self.me_levels),
            ("max_disparity", self.max_disparity),
        ];
        for (k, v) in widths {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for &s in &self.fer_strides {
            if ![2, 4, 8].contains(&s) {
                return Err(Error::Config(format!("fer_strides: unsupported stride {s} (allowed 2, 4, 8)")));
            }
            if (FRAME_ALIGN / s) % self.fer_downsample != 0 {
                return Err(Error::Config(format!("fer_downsample {} too large for stride {s}", self.fer_downsample)));
            }
        }
        self.motion_em().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.context_em().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = CodecConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "latent_channels" => cfg.latent_channels = parse_num(key, v)?,
                "context_channels" => cfg.context_channels = parse_num(key, v)?,
                "feature_channels" => cfg.feature_channels = parse_num(key, v)?,
                "motion_channels" => cfg.motion_channels = parse_num(key, v)?,
                "motion_latent_channels" => cfg.motion_latent_channels = parse_num(key, v)?,
                "hyper_channels" => cfg.hyper_channels = parse_num(key, v)?,
                "slices" => cfg.slices = parse_num(key, v)?,
                "phi_channels" => cfg.phi_channels = parse_num(key, v)?,
                "prior_channels" => cfg.prior_channels = parse_num(key, v)?,
                "est_hidden" => cfg.est_hidden = parse_num(key, v)?,
                "fusion_channels" => cfg.fusion_channels = parse_num(key, v)?,
                "sigma_min" => cfg.sigma_min = parse_num(key, v)?,
                "max_disparity" => cfg.max_disparity = parse_num(key, v)?,
                "fer_downsample" => cfg.fer_downsample = parse_num(key, v)?,
                "fer_strides" => {
                    cfg.fer_strides = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?
                    }
                }
                "em_disparity" => cfg.em_disparity = parse_num(key, v)?,
                "fer" => cfg.fer = parse_bool(key, v)?,
                "attention" => cfg.attention = parse_bool(key, v)?,
                "shift" => cfg.shift = parse_bool(key, v)?,
                "cross_view" => cfg.cross_view = parse_bool(key, v)?,
                "intra" => {
                    cfg.intra = match v {
                        "factorized" => IntraKind::Factorized,
                        "passthrough" => IntraKind::Passthrough,
                        _ => return Err(Error::Config(format!("intra: unknown codec {v:?}"))),
                    }
                }
                "intra_channels" => cfg.intra_channels = parse_num(key, v)?,
                "me_levels" => cfg.me_levels = parse_num(key, v)?,
                "me_radius" => cfg.me_radius = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "checkpoint" => cfg.checkpoint = if v.is_empty() { None } else { Some(v.to_string()) },
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text form accepted by [`CodecConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let strides: Vec<String> = self.fer_strides.iter().map(|v| v.to_string()).collect();
        let intra = match self.intra {
            IntraKind::Factorized => "factorized",
            IntraKind::Passthrough => "passthrough",
        };
        let _ = writeln!(s, "latent_channels = {}", self.latent_channels);
        let _ = writeln!(s, "context_channels = {}", self.context_channels);
        let _ = writeln!(s, "feature_channels = {}", self.feature_channels);
        let _ = writeln!(s, "motion_channels = {}", self.motion_channels);
        let _ = writeln!(s, "motion_latent_channels = {}", self.motion_latent_channels);
        let _ = writeln!(s, "hyper_channels = {}", self.hyper_channels);
        let _ = writeln!(s, "slices = {}", self.slices);
        let _ = writeln!(s, "phi_channels = {}", self.phi_channels);
        let _ = writeln!(s, "prior_channels = {}", self.prior_channels);
        let _ = writeln!(s, "est_hidden = {}", self.est_hidden);
        let _ = writeln!(s, "fusion_channels = {}", self.fusion_channels);
        let _ = writeln!(s, "sigma_min = {:?}", self.sigma_min);
        let _ = writeln!(s, "max_disparity = {}", self.max_disparity);
        let _ = writeln!(s, "fer_downsample = {}", self.fer_downsample);
        let _ = writeln!(s, "fer_strides = {}", strides.join(","));
        let _ = writeln!(s, "em_disparity = {}", self.em_disparity);
        let _ = writeln!(s, "fer = {}", self.fer);
        let _ = writeln!(s, "attention = {}", self.attention);
        let _ = writeln!(s, "shift = {}", self.shift);
        let _ = writeln!(s, "cross_view = {}", self.cross_view);
        let _ = writeln!(s, "intra = {intra}");
        let _ = writeln!(s, "intra_channels = {}", self.intra_channels);
        let _ = writeln!(s, "me_levels = {}", self.me_levels);
        let _ = writeln!(s, "me_radius = {}", self.me_radius);
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {c}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = CodecConfig::tiny();
        cfg.attention = false;
        cfg.checkpoint = Some("weights.ckpt".into());
        cfg.fer_strides = vec![4];
        assert_eq!(CodecConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = CodecConfig::parse("# tiny\nslices = 2 # fewer\n\nshift=off\n").unwrap();
        assert_eq!(cfg.slices, 2);
        assert_eq!(cfg.mode(), FerMode::NoShift);
        assert!(CodecConfig::parse("slice = 2").is_err());
        assert!(CodecConfig::parse("slices").is_err());
        assert!(CodecConfig::parse("slices = 5").is_err());
        assert!(CodecConfig::parse("fer = maybe").is_err());
        assert!(CodecConfig::parse("fer_strides = 3").is_err());
    }

    #[test]
    fn feature_disparity_defaults() {
        let cfg = CodecConfig::default();
        assert_eq!(cfg.fer_block(4).d_feat, 12);
        assert_eq!(cfg.fer_block(8).d_feat, 6);
        assert_eq!(cfg.fer_block(4).d_feat, crate::fer::default_feature_disparity(4, 2));
    }
}
