//! Model, training and file-level configuration.
//!
//! Config files are plain `key = value` lines; `#` starts a comment. The same
//! keys are accepted as `--set key=value` overrides on the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How latents are scheduled for entropy coding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Position-by-position autoregressive decoding.
    Ar,
    /// Two-pass stereo checkerboard decoding.
    Ckbd,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Ar => 0,
            Mode::Ckbd => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Mode> {
        match c {
            0 => Some(Mode::Ar),
            1 => Some(Mode::Ckbd),
            _ => None,
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(Mode::Ar),
            "ckbd" => Ok(Mode::Ckbd),
            _ => Err(Error::Param(format!("mode must be ar or ckbd, got {s:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ar => "ar",
            Mode::Ckbd => "ckbd",
        })
    }
}

/// Which cross-view attention the backbone inserts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Bidirectional mutual attention (cross-key + cross-query stages).
    Mutual,
    /// Row-wise parallax attention in both directions instead of mutual attention.
    YingStyle,
    /// No attention blocks.
    None,
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mutual" => Ok(AttentionKind::Mutual),
            "ying" | "ying_style" | "ying_style_off" => Ok(AttentionKind::YingStyle),
            "none" | "off" => Ok(AttentionKind::None),
            _ => Err(Error::Param(format!("attention must be mutual, ying_style or none, got {s:?}"))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Mutual => "mutual",
            AttentionKind::YingStyle => "ying_style",
            AttentionKind::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablations {
    /// Replace every 3D convolution with a weight-shared per-view 2D convolution.
    pub backbone_2d: bool,
    /// Hyperprior plus per-view masked spatial context only.
    pub entropy_minnen: bool,
    pub attention: AttentionKind,
    /// No channel slicing and no channel context.
    pub channel_context_off: bool,
    /// Checkerboard anchor context restricted to the same view.
    pub vanilla_ckbd: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            backbone_2d: false,
            entropy_minnen: false,
            attention: AttentionKind::Mutual,
            channel_context_off: false,
            vanilla_ckbd: false,
        }
    }
}

/// Range coder implementation used for entropy coding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoderBackend {
    Reference,
    Native,
}

impl FromStr for CoderBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reference" => Ok(CoderBackend::Reference),
            "native" => Ok(CoderBackend::Native),
            _ => Err(Error::Param(format!("coder_backend must be reference or native, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels.
    pub n: usize,
    /// Hyper-latent channels.
    pub m: usize,
    /// Channel slices for the channel context.
    pub k: usize,
    pub mode: Mode,
    /// Embedding channels of the attention blocks.
    pub attention_embed: usize,
    /// Width of the channel context feature.
    pub channel_features: usize,
    pub sigma_floor: f64,
    pub ablations: Ablations,
    pub coder_backend: CoderBackend,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small model used for desk-scale training and tests.
    pub fn desk() -> Self {
        ModelConfig {
            n: 32,
            m: 32,
            k: 4,
            mode: Mode::Ar,
            attention_embed: 16,
            channel_features: 128,
            sigma_floor: 0.04,
            ablations: Ablations::default(),
            coder_backend: CoderBackend::Reference,
        }
    }

    /// Channel counts at the scale of published stereo codecs.
    pub fn paper_scale() -> Self {
        ModelConfig { n: 192, m: 192, k: 4, attention_embed: 64, ..ModelConfig::desk() }
    }

    /// Number of channel slices actually used (1 when channel context is off).
    pub fn slices(&self) -> usize {
        if self.uses_channel_context() {
            self.k
        } else {
            1
        }
    }

    pub fn uses_channel_context(&self) -> bool {
        !(self.ablations.entropy_minnen || self.ablations.channel_context_off)
    }

    pub fn slice_channels(&self) -> usize {
        self.n / self.slices()
    }

    /// Channels of the spatial context feature per slice.
    pub fn context_channels(&self) -> usize {
        4 * self.slice_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k == 0 {
            return Err(Error::Param("n, m and k must be positive".into()));
        }
        if !self.n.is_multiple_of(self.k) {
            return Err(Error::Param(format!("n={} is not divisible by k={}", self.n, self.k)));
        }
        if self.attention_embed == 0 || self.attention_embed > self.n {
            return Err(Error::Param(format!(
                "attention_embed={} must be in 1..={}",
                self.attention_embed, self.n
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Param(format!("sigma_floor={} must be positive", self.sigma_floor)));
        }
        if self.channel_features == 0 {
            return Err(Error::Param("channel_features must be positive".into()));
        }
        if self.n > u16::MAX as usize || self.m > u16::MAX as usize || self.k > u8::MAX as usize {
            return Err(Error::Param("channel counts exceed the bitstream header range".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n" => self.n = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "attention_embed" => self.attention_embed = parse(key, value)?,
            "channel_features" => self.channel_features = parse(key, value)?,
            "sigma_floor" => self.sigma_floor = parse(key, value)?,
            "backbone_2d" => self.ablations.backbone_2d = parse_bool(key, value)?,
            "entropy_minnen" => self.ablations.entropy_minnen = parse_bool(key, value)?,
            "attention" => self.ablations.attention = value.parse()?,
            "channel_context_off" => self.ablations.channel_context_off = parse_bool(key, value)?,
            "vanilla_ckbd" => self.ablations.vanilla_ckbd = parse_bool(key, value)?,
            "coder_backend" => self.coder_backend = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    Mse,
    MsSsim,
}

impl FromStr for Distortion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mse" => Ok(Distortion::Mse),
            "ms_ssim" | "msssim" => Ok(Distortion::MsSsim),
            _ => Err(Error::Param(format!("distortion must be mse or ms_ssim, got {s:?}"))),
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::Mse => "mse",
            Distortion::MsSsim => "ms_ssim",
        })
    }
}

/// Rate-distortion trade-offs used for published stereo codec curves.
pub const STANDARD_LAMBDAS: [f64; 6] = [256.0, 512.0, 1024.0, 2048.0, 3072.0, 4096.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub distortion: Distortion,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_interval: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub clip_norm: f64,
    /// Steps between checkpoints (0 = only the final one).
    pub checkpoint_every: usize,
}

/// Desk-scale defaults. Long runs at full scale use `lr = 1e-4` and a halving
/// interval in the hundreds of thousands of steps.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 512.0,
            distortion: Distortion::Mse,
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            lr_halving_interval: 500,
            seed: 0,
            crop_size: 64,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Param(format!("lambda={} must be positive", self.lambda)));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(64) {
            return Err(Error::Param(format!("crop_size={} must be a positive multiple of 64", self.crop_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Param(format!("lr={} must be positive", self.lr)));
        }
        if self.lr_halving_interval == 0 {
            return Err(Error::Param("lr_halving_interval must be positive".into()));
        }
        Ok(())
    }

    /// True when lambda is one of the standard trade-off points.
    pub fn lambda_is_standard(&self) -> bool {
        STANDARD_LAMBDAS.contains(&self.lambda)
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let halvings = (step / self.lr_halving_interval).min(1000) as i32;
        self.lr * 0.5f64.powi(halvings)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lambda" => self.lambda = parse(key, value)?,
            "distortion" => self.distortion = value.parse()?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_halving_interval" => self.lr_halving_interval = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "crop_size" => self.crop_size = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Param(format!("cannot parse {key}={value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Param(format!("cannot parse {key}={value:?} as a boolean"))),
    }
}

/// Parses `key = value` text. Later duplicates override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Param(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_halves_on_interval_boundary() {
        let t = TrainConfig { lr: 1e-4, lr_halving_interval: 500, ..Default::default() };
        assert_eq!(t.lr_at(0), 1e-4);
        assert_eq!(t.lr_at(499), 1e-4);
        assert_eq!(t.lr_at(500), 5e-5);
        assert_eq!(t.lr_at(1000), 2.5e-5);
    }

    #[test]
    fn kv_parsing_and_overrides() {
        let kv = parse_kv("# model\nn = 16\nk=2  # slices\nmode = ckbd\n\nattention = none\n").unwrap();
        let mut c = ModelConfig::desk();
        for (k, v) in &kv {
            assert!(c.set(k, v).unwrap());
        }
        assert_eq!((c.n, c.k, c.mode, c.ablations.attention), (16, 2, Mode::Ckbd, AttentionKind::None));
        assert!(parse_kv("no equals sign").is_err());
    }

    #[test]
    fn validation_rejects_bad_slicing() {
        let c = ModelConfig { n: 30, k: 4, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
        let c = ModelConfig { attention_embed: 64, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
        let c = ModelConfig { sigma_floor: 0.0, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper_scale().validate().is_ok());
    }

    #[test]
    fn ablations_collapse_slicing() {
        let mut c = ModelConfig::desk();
        assert_eq!(c.slices(), 4);
        c.ablations.channel_context_off = true;
        assert_eq!((c.slices(), c.slice_channels()), (1, 32));
    }
}
