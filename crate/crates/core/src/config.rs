//! Run configuration: model variant, architecture, optimizer preset and
//! schedule, serialised as plain `key = value` lines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Attention used by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenAttention {
    None,
    Simplex,
    Duplex,
}

/// The five model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    StyleGan2,
    Simplex,
    Duplex,
    SimplexVanillaD,
    DuplexVanillaD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::StyleGan2,
        Variant::Simplex,
        Variant::Duplex,
        Variant::SimplexVanillaD,
        Variant::DuplexVanillaD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StyleGan2 => "stylegan2",
            Variant::Simplex => "simplex",
            Variant::Duplex => "duplex",
            Variant::SimplexVanillaD => "simplex-vanillaD",
            Variant::DuplexVanillaD => "duplex-vanillaD",
        }
    }

    pub fn generator_attention(self) -> GenAttention {
        match self {
            Variant::StyleGan2 => GenAttention::None,
            Variant::Simplex | Variant::SimplexVanillaD => GenAttention::Simplex,
            Variant::Duplex | Variant::DuplexVanillaD => GenAttention::Duplex,
        }
    }

    pub fn discriminator_attention(self) -> bool {
        matches!(self, Variant::Simplex | Variant::Duplex)
    }

    /// Variant from a generator attention kind and discriminator flag.
    pub fn from_parts(generator: GenAttention, disc_attention: bool) -> Result<Self> {
        match (generator, disc_attention) {
            (GenAttention::None, false) => Ok(Variant::StyleGan2),
            (GenAttention::None, true) => Err(Error::Config(
                "the stylegan2 baseline has no attention; use --disc-attention off".into(),
            )),
            (GenAttention::Simplex, true) => Ok(Variant::Simplex),
            (GenAttention::Duplex, true) => Ok(Variant::Duplex),
            (GenAttention::Simplex, false) => Ok(Variant::SimplexVanillaD),
            (GenAttention::Duplex, false) => Ok(Variant::DuplexVanillaD),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// `beta1 = 0`, `beta2 = 0.99`, `epsilon = 1e-8`.
    Code,
    /// `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-3`.
    Article,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Code => "code",
            Preset::Article => "article",
        }
    }

    /// `(beta1, beta2, epsilon)`.
    pub fn adam(self) -> (f64, f64, f64) {
        match self {
            Preset::Code => (0.0, 0.99, 1e-8),
            Preset::Article => (0.9, 0.999, 1e-3),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "code" => Ok(Preset::Code),
            "article" => Ok(Preset::Article),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Directory(String),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic => f.write_str("synthetic"),
            DataSource::Directory(p) => f.write_str(p),
        }
    }
}

/// Everything needed to rebuild a model and replay its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub variant: Variant,
    pub preset: Preset,
    pub resolution: usize,
    /// `(resolution, channels)` pairs.
    pub channels: Vec<(usize, usize)>,
    pub components: usize,
    pub heads: usize,
    /// Attention layers sit only at grid resolutions up to this one.
    pub attention_max_res: usize,
    pub latent_size: usize,
    pub dlatent_size: usize,
    pub mapping_layers: usize,
    pub batch: usize,
    pub total_kimg: f64,
    pub lr: f64,
    pub r1_gamma: f64,
    pub lazy_interval: usize,
    pub ema_kimg: f64,
    pub ema_rampup: f64,
    pub style_mixing: f64,
    pub seed: u64,
    pub checkpoint_kimg: f64,
    /// FID is computed at every `fid_every`-th checkpoint; 0 disables it.
    pub fid_every: usize,
    pub fid_samples: usize,
    pub data: DataSource,
    /// Dataset size used for the synthetic source.
    pub synthetic_size: usize,
    /// Record wall-clock throughput in the log (makes logs run-dependent).
    pub timing: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            variant: Variant::Duplex,
            preset: Preset::Code,
            resolution: 32,
            channels: vec![(4, 64), (8, 64), (16, 32), (32, 32), (64, 16)],
            components: 16,
            heads: 1,
            attention_max_res: 64,
            latent_size: 32,
            dlatent_size: 32,
            mapping_layers: 4,
            batch: 8,
            total_kimg: 30.0,
            lr: 0.002,
            r1_gamma: 10.0,
            lazy_interval: 16,
            ema_kimg: 10.0,
            ema_rampup: 0.05,
            style_mixing: 0.9,
            seed: 7,
            checkpoint_kimg: 2.0,
            fid_every: 1,
            fid_samples: 500,
            data: DataSource::Synthetic,
            synthetic_size: 10_000,
            timing: false,
        }
    }
}

const KEYS: &[&str] = &[
    "variant",
    "preset",
    "resolution",
    "channels",
    "components",
    "heads",
    "attention_max_res",
    "latent_size",
    "dlatent_size",
    "mapping_layers",
    "batch",
    "kimg",
    "lr",
    "r1_gamma",
    "lazy_interval",
    "ema_kimg",
    "ema_rampup",
    "style_mixing",
    "seed",
    "checkpoint_kimg",
    "fid_every",
    "fid_samples",
    "data",
    "synthetic_size",
    "timing",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_channels(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|pair| {
            let (r, c) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad channel entry `{pair}`")))?;
            Ok((parse("channels", r.trim())?, parse("channels", c.trim())?))
        })
        .collect()
}

impl Config {
    /// Components actually used: the baseline always has a single latent.
    pub fn k(&self) -> usize {
        if self.variant == Variant::StyleGan2 {
            1
        } else {
            self.components
        }
    }

    pub fn channels_at(&self, resolution: usize) -> Result<usize> {
        self.channels
            .iter()
            .find(|(r, _)| *r == resolution)
            .map(|&(_, c)| c)
            .ok_or_else(|| Error::Config(format!("no channel count for resolution {resolution}")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "variant" => self.variant = value.parse()?,
            "preset" => self.preset = value.parse()?,
            "resolution" => self.resolution = parse(key, value)?,
            "channels" => self.channels = parse_channels(value)?,
            "components" | "k" => self.components = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "attention_max_res" => self.attention_max_res = parse(key, value)?,
            "latent_size" => self.latent_size = parse(key, value)?,
            "dlatent_size" => self.dlatent_size = parse(key, value)?,
            "mapping_layers" => self.mapping_layers = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "kimg" => self.total_kimg = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "r1_gamma" => self.r1_gamma = parse(key, value)?,
            "lazy_interval" => self.lazy_interval = parse(key, value)?,
            "ema_kimg" => self.ema_kimg = parse(key, value)?,
            "ema_rampup" => self.ema_rampup = parse(key, value)?,
            "style_mixing" => self.style_mixing = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_kimg" => self.checkpoint_kimg = parse(key, value)?,
            "fid_every" => self.fid_every = parse(key, value)?,
            "fid_samples" => self.fid_samples = parse(key, value)?,
            "data" => {
                self.data = if value == "synthetic" {
                    DataSource::Synthetic
                } else {
                    DataSource::Directory(value.to_string())
                }
            }
            "synthetic_size" => self.synthetic_size = parse(key, value)?,
            "timing" => self.timing = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_text(&text)
    }

    /// Canonical text form; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let channels = self
            .channels
            .iter()
            .map(|(r, c)| format!("{r}:{c}"))
            .collect::<Vec<_>>()
            .join(",");
        let values: Vec<String> = vec![
            self.variant.to_string(),
            self.preset.name().to_string(),
            self.resolution.to_string(),
            channels,
            self.components.to_string(),
            self.heads.to_string(),
            self.attention_max_res.to_string(),
            self.latent_size.to_string(),
            self.dlatent_size.to_string(),
            self.mapping_layers.to_string(),
            self.batch.to_string(),
            self.total_kimg.to_string(),
            self.lr.to_string(),
            self.r1_gamma.to_string(),
            self.lazy_interval.to_string(),
            self.ema_kimg.to_string(),
            self.ema_rampup.to_string(),
            self.style_mixing.to_string(),
            self.seed.to_string(),
            self.checkpoint_kimg.to_string(),
            self.fid_every.to_string(),
            self.fid_samples.to_string(),
            self.data.to_string(),
            self.synthetic_size.to_string(),
            self.timing.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if !(16..=64).contains(&r) || !r.is_power_of_two() {
            return Err(Error::Config(format!("resolution must be a power of two in 16..=64, got {r}")));
        }
        let mut res = 4;
        while res <= r {
            let c = self.channels_at(res)?;
            if c == 0 || c % 4 != 0 || c % self.heads.max(1) != 0 {
                return Err(Error::Config(format!(
                    "channels at {res} must be a positive multiple of 4 and of the head count"
                )));
            }
            res *= 2;
        }
        if self.attention_max_res < 8 || !self.attention_max_res.is_power_of_two() {
            return Err(Error::Config("`attention_max_res` must be a power of two of at least 8".into()));
        }
        let positive = [
            ("components", self.components),
            ("heads", self.heads),
            ("latent_size", self.latent_size),
            ("dlatent_size", self.dlatent_size),
            ("mapping_layers", self.mapping_layers),
            ("batch", self.batch),
            ("lazy_interval", self.lazy_interval),
            ("synthetic_size", self.synthetic_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if !(self.total_kimg >= 0.0 && self.total_kimg.is_finite()) {
            return Err(Error::Config("`kimg` must be a finite non-negative number".into()));
        }
        if !(self.checkpoint_kimg > 0.0) {
            return Err(Error::Config("`checkpoint_kimg` must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.style_mixing) {
            return Err(Error::Config("`style_mixing` must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || !(self.r1_gamma >= 0.0) {
            return Err(Error::Config("`lr` must be positive and `r1_gamma` non-negative".into()));
        }
        Ok(())
    }
}
