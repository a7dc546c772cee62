//! Model and run configuration, with a flat `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{config_err, DanError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    OneD,
    TwoD,
}

impl FromStr for Mode {
    type Err = DanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1d" | "1D" => Ok(Mode::OneD),
            "2d" | "2D" => Ok(Mode::TwoD),
            _ => Err(config_err!("mode must be 1d or 2d, got {s:?}")),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::OneD => "1d",
            Mode::TwoD => "2d",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Convolutional alignment plus decoupled GRU decoder.
    Dan,
    /// Additive coupled attention.
    Bahdanau,
    /// Multiplicative ("general") coupled attention.
    Luong,
}

impl FromStr for DecoderKind {
    type Err = DanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dan" => Ok(Self::Dan),
            "bahdanau" | "bah" => Ok(Self::Bahdanau),
            "luong" => Ok(Self::Luong),
            _ => Err(config_err!("decoder must be dan, bahdanau or luong, got {s:?}")),
        }
    }
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dan => "dan",
            Self::Bahdanau => "bahdanau",
            Self::Luong => "luong",
        }
    }
}

/// One encoder stage. Stage 0 is the plain convolutional stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Downsampling ratio (height, width).
    pub ratio: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub max_width: usize,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl EncoderConfig {
    /// Build from parallel per-stage lists.
    pub fn from_lists(
        input_height: usize,
        max_width: usize,
        blocks: &[usize],
        channels: &[usize],
        ratios: &[(usize, usize)],
    ) -> Self {
        let stages = blocks
            .iter()
            .zip(channels)
            .zip(ratios)
            .map(|((&blocks, &channels), &ratio)| StageSpec {
                blocks,
                channels,
                ratio,
            })
            .collect();
        Self {
            input_height,
            max_width,
            in_channels: 1,
            stages,
        }
    }

    /// Four-stage desk configuration at height 32.
    pub fn desk() -> Self {
        Self::from_lists(32, 128, &[1, 1, 1, 1], &[16, 32, 64, 128], &[(1, 1), (2, 2), (2, 2), (2, 1)])
    }

    /// Handwritten-line layout: total reduction 64 in height, 16 in width.
    pub fn handwritten() -> Self {
        Self::from_lists(
            192,
            2048,
            &[1, 3, 4, 6, 6, 3],
            &[32, 32, 64, 128, 256, 512],
            &[(2, 1), (2, 2), (2, 2), (2, 1), (2, 2), (2, 2)],
        )
    }

    pub fn scene_1d() -> Self {
        Self::from_lists(
            32,
            128,
            &[1, 3, 4, 6, 6, 3],
            &[32, 32, 64, 128, 256, 512],
            &[(1, 1), (2, 2), (2, 2), (2, 1), (2, 1), (2, 1)],
        )
    }

    pub fn scene_2d() -> Self {
        Self::from_lists(
            32,
            128,
            &[1, 3, 4, 6, 6, 3],
            &[32, 32, 64, 128, 256, 512],
            &[(1, 1), (2, 2), (1, 1), (2, 2), (1, 1), (1, 1)],
        )
    }

    /// CPU-trainable configuration used for the synthetic experiments.
    pub fn toy() -> Self {
        Self::from_lists(
            16,
            512,
            &[1, 1, 1, 1, 1],
            &[8, 16, 16, 16, 32],
            &[(1, 1), (2, 2), (2, 2), (2, 1), (2, 1)],
        )
    }

    /// Global (height, width) reduction.
    pub fn ratio(&self) -> (usize, usize) {
        self.stages
            .iter()
            .fold((1, 1), |(h, w), s| (h * s.ratio.0, w * s.ratio.1))
    }

    /// Height of the last stage, before any 1-D reduction.
    pub fn stage_output_height(&self) -> usize {
        self.input_height / self.ratio().0
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(config_err!("encoder needs at least one stage"));
        }
        if self.stages[0].blocks != 1 {
            return Err(config_err!("stage 0 is a single plain convolution (blocks = 1)"));
        }
        if self.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) {
            return Err(config_err!("every stage needs at least one block and channel"));
        }
        if self.stages.iter().any(|s| s.ratio.0 == 0 || s.ratio.1 == 0) {
            return Err(config_err!("downsampling ratios must be positive"));
        }
        let (rh, _) = self.ratio();
        if self.input_height % rh != 0 {
            return Err(config_err!(
                "input height {} not divisible by height ratio {rh}",
                self.input_height
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamConfig {
    /// Total number of down plus up layers.
    pub layers: usize,
    pub max_t: usize,
    pub channels: usize,
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.layers % 2 != 0 {
            return Err(config_err!("CAM depth must be even and at least 2, got {}", self.layers));
        }
        if self.max_t == 0 || self.channels == 0 {
            return Err(config_err!("CAM needs max_t > 0 and channels > 0"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a recognizer's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub decoder: DecoderKind,
    pub encoder: EncoderConfig,
    pub cam: CamConfig,
    /// GRU hidden size, also the embedding width.
    pub hidden: usize,
    /// Score-space width of the additive baseline.
    pub attn_dim: usize,
    pub alphabet: String,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            mode: Mode::OneD,
            decoder: DecoderKind::Dan,
            encoder: EncoderConfig::toy(),
            cam: CamConfig {
                layers: 8,
                max_t: 20,
                channels: 32,
            },
            hidden: 64,
            attn_dim: 32,
            alphabet: crate::synth::DEFAULT_ALPHABET.to_string(),
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            cam: CamConfig {
                layers: 8,
                max_t: 25,
                channels: 64,
            },
            hidden: 128,
            attn_dim: 64,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cam.validate()?;
        if self.hidden == 0 || self.attn_dim == 0 {
            return Err(config_err!("hidden and attn_dim must be positive"));
        }
        if self.alphabet.is_empty() {
            return Err(config_err!("alphabet is empty"));
        }
        Ok(())
    }
}

/// Full run description: model layout plus training and data settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch index from which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epoch: usize,
    pub lr_decay: f64,
    /// Number of opening epochs that train on a growing length prefix of the data.
    pub curriculum_epochs: usize,
    pub rho: f64,
    pub eps: f64,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            seed: 1,
            epochs: 12,
            batch_size: 8,
            lr: 1.0,
            lr_decay_epoch: 8,
            lr_decay: 0.1,
            curriculum_epochs: 0,
            rho: 0.9,
            eps: 1e-6,
            train_data: PathBuf::new(),
            val_data: PathBuf::new(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| config_err!("{key}: cannot parse {v:?}"))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_ratios(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|s| {
            let (a, b) = s
                .trim()
                .split_once('x')
                .ok_or_else(|| config_err!("{key}: ratio {s:?} is not HxW"))?;
            Ok((parse_num(key, a)?, parse_num(key, b)?))
        })
        .collect()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "decoder",
        "height",
        "max_width",
        "blocks",
        "channels",
        "ratios",
        "cam_layers",
        "cam_channels",
        "max_t",
        "hidden",
        "attn_dim",
        "alphabet",
        "seed",
        "epochs",
        "batch_size",
        "lr",
        "lr_decay_epoch",
        "lr_decay",
        "curriculum_epochs",
        "rho",
        "eps",
        "train_data",
        "val_data",
        "out_dir",
    ];

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", m.mode.as_str().into());
        kv("decoder", m.decoder.as_str().into());
        kv("height", e.input_height.to_string());
        kv("max_width", e.max_width.to_string());
        kv("blocks", join(e.stages.iter().map(|s| s.blocks)));
        kv("channels", join(e.stages.iter().map(|s| s.channels)));
        kv(
            "ratios",
            join(e.stages.iter().map(|s| format!("{}x{}", s.ratio.0, s.ratio.1))),
        );
        kv("cam_layers", m.cam.layers.to_string());
        kv("cam_channels", m.cam.channels.to_string());
        kv("max_t", m.cam.max_t.to_string());
        kv("hidden", m.hidden.to_string());
        kv("attn_dim", m.attn_dim.to_string());
        kv("alphabet", m.alphabet.clone());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lr_decay_epoch", self.lr_decay_epoch.to_string());
        kv("lr_decay", format!("{:?}", self.lr_decay));
        kv("curriculum_epochs", self.curriculum_epochs.to_string());
        kv("rho", format!("{:?}", self.rho));
        kv("eps", format!("{:?}", self.eps));
        kv("train_data", self.train_data.display().to_string());
        kv("val_data", self.val_data.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    /// Parse `key = value` lines; `#` starts a comment. Unset keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut blocks = None;
        let mut channels = None;
        let mut ratios = None;
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !Self::KEYS.contains(&key) {
                return Err(config_err!("line {}: unknown key {key:?}", lineno + 1));
            }
            if !seen.insert(key.to_string()) {
                return Err(config_err!("line {}: duplicate key {key:?}", lineno + 1));
            }
            let m = &mut cfg.model;
            match key {
                "mode" => m.mode = value.parse()?,
                "decoder" => m.decoder = value.parse()?,
                "height" => m.encoder.input_height = parse_num(key, value)?,
                "max_width" => m.encoder.max_width = parse_num(key, value)?,
                "blocks" => blocks = Some(parse_list(key, value)?),
                "channels" => channels = Some(parse_list(key, value)?),
                "ratios" => ratios = Some(parse_ratios(key, value)?),
                "cam_layers" => m.cam.layers = parse_num(key, value)?,
                "cam_channels" => m.cam.channels = parse_num(key, value)?,
                "max_t" => m.cam.max_t = parse_num(key, value)?,
                "hidden" => m.hidden = parse_num(key, value)?,
                "attn_dim" => m.attn_dim = parse_num(key, value)?,
                "alphabet" => m.alphabet = value.to_string(),
                "seed" => cfg.seed = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "lr" => cfg.lr = parse_num(key, value)?,
                "lr_decay_epoch" => cfg.lr_decay_epoch = parse_num(key, value)?,
                "lr_decay" => cfg.lr_decay = parse_num(key, value)?,
                "curriculum_epochs" => cfg.curriculum_epochs = parse_num(key, value)?,
                "rho" => cfg.rho = parse_num(key, value)?,
                "eps" => cfg.eps = parse_num(key, value)?,
                "train_data" => cfg.train_data = PathBuf::from(value),
                "val_data" => cfg.val_data = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => unreachable!(),
            }
        }
        if blocks.is_some() || channels.is_some() || ratios.is_some() {
            let enc = &cfg.model.encoder;
            let blocks = blocks.unwrap_or_else(|| enc.stages.iter().map(|s| s.blocks).collect());
            let channels =
                channels.unwrap_or_else(|| enc.stages.iter().map(|s| s.channels).collect());
            let ratios = ratios.unwrap_or_else(|| enc.stages.iter().map(|s| s.ratio).collect());
            if blocks.len() != channels.len() || blocks.len() != ratios.len() {
                return Err(config_err!(
                    "blocks, channels and ratios must list the same number of stages"
                ));
            }
            cfg.model.encoder = EncoderConfig::from_lists(
                cfg.model.encoder.input_height,
                cfg.model.encoder.max_width,
                &blocks,
                &channels,
                &ratios,
            );
        }
        if cfg.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DanError::Data(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Longest label admitted during `epoch` when the longest label overall
    /// is `max_len`. Grows linearly over the curriculum epochs, then admits all.
    pub fn length_cap(&self, epoch: usize, max_len: usize) -> usize {
        if epoch >= self.curriculum_epochs {
            max_len
        } else {
            (max_len * (epoch + 1)).div_ceil(self.curriculum_epochs + 1)
        }
    }

    /// Learning-rate multiplier in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}
