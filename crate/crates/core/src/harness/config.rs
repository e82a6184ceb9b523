//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::adadrop::{ChannelPooling, DropMode};
use crate::error::{Error, Result};
use crate::net::{BranchSet, NetConfig, TrainSettings};
use crate::tensor::PoolKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropModeKind {
    Threshold,
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    GlobalOnly,
    GlobalAttention,
    GlobalDrop,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::GlobalOnly, Variant::GlobalAttention, Variant::GlobalDrop];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GlobalOnly => "global",
            Variant::GlobalAttention => "global_attention",
            Variant::GlobalDrop => "global_drop",
        }
    }

    pub fn branches(self) -> BranchSet {
        match self {
            Variant::Full => BranchSet::FULL,
            Variant::GlobalOnly => BranchSet::GLOBAL_ONLY,
            Variant::GlobalAttention => BranchSet::GLOBAL_ATTENTION,
            Variant::GlobalDrop => BranchSet::GLOBAL_DROP,
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub alpha: f64,
    pub rho: f64,
    pub reduction: usize,
    pub p: usize,
    pub n_per: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub global_hidden: usize,
    pub global_dim: usize,
    pub attention_dim: usize,
    pub drop_dim: usize,
    pub spatial_kernel: usize,
    pub epochs: usize,
    /// 0 means one pass worth of batches over the training set.
    pub iters_per_epoch: usize,
    pub seed: u64,
    pub drop_mode: DropModeKind,
    pub quantile: f64,
    pub base_lr: f64,
    pub checkpoint_interval: usize,
    pub variant: Variant,
    pub drop_pooling: PoolKind,
    pub channel_pooling: ChannelPooling,
    /// 0 means "number of identities in the training set".
    pub num_classes: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            rho: 0.25,
            reduction: 16,
            p: 8,
            n_per: 4,
            height: 64,
            width: 32,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            global_hidden: 128,
            global_dim: 64,
            attention_dim: 64,
            drop_dim: 64,
            spatial_kernel: 7,
            epochs: 50,
            iters_per_epoch: 0,
            seed: 0,
            drop_mode: DropModeKind::Threshold,
            quantile: 0.2,
            base_lr: 1e-4,
            checkpoint_interval: 10,
            variant: Variant::Full,
            drop_pooling: PoolKind::Gmp,
            channel_pooling: ChannelPooling::Mean,
            num_classes: 0,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse::<usize>(s.trim())).collect()
}

fn positive(v: usize) -> std::result::Result<usize, String> {
    if v == 0 {
        Err("must be positive".into())
    } else {
        Ok(v)
    }
}

fn list_text(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|message| Error::Config {
                line: line_no,
                message: format!("{}: {message}", key.trim()),
            })?;
        }
        cfg.validate().map_err(|message| Error::Config {
            line: last_line,
            message,
        })?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "alpha" => {
                let a: f64 = parse(v)?;
                if !(a > 0.0 && a.is_finite()) {
                    return Err(format!("{a} out of range, need alpha > 0"));
                }
                self.alpha = a;
            }
            "rho" => {
                let r: f64 = parse(v)?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(format!("{r} out of range [0, 1]"));
                }
                self.rho = r;
            }
            "quantile" => {
                let q: f64 = parse(v)?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(format!("{q} out of range [0, 1]"));
                }
                self.quantile = q;
            }
            "base_lr" => {
                let lr: f64 = parse(v)?;
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(format!("{lr} out of range, need base_lr > 0"));
                }
                self.base_lr = lr;
            }
            "reduction" => self.reduction = positive(parse(v)?)?,
            "p" => {
                self.p = parse(v)?;
                if self.p < 2 {
                    return Err("need at least 2 identities per batch".into());
                }
            }
            "n_per" => {
                self.n_per = parse(v)?;
                if self.n_per < 2 {
                    return Err("need at least 2 instances per identity".into());
                }
            }
            "height" => self.height = positive(parse(v)?)?,
            "width" => self.width = positive(parse(v)?)?,
            "channels" => self.channels = parse_list(v)?,
            "strides" => self.strides = parse_list(v)?,
            "global_hidden" => self.global_hidden = positive(parse(v)?)?,
            "global_dim" => self.global_dim = positive(parse(v)?)?,
            "attention_dim" => self.attention_dim = positive(parse(v)?)?,
            "drop_dim" => self.drop_dim = positive(parse(v)?)?,
            "spatial_kernel" => {
                let k: usize = parse(v)?;
                if k % 2 == 0 {
                    return Err("spatial kernel must be odd".into());
                }
                self.spatial_kernel = k;
            }
            "epochs" => self.epochs = positive(parse(v)?)?,
            "iters_per_epoch" => self.iters_per_epoch = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "checkpoint_interval" => self.checkpoint_interval = positive(parse(v)?)?,
            "num_classes" => self.num_classes = parse(v)?,
            "drop_mode" => {
                self.drop_mode = match v {
                    "threshold" => DropModeKind::Threshold,
                    "quantile" => DropModeKind::Quantile,
                    _ => return Err(format!("unknown drop mode {v:?}")),
                }
            }
            "variant" => self.variant = v.parse()?,
            "drop_pooling" => {
                self.drop_pooling = match v {
                    "gmp" => PoolKind::Gmp,
                    "gap" => PoolKind::Gap,
                    _ => return Err(format!("unknown pooling {v:?}")),
                }
            }
            "channel_pooling" => {
                self.channel_pooling = match v {
                    "mean" => ChannelPooling::Mean,
                    "max" => ChannelPooling::Max,
                    _ => return Err(format!("unknown pooling {v:?}")),
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err("channels and strides need the same non-zero length".into());
        }
        if self.channels.iter().chain(&self.strides).any(|&c| c == 0) {
            return Err("channels and strides must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `Config::parse(&c.to_text())` gives back `c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.drop_mode {
            DropModeKind::Threshold => "threshold",
            DropModeKind::Quantile => "quantile",
        };
        let pool = if self.drop_pooling == PoolKind::Gap { "gap" } else { "gmp" };
        let cpool = match self.channel_pooling {
            ChannelPooling::Mean => "mean",
            ChannelPooling::Max => "max",
        };
        let pairs: [(&str, String); 25] = [
            ("alpha", format!("{:?}", self.alpha)),
            ("rho", format!("{:?}", self.rho)),
            ("reduction", self.reduction.to_string()),
            ("p", self.p.to_string()),
            ("n_per", self.n_per.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", list_text(&self.channels)),
            ("strides", list_text(&self.strides)),
            ("global_hidden", self.global_hidden.to_string()),
            ("global_dim", self.global_dim.to_string()),
            ("attention_dim", self.attention_dim.to_string()),
            ("drop_dim", self.drop_dim.to_string()),
            ("spatial_kernel", self.spatial_kernel.to_string()),
            ("epochs", self.epochs.to_string()),
            ("iters_per_epoch", self.iters_per_epoch.to_string()),
            ("seed", self.seed.to_string()),
            ("drop_mode", mode.into()),
            ("quantile", format!("{:?}", self.quantile)),
            ("base_lr", format!("{:?}", self.base_lr)),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("variant", self.variant.name().into()),
            ("drop_pooling", pool.into()),
            ("channel_pooling", cpool.into()),
            ("num_classes", self.num_classes.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn drop_mode(&self) -> DropMode {
        match self.drop_mode {
            DropModeKind::Threshold => DropMode::Threshold { alpha: self.alpha },
            DropModeKind::Quantile => DropMode::Quantile { q: self.quantile },
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            rho: self.rho,
            drop_mode: self.drop_mode(),
            ..TrainSettings::default()
        }
    }

    pub fn net_config(&self, num_classes: usize) -> NetConfig {
        NetConfig {
            image_height: self.height,
            image_width: self.width,
            stage_channels: self.channels.clone(),
            stage_strides: self.strides.clone(),
            global_hidden: self.global_hidden,
            global_dim: self.global_dim,
            attention_dim: self.attention_dim,
            drop_dim: self.drop_dim,
            num_classes,
            reduction: self.reduction,
            spatial_kernel: self.spatial_kernel,
            drop_pooling: self.drop_pooling,
            channel_pooling: self.channel_pooling,
            branches: self.variant.branches(),
        }
    }
}

/// Warm-up staircase over the first 50 epochs, held until epoch 200, then
/// two decays. Anchored at `base = 1e-4`; other bases rescale every value.
pub fn lr_schedule(epoch: usize, base: f64) -> f64 {
    let anchored = match epoch {
        0..=49 => 1e-4 * (epoch / 5 + 1) as f64,
        50..=199 => 1e-4 * (49 / 5 + 1) as f64,
        200..=299 => 1e-4,
        _ => 1e-5,
    };
    if base == 1e-4 {
        anchored
    } else {
        anchored * (base / 1e-4)
    }
}
