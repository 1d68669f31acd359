//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key has a default; unknown keys
//! are rejected so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Spatio-temporal patch (voxel) extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Patch {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

impl std::fmt::Display for Patch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

impl FromStr for Patch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!("patch must look like 2x8x8, got {s:?}")));
        }
        let p = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad patch component {x:?}")))
        };
        Ok(Patch::new(p(parts[0])?, p(parts[1])?, p(parts[2])?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: Patch,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub groups_m: usize,
    /// 1-based transformer layers whose output feeds a grouping block.
    pub grouping_layers: Vec<usize>,
    pub common_dim: usize,
    pub text_layers: usize,
    pub text_max_len: usize,
    pub gumbel_temp: f64,
    pub init_std: f64,
    pub nouns_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            patch: Patch::new(2, 8, 8),
            layers: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            groups_m: 8,
            grouping_layers: default_grouping_layers(4),
            common_dim: 32,
            text_layers: 2,
            text_max_len: 32,
            gumbel_temp: 1.0,
            init_std: 0.1,
            nouns_k: 2,
        }
    }
}

/// Layers ⌈L/2⌉, ⌈3L/4⌉ and L.
pub fn default_grouping_layers(layers: usize) -> Vec<usize> {
    vec![layers.div_ceil(2), (3 * layers).div_ceil(4), layers]
}

impl ModelConfig {
    /// Token grid (T', H', W').
    pub fn grid(&self) -> (usize, usize, usize) {
        (
            self.frames / self.patch.t,
            self.height / self.patch.h,
            self.width / self.patch.w,
        )
    }

    pub fn num_tokens(&self) -> usize {
        let (a, b, c) = self.grid();
        a * b * c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, size, p) in [
            ("frames", self.frames, self.patch.t),
            ("height", self.height, self.patch.h),
            ("width", self.width, self.patch.w),
        ] {
            if p == 0 || size == 0 || size % p != 0 {
                return Err(Error::config(format!(
                    "{name} {size} is not divisible by patch size {p}"
                )));
            }
        }
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model.dim {} must be a positive multiple of model.heads {}",
                self.dim, self.heads
            )));
        }
        if self.groups_m < 2 {
            return Err(Error::config("model.groups_M must be at least 2"));
        }
        if self.grouping_layers.is_empty()
            || self
                .grouping_layers
                .iter()
                .any(|&l| l == 0 || l > self.layers)
        {
            return Err(Error::config(format!(
                "model.grouping_layers {:?} must lie in 1..={}",
                self.grouping_layers, self.layers
            )));
        }
        if self.text_max_len < 2 {
            return Err(Error::config("text.max_len must be at least 2"));
        }
        if !(self.gumbel_temp > 0.0) {
            return Err(Error::config("model.gumbel_temp must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub enabled: bool,
    /// Frames per clip.
    pub window_size_t: usize,
    /// Use β = (e − s)/N_t instead of the inclusive foreground fraction.
    pub literal_beta: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window_size_t: 2,
            literal_beta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub w_temporal: f64,
    pub w_grounding: f64,
    pub w_contrastive: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            w_temporal: 1.0,
            w_grounding: 1.0,
            w_contrastive: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub warmup: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_wallclock: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 32,
            lr: 0.01,
            momentum: 0.9,
            warmup: 0.05,
            seed: 0,
            checkpoint_every: 500,
            log_wallclock: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub aug: AugConfig,
    pub loss: LossConfig,
    pub train: TrainSettings,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("cannot parse value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("expected a boolean for {key}, got {v:?}"))),
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut explicit_grouping = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "model.grouping_layers" {
                explicit_grouping = true;
            }
            cfg.set(k, v)?;
        }
        if !explicit_grouping {
            cfg.model.grouping_layers = default_grouping_layers(cfg.model.layers);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "video.frames" => m.frames = parse(key, v)?,
            "video.height" => m.height = parse(key, v)?,
            "video.width" => m.width = parse(key, v)?,
            "model.patch" => m.patch = v.parse()?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.groups_M" => m.groups_m = parse(key, v)?,
            "model.grouping_layers" => {
                m.grouping_layers = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "model.common_dim" => m.common_dim = parse(key, v)?,
            "model.text_layers" => m.text_layers = parse(key, v)?,
            "model.gumbel_temp" => m.gumbel_temp = parse(key, v)?,
            "model.init_std" => m.init_std = parse(key, v)?,
            "text.max_len" => m.text_max_len = parse(key, v)?,
            "nouns.K" => m.nouns_k = parse(key, v)?,
            "aug.enabled" => self.aug.enabled = parse_bool(key, v)?,
            "aug.window_size_t" => self.aug.window_size_t = parse(key, v)?,
            "aug.literal_beta" => self.aug.literal_beta = parse_bool(key, v)?,
            "loss.tau" => self.loss.tau = parse(key, v)?,
            "loss.w_temporal" => self.loss.w_temporal = parse(key, v)?,
            "loss.w_grounding" => self.loss.w_grounding = parse(key, v)?,
            "loss.w_contrastive" => self.loss.w_contrastive = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.warmup" => self.train.warmup = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "log.wallclock" => self.train.log_wallclock = parse_bool(key, v)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = self.aug.window_size_t;
        if t == 0 || t % self.model.patch.t != 0 {
            return Err(Error::config(format!(
                "aug.window_size_t {t} must be a positive multiple of the temporal patch size {}",
                self.model.patch.t
            )));
        }
        if self.model.frames % t != 0 {
            return Err(Error::config(format!(
                "video.frames {} is not divisible by aug.window_size_t {t}",
                self.model.frames
            )));
        }
        if !(self.loss.tau > 0.0) {
            return Err(Error::config("loss.tau must be positive"));
        }
        for (k, w) in [
            ("loss.w_temporal", self.loss.w_temporal),
            ("loss.w_grounding", self.loss.w_grounding),
            ("loss.w_contrastive", self.loss.w_contrastive),
        ] {
            if !(w >= 0.0) {
                return Err(Error::config(format!("{k} must be nonnegative")));
            }
        }
        let tr = &self.train;
        if tr.steps == 0 || tr.batch == 0 {
            return Err(Error::config("train.steps and train.batch must be at least 1"));
        }
        if !(0.0..1.0).contains(&tr.warmup) {
            return Err(Error::config("train.warmup must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Canonical `key = value` listing; parsing it yields the same config.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let layers: Vec<String> = m.grouping_layers.iter().map(|l| l.to_string()).collect();
        BTreeMap::from([
            ("video.frames", m.frames.to_string()),
            ("video.height", m.height.to_string()),
            ("video.width", m.width.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.groups_M", m.groups_m.to_string()),
            ("model.grouping_layers", layers.join(",")),
            ("model.common_dim", m.common_dim.to_string()),
            ("model.text_layers", m.text_layers.to_string()),
            ("model.gumbel_temp", m.gumbel_temp.to_string()),
            ("model.init_std", m.init_std.to_string()),
            ("text.max_len", m.text_max_len.to_string()),
            ("nouns.K", m.nouns_k.to_string()),
            ("aug.enabled", self.aug.enabled.to_string()),
            ("aug.window_size_t", self.aug.window_size_t.to_string()),
            ("aug.literal_beta", self.aug.literal_beta.to_string()),
            ("loss.tau", self.loss.tau.to_string()),
            ("loss.w_temporal", self.loss.w_temporal.to_string()),
            ("loss.w_grounding", self.loss.w_grounding.to_string()),
            ("loss.w_contrastive", self.loss.w_contrastive.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.momentum", self.train.momentum.to_string()),
            ("train.warmup", self.train.warmup.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("log.wallclock", self.train.log_wallclock.to_string()),
        ])
    }

    /// Hex SHA-256 of the canonical listing, excluding keys that do not
    /// affect the optimisation trajectory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if matches!(k, "train.checkpoint_every" | "log.wallclock") {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_toy_regimen() {
        let c = Config::default();
        assert_eq!(c.model.grouping_layers, vec![2, 3, 4]);
        assert_eq!(c.model.num_tokens(), 64);
        assert_eq!(c.train.batch, 32);
        assert_eq!(c.loss.tau, 0.07);
        c.validate().unwrap();
    }

    #[test]
    fn canonical_listing_round_trips() {
        let mut c = Config::default();
        c.set("loss.w_temporal", "0").unwrap();
        c.set("model.patch", "2x4x4").unwrap();
        let back = Config::parse_str(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn grouping_layers_follow_depth_unless_given() {
        let c = Config::parse_str("model.layers = 12\n").unwrap();
        assert_eq!(c.model.grouping_layers, vec![6, 9, 12]);
        let c = Config::parse_str("model.layers = 8\nmodel.grouping_layers = 3,8\n").unwrap();
        assert_eq!(c.model.grouping_layers, vec![3, 8]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_shapes() {
        assert!(matches!(
            Config::parse_str("model.depth = 3"),
            Err(Error::Config(_))
        ));
        let err = Config::parse_str("video.height = 30").unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        assert!(Config::parse_str("aug.window_size_t = 3").is_err());
        assert!(Config::parse_str("train.warmup = 1.0").is_err());
    }

    #[test]
    fn hash_ignores_bookkeeping_keys() {
        let a = Config::default();
        let mut b = a.clone();
        b.train.checkpoint_every = 7;
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }
}
