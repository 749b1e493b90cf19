use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoders::DepthBins;
use crate::envgate::{EnvDims, FusionStrategy};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::headloss::LossWeights;
use crate::numerics::AdamWConfig;
use crate::scenegen::Degradation;

/// Label printed with every resolved config.
pub const RECIPE: &str = "desk (synthetic stand-in for the full-scale multi-GPU regime)";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lambda_occ: f64,
    pub lambda_weather: f64,
    pub seed: u64,
    pub strategy: FusionStrategy,
    pub grid: String,
    pub channels: usize,
    pub depth_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub d_txt: usize,
    pub d_env: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for fusion-specific params (`env.*`, `fuse.*`).
    pub fusion_lr_scale: f64,
    /// Rescale the camera volume by `D / hits` per voxel after the splat.
    pub lift_normalize: bool,
    pub embeddings: Option<PathBuf>,
    pub degradation: Degradation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        let env = EnvDims::default();
        TrainConfig {
            lr: 2e-4,
            epochs: 30,
            lambda_occ: 1.0,
            lambda_weather: 0.1,
            seed: 0,
            strategy: FusionStrategy::Gated,
            grid: "desk".into(),
            channels: 16,
            depth_bins: 24,
            depth_min: 1.0,
            depth_max: 12.0,
            d_txt: env.d_txt,
            d_env: env.d_env,
            lora_rank: env.rank,
            lora_alpha: env.alpha,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            fusion_lr_scale: 0.1,
            lift_normalize: true,
            embeddings: None,
            degradation: Degradation::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`"),
    })
}

impl TrainConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, v) = (key.trim(), value.trim());
        let d = &mut self.degradation;
        match key {
            "lr" => self.lr = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lambda_occ" => self.lambda_occ = parse_num(key, v)?,
            "lambda_weather" => self.lambda_weather = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "strategy" => {
                self.strategy = v.parse().map_err(|e: Error| Error::Config {
                    key: key.into(),
                    msg: e.to_string(),
                })?
            }
            "grid" => self.grid = v.to_string(),
            "channels" => self.channels = parse_num(key, v)?,
            "depth_bins" => self.depth_bins = parse_num(key, v)?,
            "depth_min" => self.depth_min = parse_num(key, v)?,
            "depth_max" => self.depth_max = parse_num(key, v)?,
            "d_txt" => self.d_txt = parse_num(key, v)?,
            "d_env" => self.d_env = parse_num(key, v)?,
            "lora_rank" => self.lora_rank = parse_num(key, v)?,
            "lora_alpha" => self.lora_alpha = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "eps" => self.eps = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "fusion_lr_scale" => self.fusion_lr_scale = parse_num(key, v)?,
            "lift_normalize" => self.lift_normalize = parse_num(key, v)?,
            "embeddings" => {
                self.embeddings = (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
            }
            "night_gain" => d.night_gain = parse_num(key, v)?,
            "night_noise" => d.night_noise = parse_num(key, v)?,
            "rain_noise" => d.rain_noise = parse_num(key, v)?,
            "rain_haze" => d.rain_haze = parse_num(key, v)?,
            "streak_fraction" => d.streak_fraction = parse_num(key, v)?,
            "backscatter_prob" => d.backscatter_prob = parse_num(key, v)?,
            "backscatter_rate" => d.backscatter_rate = parse_num(key, v)?,
            "drop_prob" => d.drop_prob = parse_num(key, v)?,
            "recipe" => {}
            other => {
                return Err(Error::Config {
                    key: other.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parse flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", i + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if !(self.fusion_lr_scale > 0.0 && self.fusion_lr_scale.is_finite()) {
            return bad("fusion_lr_scale", "must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if !(self.lambda_occ >= 0.0 && self.lambda_weather >= 0.0) {
            return bad("lambda_occ", "loss weights must be >= 0");
        }
        if self.channels == 0 {
            return bad("channels", "must be >= 1");
        }
        if GridSpec::preset(&self.grid).is_none() {
            return bad("grid", "expected `desk` or `paper`");
        }
        if let Err(e) = self.depth() {
            return bad("depth_bins", &e.to_string());
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_env.min(self.d_txt) {
            return bad("lora_rank", "must be in 1..=min(d_env, d_txt)");
        }
        let d = &self.degradation;
        for (k, p) in [
            ("backscatter_prob", d.backscatter_prob),
            ("drop_prob", d.drop_prob),
            ("streak_fraction", d.streak_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(k, "must be a probability");
            }
        }
        if !(d.backscatter_rate > 0.0) {
            return bad("backscatter_rate", "must be > 0");
        }
        if !(d.night_noise >= 0.0 && d.rain_noise >= 0.0) {
            return bad("night_noise", "noise levels must be >= 0");
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::preset(&self.grid).ok_or_else(|| Error::Config {
            key: "grid".into(),
            msg: format!("unknown preset `{}`", self.grid),
        })
    }

    pub fn depth(&self) -> Result<DepthBins> {
        DepthBins::new(self.depth_min, self.depth_max, self.depth_bins)
    }

    pub fn env_dims(&self) -> EnvDims {
        EnvDims {
            d_txt: self.d_txt,
            d_env: self.d_env,
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            channels: self.channels,
        }
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            occ: self.lambda_occ,
            weather: self.lambda_weather,
        }
    }

    /// Fully resolved settings, one `key = value` per line, in fixed order.
    pub fn echo(&self) -> String {
        let d = &self.degradation;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("recipe", RECIPE.into());
        kv("lr", format!("{:e}", self.lr));
        kv("epochs", self.epochs.to_string());
        kv("lambda_occ", self.lambda_occ.to_string());
        kv("lambda_weather", self.lambda_weather.to_string());
        kv("seed", self.seed.to_string());
        kv("strategy", self.strategy.to_string());
        kv("grid", self.grid.clone());
        kv("channels", self.channels.to_string());
        kv("depth_bins", self.depth_bins.to_string());
        kv("depth_min", self.depth_min.to_string());
        kv("depth_max", self.depth_max.to_string());
        kv("d_txt", self.d_txt.to_string());
        kv("d_env", self.d_env.to_string());
        kv("lora_rank", self.lora_rank.to_string());
        kv("lora_alpha", self.lora_alpha.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", format!("{:e}", self.eps));
        kv("weight_decay", self.weight_decay.to_string());
        kv("fusion_lr_scale", self.fusion_lr_scale.to_string());
        kv("lift_normalize", self.lift_normalize.to_string());
        kv(
            "embeddings",
            self.embeddings
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        );
        kv("night_gain", d.night_gain.to_string());
        kv("night_noise", d.night_noise.to_string());
        kv("rain_noise", d.rain_noise.to_string());
        kv("rain_haze", d.rain_haze.to_string());
        kv("streak_fraction", d.streak_fraction.to_string());
        kv("backscatter_prob", d.backscatter_prob.to_string());
        kv("backscatter_rate", d.backscatter_rate.to_string());
        kv("drop_prob", d.drop_prob.to_string());
        s
    }
}
