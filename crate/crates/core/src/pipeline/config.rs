//! `key = value` run configuration.
//!
//! `preset` is applied first wherever it appears; every other key overrides
//! the preset value. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};
use crate::model::{ModelConfig, Preset};
use crate::supervision::LossWeights;

pub const SEED_ENV: &str = "PRISM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub c_coarse: usize,
    pub c_fine: usize,
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub mpm_layers: usize,
    pub heads: usize,
    pub theta_p: f64,
    pub theta_c: f64,
    pub tau: f64,
    pub refine_window: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Cosine decay of the learning rate over `steps`.
    pub lr_decay: bool,
    pub batch: usize,
    pub seed: u64,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Synthetic pairs to generate when no dataset is given.
    pub num_pairs: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub dataset: Option<PathBuf>,
    pub grayscale: bool,
    pub detach_sigma: bool,
    pub min_phi: f64,
    pub w_coarse: f64,
    pub w_fine: f64,
    pub w_pruning: f64,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::Full => ModelConfig::full(),
        };
        let (image_height, image_width) = match preset {
            Preset::Toy => (128, 128),
            Preset::Full => (480, 640),
        };
        Self {
            preset: preset_name(preset).to_string(),
            c_coarse: model.backbone.c_coarse,
            c_fine: model.backbone.c_fine,
            widths: model.backbone.widths,
            blocks_per_stage: model.backbone.blocks_per_stage,
            mpm_layers: model.mpm_layers,
            heads: model.heads,
            theta_p: model.theta_p,
            theta_c: model.theta_c,
            tau: model.tau,
            refine_window: model.refine_window,
            lr: 8e-4,
            weight_decay: 0.01,
            lr_decay: true,
            batch: 1,
            seed: 0,
            steps: 2000,
            checkpoint_every: 500,
            log_every: 50,
            num_pairs: 50,
            image_height,
            image_width,
            dataset: None,
            grayscale: model.grayscale,
            detach_sigma: model.detach_sigma,
            min_phi: model.min_phi,
            w_coarse: model.loss_weights.coarse,
            w_fine: model.loss_weights.fine,
            w_pruning: model.loss_weights.pruning,
        }
    }

    pub fn toy() -> Self {
        Self::for_preset(Preset::Toy)
    }

    pub fn preset_kind(&self) -> Result<Preset> {
        parse_preset(&self.preset)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match self.preset_kind()? {
            Preset::Toy => ModelConfig::toy(),
            Preset::Full => ModelConfig::full(),
        };
        m.backbone.c_coarse = self.c_coarse;
        m.backbone.c_fine = self.c_fine;
        m.backbone.widths = self.widths;
        m.backbone.blocks_per_stage = self.blocks_per_stage;
        m.mpm_layers = self.mpm_layers;
        m.heads = self.heads;
        m.theta_p = self.theta_p;
        m.theta_c = self.theta_c;
        m.tau = self.tau;
        m.refine_window = self.refine_window;
        m.grayscale = self.grayscale;
        m.detach_sigma = self.detach_sigma;
        m.min_phi = self.min_phi;
        m.loss_weights = LossWeights {
            coarse: self.w_coarse,
            fine: self.w_fine,
            pruning: self.w_pruning,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PrismError::Config(format!(
                "lr={} must be finite and non-negative",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(PrismError::Config("batch must be at least 1".into()));
        }
        if self.image_height % 32 != 0 || self.image_width % 32 != 0 || self.image_height == 0 || self.image_width == 0
        {
            return Err(PrismError::Config(format!(
                "image size {}x{} must be a positive multiple of 32",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    /// Parses `key = value` text. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PrismError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(PrismError::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        let preset = entries
            .get("preset")
            .map(|p| parse_preset(p))
            .transpose()?
            .unwrap_or(Preset::Toy);
        let mut cfg = Self::for_preset(preset);
        for (key, value) in &entries {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Applies the `PRISM_SEED` override if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| PrismError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| PrismError::Config(format!("{key}: cannot parse {value:?}")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(PrismError::Config(format!("{key}: expected a boolean, got {value:?}"))),
            }
        }
        match key {
            "preset" => self.preset = preset_name(parse_preset(value)?).to_string(),
            "c_coarse" => self.c_coarse = num(key, value)?,
            "c_fine" => self.c_fine = num(key, value)?,
            "widths" => {
                let parts: Vec<usize> = value.split(',').map(|v| num(key, v.trim())).collect::<Result<_>>()?;
                self.widths = parts
                    .try_into()
                    .map_err(|_| PrismError::Config("widths: expected three comma-separated values".into()))?;
            }
            "blocks_per_stage" => self.blocks_per_stage = num(key, value)?,
            "mpm_layers" => self.mpm_layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "theta_p" => self.theta_p = num(key, value)?,
            "theta_c" => self.theta_c = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "refine_window" => self.refine_window = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_decay" => self.lr_decay = flag(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "num_pairs" => self.num_pairs = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            "image_size" => {
                let s = num(key, value)?;
                self.image_height = s;
                self.image_width = s;
            }
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "grayscale" => self.grayscale = flag(key, value)?,
            "detach_sigma" => self.detach_sigma = flag(key, value)?,
            "min_phi" => self.min_phi = num(key, value)?,
            "w_coarse" => self.w_coarse = num(key, value)?,
            "w_fine" => self.w_fine = num(key, value)?,
            "w_pruning" => self.w_pruning = num(key, value)?,
            _ => return Err(PrismError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Serializes back to the `key = value` form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("preset", self.preset.clone());
        put("c_coarse", self.c_coarse.to_string());
        put("c_fine", self.c_fine.to_string());
        put(
            "widths",
            format!("{},{},{}", self.widths[0], self.widths[1], self.widths[2]),
        );
        put("blocks_per_stage", self.blocks_per_stage.to_string());
        put("mpm_layers", self.mpm_layers.to_string());
        put("heads", self.heads.to_string());
        put("theta_p", self.theta_p.to_string());
        put("theta_c", self.theta_c.to_string());
        put("tau", self.tau.to_string());
        put("refine_window", self.refine_window.to_string());
        put("lr", self.lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("batch", self.batch.to_string());
        put("seed", self.seed.to_string());
        put("steps", self.steps.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("log_every", self.log_every.to_string());
        put("num_pairs", self.num_pairs.to_string());
        put("image_height", self.image_height.to_string());
        put("image_width", self.image_width.to_string());
        if let Some(d) = &self.dataset {
            put("dataset", d.display().to_string());
        }
        put("grayscale", self.grayscale.to_string());
        put("detach_sigma", self.detach_sigma.to_string());
        put("min_phi", self.min_phi.to_string());
        put("w_coarse", self.w_coarse.to_string());
        put("w_fine", self.w_fine.to_string());
        put("w_pruning", self.w_pruning.to_string());
        s
    }
}

fn parse_preset(s: &str) -> Result<Preset> {
    match s {
        "toy" => Ok(Preset::Toy),
        "full" => Ok(Preset::Full),
        _ => Err(PrismError::Config(format!("preset must be toy or full, got {s:?}"))),
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Toy => "toy",
        Preset::Full => "full",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_applies_before_overrides() {
        let cfg = RunConfig::parse("c_coarse = 128\npreset = full\n# note\n\nseed=7").unwrap();
        assert_eq!(cfg.preset, "full");
        assert_eq!(cfg.c_coarse, 128);
        assert_eq!(cfg.c_fine, 128);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::toy();
        cfg.theta_p = 0.125;
        cfg.dataset = Some(PathBuf::from("/tmp/data"));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_input_rejected() {
        assert!(RunConfig::parse("nonsense = 1").is_err());
        assert!(RunConfig::parse("heads = three").is_err());
        assert!(RunConfig::parse("preset = huge").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("heads = 5").is_err());
        assert!(RunConfig::parse("image_size = 100").is_err());
    }
}
