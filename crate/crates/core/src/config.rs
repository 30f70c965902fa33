//! Run configuration: one TOML document with a section per subsystem, plus
//! dotted-path overrides (`trainer.lambda_div=0.5`).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Per-channel input normalization applied inside the encoder.
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 24, 32],
            stage_strides: vec![4, 8, 16, 32],
            pixel_mean: [0.5, 0.5, 0.5],
            pixel_std: [0.25, 0.25, 0.25],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub num_classes: usize,
    /// Prototypes per class.
    pub k: usize,
    pub d_proto: usize,
    /// Reserve one extra slot of `k` background prototypes.
    pub background: bool,
    /// Per-stage cosine temperatures.
    pub temperatures: Vec<f64>,
    pub class_names: Vec<String>,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            k: 3,
            d_proto: 64,
            background: true,
            temperatures: vec![0.1; 4],
            class_names: ["TUM", "STR", "LYM", "NEC"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// One crop per region, bounded by the region's bounding box.
    Region,
    /// One crop per 4-connected component of the region.
    Components,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub alpha: f64,
    pub fusion_weights: Vec<f64>,
    pub infonce_temperature: f64,
    /// Fraction of other-class prototypes kept as (hardest) negatives per anchor.
    pub hard_negative_fraction: f64,
    pub crop_mode: CropMode,
    /// Components smaller than this many pixels are dropped in `components` mode.
    pub min_component_area: usize,
    /// Side of the square the region encoder resamples every crop to.
    pub region_size: usize,
    pub region_embed_dim: usize,
    pub region_encoder_seed: u64,
    /// External region encoder command; the built-in stub is used when empty.
    pub region_encoder_command: Vec<String>,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.45,
            fusion_weights: vec![0.25; 4],
            infonce_temperature: 0.07,
            hard_negative_fraction: 0.5,
            crop_mode: CropMode::Region,
            min_component_area: 4,
            region_size: 16,
            region_embed_dim: 32,
            region_encoder_seed: 0x5eed,
            region_encoder_command: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityConfig {
    /// Encoder stage (1-based) providing the features of the diversity term.
    pub stage: usize,
    pub clamp_floor: f64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            stage: 4,
            clamp_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
    pub lambda_sim: f64,
    pub lambda_div: f64,
    /// Classification-only steps before the auxiliary losses switch on.
    /// Negative means one epoch worth of steps.
    pub warmup_steps: i64,
    pub grad_clip: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 0.003,
            batch_size: 10,
            epochs: 10,
            max_steps: 0,
            lambda_sim: 0.1,
            lambda_div: 0.5,
            warmup_steps: -1,
            grad_clip: 5.0,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    pub enabled: bool,
    pub iterations: usize,
    pub spatial_weight: f64,
    pub sigma_spatial: f64,
    pub appearance_weight: f64,
    /// Colour bandwidth on the 0..255 intensity scale.
    pub sigma_color: f64,
    /// Positional bandwidth of the appearance kernel.
    pub sigma_appearance_xy: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            iterations: 5,
            spatial_weight: 1.0,
            sigma_spatial: 3.0,
            appearance_weight: 1.0,
            sigma_color: 10.0,
            sigma_appearance_xy: 20.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub bank: BankConfig,
    pub refiner: RefinerConfig,
    pub diversity: DiversityConfig,
    pub trainer: TrainerConfig,
    pub crf: CrfConfig,
}

/// Parse `path=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{s}` is not of the form key=value")]))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Config(vec![format!("override `{s}` has an empty key")]));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path.to_string(), value))
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Apply dotted-path overrides. Unknown keys are reported together.
    pub fn with_overrides(&self, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).expect("config is a table");
        let mut errors = Vec::new();
        for (path, value) in overrides {
            let parts: Vec<&str> = path.split('.').collect();
            let (last, parents) = parts.split_last().expect("non-empty path");
            let mut cursor = Some(&mut table);
            for p in parents {
                cursor = match cursor.and_then(|t| t.get_mut(*p)) {
                    Some(toml::Value::Table(t)) => Some(t),
                    _ => None,
                };
            }
            let Some(cursor) = cursor else {
                errors.push(format!("unknown config section in `{path}`"));
                continue;
            };
            match cursor.get(*last) {
                None => errors.push(format!("unknown config key `{path}`")),
                Some(old) => {
                    // Integers given where floats are expected are widened.
                    let value = match (old, value) {
                        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
                        _ => value.clone(),
                    };
                    cursor.insert(last.to_string(), value);
                }
            }
        }
        let built: std::result::Result<Self, toml::de::Error> = toml::Value::Table(table).try_into();
        match built {
            Ok(cfg) if errors.is_empty() => Ok(cfg),
            // Report constraint violations of the applicable overrides alongside the bad keys.
            Ok(cfg) => {
                if let Err(Error::Config(v)) = cfg.validate() {
                    errors.extend(v);
                }
                Err(Error::Config(errors))
            }
            Err(e) => {
                errors.push(e.to_string());
                Err(Error::Config(errors))
            }
        }
    }

    /// Every violated constraint, listed together.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let enc = &self.encoder;
        if enc.stage_channels.len() != 4 {
            e.push(format!(
                "encoder.stage_channels must have 4 entries, got {}",
                enc.stage_channels.len()
            ));
        }
        if enc.stage_strides.len() != 4 {
            e.push(format!(
                "encoder.stage_strides must have 4 entries, got {}",
                enc.stage_strides.len()
            ));
        }
        if enc.stage_channels.contains(&0) {
            e.push("encoder.stage_channels must be positive".into());
        }
        let mut prev = 1;
        for &s in &enc.stage_strides {
            if s == 0 || s < prev || s % prev != 0 {
                e.push(format!(
                    "encoder.stage_strides must be positive, nondecreasing and each divisible by the previous ({:?})",
                    enc.stage_strides
                ));
                break;
            }
            prev = s;
        }
        if enc.pixel_std.iter().any(|&s| s <= 0.0) {
            e.push("encoder.pixel_std must be positive".into());
        }
        let b = &self.bank;
        if b.num_classes == 0 {
            e.push("bank.num_classes must be >= 1".into());
        }
        if b.k == 0 {
            e.push("bank.k must be >= 1".into());
        }
        if b.d_proto == 0 {
            e.push("bank.d_proto must be >= 1".into());
        }
        if b.temperatures.len() != 4 || b.temperatures.iter().any(|&t| t <= 0.0 || !t.is_finite()) {
            e.push("bank.temperatures must hold 4 positive values".into());
        }
        if !b.class_names.is_empty() && b.class_names.len() != b.num_classes {
            e.push(format!(
                "bank.class_names has {} entries but bank.num_classes is {}",
                b.class_names.len(),
                b.num_classes
            ));
        }
        let r = &self.refiner;
        if !(r.alpha > 0.0 && r.alpha < 1.0) {
            e.push(format!("refiner.alpha must lie in (0, 1), got {}", r.alpha));
        }
        if r.fusion_weights.len() != 4
            || r.fusion_weights.iter().any(|&w| w < 0.0)
            || r.fusion_weights.iter().sum::<f64>() <= 0.0
        {
            e.push("refiner.fusion_weights must hold 4 nonnegative values with positive sum".into());
        }
        if r.infonce_temperature <= 0.0 {
            e.push("refiner.infonce_temperature must be positive".into());
        }
        if !(r.hard_negative_fraction > 0.0 && r.hard_negative_fraction <= 1.0) {
            e.push("refiner.hard_negative_fraction must lie in (0, 1]".into());
        }
        if r.region_size == 0 || r.region_embed_dim == 0 {
            e.push("refiner.region_size and refiner.region_embed_dim must be positive".into());
        }
        if !(1..=4).contains(&self.diversity.stage) {
            e.push(format!(
                "diversity.stage must be in 1..=4, got {}",
                self.diversity.stage
            ));
        }
        if !(self.diversity.clamp_floor > 0.0 && self.diversity.clamp_floor < 1.0) {
            e.push("diversity.clamp_floor must lie in (0, 1)".into());
        }
        let t = &self.trainer;
        if t.learning_rate <= 0.0 {
            e.push("trainer.learning_rate must be positive".into());
        }
        if t.weight_decay < 0.0 {
            e.push("trainer.weight_decay must be >= 0".into());
        }
        if t.batch_size == 0 {
            e.push("trainer.batch_size must be >= 1".into());
        }
        if t.epochs == 0 {
            e.push("trainer.epochs must be >= 1".into());
        }
        if t.lambda_sim < 0.0 || t.lambda_div < 0.0 {
            e.push("trainer.lambda_sim and trainer.lambda_div must be >= 0".into());
        }
        if t.grad_clip <= 0.0 {
            e.push("trainer.grad_clip must be positive".into());
        }
        let c = &self.crf;
        if c.sigma_spatial <= 0.0 || c.sigma_color <= 0.0 || c.sigma_appearance_xy <= 0.0 {
            e.push("crf sigmas must be positive".into());
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn class_name(&self, c: usize) -> String {
        self.bank
            .class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("class{c}"))
    }
}
