//! Run configuration: a TOML file with one table per concern, plus
//! `section.key=value` overrides from the command line.
//!
//! ```toml
//! [model]
//! fusion = "film"
//! seed = 1
//!
//! [train]
//! lr = 1e-3
//! epochs = 30
//!
//! [bins]
//! count = 64
//! tau = 2.0
//! ```
//!
//! Every table and key is optional; unknown ones are an error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xdkd_core::depthdist::{make_bins, BinSpec};
use xdkd_core::harness::DistillConfig;
use xdkd_core::metrics::DEFAULT_CAPS;
use xdkd_core::model::{FusionKind, LayerId, ModelSpec};
use xdkd_core::nn::DasppConfig;
use xdkd_core::supervision::LossWeights;

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub teacher: TeacherSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub bins: BinsSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub fusion: String,
    pub daspp: bool,
    pub daspp_rates: [Vec<usize>; 3],
    pub image_widths: [usize; 5],
    pub radar_widths: [usize; 5],
    pub decoder_widths: [usize; 5],
    /// Parameter initialisation seed.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    /// The teacher is the model above with every width multiplied by this.
    pub width_multiplier: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Seeds the sample order.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub lambda_depth: f64,
    pub lambda_xkd: f64,
    pub lambda_d2kd: f64,
    pub layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinsSection {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub caps: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::from_spec(&ModelSpec::student(), 1),
            teacher: TeacherSection::default(),
            train: TrainSection::default(),
            distill: DistillSection::default(),
            bins: BinsSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_spec(&ModelSpec::student(), 1)
    }
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self { width_multiplier: 4, epochs: 30, seed: 7 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self { lr: d.lr, momentum: d.momentum, epochs: d.epochs, batch_size: d.batch_size, clip_norm: d.clip_norm, seed: d.seed }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_depth: w.depth,
            lambda_xkd: w.xkd,
            lambda_d2kd: w.d2kd,
            layers: LayerId::DEFAULT_SET.iter().map(|l| l.to_string()).collect(),
        }
    }
}

impl Default for BinsSection {
    fn default() -> Self {
        let b = BinSpec::default();
        Self { d_min: b.d_min, d_max: b.d_max, count: b.count(), tau: b.tau }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { caps: DEFAULT_CAPS.to_vec() }
    }
}

impl ModelSection {
    pub fn from_spec(spec: &ModelSpec, seed: u64) -> Self {
        Self {
            fusion: spec.fusion.as_str().into(),
            daspp: spec.daspp.is_some(),
            daspp_rates: spec.daspp.clone().unwrap_or_default().rates,
            image_widths: spec.image_widths,
            radar_widths: spec.radar_widths,
            decoder_widths: spec.decoder_widths,
            seed,
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let spec = ModelSpec {
            image_widths: self.image_widths,
            radar_widths: self.radar_widths,
            decoder_widths: self.decoder_widths,
            daspp: self.daspp.then(|| DasppConfig { rates: self.daspp_rates.clone() }),
            fusion: self.fusion.parse::<FusionKind>()?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).at(p)?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration as `config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).at(&path)
    }

    pub fn validate(&self) -> Result<()> {
        self.student_spec()?;
        self.teacher_spec()?;
        self.distill()?;
        Ok(())
    }

    pub fn student_spec(&self) -> Result<ModelSpec> {
        self.model.spec()
    }

    pub fn teacher_spec(&self) -> Result<ModelSpec> {
        if self.teacher.width_multiplier == 0 {
            return Err(Error::config("teacher.width_multiplier must be at least 1"));
        }
        Ok(self.model.spec()?.widened(self.teacher.width_multiplier))
    }

    pub fn layers(&self) -> Result<Vec<LayerId>> {
        Ok(self.distill.layers.iter().map(|s| s.parse()).collect::<xdkd_core::Result<_>>()?)
    }

    pub fn bins(&self) -> Result<BinSpec> {
        let b = &self.bins;
        Ok(make_bins(b.d_min, b.d_max, b.count, b.tau)?)
    }

    /// Training settings for the student.
    pub fn distill(&self) -> Result<DistillConfig> {
        let t = &self.train;
        let cfg = DistillConfig {
            weights: LossWeights { depth: self.distill.lambda_depth, xkd: self.distill.lambda_xkd, d2kd: self.distill.lambda_d2kd },
            bins: self.bins()?,
            layers: self.layers()?,
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            seed: t.seed,
            caps: self.eval.caps.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training settings for the teacher: the student's with the teacher's
    /// epoch count and seed.
    pub fn teacher_training(&self) -> Result<DistillConfig> {
        Ok(DistillConfig { epochs: self.teacher.epochs, seed: self.teacher.seed, ..self.distill()? })
    }
}

/// `section.key=value`; the value is read as a TOML value, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::config(format!("override key `{}` must be section.key", key.trim())))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().into()),
    };
    let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    let toml::Value::Table(inner) = entry else {
        return Err(Error::config(format!("`{section}` is not a table")));
    };
    inner.insert(field.to_string(), value);
    Ok(())
}
