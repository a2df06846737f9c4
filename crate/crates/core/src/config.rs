//! Plain-text run configuration: one `key = value` per line, `#` comments.
//! Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderInput, Geometry, LatentConfig, ModelConfig};
use crate::train::TrainConfig;

/// Latent and backbone settings that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub geometry: Geometry,
    pub radius: f64,
    pub dp: usize,
    pub dt: usize,
    pub hidden: Vec<usize>,
    pub decoder_input: DecoderInput,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            geometry: Geometry::Hyperbolic,
            radius: 100.0,
            dp: 16,
            dt: 2,
            hidden: ModelConfig::DEFAULT_HIDDEN.to_vec(),
            decoder_input: DecoderInput::Ambient,
        }
    }
}

impl ModelSettings {
    pub fn model_config(
        &self,
        n_mel: usize,
        n_frames: usize,
        n_pitch: usize,
        n_timbre: usize,
    ) -> ModelConfig {
        ModelConfig {
            latent: LatentConfig {
                dp: self.dp,
                dt: self.dt,
                geometry: self.geometry,
                radius: self.radius,
                n_pitch,
                n_timbre,
            },
            n_mel,
            n_frames,
            hidden: self.hidden.clone(),
            decoder_input: self.decoder_input,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSettings,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value '{value}' for '{key}'")))
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(key, value, 0)
    }

    fn set_at(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "geometry" => m.geometry = value.parse()?,
            "radius" => m.radius = parse(key, value, line)?,
            "dp" => m.dp = parse(key, value, line)?,
            "dt" => m.dt = parse(key, value, line)?,
            "hidden" => {
                m.hidden = value
                    .split(',')
                    .map(|v| parse(key, v.trim(), line))
                    .collect::<Result<_>>()?
            }
            "decoder_input" => m.decoder_input = value.parse()?,
            "batch_size" => t.batch_size = parse(key, value, line)?,
            "learning_rate" => t.learning_rate = parse(key, value, line)?,
            "max_epochs" => t.max_epochs = parse(key, value, line)?,
            "max_steps" => t.max_steps = Some(parse(key, value, line)?),
            "patience" => t.patience = parse(key, value, line)?,
            "mc_samples" => t.mc_samples = parse(key, value, line)?,
            "seed" => t.seed = parse(key, value, line)?,
            "stop_criterion" => t.criterion = value.parse()?,
            "beta1" => t.beta1 = parse(key, value, line)?,
            "beta2" => t.beta2 = parse(key, value, line)?,
            "adam_eps" => t.adam_eps = parse(key, value, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies every line of `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", i + 1))
            })?;
            self.set_at(k.trim(), v.trim(), i + 1)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
