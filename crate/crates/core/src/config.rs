//! Run configuration: one TOML document covering data, models, training
//! budgets and evaluation, with a stable content digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::evaluator::{ClassifierConfig, DEFAULT_KS};
use crate::glyph_data::SynthSpec;
use crate::lss::build_patch_layout;
use crate::refiner::RefinerConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "DECIPHER_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// Directory tree `<category>/<role>/<name>.png`.
    Real { path: PathBuf, invert: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synthetic(SynthSpec::default()), test_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub trials: usize,
    /// Base seed of the first trial; later trials use `seed + m`.
    pub seed: u64,
    /// Condition variants per category used for multi-round evaluation
    /// (all when unset).
    pub multi_round_variants: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec(), trials: 5, seed: 1, multi_round_variants: None }
    }
}

impl EvalConfig {
    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|m| self.seed + m).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub refiner: RefinerConfig,
    pub classifier: ClassifierConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 128,
            channels: 3,
            patch_size: 64,
            stride: 16,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            refiner: RefinerConfig::default(),
            classifier: ClassifierConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
        }
    }
}

impl RunConfig {
    /// Scaled-down settings for a single CPU core: short schedules, narrow
    /// networks and fixed step budgets.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.schedule = ScheduleConfig { steps: 100, beta_start: 1e-3, beta_end: 0.2 };
        c.denoiser.base_channels = 8;
        c.denoiser.time_embed_dim = 16;
        c.denoiser.norm_groups = 4;
        c.denoiser.lr = 1e-3;
        c.denoiser.weight_decay = 0.0;
        c.denoiser.max_steps = Some(2000);
        c.refiner.schedule = ScheduleConfig { steps: 50, beta_start: 2e-3, beta_end: 0.35 };
        c.refiner.lr = 1e-3;
        c.refiner.weight_decay = 0.0;
        c.refiner.max_steps = Some(1500);
        c.eval.multi_round_variants = Some(3);
        c.output_dir = PathBuf::from("runs/desk");
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        build_patch_layout(self.image_size, self.image_size, self.patch_size, self.stride)?;
        self.schedule.build()?;
        let mismatch = |what: &str, a: usize, b: usize| Error::Config(format!("{what}: {a} vs {b}"));
        if self.denoiser.patch_size != self.patch_size {
            return Err(mismatch("denoiser patch size differs from run patch size", self.denoiser.patch_size, self.patch_size));
        }
        for (what, size, ch) in [
            ("refiner", self.refiner.image_size, self.refiner.image_channels),
            ("classifier", self.classifier.image_size, self.classifier.image_channels),
        ] {
            if size != self.image_size {
                return Err(mismatch(&format!("{what} image size differs"), size, self.image_size));
            }
            if ch != self.channels {
                return Err(mismatch(&format!("{what} channel count differs"), ch, self.channels));
            }
        }
        if self.denoiser.image_channels != self.channels {
            return Err(mismatch("denoiser channel count differs", self.denoiser.image_channels, self.channels));
        }
        if let DataSource::Synthetic(s) = &self.data.source {
            if s.image_size != self.image_size || s.channels != self.channels {
                return Err(Error::Config("synthetic corpus geometry differs from the run geometry".into()));
            }
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction {} outside (0, 1)", self.data.test_fraction)));
        }
        if self.eval.trials == 0 || self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.ks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("evaluation needs at least one trial and strictly increasing positive ks".into()));
        }
        self.denoiser.validate()?;
        self.refiner.validate()?;
        self.classifier.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Denoiser settings for whole-image sampling (one patch covering the image).
    pub fn whole_image_denoiser(&self) -> DenoiserConfig {
        DenoiserConfig { patch_size: self.image_size, ..self.denoiser.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            c.validate().unwrap();
            let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.digest().unwrap(), c.digest().unwrap());
        }
        assert_ne!(RunConfig::default().digest().unwrap(), RunConfig::desk().digest().unwrap());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[denoiser]\nlr = 0.5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.denoiser.lr, 0.5);
        assert_eq!(c.denoiser.batch_size, 8);
        assert_eq!(c.patch_size, 64);
    }

    #[test]
    fn cross_field_mismatches_are_rejected() {
        let mut c = RunConfig::default();
        c.refiner.image_size = 64;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.stride = 24;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.patch_size = 32;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval.ks = vec![10, 1];
        assert!(c.validate().is_err());
    }
}
