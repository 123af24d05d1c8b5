//! Run-level configuration: every module config plus ablation presets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{DiscriminatorConfig, GeneratorConfig};
use crate::patch::DEFAULT_MIN_FG;

pub const FORMAT_TAG: &str = "mgan-run/1";

/// Independent ChaCha stream `stream` of the run seed.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub adversarial_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patch_size: usize,
    pub stride: usize,
    pub min_fg: f64,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 5,
            adversarial_epochs: 50,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patch_size: 64,
            stride: 10,
            min_fg: DEFAULT_MIN_FG,
            d_steps: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub mc_samples: usize,
    pub tta_samples: usize,
    pub tta_noise_sigma: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            stride: 32,
            mc_samples: 20,
            tta_samples: 20,
            tta_noise_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub data_range: f64,
    /// Restrict metrics to the foreground mask of the target.
    pub masked: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data_range: 2.0,
            masked: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub device: String,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            losses: LossWeights::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

/// Ablation rows: which of the frequency branch and quality guidance are on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Backbone,
    SftNcg,
    StCg,
    Mgan,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Backbone, Preset::SftNcg, Preset::StCg, Preset::Mgan];

    /// `(use_frequency_branch, use_quality_guidance)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Preset::Backbone => (false, false),
            Preset::SftNcg => (true, false),
            Preset::StCg => (false, true),
            Preset::Mgan => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Backbone => "backbone",
            Preset::SftNcg => "sft-ncg",
            Preset::StCg => "st-cg",
            Preset::Mgan => "mgan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {s:?}")))
    }
}

impl RunConfig {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        let (freq, quality) = preset.flags();
        self.generator.use_frequency_branch = freq;
        self.losses.use_quality_guidance = quality;
        self
    }

    /// Reduced desk-scale setup for 32³ volumes on a CPU.
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig {
                enc_channels: [16, 8],
                sft_channels: 16,
                n_res_blocks: 2,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig {
                channels: vec![8, 16, 32],
                ..DiscriminatorConfig::default()
            },
            train: TrainConfig {
                adversarial_epochs: 10,
                patch_size: 32,
                stride: 32,
                ..TrainConfig::default()
            },
            inference: InferenceConfig {
                patch_size: 32,
                stride: 32,
                ..InferenceConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.losses.validate()?;
        let t = &self.train;
        if t.lr < 0.0 || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.adam_eps <= 0.0 {
            return Err(Error::InvalidConfig("invalid optimizer settings".into()));
        }
        if t.stride == 0 || self.inference.stride == 0 || t.d_steps == 0 {
            return Err(Error::InvalidConfig("strides and d_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.min_fg) {
            return Err(Error::InvalidConfig(format!("min_fg {} outside [0, 1]", t.min_fg)));
        }
        let div = 1usize << self.discriminator.n_levels;
        for p in [t.patch_size, self.inference.patch_size] {
            if p == 0 || p % 8 != 0 || p % div != 0 {
                return Err(Error::InvalidConfig(format!(
                    "patch size {p} must be a positive multiple of 8 and {div}"
                )));
            }
        }
        if self.evaluation.data_range <= 0.0 {
            return Err(Error::InvalidConfig("data_range must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_map_to_flag_tuples() {
        let expect = [(false, false), (true, false), (false, true), (true, true)];
        for (p, e) in Preset::ALL.into_iter().zip(expect) {
            let c = RunConfig::default().with_preset(p);
            assert_eq!((c.generator.use_frequency_branch, c.losses.use_quality_guidance), e);
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert!(Preset::parse("nope").is_err());
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            c.validate().unwrap();
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
        }
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 9, "train": {"lr": 0.5}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.train.lr, 0.5);
        assert_eq!(partial.train.stride, 10);
    }

    #[test]
    fn bad_patch_rejected() {
        let mut c = RunConfig::default();
        c.train.patch_size = 60;
        assert!(c.validate().is_err());
    }
}
