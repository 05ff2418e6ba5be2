//! Run configuration: one strict JSON document drives every command.
//!
//! Every field has a default, so `{}` is a valid config. Unknown keys are
//! rejected. Seeds found inside sections are salts; the effective seed of
//! each stage is derived from the global `seed` and that salt.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::reward::{ConditionKind, LambdaDefaults, SegmenterConfig};
use crate::rng::derive_seed;
use crate::schedule::ScheduleConfig;
use crate::train::{Strategy, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-sample fan-out; 0 uses every core.
    pub workers: usize,
    pub schedule: ScheduleConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub reward: RewardSection,
    pub eval: EvalSection,
    pub sample: SampleSection,
    pub bench: BenchSection,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub kind: String,
    pub classes: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n: 600,
            height: 16,
            width: 16,
            kind: "seg-mask".into(),
            classes: 4,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: [usize; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { widths: [16, 32, 16] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            iters: 1500,
            batch: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub t_thre: usize,
    /// Reward weight; falls back to the per-kind default.
    pub lambda: Option<f64>,
    pub strategy: Strategy,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            iters: 500,
            batch: 16,
            lr: 1e-3,
            t_thre: 20,
            lambda: None,
            strategy: Strategy::Efficient,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub lambda: LambdaDefaults,
    /// The segmentation reward model, trained on the training split.
    pub segmenter: SegmenterConfig,
    pub canny_low: f64,
    pub canny_high: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            lambda: LambdaDefaults::default(),
            segmenter: SegmenterConfig {
                hidden: vec![8],
                iters: 400,
                noise_std: 0.1,
                seed: 1,
                ..Default::default()
            },
            canny_low: crate::reward::CANNY_LOW,
            canny_high: crate::reward::CANNY_HIGH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Test-split samples to generate and score.
    pub n: usize,
    /// Checkpoint to evaluate, relative to the output directory.
    pub checkpoint: String,
    /// The evaluation segmenter. It differs from the reward model in width,
    /// noise and seed.
    pub segmenter: SegmenterConfig,
    /// Binary-edge F1 matches within one pixel instead of exactly.
    pub edge_tolerance: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n: 64,
            checkpoint: "finetuned.ckpt".into(),
            segmenter: SegmenterConfig {
                hidden: vec![16],
                iters: 600,
                noise_std: 0.2,
                seed: 2,
                ..Default::default()
            },
            edge_tolerance: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n: usize,
    pub checkpoint: String,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            n: 8,
            checkpoint: "finetuned.ckpt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub schedules: Vec<usize>,
    pub t_samples: Vec<usize>,
    /// Sampling-chain length at which the fitted line is reported.
    pub extrapolate_to: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            schedules: vec![100, 1000],
            t_samples: (1..=8).collect(),
            extrapolate_to: 50,
        }
    }
}

/// File names inside the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: String,
    pub pretrained: String,
    pub finetuned: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data.cnds".into(),
            pretrained: "pretrained.ckpt".into(),
            finetuned: "finetuned.ckpt".into(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            schedule: ScheduleConfig::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            reward: RewardSection::default(),
            eval: EvalSection::default(),
            sample: SampleSection::default(),
            bench: BenchSection::default(),
            paths: Paths::default(),
        }
    }
}

// Stage numbers for seed derivation.
const STAGE_INIT: u64 = 1;
const STAGE_PRETRAIN: u64 = 2;
const STAGE_FINETUNE: u64 = 3;
const STAGE_REWARD: u64 = 4;
const STAGE_EVAL: u64 = 5;
const STAGE_SAMPLE: u64 = 6;
const STAGE_VALIDATION: u64 = 7;

impl RunConfig {
    /// Parses JSON text. Errors carry the line and column of the offending
    /// key or value.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = Error::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.kind()?;
        self.schedule.build()?;
        self.denoiser().validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|f| !(*f >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("data.split must be non-negative and sum to 1, got {:?}", self.data.split)));
        }
        if self.data.height % 2 != 0 || self.data.width % 2 != 0 {
            return Err(Error::config("data.height and data.width must be even"));
        }
        if self.eval.n == 0 || self.sample.n == 0 {
            return Err(Error::config("eval.n and sample.n must be at least 1"));
        }
        if self.bench.t_samples.len() < 2 || self.bench.schedules.is_empty() {
            return Err(Error::config("bench needs at least two t_samples and one schedule"));
        }
        Ok(())
    }

    pub fn kind(&self) -> Result<ConditionKind> {
        ConditionKind::parse(&self.data.kind, self.data.classes)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let hint_channels = self.kind().map(|k| k.hint_channels()).unwrap_or(1);
        DenoiserConfig {
            widths: self.model.widths,
            hint_channels,
            vocab: crate::data::CAPTION_VOCAB,
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, STAGE_INIT, 0)
    }

    pub fn validation_seed(&self) -> u64 {
        derive_seed(self.seed, STAGE_VALIDATION, 0)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, STAGE_EVAL, 0)
    }

    pub fn sample_seed(&self) -> u64 {
        derive_seed(self.seed, STAGE_SAMPLE, 0)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule,
            lr: self.pretrain.lr,
            batch: self.pretrain.batch,
            iters: self.pretrain.iters,
            seed: derive_seed(self.seed, STAGE_PRETRAIN, 0),
            strategy: Strategy::DiffusionOnly,
            ..TrainConfig::default()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let f = &self.finetune;
        TrainConfig {
            schedule: self.schedule,
            t_thre: f.t_thre,
            lambda: f.lambda,
            lr: f.lr,
            batch: f.batch,
            iters: f.iters,
            seed: derive_seed(self.seed, STAGE_FINETUNE, 0),
            strategy: f.strategy,
        }
    }

    pub fn reward_segmenter(&self) -> SegmenterConfig {
        let mut c = self.reward.segmenter.clone();
        c.seed = derive_seed(self.seed, STAGE_REWARD, c.seed);
        c
    }

    pub fn eval_segmenter(&self) -> SegmenterConfig {
        let mut c = self.eval.segmenter.clone();
        c.seed = derive_seed(self.seed, STAGE_EVAL, c.seed);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let err = RunConfig::from_json("{\n  \"finetune\": {\n    \"itres\": 3\n  }\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("itres") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn strategy_is_tagged() {
        let c = RunConfig::from_json(r#"{"finetune": {"strategy": {"kind": "full-sampling", "t_sample": 4}}}"#).unwrap();
        assert_eq!(c.finetune.strategy, Strategy::FullSampling { t_sample: 4 });
    }

    #[test]
    fn invalid_values_are_refused() {
        assert!(RunConfig::from_json(r#"{"data": {"kind": "sketch"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"split": [0.5, 0.5, 0.5]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"finetune": {"t_thre": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"height": 15}}"#).is_err());
    }

    #[test]
    fn stage_seeds_follow_the_global_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..Default::default() };
        assert_ne!(a.pretrain_config().seed, b.pretrain_config().seed);
        assert_ne!(a.pretrain_config().seed, a.finetune_config().seed);
        assert_eq!(a.eval_segmenter().seed, RunConfig::default().eval_segmenter().seed);
    }
}
