//! Optimization pipelines: base MLM pretraining, writer-conditioned
//! intermediate MLM, sentiment fine-tuning, dual-encoder hashtag training
//! and writer-wise fine-tuning.

mod finetune;
mod mlm;
mod step;
mod system;

pub use finetune::{
    finetune_sentiment, predict_sentiment, sample_negatives, train_hashtag, writerwise_finetune, GridPoint,
    HashtagData, Trained, WriterwiseResult,
};
pub use mlm::{
    intermediate_mlm, mask_tokens, pretrain_base, IntermediateReport, Masked, PretrainReport, WriterLoss,
};
pub use system::{Conditioned, Conditioning, Pass, PersonalizedSystem, TaskHead, TokenContexts};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FineTuning,
    UserAdapter,
    UserIdentifier,
    SoftFix,
    SoftUpdate,
    HardStatic,
    HardDynamic,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FineTuning,
        Method::UserAdapter,
        Method::UserIdentifier,
        Method::SoftFix,
        Method::SoftUpdate,
        Method::HardStatic,
        Method::HardDynamic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FineTuning => "fine_tuning",
            Method::UserAdapter => "user_adapter",
            Method::UserIdentifier => "user_identifier",
            Method::SoftFix => "soft_fix",
            Method::SoftUpdate => "soft_update",
            Method::HardStatic => "hard_static",
            Method::HardDynamic => "hard_dynamic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }

    /// Continuous per-writer parameters (soft prompts or the adapter).
    pub fn is_soft(self) -> bool {
        matches!(self, Method::SoftFix | Method::SoftUpdate | Method::UserAdapter)
    }

    /// Writer tokens appended to the input.
    pub fn is_hard(self) -> bool {
        matches!(self, Method::HardStatic | Method::HardDynamic | Method::UserIdentifier)
    }

    pub fn supports_intermediate(self) -> bool {
        self != Method::FineTuning
    }

    /// Encoder weights stay fixed during fine-tuning.
    pub fn freezes_encoder(self) -> bool {
        self == Method::SoftFix
    }
}

/// Optimization hyperparameters shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rates: Vec<f64>,
    /// Epoch counts evaluated on dev; training runs to the largest.
    pub epochs: Vec<usize>,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub k_train: usize,
    pub k_eval: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub intermediate_epochs: usize,
    pub intermediate_lr: f64,
    /// Tokens taken from each history text for hard prompts (V).
    pub per_text: usize,
    pub prompt_token_length: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3],
            epochs: vec![10, 20, 30],
            batch_size: 16,
            mask_prob: 0.15,
            k_train: 10,
            k_eval: 200,
            pretrain_epochs: 5,
            pretrain_lr: 3e-3,
            intermediate_epochs: 5,
            intermediate_lr: 1e-3,
            per_text: 4,
            prompt_token_length: 16,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Sentiment search grid for pretrained BERT-scale encoders; hashtag
    /// runs at that scale use epochs 10 and 15.
    pub fn bert_grid() -> Self {
        Self {
            learning_rates: vec![1e-4, 1e-5, 5e-5],
            epochs: vec![5, 10, 15],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return fail("learning_rates must be a non-empty list of positive values");
        }
        if self.epochs.is_empty() || self.epochs.contains(&0) {
            return fail("epochs must be a non-empty list of positive counts");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return fail("mask_prob must lie in [0, 1]");
        }
        if self.k_train == 0 || self.k_eval == 0 {
            return fail("k_train and k_eval must be positive");
        }
        if self.per_text == 0 {
            return fail("per_text must be positive");
        }
        if !(self.pretrain_lr > 0.0 && self.intermediate_lr > 0.0 && self.clip_norm > 0.0) {
            return fail("pretrain_lr, intermediate_lr and clip_norm must be positive");
        }
        Ok(())
    }
}

/// One method/regime pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunSpec {
    pub method: Method,
    #[serde(default)]
    pub intermediate: bool,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.intermediate && !self.method.supports_intermediate() {
            return Err(Error::config(format!(
                "intermediate learning needs writer prompts; {} has none",
                self.method.as_str()
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if self.intermediate {
            format!("{}+inter", self.method.as_str())
        } else {
            self.method.as_str().to_string()
        }
    }
}

/// Everything one training run needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSpec,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(method: Method, intermediate: bool, train: TrainConfig, seed: u64) -> Self {
        Self {
            run: RunSpec { method, intermediate },
            train,
            seed,
        }
    }

    pub fn method(&self) -> Method {
        self.run.method
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn methods_round_trip_names() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(j, format!("\"{}\"", m.as_str()));
        }
        assert!(matches!(Method::parse("lora"), Err(Error::Config(_))));
    }

    #[test]
    fn fine_tuning_has_no_intermediate_stage() {
        let r = RunConfig::new(Method::FineTuning, true, TrainConfig::default(), 1);
        assert!(matches!(r.validate(), Err(Error::Config(_))));
        for m in Method::ALL.into_iter().filter(|&m| m != Method::FineTuning) {
            RunConfig::new(m, true, TrainConfig::default(), 1).validate().unwrap();
        }
    }

    #[test]
    fn grid_presets() {
        assert_eq!(TrainConfig::bert_grid().learning_rates, vec![1e-4, 1e-5, 5e-5]);
        assert_eq!(TrainConfig::default().epochs, vec![10, 20, 30]);
        assert_eq!(TrainConfig::default().batch_size, 16);
        let bad = TrainConfig {
            epochs: vec![],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
