//! Losses, learning-rate schedule, optimizer, teacher-forced training loop
//! and checkpoints.

mod checkpoint;
mod loss;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelVariant;

pub use checkpoint::{Checkpoint, CheckpointManifest, CheckpointMeta, TensorEntry, CHECKPOINT_MAGIC};
pub use loss::{compute_loss, graph_loss, stop_targets, LossBreakdown, LossVars, STOP_POS_WEIGHT};
pub use optim::Adam;
pub use trainer::{
    batch_indices, prepare_examples, run_training, LogRecord, ModelPreset, RunSummary, StepReport, TrainRunConfig, Trainer,
    TrainingExample,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_steps: u64,
    pub model_variant: ModelVariant,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Total steps; a resumed run stops at the same final step.
    pub steps: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-6,
            lr_start: 1e-3,
            lr_end: 1e-5,
            decay_steps: 50_000,
            model_variant: ModelVariant::M1,
            seed: 0,
            grad_clip: 1.0,
            steps: 50_000,
            checkpoint_every: 5_000,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lr_end < self.lr_start && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "need 0 < lr_end < lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        if self.decay_steps == 0 {
            return Err(Error::Config("decay_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `lr_start · (lr_end / lr_start)^(min(step, decay_steps) / decay_steps)`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let frac = step.min(cfg.decay_steps) as f64 / cfg.decay_steps as f64;
    if frac >= 1.0 {
        return cfg.lr_end;
    }
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(50_000, &c), 1e-5);
        assert_eq!(lr_at(80_000, &c), 1e-5);
        assert!((lr_at(25_000, &c) - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn config_checks() {
        let bad = TrainConfig {
            lr_end: 1e-2,
            ..TrainConfig::default()
        };
        assert!(bad.check().is_err());
        let bad = TrainConfig {
            decay_steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.check().is_err());
        assert!(TrainConfig::default().check().is_ok());
    }

    proptest! {
        #[test]
        fn schedule_non_increasing(a in 0u64..120_000, b in 0u64..120_000) {
            let c = TrainConfig::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(lr_at(hi, &c) <= lr_at(lo, &c));
        }
    }

    #[test]
    fn schedule_continuous_at_horizon() {
        let c = TrainConfig::default();
        let before = lr_at(c.decay_steps - 1, &c);
        assert!((before - c.lr_end).abs() / c.lr_end < 1e-3);
    }
}
