use serde::{Deserialize, Serialize};

use crate::corpus::default_mask_count;
use crate::error::{Error, Result};
use crate::numerics::OptimizerConfig;
use crate::objectives::{CmlmVariant, DEFAULT_ALPHA, DEFAULT_MARGIN};

/// Stage schedule combining the CMLM and bitext retrieval tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// A single CMLM stage.
    Cmlm,
    /// Both tasks jointly from the start.
    S1,
    /// CMLM, then bitext retrieval alone.
    S2,
    /// CMLM, then both tasks jointly.
    S3,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmlm" | "cmlm_only" => Ok(Self::Cmlm),
            "s1" | "S1" => Ok(Self::S1),
            "s2" | "S2" => Ok(Self::S2),
            "s3" | "S3" => Ok(Self::S3),
            _ => Err(Error::Config(format!("unknown strategy {s:?} (cmlm|s1|s2|s3)"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cmlm => "cmlm",
            Self::S1 => "s1",
            Self::S2 => "s2",
            Self::S3 => "s3",
        })
    }
}

/// What one stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cmlm,
    Bitext,
    /// `L_cmlm + α·L_br`, one batch of each per step.
    Joint,
    Nli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub task: Task,
    pub steps: u64,
}

/// Peak learning rate for desk-scale runs (batch 32, a few thousand steps).
pub const DEFAULT_LR: f64 = 2e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub stage1_steps: u64,
    /// Second-stage length for S2 and S3; ignored otherwise.
    pub stage2_steps: u64,
    /// Length of the NLI finetuning stage; 0 skips it.
    pub nli_steps: u64,
    pub alpha: f64,
    pub margin: f64,
    pub batch_size: usize,
    /// Masked positions per `s2`; `None` uses the encoder's default count.
    pub num_mask: Option<usize>,
    pub variant: CmlmVariant,
    pub seed: u64,
    /// Learning rate, moments and warmup; the decay horizon is set per
    /// stage to that stage's length.
    pub optimizer: OptimizerConfig,
    /// Steps between metric records.
    pub log_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::Cmlm,
            stage1_steps: 2000,
            stage2_steps: 2000,
            nli_steps: 0,
            alpha: DEFAULT_ALPHA,
            margin: DEFAULT_MARGIN,
            batch_size: 32,
            num_mask: None,
            variant: CmlmVariant::Standard,
            seed: 0,
            optimizer: OptimizerConfig {
                lr: DEFAULT_LR,
                warmup_steps: 100,
                ..OptimizerConfig::default()
            },
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be finite and non-negative");
        }
        if self.stage1_steps == 0 && !matches!(self.strategy, Strategy::S2 | Strategy::S3) {
            return bad("stage1_steps must be positive");
        }
        if self.num_mask == Some(0) {
            return bad("num_mask must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        let needs_bitext = self
            .stages()
            .iter()
            .any(|s| matches!(s.task, Task::Bitext | Task::Joint));
        let min_batch = if needs_bitext { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch_size must be at least {min_batch} (bitext needs in-batch negatives)"
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer needs lr > 0 and betas in [0, 1)");
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("optimizer needs eps > 0 and weight_decay >= 0");
        }
        Ok(())
    }

    /// Stages in execution order. Stages with zero steps are kept so stage
    /// indices stay stable; they run no updates.
    pub fn stages(&self) -> Vec<Stage> {
        let stage = |task, steps| Stage { task, steps };
        let mut out = match self.strategy {
            Strategy::Cmlm => vec![stage(Task::Cmlm, self.stage1_steps)],
            Strategy::S1 => vec![stage(Task::Joint, self.stage1_steps)],
            Strategy::S2 => vec![
                stage(Task::Cmlm, self.stage1_steps),
                stage(Task::Bitext, self.stage2_steps),
            ],
            Strategy::S3 => vec![
                stage(Task::Cmlm, self.stage1_steps),
                stage(Task::Joint, self.stage2_steps),
            ],
        };
        if self.nli_steps > 0 {
            out.push(stage(Task::Nli, self.nli_steps));
        }
        out
    }

    pub fn mask_count(&self, max_len: usize) -> usize {
        self.num_mask.unwrap_or_else(|| default_mask_count(max_len))
    }

    pub fn total_steps(&self) -> u64 {
        self.stages().iter().map(|s| s.steps).sum()
    }

    /// Optimizer settings for a stage of `steps` updates: warmup as
    /// configured (capped at the stage length), linear decay to zero at the
    /// stage end.
    pub fn optimizer_for(&self, steps: u64) -> OptimizerConfig {
        OptimizerConfig {
            warmup_steps: self.optimizer.warmup_steps.min(steps),
            total_steps: steps,
            ..self.optimizer.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists() {
        let mut p = TrainPlan {
            strategy: Strategy::S3,
            stage1_steps: 10,
            stage2_steps: 5,
            ..Default::default()
        };
        assert_eq!(
            p.stages().iter().map(|s| s.task).collect::<Vec<_>>(),
            [Task::Cmlm, Task::Joint]
        );
        p.nli_steps = 3;
        assert_eq!(p.total_steps(), 18);
        p.strategy = Strategy::S1;
        assert_eq!(
            p.stages()[0],
            Stage {
                task: Task::Joint,
                steps: 10
            }
        );
    }

    #[test]
    fn schedule_spans_the_stage() {
        let p = TrainPlan::default();
        let o = p.optimizer_for(1000);
        assert!(o.lr_at(0) > 0.0);
        assert_eq!(o.lr_at(99), p.optimizer.lr);
        assert_eq!(o.lr_at(1000), 0.0);
    }

    #[test]
    fn bitext_stages_need_two_examples() {
        let p = TrainPlan {
            strategy: Strategy::S1,
            batch_size: 1,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
