//! Distillation, cross-entropy and preference training at desk scale.

mod data;
mod dpo;
mod gradcheck;
mod losses;
mod optim;
mod sft;
mod trace;

use serde::{Deserialize, Serialize};

pub use data::{bytes_to_tokens, gen_corpus, make_pref_pairs, stream_rng, sub_seed, CorpusKind, PrefPair};
pub use dpo::{dpo_train, preference_margin, DpoOutcome, DpoRow};
pub use gradcheck::{grad_check, GradCheckReport, GroupCheck};
pub use losses::{
    ce_loss, dpo_loss, kl_distill_loss, kl_value, mixed_sft_loss, sequence_logprob, sequence_logprob_value,
    MixedLoss,
};
pub use optim::{adamw_step, clip_global_norm, lr_at, AdamState};
pub use sft::{distill_train, eval_kl, train_lm, SftTrainer, TraceRow};
pub use trace::{read_trace_csv, write_dpo_csv, write_trace_csv, TRACE_HEADER};

use crate::error::{Error, Result};

/// Optimizer, schedule and loss settings shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Tokens per training sequence.
    pub seq_len: usize,
    pub ce_weight: f64,
    pub kl_weight: f64,
    pub dpo_beta: f64,
    pub seed: u64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 4,
            steps: 100,
            seq_len: 32,
            ce_weight: 0.0,
            kl_weight: 1.0,
            dpo_beta: 0.1,
            seed: 0,
            warmup_frac: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr={} eps={} weight_decay={} out of range", self.lr, self.eps, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("adam betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if self.ce_weight < 0.0 || self.kl_weight < 0.0 || self.ce_weight + self.kl_weight == 0.0 {
            return bad(format!(
                "loss weights ce={} kl={} must be nonnegative and not both zero",
                self.ce_weight, self.kl_weight
            ));
        }
        if !(self.dpo_beta > 0.0) {
            return bad(format!("dpo_beta {} must be positive", self.dpo_beta));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || self.clip_norm < 0.0 {
            return bad("warmup_frac must lie in [0, 1] and clip_norm be nonnegative".into());
        }
        Ok(())
    }
}
