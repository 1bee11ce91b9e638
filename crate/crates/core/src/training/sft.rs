use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::data::stream_rng;
use super::losses::{kl_value, mixed_sft_loss};
use super::optim::{adamw_step, clip_global_norm, lr_at, AdamState};
use super::TrainPlan;
use crate::error::{Error, Result};
use crate::model::LmModel;
use crate::tensor::{Tape, Tensor};

/// Losses of one optimizer step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub ce_loss: f64,
    /// Per-position mean KL.
    pub kl_loss: f64,
    /// KL summed over positions (mean over the batch).
    pub kl_sum: f64,
    pub total: f64,
    pub lr: f64,
}

/// Step-at-a-time trainer for the cross-entropy / distillation objective.
pub struct SftTrainer<'a> {
    student: LmModel,
    teacher: Option<&'a LmModel>,
    corpus: &'a [usize],
    plan: TrainPlan,
    adam: AdamState,
    step: u64,
    rng: ChaCha8Rng,
}

impl<'a> SftTrainer<'a> {
    pub fn new(student: LmModel, teacher: Option<&'a LmModel>, corpus: &'a [usize], plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        if let Some(t) = teacher {
            if t.config.vocab_size != student.config.vocab_size {
                return Err(Error::Config(format!(
                    "teacher vocab {} differs from student vocab {}",
                    t.config.vocab_size, student.config.vocab_size
                )));
            }
        } else if plan.kl_weight > 0.0 {
            return Err(Error::Config("kl_weight > 0 needs a teacher".into()));
        }
        if corpus.len() < plan.seq_len + 1 {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than seq_len + 1 = {}",
                corpus.len(),
                plan.seq_len + 1
            )));
        }
        if let Some(&id) = corpus.iter().find(|&&t| t >= student.config.vocab_size) {
            return Err(Error::Vocab {
                id,
                vocab: student.config.vocab_size,
            });
        }
        let numels: Vec<usize> = student.named().iter().map(|(_, t)| t.numel()).collect();
        Ok(Self {
            adam: AdamState::new(&numels),
            rng: stream_rng(plan.seed, "data-order"),
            student,
            teacher,
            corpus,
            plan,
            step: 0,
        })
    }

    pub fn model(&self) -> &LmModel {
        &self.student
    }

    pub fn into_model(self) -> LmModel {
        self.student
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn sample_batch(&mut self) -> Vec<&'a [usize]> {
        let span = self.plan.seq_len + 1;
        let corpus = self.corpus;
        (0..self.plan.batch_size)
            .map(|_| {
                let s = self.rng.random_range(0..=corpus.len() - span);
                &corpus[s..s + span]
            })
            .collect()
    }

    /// One forward/backward/update on a fresh tape.
    pub fn step(&mut self) -> Result<TraceRow> {
        let batch = self.sample_batch();
        let lr = lr_at(&self.plan, self.step);
        let tape = Tape::new();
        let vars = self.student.bind(&tape, true);
        let inv_b = 1.0 / batch.len() as f64;
        let (mut ce, mut kl) = (0.0, 0.0);
        let mut total = None;
        for seq in &batch {
            let (input, targets) = (&seq[..seq.len() - 1], &seq[1..]);
            let logits = self.student.forward_var(&vars, input, &mut self.student.new_caches())?;
            let teacher_logits = match self.teacher {
                Some(t) => Some(t.logits(input)?),
                None => None,
            };
            let loss = mixed_sft_loss(
                logits,
                teacher_logits.as_ref(),
                targets,
                self.plan.ce_weight,
                self.plan.kl_weight,
            )?;
            ce += loss.ce * inv_b;
            kl += loss.kl * inv_b;
            total = Some(match total {
                Some(t) => loss.total.add(t)?,
                None => loss.total,
            });
        }
        let total = total.expect("batch is nonempty").scale(inv_b);
        if !total.item().is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        tape.backward(total)?;

        let handles = vars.all();
        let mut params: Vec<&mut Tensor> = self.student.named_mut().into_iter().map(|(_, t)| t).collect();
        let mut grads: Vec<Vec<f64>> = handles
            .iter()
            .zip(&params)
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        clip_global_norm(&mut grads, self.plan.clip_norm);
        self.step += 1;
        adamw_step(&mut params, &grads, &mut self.adam, &self.plan, lr, self.step)?;

        Ok(TraceRow {
            step: self.step - 1,
            ce_loss: ce,
            kl_loss: kl,
            kl_sum: kl * self.plan.seq_len as f64,
            total: total.item(),
            lr,
        })
    }

    pub fn run(&mut self, steps: u64) -> Result<Vec<TraceRow>> {
        (0..steps).map(|_| self.step()).collect()
    }
}

/// Trains `student` toward the frozen `teacher` for `plan.steps` steps.
pub fn distill_train(
    student: LmModel,
    teacher: &LmModel,
    corpus: &[usize],
    plan: &TrainPlan,
) -> Result<(LmModel, Vec<TraceRow>)> {
    let mut t = SftTrainer::new(student, Some(teacher), corpus, plan.clone())?;
    let trace = t.run(plan.steps)?;
    Ok((t.into_model(), trace))
}

/// Cross-entropy-only training (no teacher); `plan.kl_weight` must be zero.
pub fn train_lm(model: LmModel, corpus: &[usize], plan: &TrainPlan) -> Result<(LmModel, Vec<TraceRow>)> {
    let mut t = SftTrainer::new(model, None, corpus, plan.clone())?;
    let trace = t.run(plan.steps)?;
    Ok((t.into_model(), trace))
}

/// Mean per-position KL of `student` from `teacher` over fixed sequences.
pub fn eval_kl(student: &LmModel, teacher: &LmModel, sequences: &[&[usize]]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Data("no evaluation sequences".into()));
    }
    let mut sum = 0.0;
    for s in sequences {
        sum += kl_value(&student.logits(s)?, &teacher.logits(s)?)?;
    }
    Ok(sum / sequences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionGeometry;
    use crate::model::ModelConfig;

    fn tiny() -> LmModel {
        let g = AttentionGeometry {
            d: 16,
            n_h: 2,
            n_kv: 2,
            d_h: 8,
            d_qk: 4,
            d_r: 4,
            r_q: 8,
            r_kv: 8,
        };
        let mut c = ModelConfig::attention_only(1, g, 16);
        c.vocab_size = 12;
        LmModel::new(c, 1).unwrap()
    }

    fn corpus() -> Vec<usize> {
        (0..200).map(|i| (i * i + 3 * i) % 12).collect()
    }

    fn plan() -> TrainPlan {
        TrainPlan {
            steps: 6,
            seq_len: 8,
            batch_size: 2,
            lr: 1e-2,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn self_distillation_is_zero_and_teacher_is_untouched() {
        let teacher = tiny();
        let c = corpus();
        let (_, trace) = distill_train(teacher.clone(), &teacher, &c, &plan()).unwrap();
        assert!(trace[0].kl_loss <= 1e-12);
        assert!(teacher.named().iter().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn traces_are_deterministic() {
        let teacher = tiny();
        let student = LmModel::new(teacher.config.clone(), 9).unwrap();
        let c = corpus();
        let a = distill_train(student.clone(), &teacher, &c, &plan()).unwrap();
        let b = distill_train(student, &teacher, &c, &plan()).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
        assert!(a.1.iter().all(|r| r.kl_loss > 0.0));
    }

    #[test]
    fn ce_training_reduces_loss() {
        let c = corpus();
        let p = TrainPlan {
            ce_weight: 1.0,
            kl_weight: 0.0,
            steps: 40,
            ..plan()
        };
        let (_, trace) = train_lm(tiny(), &c, &p).unwrap();
        let head: f64 = trace[..5].iter().map(|r| r.ce_loss).sum();
        let tail: f64 = trace[35..].iter().map(|r| r.ce_loss).sum();
        assert!(tail < head);
    }

    #[test]
    fn mismatches_are_rejected() {
        let t = tiny();
        let mut other = t.config.clone();
        other.vocab_size = 13;
        let s = LmModel::new(other, 2).unwrap();
        let c = corpus();
        assert!(matches!(SftTrainer::new(s, Some(&t), &c, plan()), Err(Error::Config(_))));
        assert!(matches!(SftTrainer::new(t.clone(), None, &c, plan()), Err(Error::Config(_))));
        assert!(matches!(SftTrainer::new(t.clone(), Some(&t), &c[..5], plan()), Err(Error::Data(_))));
    }
}
