use rand::seq::SliceRandom;

use super::data::{stream_rng, PrefPair};
use super::losses::{dpo_loss, sequence_logprob, sequence_logprob_value};
use super::optim::{adamw_step, clip_global_norm, lr_at, AdamState};
use super::TrainPlan;
use crate::error::{Error, Result};
use crate::model::LmModel;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoRow {
    pub step: u64,
    pub loss: f64,
    /// Mean `log π(chosen) − log π(rejected)` over the batch, before the update.
    pub margin: f64,
    pub lr: f64,
}

pub struct DpoOutcome {
    pub model: LmModel,
    /// Frozen copy of the starting student.
    pub reference: LmModel,
    pub trace: Vec<DpoRow>,
}

/// Mean `log p(chosen) − log p(rejected)` under `model`.
pub fn preference_margin(model: &LmModel, pairs: &[PrefPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no preference pairs".into()));
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += sequence_logprob_value(model, &p.prompt, &p.chosen)?
            - sequence_logprob_value(model, &p.prompt, &p.rejected)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Preference tuning against a frozen copy of the incoming student.
pub fn dpo_train(student: LmModel, pairs: &[PrefPair], plan: &TrainPlan) -> Result<DpoOutcome> {
    plan.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no preference pairs".into()));
    }
    for p in pairs {
        p.validate()?;
    }
    let reference = student.clone();
    let ref_scores: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| {
            Ok((
                sequence_logprob_value(&reference, &p.prompt, &p.chosen)?,
                sequence_logprob_value(&reference, &p.prompt, &p.rejected)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut model = student;
    let numels: Vec<usize> = model.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::new(&numels);
    let mut rng = stream_rng(plan.seed, "data-order");
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(plan.steps as usize);

    for step in 0..plan.steps {
        let mut batch = Vec::with_capacity(plan.batch_size);
        while batch.len() < plan.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().unwrap());
        }
        let lr = lr_at(plan, step);
        let tape = Tape::new();
        let vars = model.bind(&tape, true);
        let mut pc = Vec::new();
        let mut pr = Vec::new();
        let (mut rc, mut rr) = (Vec::new(), Vec::new());
        for &i in &batch {
            let p = &pairs[i];
            pc.push(sequence_logprob(&model, &vars, &p.prompt, &p.chosen)?);
            pr.push(sequence_logprob(&model, &vars, &p.prompt, &p.rejected)?);
            rc.push(ref_scores[i].0);
            rr.push(ref_scores[i].1);
        }
        let margin = pc.iter().zip(&pr).map(|(c, r)| c.item() - r.item()).sum::<f64>() / batch.len() as f64;
        let loss = dpo_loss(&pc, &pr, &rc, &rr, plan.dpo_beta)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite("dpo loss"));
        }
        tape.backward(loss)?;
        let handles = vars.all();
        let mut params: Vec<&mut Tensor> = model.named_mut().into_iter().map(|(_, t)| t).collect();
        let mut grads: Vec<Vec<f64>> = handles
            .iter()
            .zip(&params)
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        clip_global_norm(&mut grads, plan.clip_norm);
        adamw_step(&mut params, &grads, &mut adam, plan, lr, step + 1)?;
        trace.push(DpoRow {
            step,
            loss: loss.item(),
            margin,
            lr,
        });
    }
    Ok(DpoOutcome {
        model,
        reference,
        trace,
    })
}
