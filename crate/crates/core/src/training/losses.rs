use crate::error::{Error, Result};
use crate::model::{LmModel, ModelVars};
use crate::tensor::{Tape, Tensor, Var};

/// Mean over rows of `KL(teacher ‖ student)`; the teacher side is a constant.
///
/// Summed as `Σ p_t ⊙ (log p_t − log q)` so identical logits give exactly zero.
pub fn kl_distill_loss<'t>(student_logits: Var<'t>, teacher_logits: &Tensor) -> Result<Var<'t>> {
    if student_logits.shape() != teacher_logits.shape() || teacher_logits.shape().len() != 2 {
        return Err(Error::dim("kl_distill_loss", &student_logits.shape(), teacher_logits.shape()));
    }
    student_logits.kl_rows_from(teacher_logits)
}

/// Mean negative log-likelihood of `targets` (one per row).
pub fn ce_loss<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let v = logits.cols();
    if let Some(&id) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Vocab { id, vocab: v });
    }
    Ok(logits.log_softmax_rows().pick_per_row(targets)?.mean().scale(-1.0))
}

/// The two parts of a mixed objective and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct MixedLoss<'t> {
    pub total: Var<'t>,
    pub ce: f64,
    pub kl: f64,
}

/// `ce_w · CE + kl_w · KL`.
pub fn mixed_sft_loss<'t>(
    student_logits: Var<'t>,
    teacher_logits: Option<&Tensor>,
    targets: &[usize],
    ce_w: f64,
    kl_w: f64,
) -> Result<MixedLoss<'t>> {
    if ce_w < 0.0 || kl_w < 0.0 || ce_w + kl_w == 0.0 {
        return Err(Error::Config(format!("loss weights ce={ce_w} kl={kl_w} must be nonnegative, not both zero")));
    }
    let ce = ce_loss(student_logits, targets)?;
    let kl = match teacher_logits {
        Some(t) => Some(kl_distill_loss(student_logits, t)?),
        None if kl_w > 0.0 => return Err(Error::Config("KL weight set without a teacher".into())),
        None => None,
    };
    let mut total = ce.scale(ce_w);
    if let Some(kl) = kl {
        total = total.add(kl.scale(kl_w))?;
    }
    Ok(MixedLoss {
        total,
        ce: ce.item(),
        kl: kl.map_or(0.0, |k| k.item()),
    })
}

/// Mean over pairs of `−log σ(β·[(π_c − ref_c) − (π_r − ref_r)])`.
pub fn dpo_loss<'t>(
    policy_chosen: &[Var<'t>],
    policy_rejected: &[Var<'t>],
    ref_chosen: &[f64],
    ref_rejected: &[f64],
    beta: f64,
) -> Result<Var<'t>> {
    let n = policy_chosen.len();
    if n == 0 || policy_rejected.len() != n || ref_chosen.len() != n || ref_rejected.len() != n {
        return Err(Error::dim("dpo_loss", &[n, policy_rejected.len()], &[ref_chosen.len(), ref_rejected.len()]));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("dpo beta {beta} must be positive")));
    }
    let tape = policy_chosen[0].tape();
    let mut total: Option<Var<'t>> = None;
    for i in 0..n {
        let offset = tape.constant(Tensor::scalar(ref_chosen[i] - ref_rejected[i]));
        let margin = policy_chosen[i].sub(policy_rejected[i])?.sub(offset)?;
        let term = margin.scale(beta).log_sigmoid().scale(-1.0);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("n > 0").scale(1.0 / n as f64))
}

/// `Σ log p(continuation | prompt)` as a taped scalar.
pub fn sequence_logprob<'t>(
    model: &LmModel,
    vars: &ModelVars<'t>,
    prompt: &[usize],
    continuation: &[usize],
) -> Result<Var<'t>> {
    if prompt.is_empty() || continuation.is_empty() {
        return Err(Error::Data("prompt and continuation must be nonempty".into()));
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&continuation[..continuation.len() - 1]);
    let mut targets = prompt[1..].to_vec();
    targets.extend_from_slice(continuation);
    let logits = model.forward_var(vars, &input, &mut model.new_caches())?;
    let picked = logits.log_softmax_rows().pick_per_row(&targets)?;
    let start = prompt.len() - 1;
    let mask = Tensor::from_fn(&[targets.len()], |i| if i >= start { 1.0 } else { 0.0 });
    Ok(picked.mul(vars.embed.tape().constant(mask))?.sum())
}

/// Eager [`sequence_logprob`].
pub fn sequence_logprob_value(model: &LmModel, prompt: &[usize], continuation: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    Ok(sequence_logprob(model, &vars, prompt, continuation)?.item())
}

/// Eager KL between two logit matrices.
pub fn kl_value(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(kl_distill_loss(tape.constant(student_logits.clone()), teacher_logits)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_closed_forms() {
        let teacher = Tensor::from_rows(&[&[3f64.ln(), 0.0]]);
        let student = Tensor::zeros(&[1, 2]);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_value(&student, &teacher).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.13081).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[5, 7], 2.0, &mut rng);
        let b = Tensor::randn(&[5, 7], 2.0, &mut rng);
        assert_eq!(kl_value(&a, &a).unwrap(), 0.0);
        assert!(kl_value(&a, &b).unwrap() > 0.0);
        assert!(kl_value(&a, &Tensor::zeros(&[5, 6])).is_err());
    }

    #[test]
    fn ce_closed_forms() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4]));
        assert!((ce_loss(uniform, &[0, 1, 3]).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let sharp = tape.constant(Tensor::from_rows(&[&[0.0, 60.0, 0.0]]));
        assert!(ce_loss(sharp, &[1]).unwrap().item() < 1e-20);
        assert!(matches!(ce_loss(sharp, &[3]), Err(Error::Vocab { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 6], 1.5, &mut rng);
        let targets = [5, 0, 2, 2];
        let ls = x.log_softmax_rows();
        let oracle = -(0..4).map(|r| ls.at(r, targets[r])).sum::<f64>() / 4.0;
        assert!((ce_loss(tape.constant(x), &targets).unwrap().item() - oracle).abs() <= 1e-10);
    }

    #[test]
    fn mixed_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let t = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let sv = tape.constant(s.clone());
        let targets = [1, 4, 0];
        let ce = ce_loss(sv, &targets).unwrap().item();
        let kl = kl_value(&s, &t).unwrap();
        let only_ce = mixed_sft_loss(sv, Some(&t), &targets, 1.0, 0.0).unwrap();
        assert_eq!(only_ce.total.item(), ce);
        let only_kl = mixed_sft_loss(sv, Some(&t), &targets, 0.0, 1.0).unwrap();
        assert!((only_kl.total.item() - kl).abs() < 1e-15);
        let mix = mixed_sft_loss(sv, Some(&t), &targets, 1.0, 0.1).unwrap();
        assert!((mix.total.item() - (ce + 0.1 * kl)).abs() <= 1e-12);
        assert!(mixed_sft_loss(sv, None, &targets, 1.0, 0.5).is_err());
        assert!(mixed_sft_loss(sv, None, &targets, 0.0, 0.0).is_err());
    }

    #[test]
    fn dpo_closed_forms() {
        let tape = Tape::new();
        let s = |x: f64| tape.constant(Tensor::scalar(x));
        let zero = dpo_loss(&[s(-3.0)], &[s(-3.0)], &[-1.0], &[-1.0], 0.5).unwrap();
        assert!((zero.item() - 2f64.ln()).abs() < 1e-12);
        let two = dpo_loss(&[s(1.0)], &[s(-1.0)], &[0.0], &[0.0], 1.0).unwrap();
        assert!((two.item() - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for m in [-4.0, -1.0, 0.0, 0.5, 3.0] {
            let l = dpo_loss(&[s(m)], &[s(0.0)], &[0.0], &[0.0], 1.0).unwrap().item();
            assert!(l < last);
            last = l;
        }
        assert!(dpo_loss(&[s(0.0)], &[s(0.0)], &[0.0], &[0.0], 0.0).is_err());
    }
}
