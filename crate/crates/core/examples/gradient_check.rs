//! Central-difference check of every parameter gradient in a one-layer MLA
//! model under the mixed cross-entropy + KL objective.
//!
//! cargo run --release --example gradient_check

use mla_upcycle::attention::AttentionGeometry;
use mla_upcycle::model::{LayerSelection, LmModel, ModelConfig};
use mla_upcycle::training::{grad_check, mixed_sft_loss};
use mla_upcycle::upcycle::RankSpec;

fn main() -> mla_upcycle::Result<()> {
    let geo = AttentionGeometry {
        d: 8,
        n_h: 2,
        n_kv: 1,
        d_h: 4,
        d_qk: 2,
        d_r: 2,
        r_q: 8,
        r_kv: 4,
    };
    let mut config = ModelConfig::attention_only(1, geo, 8);
    config.vocab_size = 11;
    let teacher = LmModel::new(config.clone(), 1)?;
    let (student, _) = LmModel::new(config, 2)?.upcycle(&RankSpec::Fixed { r_q: 8, r_kv: 4 }, &LayerSelection::All, true)?;

    let tokens = [1, 4, 9, 2, 7, 3];
    let (input, targets) = (&tokens[..5], &tokens[1..]);
    let teacher_logits = teacher.logits(input)?;
    let params: Vec<(String, _)> = student.named().into_iter().map(|(n, t)| (n, t.clone())).collect();

    let report = grad_check(&params, 1e-5, |_, vars| {
        let mut it = vars.iter().copied();
        let model_vars = student.bind_with(&mut |_| it.next().expect("one handle per tensor"));
        let logits = student.forward_var(&model_vars, input, &mut student.new_caches())?;
        Ok(mixed_sft_loss(logits, Some(&teacher_logits), targets, 1.0, 0.5)?.total)
    })?;
    for g in &report.groups {
        println!("{:<28} abs {:.2e} rel {:.2e}", g.name, g.max_abs_err, g.max_rel_err);
    }
    println!("max relative error {:.3e} (pass at 1e-4: {})", report.max_rel_err, report.passes(1e-4));
    Ok(())
}
