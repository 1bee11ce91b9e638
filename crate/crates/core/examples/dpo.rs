//! Preference tuning: pairs built from a teacher's greedy continuations, a
//! student tuned against a frozen copy of itself.
//!
//! cargo run --release --example dpo

use mla_upcycle::model::{LmModel, ModelConfig};
use mla_upcycle::training::{
    bytes_to_tokens, dpo_train, gen_corpus, make_pref_pairs, preference_margin, train_lm, CorpusKind, TrainPlan,
};

fn main() -> mla_upcycle::Result<()> {
    let corpus = bytes_to_tokens(&gen_corpus(CorpusKind::Pattern, 10_000, 5)?);
    let ce = TrainPlan {
        ce_weight: 1.0,
        kl_weight: 0.0,
        lr: 1e-2,
        steps: 150,
        ..TrainPlan::default()
    };
    let (teacher, _) = train_lm(LmModel::new(ModelConfig::default(), 5)?, &corpus, &ce)?;
    let (student, _) = train_lm(LmModel::new(ModelConfig::default(), 6)?, &corpus, &TrainPlan { steps: 40, ..ce })?;

    let pairs = make_pref_pairs(&teacher, &corpus, 16, 16, 8, 5)?;
    let show = |t: &[usize]| String::from_utf8_lossy(&t.iter().map(|&b| b.min(255) as u8).collect::<Vec<_>>()).into_owned();
    println!("prompt {:?}\n  chosen   {:?}\n  rejected {:?}", show(&pairs[0].prompt), show(&pairs[0].chosen), show(&pairs[0].rejected));

    let before = preference_margin(&student, &pairs)?;
    let plan = TrainPlan {
        steps: 60,
        lr: 1e-3,
        ..TrainPlan::default()
    };
    let outcome = dpo_train(student.clone(), &pairs, &plan)?;
    let after = preference_margin(&outcome.model, &pairs)?;
    for row in outcome.trace.iter().step_by(10) {
        println!("step {:>3} loss {:.4} margin {:+.3}", row.step, row.loss, row.margin);
    }
    println!("margin {before:+.3} -> {after:+.3}");
    println!("reference untouched: {}", outcome.reference == student);
    Ok(())
}
