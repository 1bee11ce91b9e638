//! Distills an SVD-initialized and a randomly initialized MLA student from the
//! same toy teacher and prints held-out KL every 50 steps.
//!
//! cargo run --release --example svd_vs_random -- [seed]

use mla_upcycle::model::{LayerSelection, LmModel, ModelConfig};
use mla_upcycle::training::{bytes_to_tokens, eval_kl, gen_corpus, sub_seed, train_lm, CorpusKind, SftTrainer, TrainPlan};
use mla_upcycle::upcycle::RankSpec;

fn main() -> mla_upcycle::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let tokens = bytes_to_tokens(&gen_corpus(CorpusKind::Markov, 20_000, seed)?);
    let (train, held) = tokens.split_at(18_000);

    let teacher_plan = TrainPlan {
        ce_weight: 1.0,
        kl_weight: 0.0,
        lr: 1e-2,
        steps: 300,
        seed,
        ..TrainPlan::default()
    };
    let teacher = LmModel::new(ModelConfig::default(), sub_seed(seed, "teacher"))?;
    let (teacher, _) = train_lm(teacher, train, &teacher_plan)?;

    // r_kv + d_r = 32 halves the per-token cache of the 2×16 grouped teacher.
    let (r_q, r_kv) = (64, 24);
    let (svd, _) = teacher.upcycle(&RankSpec::Fixed { r_q, r_kv }, &LayerSelection::All, false)?;
    let random = teacher.random_mla_baseline(r_q, r_kv, &LayerSelection::All, false, sub_seed(seed, "random"))?;

    let eval: Vec<&[usize]> = held.chunks_exact(32).take(16).collect();
    let plan = TrainPlan {
        steps: 500,
        seed,
        ..TrainPlan::default()
    };
    let mut a = SftTrainer::new(svd, Some(&teacher), train, plan.clone())?;
    let mut b = SftTrainer::new(random, Some(&teacher), train, plan)?;
    println!("{:>5} {:>12} {:>12}", "step", "svd_kl", "random_kl");
    for step in (0..=500).step_by(50) {
        if step > 0 {
            a.run(50)?;
            b.run(50)?;
        }
        let ka = eval_kl(a.model(), &teacher, &eval)?;
        let kb = eval_kl(b.model(), &teacher, &eval)?;
        println!("{step:>5} {ka:>12.6} {kb:>12.6}{}", if ka < kb { "" } else { "  <- random ahead" });
    }
    Ok(())
}
