//! Energy-threshold rank selection on the key/value spectrum of a trained
//! toy layer.
//!
//! cargo run --release --example rank_selection

use mla_upcycle::model::{LmModel, ModelConfig};
use mla_upcycle::attention::AttentionWeights;
use mla_upcycle::tensor::svd_full;
use mla_upcycle::training::{bytes_to_tokens, gen_corpus, train_lm, CorpusKind, TrainPlan};
use mla_upcycle::upcycle::{align_rank, captured_energy, expand_gqa_to_mha, select_rank_dynamic};
use mla_upcycle::Tensor;

fn main() -> mla_upcycle::Result<()> {
    let corpus = bytes_to_tokens(&gen_corpus(CorpusKind::Pattern, 8000, 3)?);
    let plan = TrainPlan {
        ce_weight: 1.0,
        kl_weight: 0.0,
        lr: 1e-2,
        steps: 100,
        ..TrainPlan::default()
    };
    let (model, _) = train_lm(LmModel::new(ModelConfig::default(), 3)?, &corpus, &plan)?;
    let geo = model.config.geometry;

    for (i, block) in model.blocks.iter().enumerate() {
        let AttentionWeights::Mha(w) = &block.attn else { continue };
        let w = expand_gqa_to_mha(w, &geo)?;
        let sigma = svd_full(&Tensor::concat_last(&[&w.w_k, &w.w_v])?)?.sigma;
        println!("layer {i}: top singular values {:.3?}", &sigma[..6]);
        for delta in [0.5, 0.8, 0.9, 0.95, 0.99, 1.0] {
            let r = select_rank_dynamic(&sigma, delta)?;
            let aligned = align_rank(r, geo.max_r_kv());
            println!(
                "  delta {delta:<4} -> rank {r:>3} (aligned {aligned:>3}, captures {:.4})",
                captured_energy(&sigma, aligned)
            );
        }
    }
    Ok(())
}
