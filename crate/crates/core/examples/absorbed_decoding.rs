//! Greedy decoding with a latent cache, before and after folding the key and
//! value up-projections into the query and output maps.
//!
//! cargo run --release --example absorbed_decoding

use mla_upcycle::attention::AttentionGeometry;
use mla_upcycle::model::{LayerSelection, LmModel, ModelConfig};
use mla_upcycle::training::bytes_to_tokens;
use mla_upcycle::upcycle::RankSpec;

fn main() -> mla_upcycle::Result<()> {
    let geo = AttentionGeometry {
        d: 64,
        n_h: 4,
        n_kv: 4,
        d_h: 16,
        d_qk: 8,
        d_r: 8,
        r_q: 48,
        r_kv: 24,
    };
    let donor = LmModel::new(ModelConfig::attention_only(3, geo, 128), 11)?;
    let (mla, _) = donor.upcycle(&RankSpec::Fixed { r_q: 48, r_kv: 24 }, &"0,2".parse::<LayerSelection>()?, false)?;
    let absorbed = mla.absorbed()?;

    let prompt = bytes_to_tokens(b"the quick brown fox");
    let mut naive_caches = mla.new_caches();
    let mut abs_caches = absorbed.new_caches();
    let a = mla.generate_with_caches(&prompt, 24, &mut naive_caches)?;
    let b = absorbed.generate_with_caches(&prompt, 24, &mut abs_caches)?;
    println!("same tokens: {}", a == b);

    let full = mla.logits(&a)?;
    let fused = absorbed.logits(&a)?;
    println!("max |naive - absorbed| logit: {:.3e}", full.max_abs_diff(&fused));

    for (i, (c, kind)) in naive_caches.iter().zip(&mla.config.layer_kinds).enumerate() {
        println!(
            "layer {i} {:?}: {} tokens, {} scalars per token",
            kind,
            c.len(),
            c.per_token_scalars()
        );
    }
    Ok(())
}
