//! Factorizes one grouped-query attention layer into MLA projections and shows
//! how reconstruction error and cache size trade off against the latent rank.
//!
//! cargo run --release --example upcycle_attention

use mla_upcycle::attention::{cache_footprint, AttentionGeometry, LayerKind, MhaWeights};
use mla_upcycle::tensor::svd_full;
use mla_upcycle::upcycle::{expand_gqa_to_mha, upcycle_attention, RankSpec};
use mla_upcycle::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mla_upcycle::Result<()> {
    let geo = AttentionGeometry {
        d: 64,
        n_h: 8,
        n_kv: 2,
        d_h: 16,
        d_qk: 8,
        d_r: 8,
        r_q: 64,
        r_kv: 64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let donor = MhaWeights::random(&geo, 1.0 / (geo.d as f64).sqrt(), &mut rng);
    let full = expand_gqa_to_mha(&donor, &geo)?;
    let kv = Tensor::concat_last(&[&full.w_k, &full.w_v])?;
    let sigma = svd_full(&kv)?.sigma;
    println!("[W_K|W_V] has rank {} (2·n_kv·d_h = {})", sigma.iter().filter(|&&s| s > 1e-10).count(), 2 * geo.n_kv * geo.d_h);

    println!("{:>5} {:>10} {:>12} {:>10}", "r_kv", "energy", "kv_rel_err", "cache");
    for r_kv in [8, 16, 24, 32, 48, 64] {
        let spec = RankSpec::Fixed { r_q: 64, r_kv };
        let (_, rep) = upcycle_attention(&donor, &geo, &spec, false)?;
        let fp = cache_footprint(&geo.with_ranks(64, r_kv), &[LayerKind::Mla { r_q: 64, r_kv }], 1);
        println!(
            "{r_kv:>5} {:>10.6} {:>12.3e} {:>9}%",
            rep.energy_kv,
            rep.recon_error_kv,
            fp.percent_string(2)
        );
    }

    let (_, rep) = upcycle_attention(&donor, &geo, &RankSpec::Dynamic { delta_q: 0.95, delta_kv: 0.95 }, false)?;
    println!("dynamic:0.95,0.95 picks r_q={} r_kv={}", rep.r_q, rep.r_kv);
    Ok(())
}
