use super::{attend_head, causal_mask, AttentionGeometry, AttnOptions, KvCacheState, MhaVars, MhaWeights};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Multi-head / grouped-query attention over `h` (`l × d`).
///
/// Query head `i` reads key/value head `i / (n_h / n_kv)`. Rotary embedding is
/// applied to queries and keys over the full head width, and the rotated keys
/// are appended to `cache` together with the values.
pub fn mha_forward_var<'t>(
    h: Var<'t>,
    w: &MhaVars<'t>,
    geo: &AttentionGeometry,
    cache: &mut KvCacheState,
    opts: &AttnOptions,
) -> Result<Var<'t>> {
    cache.expect_full(geo)?;
    let tape = h.tape();
    let l = h.rows();
    let past = cache.len();
    let positions: Vec<usize> = (past..past + l).collect();

    let q = h.matmul(w.w_q)?.rope(&positions, geo.n_h, opts.rope_base)?;
    let k_new = h.matmul(w.w_k)?.rope(&positions, geo.n_kv, opts.rope_base)?;
    let v_new = h.matmul(w.w_v)?;

    let (keys, values) = if past == 0 {
        (k_new, v_new)
    } else {
        let (k_old, v_old) = cache.tensors();
        (
            tape.concat_rows(&[tape.constant(k_old), k_new])?,
            tape.concat_rows(&[tape.constant(v_old), v_new])?,
        )
    };

    let mask = opts.causal.then(|| causal_mask(l, past));
    let group = geo.group_size();
    let dh = geo.d_h;
    let mut heads = Vec::with_capacity(geo.n_h);
    for i in 0..geo.n_h {
        let g = i / group;
        let qi = q.slice_last(i * dh, (i + 1) * dh)?;
        let kg = keys.slice_last(g * dh, (g + 1) * dh)?;
        let vg = values.slice_last(g * dh, (g + 1) * dh)?;
        heads.push(attend_head(qi, kg, vg, geo.attention_scale_mha(), mask.clone())?);
    }
    let out = tape.concat_last(&heads)?.matmul(w.w_o)?;

    cache.append_full(&k_new.value(), &v_new.value())?;
    Ok(out)
}

/// Eager wrapper around [`mha_forward_var`].
pub fn mha_forward(
    h: &Tensor,
    w: &MhaWeights,
    geo: &AttentionGeometry,
    cache: &mut KvCacheState,
    opts: &AttnOptions,
) -> Result<Tensor> {
    w.check(geo)?;
    let tape = Tape::new();
    let vars = w.bind(&tape, false);
    let out = mha_forward_var(tape.leaf(h), &vars, geo, cache, opts)?;
    Ok(out.value().as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::rope_apply;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geo(n_kv: usize) -> AttentionGeometry {
        AttentionGeometry {
            d: 12,
            n_h: 4,
            n_kv,
            d_h: 6,
            d_qk: 2,
            d_r: 2,
            r_q: 8,
            r_kv: 8,
        }
    }

    #[test]
    fn single_token_returns_value_through_output() {
        let g = geo(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = MhaWeights::random(&g, 0.3, &mut rng);
        let h = Tensor::randn(&[1, g.d], 1.0, &mut rng);
        let mut cache = KvCacheState::full(&g);
        let out = mha_forward(&h, &w, &g, &mut cache, &AttnOptions::default()).unwrap();

        let v = h.matmul(&w.w_v).unwrap();
        // each query head copies its group's value row
        let expanded = Tensor::from_fn(&[1, g.n_h * g.d_h], |j| {
            let (head, c) = (j / g.d_h, j % g.d_h);
            v.data()[(head / g.group_size()) * g.d_h + c]
        });
        let expect = expanded.matmul(&w.w_o).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
        assert_eq!(cache.len(), 1);
    }

    /// Token-by-token evaluation of softmax(q·kᵀ/√d_h)·v with explicit loops.
    fn brute_force(h: &Tensor, w: &MhaWeights, g: &AttentionGeometry) -> Tensor {
        let l = h.rows();
        let pos: Vec<usize> = (0..l).collect();
        let q = rope_apply(&h.matmul(&w.w_q).unwrap(), &pos, g.n_h, 10_000.0).unwrap();
        let k = rope_apply(&h.matmul(&w.w_k).unwrap(), &pos, g.n_kv, 10_000.0).unwrap();
        let v = h.matmul(&w.w_v).unwrap();
        let mut concat = vec![0.0; l * g.n_h * g.d_h];
        for t in 0..l {
            for i in 0..g.n_h {
                let kv = i * g.n_kv / g.n_h;
                let mut scores = Vec::new();
                for s in 0..=t {
                    let mut dot = 0.0;
                    for c in 0..g.d_h {
                        dot += q.at(t, i * g.d_h + c) * k.at(s, kv * g.d_h + c);
                    }
                    scores.push(dot / (g.d_h as f64).sqrt());
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let p = (sc - max).exp() / z;
                    for c in 0..g.d_h {
                        concat[t * g.n_h * g.d_h + i * g.d_h + c] += p * v.at(s, kv * g.d_h + c);
                    }
                }
            }
        }
        Tensor::new(&[l, g.n_h * g.d_h], concat).unwrap().matmul(&w.w_o).unwrap()
    }

    #[test]
    fn three_tokens_match_brute_force() {
        for n_kv in [1, 2, 4] {
            let g = geo(n_kv);
            let mut rng = ChaCha8Rng::seed_from_u64(9 + n_kv as u64);
            let w = MhaWeights::random(&g, 0.4, &mut rng);
            let h = Tensor::randn(&[3, g.d], 1.0, &mut rng);
            let mut cache = KvCacheState::full(&g);
            let out = mha_forward(&h, &w, &g, &mut cache, &AttnOptions::default()).unwrap();
            assert!(out.max_abs_diff(&brute_force(&h, &w, &g)) <= 1e-10);
        }
    }

    #[test]
    fn latent_cache_is_rejected() {
        let g = geo(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = MhaWeights::random(&g, 0.3, &mut rng);
        let mut cache = KvCacheState::latent(&g);
        let err = mha_forward(&Tensor::zeros(&[1, g.d]), &w, &g, &mut cache, &AttnOptions::default());
        assert!(matches!(err, Err(crate::Error::Cache(_))));
    }

    #[test]
    fn full_cache_grows_by_two_kv_widths_per_token() {
        let g = geo(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = MhaWeights::random(&g, 0.3, &mut rng);
        let mut cache = KvCacheState::full(&g);
        for t in 1..=3 {
            let h = Tensor::randn(&[1, g.d], 1.0, &mut rng);
            mha_forward(&h, &w, &g, &mut cache, &AttnOptions::default()).unwrap();
            assert_eq!(cache.scalar_count(), t * 2 * g.n_kv * g.d_h);
        }
    }
}
