use super::weights::{bind_one, LAYER_NORM_EPS};
use super::{attend_head, causal_mask, AttentionGeometry, AttnOptions, KvCacheState, MlaVars, MlaWeights};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// MLA forward that reconstructs per-head keys and values from the latent cache.
///
/// New tokens contribute `c_kv = h·w_dkv` (normed when enabled) and the shared
/// rotary key `rope(h·w_kr)` to `cache`; keys and values for every cached
/// position are rebuilt with `w_uk` / `w_uv` before scoring.
pub fn mla_forward_naive_var<'t>(
    h: Var<'t>,
    w: &MlaVars<'t>,
    geo: &AttentionGeometry,
    cache: &mut KvCacheState,
    opts: &AttnOptions,
) -> Result<Var<'t>> {
    cache.expect_latent(geo)?;
    let tape = h.tape();
    let l = h.rows();
    let past = cache.len();
    let positions: Vec<usize> = (past..past + l).collect();

    let mut c_q = h.matmul(w.w_dq)?;
    if let Some((gain, bias)) = w.ln_q {
        c_q = c_q.layer_norm(gain, bias, LAYER_NORM_EPS)?;
    }
    let q_c = c_q.matmul(w.w_uq)?;
    let q_r = c_q.matmul(w.w_qr)?.rope(&positions, geo.n_h, opts.rope_base)?;

    let mut c_new = h.matmul(w.w_dkv)?;
    if let Some((gain, bias)) = w.ln_kv {
        c_new = c_new.layer_norm(gain, bias, LAYER_NORM_EPS)?;
    }
    let kr_new = h.matmul(w.w_kr)?.rope(&positions, 1, opts.rope_base)?;

    let (c_kv, k_r) = with_history(tape, cache, c_new, kr_new)?;
    let k_c = c_kv.matmul(w.w_uk)?;
    let v_c = c_kv.matmul(w.w_uv)?;

    let mask = opts.causal.then(|| causal_mask(l, past));
    let (dqk, dr, dh) = (geo.d_qk, geo.d_r, geo.d_h);
    let mut heads = Vec::with_capacity(geo.n_h);
    for i in 0..geo.n_h {
        let q = tape.concat_last(&[q_c.slice_last(i * dqk, (i + 1) * dqk)?, q_r.slice_last(i * dr, (i + 1) * dr)?])?;
        let k = tape.concat_last(&[k_c.slice_last(i * dqk, (i + 1) * dqk)?, k_r])?;
        let v = v_c.slice_last(i * dh, (i + 1) * dh)?;
        heads.push(attend_head(q, k, v, geo.attention_scale_mla(), mask.clone())?);
    }
    let out = tape.concat_last(&heads)?.matmul(w.w_o)?;

    cache.append_latent(&c_new.value(), &kr_new.value())?;
    Ok(out)
}

fn with_history<'t>(
    tape: &'t Tape,
    cache: &KvCacheState,
    c_new: Var<'t>,
    kr_new: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if cache.is_empty() {
        return Ok((c_new, kr_new));
    }
    let (c_old, kr_old) = cache.tensors();
    Ok((
        tape.concat_rows(&[tape.constant(c_old), c_new])?,
        tape.concat_rows(&[tape.constant(kr_old), kr_new])?,
    ))
}

pub fn mla_forward_naive(
    h: &Tensor,
    w: &MlaWeights,
    geo: &AttentionGeometry,
    cache: &mut KvCacheState,
    opts: &AttnOptions,
) -> Result<Tensor> {
    w.check(geo)?;
    let tape = Tape::new();
    let vars = w.bind(&tape, false);
    let out = mla_forward_naive_var(tape.leaf(h), &vars, geo, cache, opts)?;
    Ok(out.value().as_ref().clone())
}

/// Inference weights with `w_uk` folded into the query path and `w_uv` into
/// the output projection, so decoding reads only `c_kv` and `k_r`.
///
/// `w_q_abs` is `d × n_h·r_kv` (head `i` block is `w_dq·w_uq_i·w_uk_iᵀ`),
/// `w_qr_path` is `w_dq·w_qr` and `w_o_abs` stacks `w_uv_i·w_o_i` (`n_h·r_kv × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct AbsorbedMlaWeights {
    pub w_q_abs: Tensor,
    pub w_qr_path: Tensor,
    pub w_dkv: Tensor,
    pub w_kr: Tensor,
    pub w_o_abs: Tensor,
}

impl AbsorbedMlaWeights {
    pub fn check(&self, geo: &AttentionGeometry) -> Result<()> {
        let g = geo;
        let expect = [
            ("w_q_abs", &self.w_q_abs, [g.d, g.n_h * g.r_kv]),
            ("w_qr_path", &self.w_qr_path, [g.d, g.n_h * g.d_r]),
            ("w_dkv", &self.w_dkv, [g.d, g.r_kv]),
            ("w_kr", &self.w_kr, [g.d, g.d_r]),
            ("w_o_abs", &self.w_o_abs, [g.n_h * g.r_kv, g.d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::Geometry(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_q_abs", &self.w_q_abs),
            ("w_qr_path", &self.w_qr_path),
            ("w_dkv", &self.w_dkv),
            ("w_kr", &self.w_kr),
            ("w_o_abs", &self.w_o_abs),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_q_abs", &mut self.w_q_abs),
            ("w_qr_path", &mut self.w_qr_path),
            ("w_dkv", &mut self.w_dkv),
            ("w_kr", &mut self.w_kr),
            ("w_o_abs", &mut self.w_o_abs),
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> AbsorbedVars<'t> {
        self.bind_with(&mut |t| bind_one(tape, t, trainable))
    }

    pub fn bind_with<'t>(&self, b: &mut dyn FnMut(&Tensor) -> Var<'t>) -> AbsorbedVars<'t> {
        AbsorbedVars {
            w_q_abs: b(&self.w_q_abs),
            w_qr_path: b(&self.w_qr_path),
            w_dkv: b(&self.w_dkv),
            w_kr: b(&self.w_kr),
            w_o_abs: b(&self.w_o_abs),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AbsorbedVars<'t> {
    pub w_q_abs: Var<'t>,
    pub w_qr_path: Var<'t>,
    pub w_dkv: Var<'t>,
    pub w_kr: Var<'t>,
    pub w_o_abs: Var<'t>,
}

impl<'t> AbsorbedVars<'t> {
    pub fn all(&self) -> Vec<Var<'t>> {
        vec![self.w_q_abs, self.w_qr_path, self.w_dkv, self.w_kr, self.w_o_abs]
    }
}

/// Folds the key and value up-projections into the query and output maps.
///
/// Refused when intermediate layer norms are enabled: the norm between the
/// down- and up-projection is not linear, so the fold would not be exact.
pub fn absorb(w: &MlaWeights, geo: &AttentionGeometry) -> Result<AbsorbedMlaWeights> {
    w.check(geo)?;
    if w.ln_kv.is_some() || w.ln_q.is_some() {
        return Err(Error::Unsupported(
            "absorption requires intermediate layer norms to be disabled".into(),
        ));
    }
    let (dqk, dh) = (geo.d_qk, geo.d_h);
    let mut q_blocks = Vec::with_capacity(geo.n_h);
    let mut o_blocks = Vec::with_capacity(geo.n_h);
    for i in 0..geo.n_h {
        let uq = w.w_uq.slice_last(i * dqk, (i + 1) * dqk)?;
        let uk = w.w_uk.slice_last(i * dqk, (i + 1) * dqk)?;
        q_blocks.push(uq.matmul(&uk.transpose()?)?);
        let uv = w.w_uv.slice_last(i * dh, (i + 1) * dh)?;
        let o = w.w_o.slice_rows(i * dh, (i + 1) * dh)?;
        o_blocks.push(uv.matmul(&o)?);
    }
    let q_refs: Vec<&Tensor> = q_blocks.iter().collect();
    let w_q_abs = w.w_dq.matmul(&Tensor::concat_last(&q_refs)?)?;
    let mut o_data = Vec::with_capacity(geo.n_h * geo.r_kv * geo.d);
    for b in &o_blocks {
        o_data.extend_from_slice(b.data());
    }
    Ok(AbsorbedMlaWeights {
        w_q_abs,
        w_qr_path: w.w_dq.matmul(&w.w_qr)?,
        w_dkv: w.w_dkv.clone(),
        w_kr: w.w_kr.clone(),
        w_o_abs: Tensor::new(&[geo.n_h * geo.r_kv, geo.d], o_data)?,
    })
}

/// MLA forward on absorbed weights; keys never leave the latent space.
pub fn mla_forward_absorbed_var<'t>(
    h: Var<'t>,
    w: &AbsorbedVars<'t>,
    geo: &AttentionGeometry,
    cache: &mut KvCacheState,
    opts: &AttnOptions,
) -> Result<Var<'t>> {
    cache.expect_latent(geo)?;
    let tape = h.tape();
    let l = h.rows();
    let past = cache.len();
    let positions: Vec<usize> = (past..past + l).collect();

    let q_lat = h.matmul(w.w_q_abs)?;
    let q_r = h.matmul(w.w_qr_path)?.rope(&positions, geo.n_h, opts.rope_base)?;
    let c_new = h.matmul(w.w_dkv)?;
    let kr_new = h.matmul(w.w_kr)?.rope(&positions, 1, opts.rope_base)?;
    let (c_kv, k_r) = with_history(tape, cache, c_new, kr_new)?;
    // q_lat_i·c_kvᵀ + q_r_i·k_rᵀ as one product over the joined key
    let keys = tape.concat_last(&[c_kv, k_r])?;

    let mask = opts.causal.then(|| causal_mask(l, past));
    let (rkv, dr) = (geo.r_kv, geo.d_r);
    let mut heads = Vec::with_capacity(geo.n_h);
    for i in 0..geo.n_h {
        let q = tape.concat_last(&[q_lat.slice_last(i * rkv, (i + 1) * rkv)?, q_r.slice_last(i * dr, (i + 1) * dr)?])?;
        heads.push(attend_head(q, keys, c_kv, geo.attention_scale_mla(), mask.clone())?);
    }
    let out = tape.concat_last(&heads)?.matmul(w.w_o_abs)?;

    cache.append_latent(&c_new.value(), &kr_new.value())?;
    Ok(out)
}

pub fn mla_forward_absorbed(
    h: &Tensor,
    w: &AbsorbedMlaWeights,
    geo: &AttentionGeometry,
    cache: &mut KvCacheState,
    opts: &AttnOptions,
) -> Result<Tensor> {
    w.check(geo)?;
    let tape = Tape::new();
    let vars = w.bind(&tape, false);
    let out = mla_forward_absorbed_var(tape.leaf(h), &vars, geo, cache, opts)?;
    Ok(out.value().as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{rope_apply, LayerNormParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_geo() -> AttentionGeometry {
        AttentionGeometry {
            d: 16,
            n_h: 2,
            n_kv: 2,
            d_h: 8,
            d_qk: 4,
            d_r: 4,
            r_q: 12,
            r_kv: 10,
        }
    }

    pub(crate) fn random_mla<R: Rng>(g: &AttentionGeometry, rng: &mut R) -> MlaWeights {
        let s = 0.3;
        MlaWeights {
            w_dq: Tensor::randn(&[g.d, g.r_q], s, rng),
            w_uq: Tensor::randn(&[g.r_q, g.n_h * g.d_qk], s, rng),
            w_qr: Tensor::randn(&[g.r_q, g.n_h * g.d_r], s, rng),
            w_dkv: Tensor::randn(&[g.d, g.r_kv], s, rng),
            w_uk: Tensor::randn(&[g.r_kv, g.n_h * g.d_qk], s, rng),
            w_uv: Tensor::randn(&[g.r_kv, g.n_h * g.d_h], s, rng),
            w_kr: Tensor::randn(&[g.d, g.d_r], s, rng),
            w_o: Tensor::randn(&[g.n_h * g.d_h, g.d], s, rng),
            ln_q: None,
            ln_kv: None,
        }
    }

    /// One unfused expression per output entry: for each query t and head i,
    /// q = [c_q·w_uq_i ; rope(c_q·w_qr_i)], k_s = [c_kv_s·w_uk_i ; rope(h_s·w_kr)].
    fn brute_force(h: &Tensor, w: &MlaWeights, g: &AttentionGeometry) -> Tensor {
        let l = h.rows();
        let pos: Vec<usize> = (0..l).collect();
        let c_q = h.matmul(&w.w_dq).unwrap();
        let c_kv = h.matmul(&w.w_dkv).unwrap();
        let q_r = rope_apply(&c_q.matmul(&w.w_qr).unwrap(), &pos, g.n_h, 10_000.0).unwrap();
        let k_r = rope_apply(&h.matmul(&w.w_kr).unwrap(), &pos, 1, 10_000.0).unwrap();
        let mut out = vec![0.0; l * g.d];
        for t in 0..l {
            let mut concat = vec![0.0; g.n_h * g.d_h];
            for i in 0..g.n_h {
                let mut scores = Vec::new();
                for s in 0..=t {
                    let mut dot = 0.0;
                    for c in 0..g.d_qk {
                        let mut qc = 0.0;
                        for a in 0..g.r_q {
                            qc += c_q.at(t, a) * w.w_uq.at(a, i * g.d_qk + c);
                        }
                        let mut kc = 0.0;
                        for a in 0..g.r_kv {
                            kc += c_kv.at(s, a) * w.w_uk.at(a, i * g.d_qk + c);
                        }
                        dot += qc * kc;
                    }
                    for c in 0..g.d_r {
                        dot += q_r.at(t, i * g.d_r + c) * k_r.at(s, c);
                    }
                    scores.push(dot / ((g.d_qk + g.d_r) as f64).sqrt());
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|x| (x - max).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let p = (sc - max).exp() / z;
                    for c in 0..g.d_h {
                        let mut v = 0.0;
                        for a in 0..g.r_kv {
                            v += c_kv.at(s, a) * w.w_uv.at(a, i * g.d_h + c);
                        }
                        concat[i * g.d_h + c] += p * v;
                    }
                }
            }
            for j in 0..g.d {
                out[t * g.d + j] = (0..g.n_h * g.d_h).map(|c| concat[c] * w.w_o.at(c, j)).sum();
            }
        }
        Tensor::new(&[l, g.d], out).unwrap()
    }

    #[test]
    fn naive_matches_unfused_oracle() {
        let g = toy_geo();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let w = random_mla(&g, &mut rng);
        let h = Tensor::randn(&[4, g.d], 1.0, &mut rng);
        let mut cache = KvCacheState::latent(&g);
        let out = mla_forward_naive(&h, &w, &g, &mut cache, &AttnOptions::default()).unwrap();
        assert!(out.max_abs_diff(&brute_force(&h, &w, &g)) <= 1e-10);
    }

    #[test]
    fn single_token_is_value_through_output() {
        let g = toy_geo();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_mla(&g, &mut rng);
        let h = Tensor::randn(&[1, g.d], 1.0, &mut rng);
        let mut cache = KvCacheState::latent(&g);
        let out = mla_forward_naive(&h, &w, &g, &mut cache, &AttnOptions::default()).unwrap();
        let expect = h.matmul(&w.w_dkv).unwrap().matmul(&w.w_uv).unwrap().matmul(&w.w_o).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn latent_cache_grows_by_rank_plus_rope_width() {
        let g = toy_geo();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_mla(&g, &mut rng);
        let aw = absorb(&w, &g).unwrap();
        let mut naive = KvCacheState::latent(&g);
        let mut absorbed = KvCacheState::latent(&g);
        for t in 1..=4 {
            let h = Tensor::randn(&[1, g.d], 1.0, &mut rng);
            mla_forward_naive(&h, &w, &g, &mut naive, &AttnOptions::default()).unwrap();
            mla_forward_absorbed(&h, &aw, &g, &mut absorbed, &AttnOptions::default()).unwrap();
            assert_eq!(naive.scalar_count(), t * (g.r_kv + g.d_r));
            assert_eq!(absorbed.scalar_count(), t * (g.r_kv + g.d_r));
        }
    }

    #[test]
    fn absorbed_matches_naive_with_history() {
        let g = toy_geo();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w = random_mla(&g, &mut rng);
        let aw = absorb(&w, &g).unwrap();
        let opts = AttnOptions::default();
        let mut c1 = KvCacheState::latent(&g);
        let mut c2 = KvCacheState::latent(&g);
        for l in [3, 1, 2] {
            let h = Tensor::randn(&[l, g.d], 1.0, &mut rng);
            let a = mla_forward_naive(&h, &w, &g, &mut c1, &opts).unwrap();
            let b = mla_forward_absorbed(&h, &aw, &g, &mut c2, &opts).unwrap();
            assert!(b.rel_error(&a) <= 1e-10);
        }
        assert_eq!(c1, c2.clone());
    }

    #[test]
    fn absorption_refuses_layer_norm() {
        let g = toy_geo();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = random_mla(&g, &mut rng);
        w.ln_q = Some(LayerNormParams::identity(g.r_q));
        w.ln_kv = Some(LayerNormParams::identity(g.r_kv));
        assert!(matches!(absorb(&w, &g), Err(Error::Unsupported(_))));
        // the naive path still runs with norms enabled
        let mut cache = KvCacheState::latent(&g);
        let h = Tensor::randn(&[2, g.d], 1.0, &mut rng);
        let out = mla_forward_naive(&h, &w, &g, &mut cache, &AttnOptions::default()).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn full_cache_is_rejected() {
        let g = toy_geo();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_mla(&g, &mut rng);
        let mut cache = KvCacheState::full(&g);
        let err = mla_forward_naive(&Tensor::zeros(&[1, g.d]), &w, &g, &mut cache, &AttnOptions::default());
        assert!(matches!(err, Err(Error::Cache(_))));
    }
}
