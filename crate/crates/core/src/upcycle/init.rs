use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::rank::{align_rank, captured_energy, select_rank_dynamic, RankSpec};
use crate::attention::{AttentionGeometry, LayerNormParams, MhaWeights, MlaWeights};
use crate::error::{Error, Result};
use crate::tensor::{svd_full, SvdResult, Tensor};

/// Columns `start..end` of every `width`-wide head block of `m`.
pub(crate) fn slice_heads(m: &Tensor, heads: usize, width: usize, start: usize, end: usize) -> Result<Tensor> {
    if m.cols() != heads * width || start > end || end > width {
        return Err(Error::dim("slice_heads", m.shape(), &[heads, width, start, end]));
    }
    let rows = m.rows();
    let w = end - start;
    let mut data = Vec::with_capacity(rows * heads * w);
    for r in 0..rows {
        let row = &m.data()[r * m.cols()..(r + 1) * m.cols()];
        for h in 0..heads {
            data.extend_from_slice(&row[h * width + start..h * width + end]);
        }
    }
    Tensor::new(&[rows, heads * w], data)
}

/// Repeats each key/value head's columns `n_h / n_kv` times in head order.
pub fn expand_gqa_to_mha(w: &MhaWeights, geo: &AttentionGeometry) -> Result<MhaWeights> {
    if geo.n_kv == 0 || !geo.n_h.is_multiple_of(geo.n_kv) {
        return Err(Error::Geometry(format!(
            "cannot expand {} kv heads to {} query heads",
            geo.n_kv, geo.n_h
        )));
    }
    w.check(geo)?;
    let group = geo.group_size();
    let expand = |t: &Tensor| -> Tensor {
        let d = t.rows();
        let dh = geo.d_h;
        let mut data = Vec::with_capacity(d * geo.n_h * dh);
        for r in 0..d {
            let row = &t.data()[r * geo.n_kv * dh..(r + 1) * geo.n_kv * dh];
            for head in 0..geo.n_h {
                let g = head / group;
                data.extend_from_slice(&row[g * dh..(g + 1) * dh]);
            }
        }
        Tensor::new(&[d, geo.n_h * dh], data).expect("expanded shape")
    };
    Ok(MhaWeights {
        w_q: w.w_q.clone(),
        w_k: expand(&w.w_k),
        w_v: expand(&w.w_v),
        w_o: w.w_o.clone(),
    })
}

fn check_rank(what: &'static str, r: usize, max: usize) -> Result<()> {
    if r == 0 || r > max {
        return Err(Error::Rank { what, rank: r, max });
    }
    Ok(())
}

/// Query path from a precomputed SVD of `w_q`.
fn query_path_from_svd(svd: &SvdResult, r_q: usize, geo: &AttentionGeometry) -> Result<(Tensor, Tensor, Tensor)> {
    check_rank("r_q", r_q, geo.max_r_q())?;
    let t = svd.truncate(r_q)?;
    let up = t.sigma_vt(); // r_q × n_h·d_h, viewed as r_q × n_h × d_h
    let w_uq = slice_heads(&up, geo.n_h, geo.d_h, 0, geo.d_qk)?;
    let w_qr = slice_heads(&up, geo.n_h, geo.d_h, geo.d_h - geo.d_r, geo.d_h)?;
    Ok((t.u, w_uq, w_qr))
}

/// `w_dq = U_q`; `Σ_q V_qᵀ` split per head into the first `d_qk` columns
/// (`w_uq`) and the last `d_r` columns (`w_qr`).
pub fn init_query_path(w_q: &Tensor, r_q: usize, geo: &AttentionGeometry) -> Result<(Tensor, Tensor, Tensor)> {
    if w_q.shape() != [geo.d, geo.n_h * geo.d_h] {
        return Err(Error::dim("init_query_path", w_q.shape(), &[geo.d, geo.n_h * geo.d_h]));
    }
    check_rank("r_q", r_q, geo.max_r_q())?;
    query_path_from_svd(&svd_full(w_q)?, r_q, geo)
}

fn kv_path_from_svd(svd: &SvdResult, r_kv: usize, geo: &AttentionGeometry) -> Result<(Tensor, Tensor, Tensor)> {
    check_rank("r_kv", r_kv, geo.max_r_kv())?;
    let t = svd.truncate(r_kv)?;
    let up = t.sigma_vt(); // r_kv × 2·n_h·d_h
    let width = geo.n_h * geo.d_h;
    let up_k = up.slice_last(0, width)?;
    let w_uv = up.slice_last(width, 2 * width)?;
    let w_uk = slice_heads(&up_k, geo.n_h, geo.d_h, 0, geo.d_qk)?;
    Ok((t.u, w_uk, w_uv))
}

/// Joint SVD of `[w_k | w_v]`: `w_dkv = U_kv`, `w_uv` the last `n_h·d_h`
/// columns of `Σ_kv V_kvᵀ`, `w_uk` the first `d_qk` columns per head of the rest.
pub fn init_kv_path(w_k: &Tensor, w_v: &Tensor, r_kv: usize, geo: &AttentionGeometry) -> Result<(Tensor, Tensor, Tensor)> {
    let expect = [geo.d, geo.n_h * geo.d_h];
    if w_k.shape() != expect || w_v.shape() != expect {
        return Err(Error::dim("init_kv_path", w_k.shape(), w_v.shape()));
    }
    check_rank("r_kv", r_kv, geo.max_r_kv())?;
    let joint = Tensor::concat_last(&[w_k, w_v])?;
    kv_path_from_svd(&svd_full(&joint)?, r_kv, geo)
}

/// Mean of the per-head `d × d_h` key blocks, last `d_r` columns.
pub fn init_rope_key(w_k: &Tensor, geo: &AttentionGeometry) -> Result<Tensor> {
    if w_k.shape() != [geo.d, geo.n_h * geo.d_h] {
        return Err(Error::dim("init_rope_key", w_k.shape(), &[geo.d, geo.n_h * geo.d_h]));
    }
    let (dh, dr) = (geo.d_h, geo.d_r);
    let mut out = Tensor::zeros(&[geo.d, dr]);
    for r in 0..geo.d {
        for c in 0..dr {
            let col = dh - dr + c;
            let sum: f64 = (0..geo.n_h).map(|h| w_k.at(r, h * dh + col)).sum();
            out.data_mut()[r * dr + c] = sum / geo.n_h as f64;
        }
    }
    Ok(out)
}

/// Per-layer outcome of a conversion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerUpcycle {
    pub layer: usize,
    pub r_q: usize,
    pub r_kv: usize,
    pub energy_q: f64,
    pub energy_kv: f64,
    /// `‖W_q − U Σ Vᵀ‖_F / ‖W_q‖_F` at the chosen rank.
    pub recon_error_q: f64,
    /// Same for the joint `[W_k | W_v]`.
    pub recon_error_kv: f64,
    /// MLA parameters minus donor q/k/v parameters.
    pub param_delta: i64,
}

/// Converts one donor attention layer into MLA weights.
///
/// Grouped donors are expanded first. `w_o` is copied verbatim; norms, when
/// enabled, start at identity gain and zero bias.
pub fn upcycle_attention(
    w: &MhaWeights,
    geo: &AttentionGeometry,
    spec: &RankSpec,
    enable_ln: bool,
) -> Result<(MlaWeights, LayerUpcycle)> {
    spec.validate()?;
    w.check(geo)?;
    let expanded = expand_gqa_to_mha(w, geo)?;
    let egeo = AttentionGeometry { n_kv: geo.n_h, ..*geo };

    let q_svd = svd_full(&expanded.w_q)?;
    let kv_joint = Tensor::concat_last(&[&expanded.w_k, &expanded.w_v])?;
    let kv_svd = svd_full(&kv_joint)?;

    let (r_q, r_kv) = match *spec {
        RankSpec::Fixed { r_q, r_kv } => (r_q, r_kv),
        RankSpec::Dynamic { delta_q, delta_kv } => (
            align_rank(select_rank_dynamic(&q_svd.sigma, delta_q)?, geo.max_r_q()),
            align_rank(select_rank_dynamic(&kv_svd.sigma, delta_kv)?, geo.max_r_kv()),
        ),
    };
    let lgeo = egeo.with_ranks(r_q, r_kv);
    lgeo.check_ranks(r_q, r_kv)?;

    let (w_dq, w_uq, w_qr) = query_path_from_svd(&q_svd, r_q, &lgeo)?;
    let (w_dkv, w_uk, w_uv) = kv_path_from_svd(&kv_svd, r_kv, &lgeo)?;
    let w_kr = init_rope_key(&expanded.w_k, &lgeo)?;

    let recon_q = q_svd.truncate(r_q)?.reconstruct().rel_error(&expanded.w_q);
    let recon_kv = kv_svd.truncate(r_kv)?.reconstruct().rel_error(&kv_joint);

    let (ln_q, ln_kv) = if enable_ln {
        (Some(LayerNormParams::identity(r_q)), Some(LayerNormParams::identity(r_kv)))
    } else {
        (None, None)
    };
    let mla = MlaWeights {
        w_dq,
        w_uq,
        w_qr,
        w_dkv,
        w_uk,
        w_uv,
        w_kr,
        w_o: expanded.w_o,
        ln_q,
        ln_kv,
    };
    let report = LayerUpcycle {
        layer: 0,
        r_q,
        r_kv,
        energy_q: captured_energy(&q_svd.sigma, r_q),
        energy_kv: captured_energy(&kv_svd.sigma, r_kv),
        recon_error_q: recon_q,
        recon_error_kv: recon_kv,
        param_delta: param_delta(geo, r_q, r_kv, enable_ln),
    };
    Ok((mla, report))
}

/// MLA projection (+ norm) parameters minus the donor's q/k/v parameters.
pub fn param_delta(geo: &AttentionGeometry, r_q: usize, r_kv: usize, enable_ln: bool) -> i64 {
    let mla = geo.with_ranks(r_q, r_kv).mla_projection_params() + if enable_ln { 2 * (r_q + r_kv) } else { 0 };
    mla as i64 - geo.mha_qkv_params() as i64
}

/// MLA weights drawn from `N(0, 2/(fan_in + fan_out))`, deterministic per seed.
pub fn random_init_attention(geo: &AttentionGeometry, spec: &RankSpec, seed: u64, enable_ln: bool) -> Result<MlaWeights> {
    let RankSpec::Fixed { r_q, r_kv } = *spec else {
        return Err(Error::Unsupported("random initialization needs fixed ranks".into()));
    };
    let g = geo.with_ranks(r_q, r_kv);
    g.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        Tensor::randn(&[rows, cols], std, &mut rng)
    };
    let (ln_q, ln_kv) = if enable_ln {
        (Some(LayerNormParams::identity(r_q)), Some(LayerNormParams::identity(r_kv)))
    } else {
        (None, None)
    };
    Ok(MlaWeights {
        w_dq: draw(g.d, r_q),
        w_uq: draw(r_q, g.n_h * g.d_qk),
        w_qr: draw(r_q, g.n_h * g.d_r),
        w_dkv: draw(g.d, r_kv),
        w_uk: draw(r_kv, g.n_h * g.d_qk),
        w_uv: draw(r_kv, g.n_h * g.d_h),
        w_kr: draw(g.d, g.d_r),
        w_o: draw(g.n_h * g.d_h, g.d),
        ln_q,
        ln_kv,
    })
}
