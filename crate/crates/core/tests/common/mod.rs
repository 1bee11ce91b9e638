#![allow(dead_code)]

use std::rc::Rc;

use mla_upcycle::attention::{
    mha_forward_var, mla_forward_absorbed_var, mla_forward_naive_var, AttentionGeometry, AttnOptions, KvCacheState,
    MhaWeights, MlaWeights,
};
use mla_upcycle::model::{LayerSelection, LmModel, ModelConfig};
use mla_upcycle::training::{dpo_loss, grad_check, kl_distill_loss, mixed_sft_loss, ce_loss, GradCheckReport};
use mla_upcycle::upcycle::{random_init_attention, RankSpec};
use mla_upcycle::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Small geometry with every constraint satisfied, drawn from `rng`.
pub fn random_geometry(rng: &mut ChaCha8Rng) -> AttentionGeometry {
    let n_h = [2, 4][rng.random_range(0..2)];
    let n_kv = [1, 2, n_h][rng.random_range(0..3)];
    let d_h = [4, 8][rng.random_range(0..2)];
    let d_r = [2, d_h / 2][rng.random_range(0..2)];
    let d = [8, 12, 16][rng.random_range(0..3)];
    let mut g = AttentionGeometry {
        d,
        n_h,
        n_kv,
        d_h,
        d_qk: d_r,
        d_r,
        r_q: 1,
        r_kv: 1,
    };
    g.r_q = rng.random_range(1..=g.max_r_q());
    g.r_kv = rng.random_range(1..=g.max_r_kv());
    g
}

pub fn random_mla(geo: &AttentionGeometry, seed: u64, ln: bool) -> MlaWeights {
    random_init_attention(geo, &RankSpec::Fixed { r_q: geo.r_q, r_kv: geo.r_kv }, seed, ln).unwrap()
}

/// Byte-free tiny vocabulary model config used by the gradient suite.
pub fn tiny_config(geo: AttentionGeometry, n_layers: usize, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::attention_only(n_layers, geo, 2 * geo.d);
    c.vocab_size = vocab;
    c
}

/// Gradient check through a whole model, one handle per named tensor.
pub fn model_grad_check(
    model: &LmModel,
    h: f64,
    loss: impl for<'t> Fn(&LmModel, &mla_upcycle::model::ModelVars<'t>) -> Result<Var<'t>>,
) -> Result<GradCheckReport> {
    let params: Vec<(String, Tensor)> = model.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    grad_check(&params, h, |_, vars| {
        let mut it = vars.iter().copied();
        let mv = model.bind_with(&mut |_| it.next().expect("one handle per tensor"));
        loss(model, &mv)
    })
}

fn weighted_sum<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.constant(randn(&v.shape(), seed));
    Ok(v.mul(w)?.sum())
}

/// Finite-difference reports for every differentiable primitive, the three
/// attention forwards, every loss, and an MLA model under the mixed loss.
pub fn gradient_suite(h: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: GradCheckReport| out.push((name.to_string(), r));
    let p = |name: &str, shape: &[usize], seed: u64| (name.to_string(), randn(shape, seed));

    push("matmul", grad_check(&[p("a", &[3, 4], 1), p("b", &[4, 2], 2)], h, |t, v| weighted_sum(t, v[0].matmul(v[1])?, 9))?);
    push("add", grad_check(&[p("a", &[3, 4], 1), p("b", &[3, 4], 2)], h, |t, v| weighted_sum(t, v[0].add(v[1])?, 9))?);
    push("sub", grad_check(&[p("a", &[3, 4], 1), p("b", &[3, 4], 2)], h, |t, v| weighted_sum(t, v[0].sub(v[1])?, 9))?);
    push("mul", grad_check(&[p("a", &[3, 4], 1), p("b", &[3, 4], 2)], h, |t, v| weighted_sum(t, v[0].mul(v[1])?, 9))?);
    push("scale", grad_check(&[p("a", &[3, 4], 1)], h, |t, v| weighted_sum(t, v[0].scale(-1.7), 9))?);
    push("transpose", grad_check(&[p("a", &[3, 4], 1)], h, |t, v| weighted_sum(t, v[0].transpose()?, 9))?);
    push("reshape", grad_check(&[p("a", &[3, 4], 1)], h, |t, v| weighted_sum(t, v[0].reshape(&[2, 6])?, 9))?);
    push("slice_last", grad_check(&[p("a", &[3, 6], 1)], h, |t, v| weighted_sum(t, v[0].slice_last(1, 4)?, 9))?);
    push("softmax_rows", grad_check(&[p("a", &[3, 5], 1)], h, |t, v| weighted_sum(t, v[0].softmax_rows(), 9))?);
    push("log_softmax_rows", grad_check(&[p("a", &[3, 5], 1)], h, |t, v| weighted_sum(t, v[0].log_softmax_rows(), 9))?);
    push("sum", grad_check(&[p("a", &[3, 4], 1)], h, |_, v| Ok(v[0].mul(v[0])?.sum()))?);
    push("mean", grad_check(&[p("a", &[3, 4], 1)], h, |_, v| Ok(v[0].mul(v[0])?.mean()))?);
    push(
        "layer_norm",
        grad_check(&[p("x", &[3, 6], 1), p("g", &[6], 2), p("b", &[6], 3)], h, |t, v| {
            weighted_sum(t, v[0].layer_norm(v[1], v[2], 1e-5)?, 9)
        })?,
    );
    push(
        "rms_norm",
        grad_check(&[p("x", &[3, 6], 1), p("g", &[6], 2)], h, |t, v| weighted_sum(t, v[0].rms_norm(v[1], 1e-6)?, 9))?,
    );
    push("silu", grad_check(&[p("a", &[3, 4], 1)], h, |t, v| weighted_sum(t, v[0].silu(), 9))?);
    push("log_sigmoid", grad_check(&[p("a", &[3, 4], 1)], h, |t, v| weighted_sum(t, v[0].log_sigmoid(), 9))?);
    push(
        "rope",
        grad_check(&[p("a", &[4, 8], 1)], h, |t, v| weighted_sum(t, v[0].rope(&[0, 3, 5, 17], 2, 10_000.0)?, 9))?,
    );
    let mask: Rc<Vec<bool>> = Rc::new((0..12).map(|i| i % 3 == 1).collect());
    push(
        "mask_fill",
        grad_check(&[p("a", &[3, 4], 1)], h, |t, v| weighted_sum(t, v[0].mask_fill(mask.clone(), -1e30)?.softmax_rows(), 9))?,
    );
    push("pick_per_row", grad_check(&[p("a", &[3, 4], 1)], h, |t, v| weighted_sum(t, v[0].pick_per_row(&[3, 0, 2])?, 9))?);
    push(
        "concat_last",
        grad_check(&[p("a", &[3, 2], 1), p("b", &[3, 3], 2)], h, |t, v| weighted_sum(t, t.concat_last(&[v[0], v[1]])?, 9))?,
    );
    push(
        "concat_rows",
        grad_check(&[p("a", &[2, 3], 1), p("b", &[1, 3], 2)], h, |t, v| weighted_sum(t, t.concat_rows(&[v[0], v[1]])?, 9))?,
    );
    push(
        "embedding",
        grad_check(&[p("e", &[5, 3], 1)], h, |t, v| weighted_sum(t, t.embedding(v[0], &[4, 1, 4, 0])?, 9))?,
    );

    let teacher = randn(&[4, 6], 5);
    push("kl_distill_loss", grad_check(&[p("s", &[4, 6], 1)], h, |_, v| kl_distill_loss(v[0], &teacher))?);
    push("ce_loss", grad_check(&[p("s", &[4, 6], 1)], h, |_, v| ce_loss(v[0], &[5, 0, 2, 2]))?);
    push(
        "mixed_sft_loss",
        grad_check(&[p("s", &[4, 6], 1)], h, |_, v| Ok(mixed_sft_loss(v[0], Some(&teacher), &[5, 0, 2, 2], 0.7, 0.3)?.total))?,
    );
    push(
        "dpo_loss",
        grad_check(&[p("c", &[1], 1), p("r", &[1], 2), p("c2", &[1], 3), p("r2", &[1], 4)], h, |_, v| {
            let c: Vec<Var> = [v[0], v[2]].iter().map(|x| x.sum()).collect();
            let r: Vec<Var> = [v[1], v[3]].iter().map(|x| x.sum()).collect();
            dpo_loss(&c, &r, &[0.3, -0.2], &[0.1, 0.4], 0.5)
        })?,
    );

    let gqa = AttentionGeometry {
        d: 8,
        n_h: 4,
        n_kv: 2,
        d_h: 4,
        d_qk: 2,
        d_r: 2,
        r_q: 6,
        r_kv: 5,
    };
    let x = randn(&[5, 8], 3);
    let opts = AttnOptions::default();
    let mha = MhaWeights::random(&gqa, 0.5, &mut rng(4));
    let mha_params: Vec<(String, Tensor)> = mha.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    push(
        "gqa_forward",
        grad_check(&mha_params, h, |t, v| {
            let mut it = v.iter().copied();
            let w = mha.bind_with(&mut |_| it.next().unwrap());
            let out = mha_forward_var(t.constant(x.clone()), &w, &gqa, &mut KvCacheState::full(&gqa), &opts)?;
            weighted_sum(t, out, 9)
        })?,
    );
    let mla = random_mla(&gqa, 6, true);
    let mla_params: Vec<(String, Tensor)> = mla.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    push(
        "mla_forward_naive",
        grad_check(&mla_params, h, |t, v| {
            let mut it = v.iter().copied();
            let w = mla.bind_with(&mut |_| it.next().unwrap());
            let out = mla_forward_naive_var(t.constant(x.clone()), &w, &gqa, &mut KvCacheState::latent(&gqa), &opts)?;
            weighted_sum(t, out, 9)
        })?,
    );
    let abs = mla_upcycle::attention::absorb(&random_mla(&gqa, 7, false), &gqa)?;
    let abs_params: Vec<(String, Tensor)> = abs.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    push(
        "mla_forward_absorbed",
        grad_check(&abs_params, h, |t, v| {
            let mut it = v.iter().copied();
            let w = abs.bind_with(&mut |_| it.next().unwrap());
            let out = mla_forward_absorbed_var(t.constant(x.clone()), &w, &gqa, &mut KvCacheState::latent(&gqa), &opts)?;
            weighted_sum(t, out, 9)
        })?,
    );

    // Whole MLA block (with latent norms) under the mixed objective.
    let config = tiny_config(gqa, 1, 11);
    let teacher = LmModel::new(config.clone(), 1)?;
    let (student, _) = LmModel::new(config, 2)?.upcycle(&RankSpec::Fixed { r_q: 6, r_kv: 5 }, &LayerSelection::All, true)?;
    let tokens = [1, 4, 9, 2, 7, 3];
    let (input, targets) = (&tokens[..5], &tokens[1..]);
    let t_logits = teacher.logits(input)?;
    push(
        "mla_model_mixed_sft_loss",
        model_grad_check(&student, h, |m, mv| {
            let logits = m.forward_var(mv, input, &mut m.new_caches())?;
            Ok(mixed_sft_loss(logits, Some(&t_logits), targets, 1.0, 0.5)?.total)
        })?,
    );
    Ok(out)
}

/// `max |a − b| / max(max|a|, max|b|)`.
pub fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().chain(b.data()).fold(0.0f64, |m, x| m.max(x.abs()));
    a.max_abs_diff(b) / scale.max(f64::MIN_POSITIVE)
}

/// Brute-force energy-threshold rank: scans every prefix directly.
pub fn brute_force_rank(sigma: &[f64], delta: f64) -> usize {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    (1..=sigma.len())
        .find(|&r| sigma[..r].iter().map(|s| s * s).sum::<f64>() >= delta * total)
        .unwrap_or(sigma.len())
}

/// Descending nonnegative spectrum with occasional ties and zeros.
pub fn random_spectrum(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..40);
    let mut s: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>() * 10.0,
        })
        .collect();
    if s.iter().all(|&x| x == 0.0) {
        s[0] = 1.0;
    }
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

pub fn frob2(t: &Tensor) -> f64 {
    t.data().iter().map(|x| x * x).sum()
}
