//! MHA/GQA and multi-head latent attention forwards, rotary embedding, and
//! KV-cache state with exact storage accounting.

mod cache;
mod footprint;
mod geometry;
mod mha;
mod mla;
mod rope;
mod weights;

use std::rc::Rc;

pub use cache::KvCacheState;
pub use footprint::{cache_footprint, exact_percent, CacheFootprint, LayerKind};
pub use geometry::AttentionGeometry;
pub use mha::{mha_forward, mha_forward_var};
pub use mla::{
    absorb, mla_forward_absorbed, mla_forward_absorbed_var, mla_forward_naive, mla_forward_naive_var,
    AbsorbedMlaWeights, AbsorbedVars,
};
pub use rope::{rope_apply, DEFAULT_ROPE_BASE};
pub use weights::{LayerNormParams, MhaVars, MhaWeights, MlaVars, MlaWeights, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Pre-softmax fill for masked scores; finite so max-subtraction never sees ∞−∞.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnOptions {
    pub causal: bool,
    pub rope_base: f64,
}

impl Default for AttnOptions {
    fn default() -> Self {
        Self {
            causal: true,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

/// `true` where query row `r` (absolute position `past + r`) must not see key `j`.
fn causal_mask(rows: usize, past: usize) -> Rc<Vec<bool>> {
    let keys = past + rows;
    Rc::new(
        (0..rows * keys)
            .map(|i| (i % keys) > past + i / keys)
            .collect(),
    )
}

fn attend_head<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    scale: f64,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<Var<'t>> {
    let mut scores = q.matmul(k.transpose()?)?.scale(scale);
    if let Some(mask) = mask {
        scores = scores.mask_fill(mask, MASK_VALUE)?;
    }
    scores.softmax_rows().matmul(v)
}

/// Weights of one attention layer in any of the supported forms.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionWeights {
    Mha(MhaWeights),
    Mla(MlaWeights),
    MlaAbsorbed(AbsorbedMlaWeights),
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionVars<'t> {
    Mha(MhaVars<'t>),
    Mla(MlaVars<'t>),
    MlaAbsorbed(AbsorbedVars<'t>),
}

impl AttentionWeights {
    pub fn check(&self, geo: &AttentionGeometry) -> Result<()> {
        match self {
            AttentionWeights::Mha(w) => w.check(geo),
            AttentionWeights::Mla(w) => w.check(geo),
            AttentionWeights::MlaAbsorbed(w) => w.check(geo),
        }
    }

    pub fn is_mla(&self) -> bool {
        !matches!(self, AttentionWeights::Mha(_))
    }

    pub fn new_cache(&self, geo: &AttentionGeometry) -> KvCacheState {
        match self {
            AttentionWeights::Mha(_) => KvCacheState::full(geo),
            _ => KvCacheState::latent(geo),
        }
    }

    /// Absorbed inference form of an MLA layer.
    pub fn absorb(&self, geo: &AttentionGeometry) -> Result<AttentionWeights> {
        match self {
            AttentionWeights::Mla(w) => Ok(AttentionWeights::MlaAbsorbed(absorb(w, geo)?)),
            AttentionWeights::MlaAbsorbed(_) => Err(Error::AlreadyAbsorbed),
            AttentionWeights::Mha(_) => Err(Error::Kind("only MLA layers can be absorbed".into())),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            AttentionWeights::Mha(w) => w.named(),
            AttentionWeights::Mla(w) => w.named(),
            AttentionWeights::MlaAbsorbed(w) => w.named(),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            AttentionWeights::Mha(w) => w.named_mut(),
            AttentionWeights::Mla(w) => w.named_mut(),
            AttentionWeights::MlaAbsorbed(w) => w.named_mut(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> AttentionVars<'t> {
        match self {
            AttentionWeights::Mha(w) => AttentionVars::Mha(w.bind(tape, trainable)),
            AttentionWeights::Mla(w) => AttentionVars::Mla(w.bind(tape, trainable)),
            AttentionWeights::MlaAbsorbed(w) => AttentionVars::MlaAbsorbed(w.bind(tape, trainable)),
        }
    }

    pub fn bind_with<'t>(&self, b: &mut dyn FnMut(&Tensor) -> Var<'t>) -> AttentionVars<'t> {
        match self {
            AttentionWeights::Mha(w) => AttentionVars::Mha(w.bind_with(b)),
            AttentionWeights::Mla(w) => AttentionVars::Mla(w.bind_with(b)),
            AttentionWeights::MlaAbsorbed(w) => AttentionVars::MlaAbsorbed(w.bind_with(b)),
        }
    }
}

impl<'t> AttentionVars<'t> {
    pub fn forward(
        &self,
        h: Var<'t>,
        geo: &AttentionGeometry,
        cache: &mut KvCacheState,
        opts: &AttnOptions,
    ) -> Result<Var<'t>> {
        match self {
            AttentionVars::Mha(w) => mha_forward_var(h, w, geo, cache, opts),
            AttentionVars::Mla(w) => mla_forward_naive_var(h, w, geo, cache, opts),
            AttentionVars::MlaAbsorbed(w) => mla_forward_absorbed_var(h, w, geo, cache, opts),
        }
    }

    pub fn all(&self) -> Vec<Var<'t>> {
        match self {
            AttentionVars::Mha(w) => w.all(),
            AttentionVars::Mla(w) => w.all(),
            AttentionVars::MlaAbsorbed(w) => w.all(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_with_history() {
        let m = causal_mask(2, 1);
        // row 0 is position 1: sees keys 0,1; row 1 (position 2) sees all
        assert_eq!(*m, vec![false, false, true, false, false, false]);
    }

    #[test]
    fn absorbing_twice_fails() {
        use rand::SeedableRng;
        let g = AttentionGeometry {
            d: 8,
            n_h: 2,
            n_kv: 2,
            d_h: 4,
            d_qk: 2,
            d_r: 2,
            r_q: 4,
            r_kv: 4,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| Tensor::randn(&[r, c], 0.5, rng);
        let w = AttentionWeights::Mla(MlaWeights {
            w_dq: t(8, 4, &mut rng),
            w_uq: t(4, 4, &mut rng),
            w_qr: t(4, 4, &mut rng),
            w_dkv: t(8, 4, &mut rng),
            w_uk: t(4, 4, &mut rng),
            w_uv: t(4, 8, &mut rng),
            w_kr: t(8, 2, &mut rng),
            w_o: t(8, 8, &mut rng),
            ln_q: None,
            ln_kv: None,
        });
        let once = w.absorb(&g).unwrap();
        assert!(matches!(once.absorb(&g), Err(Error::AlreadyAbsorbed)));
    }
}
