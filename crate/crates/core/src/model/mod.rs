//! Pre-norm decoder language model with per-layer attention kinds.

mod checkpoint;
mod config;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, BOS, BYTE_VOCAB, EOS};

use crate::attention::{
    cache_footprint, AttentionWeights, AttentionVars, AttnOptions, KvCacheState, LayerKind, MhaWeights,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::upcycle::{random_init_attention, upcycle_attention, RankSpec, UpcycleReport};

pub const RMS_NORM_EPS: f64 = 1e-6;

/// One residual block: `x + attn(norm(x))`, then `x + down(silu(gate(n)) ⊙ up(n))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub attn: AttentionWeights,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmModel {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// `d × vocab`; `None` when tied to `embed`.
    pub head: Option<Tensor>,
}

pub struct BlockVars<'t> {
    pub attn_norm: Var<'t>,
    pub attn: AttentionVars<'t>,
    pub mlp_norm: Var<'t>,
    pub w_gate: Var<'t>,
    pub w_up: Var<'t>,
    pub w_down: Var<'t>,
}

pub struct ModelVars<'t> {
    pub embed: Var<'t>,
    pub blocks: Vec<BlockVars<'t>>,
    pub final_norm: Var<'t>,
    pub head: Option<Var<'t>>,
}

impl<'t> ModelVars<'t> {
    /// Handles in the order of [`LmModel::named`].
    pub fn all(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.embed];
        for b in &self.blocks {
            out.push(b.attn_norm);
            out.extend(b.attn.all());
            out.extend([b.mlp_norm, b.w_gate, b.w_up, b.w_down]);
        }
        out.push(self.final_norm);
        out.extend(self.head);
        out
    }
}

/// Which layers a conversion touches (0-based indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelection {
    All,
    List(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::All => Ok((0..n_layers).collect()),
            LayerSelection::List(ids) => {
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids.dedup();
                if let Some(&bad) = ids.iter().find(|&&i| i >= n_layers) {
                    return Err(Error::Config(format!("layer {bad} out of range for {n_layers} layers")));
                }
                Ok(ids)
            }
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        if s.is_empty() {
            return Ok(LayerSelection::List(Vec::new()));
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad layer list {s:?}; expected all or e.g. 1,3,5")))
            })
            .collect::<Result<Vec<_>>>()
            .map(LayerSelection::List)
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::List(ids) => {
                let parts: Vec<String> = ids.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl LmModel {
    /// Fresh weights for `config`, deterministic per seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = config.geometry;
        let d = g.d;
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let embed = Tensor::randn(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let lg = config.layer_geometry(i);
            let attn = match config.layer_kinds[i] {
                LayerKind::Attention => {
                    let mut w = MhaWeights::random(&lg, 1.0 / (d as f64).sqrt(), &mut rng);
                    w.w_o = Tensor::randn(w.w_o.shape(), out_scale / ((lg.n_h * lg.d_h) as f64).sqrt(), &mut rng);
                    AttentionWeights::Mha(w)
                }
                LayerKind::Mla { r_q, r_kv } => {
                    let spec = RankSpec::Fixed { r_q, r_kv };
                    let sub = rand::Rng::random::<u64>(&mut rng);
                    AttentionWeights::Mla(random_init_attention(&lg, &spec, sub, config.mla_layer_norm)?)
                }
            };
            let h = config.mlp_hidden;
            blocks.push(Block {
                attn_norm: Tensor::full(&[d], 1.0),
                attn,
                mlp_norm: Tensor::full(&[d], 1.0),
                w_gate: Tensor::randn(&[d, h], 1.0 / (d as f64).sqrt(), &mut rng),
                w_up: Tensor::randn(&[d, h], 1.0 / (d as f64).sqrt(), &mut rng),
                w_down: Tensor::randn(&[h, d], out_scale / (h as f64).sqrt(), &mut rng),
            });
        }
        let head = (!config.tie_embeddings)
            .then(|| Tensor::randn(&[d, config.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng));
        Ok(Self {
            config,
            embed,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            head,
        })
    }

    pub fn check(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.geometry.d;
        let expect = |name: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} has shape {:?}, expected {shape:?}", t.shape())))
            }
        };
        expect("embed", &self.embed, &[c.vocab_size, d])?;
        expect("final_norm", &self.final_norm, &[d])?;
        if self.blocks.len() != c.n_layers {
            return Err(Error::Config(format!("{} blocks for {} layers", self.blocks.len(), c.n_layers)));
        }
        if self.head.is_some() == c.tie_embeddings {
            return Err(Error::Config("output head presence disagrees with tie_embeddings".into()));
        }
        if let Some(h) = &self.head {
            expect("head", h, &[d, c.vocab_size])?;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let lg = c.layer_geometry(i);
            if b.attn.is_mla() != c.layer_kinds[i].is_mla() {
                return Err(Error::Kind(format!("layer {i} weights do not match kind {:?}", c.layer_kinds[i])));
            }
            if let AttentionWeights::Mla(w) = &b.attn {
                if w.layer_norm_enabled() != c.mla_layer_norm {
                    return Err(Error::Config(format!("layer {i} layer-norm presence disagrees with config")));
                }
            }
            b.attn.check(&lg)?;
            expect("attn_norm", &b.attn_norm, &[d])?;
            expect("mlp_norm", &b.mlp_norm, &[d])?;
            expect("w_gate", &b.w_gate, &[d, c.mlp_hidden])?;
            expect("w_up", &b.w_up, &[d, c.mlp_hidden])?;
            expect("w_down", &b.w_down, &[c.mlp_hidden, d])?;
        }
        Ok(())
    }

    /// Every parameter tensor with a stable dotted name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &b.attn_norm));
            for (n, t) in b.attn.named() {
                out.push((format!("layers.{i}.attn.{n}"), t));
            }
            out.push((format!("layers.{i}.mlp_norm"), &b.mlp_norm));
            out.push((format!("layers.{i}.w_gate"), &b.w_gate));
            out.push((format!("layers.{i}.w_up"), &b.w_up));
            out.push((format!("layers.{i}.w_down"), &b.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut b.attn_norm));
            for (n, t) in b.attn.named_mut() {
                out.push((format!("layers.{i}.attn.{n}"), t));
            }
            out.push((format!("layers.{i}.mlp_norm"), &mut b.mlp_norm));
            out.push((format!("layers.{i}.w_gate"), &mut b.w_gate));
            out.push((format!("layers.{i}.w_up"), &mut b.w_up));
            out.push((format!("layers.{i}.w_down"), &mut b.w_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        if let Some(h) = &mut self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rounds every weight to single precision, as stored in checkpoints.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.named_mut() {
            t.round_to_f32();
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelVars<'t> {
        self.bind_with(&mut |t| if trainable { tape.param(t) } else { tape.leaf(t) })
    }

    /// Binds through `b`, called once per tensor in [`named`](Self::named)
    /// order. Lets callers substitute their own handles (gradient checks).
    pub fn bind_with<'t>(&self, b: &mut dyn FnMut(&Tensor) -> Var<'t>) -> ModelVars<'t> {
        ModelVars {
            embed: b(&self.embed),
            blocks: self
                .blocks
                .iter()
                .map(|blk| BlockVars {
                    attn_norm: b(&blk.attn_norm),
                    attn: blk.attn.bind_with(b),
                    mlp_norm: b(&blk.mlp_norm),
                    w_gate: b(&blk.w_gate),
                    w_up: b(&blk.w_up),
                    w_down: b(&blk.w_down),
                })
                .collect(),
            final_norm: b(&self.final_norm),
            head: self.head.as_ref().map(b),
        }
    }

    /// Empty per-layer caches matching the layer kinds.
    pub fn new_caches(&self) -> Vec<KvCacheState> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.attn.new_cache(&self.config.layer_geometry(i)))
            .collect()
    }

    fn opts(&self) -> AttnOptions {
        AttnOptions {
            causal: true,
            rope_base: self.config.rope_base,
        }
    }

    /// Logits (`l × vocab`) for `tokens` following whatever `caches` hold.
    pub fn forward_var<'t>(
        &self,
        vars: &ModelVars<'t>,
        tokens: &[usize],
        caches: &mut [KvCacheState],
    ) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(Error::Data("forward needs at least one token".into()));
        }
        if caches.len() != self.blocks.len() {
            return Err(Error::Cache(format!("{} caches for {} layers", caches.len(), self.blocks.len())));
        }
        let tape = vars.embed.tape();
        let opts = self.opts();
        let mut x = tape.embedding(vars.embed, tokens)?;
        for (i, (bv, cache)) in vars.blocks.iter().zip(caches.iter_mut()).enumerate() {
            let lg = self.config.layer_geometry(i);
            let a = bv.attn.forward(x.rms_norm(bv.attn_norm, RMS_NORM_EPS)?, &lg, cache, &opts)?;
            x = x.add(a)?;
            let n = x.rms_norm(bv.mlp_norm, RMS_NORM_EPS)?;
            let gated = n.matmul(bv.w_gate)?.silu().mul(n.matmul(bv.w_up)?)?;
            x = x.add(gated.matmul(bv.w_down)?)?;
        }
        let x = x.rms_norm(vars.final_norm, RMS_NORM_EPS)?;
        match vars.head {
            Some(h) => x.matmul(h),
            None => x.matmul(vars.embed.transpose()?),
        }
    }

    /// Eager forward that extends `caches`.
    pub fn forward(&self, tokens: &[usize], caches: &mut [KvCacheState]) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let logits = self.forward_var(&vars, tokens, caches)?;
        let out = logits.value().as_ref().clone();
        out.check_finite("logits")?;
        Ok(out)
    }

    /// Full-sequence logits from empty caches.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward(tokens, &mut self.new_caches())
    }

    /// Greedy continuation; returns prompt followed by `n_new` tokens.
    pub fn generate(&self, prompt: &[usize], n_new: usize) -> Result<Vec<usize>> {
        self.generate_with_caches(prompt, n_new, &mut self.new_caches())
    }

    /// Like [`generate`](Self::generate); afterwards `caches` hold every returned token.
    pub fn generate_with_caches(
        &self,
        prompt: &[usize],
        n_new: usize,
        caches: &mut [KvCacheState],
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Data("generation needs a nonempty prompt".into()));
        }
        let mut out = prompt.to_vec();
        let mut logits = self.forward(prompt, caches)?;
        for step in 0..n_new {
            let last = logits.rows() - 1;
            let row = &logits.data()[last * logits.cols()..(last + 1) * logits.cols()];
            let next = argmax(row);
            out.push(next);
            if step + 1 < n_new {
                logits = self.forward(&[next], caches)?;
            } else {
                self.forward(&[next], caches)?;
            }
        }
        Ok(out)
    }

    /// Mean next-token negative log-likelihood over `tokens`, evaluated in
    /// windows of `context` predictions that overlap by one token.
    pub fn mean_nll(&self, tokens: &[usize], context: usize) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Data(format!("need at least 2 tokens, got {}", tokens.len())));
        }
        if context == 0 {
            return Err(Error::Config("context length must be positive".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        let mut start = 0;
        while start + 1 < tokens.len() {
            let end = (start + context + 1).min(tokens.len());
            let window = &tokens[start..end];
            let logp = self.logits(&window[..window.len() - 1])?.log_softmax_rows();
            for (r, &target) in window[1..].iter().enumerate() {
                if target >= self.config.vocab_size {
                    return Err(Error::Vocab {
                        id: target,
                        vocab: self.config.vocab_size,
                    });
                }
                total -= logp.at(r, target);
                count += 1;
            }
            start = end - 1;
        }
        Ok(total / count as f64)
    }

    pub fn perplexity(&self, tokens: &[usize], context: usize) -> Result<f64> {
        Ok(self.mean_nll(tokens, context)?.exp())
    }

    /// Converts the selected attention layers to MLA; everything else is
    /// copied. The donor is left untouched.
    pub fn upcycle(&self, spec: &RankSpec, selection: &LayerSelection, enable_ln: bool) -> Result<(LmModel, UpcycleReport)> {
        spec.validate()?;
        let ids = selection.resolve(self.config.n_layers)?;
        let has_mla = self.config.layer_kinds.iter().any(LayerKind::is_mla);
        if has_mla && !ids.is_empty() && self.config.mla_layer_norm != enable_ln {
            return Err(Error::Config("layer-norm setting must match the existing MLA layers".into()));
        }
        let mut out = self.clone();
        let mut layers = Vec::with_capacity(ids.len());
        for &i in &ids {
            let AttentionWeights::Mha(w) = &self.blocks[i].attn else {
                return Err(Error::Kind(format!("layer {i} is not an attention layer")));
            };
            let (mla, mut rep) = upcycle_attention(w, &self.config.geometry, spec, enable_ln)?;
            rep.layer = i;
            out.config.layer_kinds[i] = LayerKind::Mla {
                r_q: rep.r_q,
                r_kv: rep.r_kv,
            };
            out.blocks[i].attn = AttentionWeights::Mla(mla);
            layers.push(rep);
        }
        if !ids.is_empty() {
            out.config.mla_layer_norm = enable_ln;
        }
        out.check()?;
        let cache = cache_footprint(&out.config.geometry, &out.config.layer_kinds, 1);
        let mut notes = Vec::new();
        let n_mla = out.config.layer_kinds.iter().filter(|k| k.is_mla()).count();
        if n_mla > 0 && n_mla < out.config.n_layers {
            notes.push(format!(
                "mixed layout: {n_mla} of {} layers use latent caches",
                out.config.n_layers
            ));
        }
        if self.config.geometry.is_grouped() && !ids.is_empty() {
            notes.push(format!(
                "grouped donor: {} kv heads expanded to {} before factorization",
                self.config.geometry.n_kv, self.config.geometry.n_h
            ));
        }
        let report = UpcycleReport {
            rank_spec: spec.to_string(),
            layer_norm: enable_ln,
            param_delta: layers.iter().map(|l| l.param_delta).sum(),
            layers,
            cache_percent: cache.percent_string(4),
            cache,
            notes,
        };
        Ok((out, report))
    }

    /// Baseline for [`upcycle`](Self::upcycle): selected layers get randomly
    /// initialized MLA projections; `w_o` and all other weights are copied.
    pub fn random_mla_baseline(
        &self,
        r_q: usize,
        r_kv: usize,
        selection: &LayerSelection,
        enable_ln: bool,
        seed: u64,
    ) -> Result<LmModel> {
        let ids = selection.resolve(self.config.n_layers)?;
        let has_mla = self.config.layer_kinds.iter().any(LayerKind::is_mla);
        if has_mla && !ids.is_empty() && self.config.mla_layer_norm != enable_ln {
            return Err(Error::Config("layer-norm setting must match the existing MLA layers".into()));
        }
        let spec = RankSpec::Fixed { r_q, r_kv };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for &i in &ids {
            let AttentionWeights::Mha(w) = &self.blocks[i].attn else {
                return Err(Error::Kind(format!("layer {i} is not an attention layer")));
            };
            let lg = self.config.geometry.with_ranks(r_q, r_kv);
            let mut mla = random_init_attention(&lg, &spec, rand::Rng::random(&mut rng), enable_ln)?;
            mla.w_o = w.w_o.clone();
            out.config.layer_kinds[i] = LayerKind::Mla { r_q, r_kv };
            out.blocks[i].attn = AttentionWeights::Mla(mla);
        }
        if !ids.is_empty() {
            out.config.mla_layer_norm = enable_ln;
        }
        out.check()?;
        Ok(out)
    }

    /// Inference copy with every MLA layer in absorbed form.
    pub fn absorbed(&self) -> Result<LmModel> {
        let mut out = self.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            if matches!(b.attn, AttentionWeights::Mla(_)) {
                b.attn = b.attn.absorb(&self.config.layer_geometry(i))?;
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
