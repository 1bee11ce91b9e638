use serde::{Deserialize, Serialize};

use crate::attention::{AttentionGeometry, LayerKind, DEFAULT_ROPE_BASE};
use crate::error::{Error, Result};

/// Bytes 0..=255 plus the specials below.
pub const BYTE_VOCAB: usize = 258;
pub const BOS: usize = 256;
pub const EOS: usize = 257;

fn default_true() -> bool {
    true
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

/// Shape of a decoder LM. `geometry.r_q`/`r_kv` are only defaults; MLA layers
/// carry their own ranks in `layer_kinds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub geometry: AttentionGeometry,
    pub mlp_hidden: usize,
    pub layer_kinds: Vec<LayerKind>,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Intermediate layer norms inside every MLA layer.
    #[serde(default)]
    pub mla_layer_norm: bool,
}

impl ModelConfig {
    /// All-attention config with byte vocabulary.
    pub fn attention_only(n_layers: usize, geometry: AttentionGeometry, mlp_hidden: usize) -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            n_layers,
            geometry,
            mlp_hidden,
            layer_kinds: vec![LayerKind::Attention; n_layers],
            tie_embeddings: true,
            rope_base: DEFAULT_ROPE_BASE,
            mla_layer_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.n_layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("vocab_size, n_layers and mlp_hidden must be positive".into()));
        }
        if self.layer_kinds.len() != self.n_layers {
            return Err(Error::Config(format!(
                "{} layer kinds for {} layers",
                self.layer_kinds.len(),
                self.n_layers
            )));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config(format!("rope_base {} must exceed 1", self.rope_base)));
        }
        self.geometry.validate()?;
        for i in 0..self.n_layers {
            self.layer_geometry(i).validate()?;
        }
        Ok(())
    }

    /// Geometry used by layer `i`, with that layer's latent ranks.
    pub fn layer_geometry(&self, i: usize) -> AttentionGeometry {
        match self.layer_kinds[i] {
            LayerKind::Attention => self.geometry,
            LayerKind::Mla { r_q, r_kv } => self.geometry.with_ranks(r_q, r_kv),
        }
    }

    /// Scalar count implied by the config.
    pub fn param_count(&self) -> usize {
        let g = &self.geometry;
        let (d, v) = (g.d, self.vocab_size);
        let mut n = v * d + d;
        if !self.tie_embeddings {
            n += d * v;
        }
        for i in 0..self.n_layers {
            let lg = self.layer_geometry(i);
            n += 2 * d + 3 * d * self.mlp_hidden + lg.n_h * lg.d_h * d;
            n += match self.layer_kinds[i] {
                LayerKind::Attention => lg.mha_qkv_params(),
                LayerKind::Mla { r_q, r_kv } => {
                    lg.mla_projection_params() + if self.mla_layer_norm { 2 * (r_q + r_kv) } else { 0 }
                }
            };
        }
        n
    }
}
