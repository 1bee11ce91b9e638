//! SVD-based conversion of trained MHA/GQA layers into MLA layers, rank
//! selection, and the random-initialization baseline.

mod init;
mod rank;

use serde::Serialize;

pub use init::{
    expand_gqa_to_mha, init_kv_path, init_query_path, init_rope_key, param_delta, random_init_attention,
    upcycle_attention, LayerUpcycle,
};
pub use rank::{align_rank, captured_energy, select_rank_dynamic, RankSpec, RANK_ALIGNMENT};

use crate::attention::CacheFootprint;

/// Summary of a model-level conversion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpcycleReport {
    pub rank_spec: String,
    pub layer_norm: bool,
    pub layers: Vec<LayerUpcycle>,
    pub cache: CacheFootprint,
    /// Cache size relative to the all-attention model, 4 decimals.
    pub cache_percent: String,
    pub param_delta: i64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}
