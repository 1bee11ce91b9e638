use serde::{Deserialize, Serialize};

use super::AttentionGeometry;

/// Attention family of one decoder layer. MLA layers carry their own ranks,
/// which may differ per layer after dynamic rank selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Attention,
    Mla { r_q: usize, r_kv: usize },
}

impl LayerKind {
    pub fn is_mla(&self) -> bool {
        matches!(self, LayerKind::Mla { .. })
    }

    /// Cached scalars per token for this layer.
    pub fn cache_per_token(&self, geo: &AttentionGeometry) -> u64 {
        match self {
            LayerKind::Attention => geo.mha_cache_per_token() as u64,
            LayerKind::Mla { r_kv, .. } => (r_kv + geo.d_r) as u64,
        }
    }
}

/// Cache size of a layer stack against the all-attention baseline, kept as
/// exact integers so the ratio can be rendered without float drift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CacheFootprint {
    pub tokens: u64,
    pub per_token: u64,
    pub baseline_per_token: u64,
    pub scalars: u64,
    pub baseline_scalars: u64,
}

impl CacheFootprint {
    pub fn ratio(&self) -> f64 {
        self.per_token as f64 / self.baseline_per_token as f64
    }

    /// Percentage vs baseline, rounded half-up to `decimals` places.
    pub fn percent_string(&self, decimals: u32) -> String {
        exact_percent(self.per_token, self.baseline_per_token, decimals)
    }
}

pub fn exact_percent(num: u64, den: u64, decimals: u32) -> String {
    let scale = 10u128.pow(decimals);
    let scaled = (num as u128 * 100 * scale * 2 + den as u128) / (2 * den as u128);
    if decimals == 0 {
        return scaled.to_string();
    }
    format!("{}.{:0width$}", scaled / scale, scaled % scale, width = decimals as usize)
}

/// MHA/GQA layers cost `2·n_kv·d_h` per token, MLA layers `r_kv + d_r`.
pub fn cache_footprint(geo: &AttentionGeometry, kinds: &[LayerKind], tokens: usize) -> CacheFootprint {
    let per_token: u64 = kinds.iter().map(|k| k.cache_per_token(geo)).sum();
    let baseline_per_token = kinds.len() as u64 * geo.mha_cache_per_token() as u64;
    CacheFootprint {
        tokens: tokens as u64,
        per_token,
        baseline_per_token,
        scalars: per_token * tokens as u64,
        baseline_scalars: baseline_per_token * tokens as u64,
    }
}
