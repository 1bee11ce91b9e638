use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths, head counts and latent ranks shared by the MHA/GQA and MLA layers.
///
/// `d_qk` is the NoPE query/key head width, `d_r` the decoupled rotary width,
/// `r_q`/`r_kv` the query and joint key-value latent ranks. Sequence length is
/// a runtime quantity and is not stored here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionGeometry {
    pub d: usize,
    pub n_h: usize,
    pub n_kv: usize,
    pub d_h: usize,
    pub d_qk: usize,
    pub d_r: usize,
    pub r_q: usize,
    pub r_kv: usize,
}

impl AttentionGeometry {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Geometry(msg));
        if self.d == 0 || self.n_h == 0 || self.n_kv == 0 || self.d_h == 0 {
            return fail(format!("zero extent in {self:?}"));
        }
        if !self.n_h.is_multiple_of(self.n_kv) {
            return fail(format!("n_h={} not divisible by n_kv={}", self.n_h, self.n_kv));
        }
        if self.d_qk != self.d_r || self.d_r > self.d_h {
            return fail(format!(
                "need d_qk == d_r <= d_h, got d_qk={} d_r={} d_h={}",
                self.d_qk, self.d_r, self.d_h
            ));
        }
        if self.d_r == 0 || !self.d_r.is_multiple_of(2) || !self.d_h.is_multiple_of(2) {
            return fail(format!("rotary widths must be even and nonzero (d_r={}, d_h={})", self.d_r, self.d_h));
        }
        self.check_ranks(self.r_q, self.r_kv)
    }

    pub fn check_ranks(&self, r_q: usize, r_kv: usize) -> Result<()> {
        if r_q == 0 || r_q > self.max_r_q() {
            return Err(Error::Rank {
                what: "r_q",
                rank: r_q,
                max: self.max_r_q(),
            });
        }
        if r_kv == 0 || r_kv > self.max_r_kv() {
            return Err(Error::Rank {
                what: "r_kv",
                rank: r_kv,
                max: self.max_r_kv(),
            });
        }
        Ok(())
    }

    pub fn max_r_q(&self) -> usize {
        self.d.min(self.n_h * self.d_h)
    }

    pub fn max_r_kv(&self) -> usize {
        self.d.min(2 * self.n_h * self.d_h)
    }

    pub fn with_ranks(&self, r_q: usize, r_kv: usize) -> Self {
        Self { r_q, r_kv, ..*self }
    }

    /// Query heads served by each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_h / self.n_kv
    }

    pub fn is_grouped(&self) -> bool {
        self.n_kv < self.n_h
    }

    /// Full-cache scalars per token per layer: `2·n_kv·d_h`.
    pub fn mha_cache_per_token(&self) -> usize {
        2 * self.n_kv * self.d_h
    }

    /// Latent-cache scalars per token per layer: `r_kv + d_r`.
    pub fn mla_cache_per_token(&self) -> usize {
        self.r_kv + self.d_r
    }

    /// Projection parameters of a donor attention layer (excluding `w_o`).
    pub fn mha_qkv_params(&self) -> usize {
        self.d * self.n_h * self.d_h + 2 * self.d * self.n_kv * self.d_h
    }

    /// Projection parameters of an MLA layer (excluding `w_o` and norms).
    pub fn mla_projection_params(&self) -> usize {
        let (d, n_h) = (self.d, self.n_h);
        d * self.r_q
            + self.r_q * n_h * (self.d_qk + self.d_r)
            + d * self.r_kv
            + self.r_kv * n_h * (self.d_qk + self.d_h)
            + d * self.d_r
    }

    pub fn attention_scale_mha(&self) -> f64 {
        1.0 / (self.d_h as f64).sqrt()
    }

    pub fn attention_scale_mla(&self) -> f64 {
        1.0 / ((self.d_qk + self.d_r) as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo() -> AttentionGeometry {
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

    #[test]
    fn accepts_valid_geometry() {
        geo().validate().unwrap();
    }

    #[test]
    fn rejects_bad_geometries() {
        let bad = [
            AttentionGeometry { n_kv: 3, n_h: 4, ..geo() },
            AttentionGeometry { d_qk: 2, ..geo() },
            AttentionGeometry { d_qk: 10, d_r: 10, ..geo() },
            AttentionGeometry { d_qk: 3, d_r: 3, ..geo() },
        ];
        for g in bad {
            assert!(matches!(g.validate(), Err(Error::Geometry(_))), "{g:?}");
        }
        assert!(matches!(geo().with_ranks(0, 4).validate(), Err(Error::Rank { .. })));
        assert!(matches!(geo().with_ranks(17, 4).validate(), Err(Error::Rank { .. })));
        assert!(matches!(geo().with_ranks(4, 17).validate(), Err(Error::Rank { .. })));
    }

    #[test]
    fn unknown_json_keys_are_rejected() {
        let ok = r#"{"d":16,"n_h":2,"n_kv":2,"d_h":8,"d_qk":4,"d_r":4,"r_q":12,"r_kv":10}"#;
        assert_eq!(serde_json::from_str::<AttentionGeometry>(ok).unwrap(), geo());
        let typo = r#"{"d":16,"n_h":2,"n_kv":2,"d_h":8,"d_qk":4,"d_r":4,"r_q":12,"rkv":10}"#;
        assert!(serde_json::from_str::<AttentionGeometry>(typo).is_err());
    }
}
