use super::AttentionGeometry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-layer rolling cache for one generation session. Append-only.
#[derive(Clone, Debug, PartialEq)]
pub enum KvCacheState {
    /// Rotated keys and values, `len × width` each with `width = n_kv·d_h`.
    Full {
        k: Vec<f64>,
        v: Vec<f64>,
        width: usize,
        len: usize,
    },
    /// Compressed latent `len × r_kv` plus the shared rotary key `len × d_r`.
    Latent {
        c_kv: Vec<f64>,
        k_r: Vec<f64>,
        r_kv: usize,
        d_r: usize,
        len: usize,
    },
}

impl KvCacheState {
    pub fn full(geo: &AttentionGeometry) -> Self {
        KvCacheState::Full {
            k: Vec::new(),
            v: Vec::new(),
            width: geo.n_kv * geo.d_h,
            len: 0,
        }
    }

    pub fn latent(geo: &AttentionGeometry) -> Self {
        KvCacheState::Latent {
            c_kv: Vec::new(),
            k_r: Vec::new(),
            r_kv: geo.r_kv,
            d_r: geo.d_r,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            KvCacheState::Full { len, .. } | KvCacheState::Latent { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_latent(&self) -> bool {
        matches!(self, KvCacheState::Latent { .. })
    }

    /// Stored scalars across all cached tokens.
    pub fn scalar_count(&self) -> usize {
        match self {
            KvCacheState::Full { k, v, .. } => k.len() + v.len(),
            KvCacheState::Latent { c_kv, k_r, .. } => c_kv.len() + k_r.len(),
        }
    }

    pub fn per_token_scalars(&self) -> usize {
        match self {
            KvCacheState::Full { width, .. } => 2 * width,
            KvCacheState::Latent { r_kv, d_r, .. } => r_kv + d_r,
        }
    }

    /// The two stored streams as matrices (`k`,`v` or `c_kv`,`k_r`).
    pub fn tensors(&self) -> (Tensor, Tensor) {
        match self {
            KvCacheState::Full { k, v, width, len } => (
                Tensor::new(&[*len, *width], k.clone()).expect("cache invariant"),
                Tensor::new(&[*len, *width], v.clone()).expect("cache invariant"),
            ),
            KvCacheState::Latent {
                c_kv,
                k_r,
                r_kv,
                d_r,
                len,
            } => (
                Tensor::new(&[*len, *r_kv], c_kv.clone()).expect("cache invariant"),
                Tensor::new(&[*len, *d_r], k_r.clone()).expect("cache invariant"),
            ),
        }
    }

    pub(crate) fn append_full(&mut self, k_new: &Tensor, v_new: &Tensor) -> Result<()> {
        match self {
            KvCacheState::Full { k, v, width, len } => {
                if k_new.cols() != *width || v_new.cols() != *width || k_new.rows() != v_new.rows() {
                    return Err(Error::dim("cache append", k_new.shape(), &[*width]));
                }
                k.extend_from_slice(k_new.data());
                v.extend_from_slice(v_new.data());
                *len += k_new.rows();
                Ok(())
            }
            KvCacheState::Latent { .. } => Err(Error::Cache("expected a full K/V cache, got a latent cache".into())),
        }
    }

    pub(crate) fn append_latent(&mut self, c_new: &Tensor, kr_new: &Tensor) -> Result<()> {
        match self {
            KvCacheState::Latent {
                c_kv,
                k_r,
                r_kv,
                d_r,
                len,
            } => {
                if c_new.cols() != *r_kv || kr_new.cols() != *d_r || c_new.rows() != kr_new.rows() {
                    return Err(Error::dim("cache append", c_new.shape(), &[*r_kv, *d_r]));
                }
                c_kv.extend_from_slice(c_new.data());
                k_r.extend_from_slice(kr_new.data());
                *len += c_new.rows();
                Ok(())
            }
            KvCacheState::Full { .. } => Err(Error::Cache("expected a latent cache, got a full K/V cache".into())),
        }
    }

    pub(crate) fn expect_full(&self, geo: &AttentionGeometry) -> Result<()> {
        match self {
            KvCacheState::Full { width, .. } if *width == geo.n_kv * geo.d_h => Ok(()),
            KvCacheState::Full { width, .. } => Err(Error::Cache(format!(
                "full cache width {width} does not match n_kv·d_h = {}",
                geo.n_kv * geo.d_h
            ))),
            KvCacheState::Latent { .. } => Err(Error::Cache("expected a full K/V cache, got a latent cache".into())),
        }
    }

    pub(crate) fn expect_latent(&self, geo: &AttentionGeometry) -> Result<()> {
        match self {
            KvCacheState::Latent { r_kv, d_r, .. } if *r_kv == geo.r_kv && *d_r == geo.d_r => Ok(()),
            KvCacheState::Latent { r_kv, d_r, .. } => Err(Error::Cache(format!(
                "latent cache ({r_kv}, {d_r}) does not match geometry ({}, {})",
                geo.r_kv, geo.d_r
            ))),
            KvCacheState::Full { .. } => Err(Error::Cache("expected a latent cache, got a full K/V cache".into())),
        }
    }
}
