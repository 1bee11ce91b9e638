use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How latent ranks are chosen when converting a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RankSpec {
    /// The same ranks for every converted layer.
    Fixed { r_q: usize, r_kv: usize },
    /// Smallest ranks capturing at least `delta_*` of the squared singular mass.
    Dynamic { delta_q: f64, delta_kv: f64 },
}

/// Dynamic ranks are rounded up to this multiple (then capped at the maximum).
pub const RANK_ALIGNMENT: usize = 8;

impl RankSpec {
    pub fn validate(&self) -> Result<()> {
        if let RankSpec::Dynamic { delta_q, delta_kv } = self {
            for d in [delta_q, delta_kv] {
                if !(*d > 0.0 && *d <= 1.0) {
                    return Err(Error::Config(format!("energy threshold {d} outside (0, 1]")));
                }
            }
        }
        if let RankSpec::Fixed { r_q, r_kv } = self {
            if *r_q == 0 || *r_kv == 0 {
                return Err(Error::Config("fixed ranks must be positive".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RankSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankSpec::Fixed { r_q, r_kv } => write!(f, "fixed:{r_q},{r_kv}"),
            RankSpec::Dynamic { delta_q, delta_kv } => write!(f, "dynamic:{delta_q},{delta_kv}"),
        }
    }
}

/// Parses `fixed:R_Q,R_KV` or `dynamic:DELTA_Q,DELTA_KV`.
impl FromStr for RankSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed rank spec {s:?}; expected fixed:RQ,RKV or dynamic:DQ,DKV"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let (a, b) = rest.split_once(',').ok_or_else(bad)?;
        let spec = match kind.trim() {
            "fixed" => RankSpec::Fixed {
                r_q: a.trim().parse().map_err(|_| bad())?,
                r_kv: b.trim().parse().map_err(|_| bad())?,
            },
            "dynamic" => RankSpec::Dynamic {
                delta_q: a.trim().parse().map_err(|_| bad())?,
                delta_kv: b.trim().parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Smallest `R` with `Σ_{j≤R} σ_j² ≥ delta · Σ_j σ_j²`.
pub fn select_rank_dynamic(sigma: &[f64], delta: f64) -> Result<usize> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("energy threshold {delta} outside (0, 1]")));
    }
    if sigma.is_empty() {
        return Err(Error::Spectrum("empty spectrum".into()));
    }
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Spectrum("singular values must be finite and nonnegative".into()));
    }
    if sigma.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Spectrum("singular values must be sorted descending".into()));
    }
    let energy: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return Err(Error::Spectrum("all singular values are zero".into()));
    }
    let target = delta * total;
    let mut acc = 0.0;
    for (j, e) in energy.iter().enumerate() {
        acc += e;
        if acc >= target {
            return Ok(j + 1);
        }
    }
    // only reachable through rounding in the running sum at delta = 1
    Ok(sigma.len())
}

/// Rounds `rank` up to a multiple of [`RANK_ALIGNMENT`], capped at `max`.
pub fn align_rank(rank: usize, max: usize) -> usize {
    rank.div_ceil(RANK_ALIGNMENT).saturating_mul(RANK_ALIGNMENT).min(max).max(1)
}

/// Fraction of squared singular mass in the first `r` values.
pub fn captured_energy(sigma: &[f64], r: usize) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1.0;
    }
    sigma.iter().take(r).map(|s| s * s).sum::<f64>() / total
}
