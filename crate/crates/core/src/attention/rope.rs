//! Rotary position embedding.

use crate::error::{Error, Result};
use crate::tensor::{RopeTable, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotates each consecutive pair `(x_{2i}, x_{2i+1})` of every head by
/// `pos · base^(−2i/width)`, where `x` is `l × heads·width`.
pub fn rope_apply(x: &Tensor, positions: &[usize], heads: usize, base: f64) -> Result<Tensor> {
    if x.shape().len() != 2 || heads == 0 || !x.cols().is_multiple_of(heads) {
        return Err(Error::dim("rope", x.shape(), &[heads]));
    }
    let width = x.cols() / heads;
    if !width.is_multiple_of(2) {
        return Err(Error::Geometry(format!("rotary width {width} must be even")));
    }
    if positions.len() != x.rows() {
        return Err(Error::dim("rope", x.shape(), &[positions.len()]));
    }
    let table = RopeTable::new(positions, width, base);
    let mut out = x.clone();
    table.apply(out.data_mut(), heads, false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        assert_eq!(rope_apply(&x, &[0], 2, DEFAULT_ROPE_BASE).unwrap(), x);
    }

    #[test]
    fn unit_pair_traces_the_circle() {
        let x = Tensor::from_rows(&[&[1.0, 0.0]]);
        for p in [1usize, 2, 7] {
            // width 2: the single pair has exponent 0, so the angle is p
            let y = rope_apply(&x, &[p], 1, DEFAULT_ROPE_BASE).unwrap();
            assert!((y.data()[0] - (p as f64).cos()).abs() < 1e-15);
            assert!((y.data()[1] - (p as f64).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn pairs_keep_their_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 12], 3.0, &mut rng);
        let y = rope_apply(&x, &[0, 3, 17, 250, 4096], 3, DEFAULT_ROPE_BASE).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() <= 1e-12 * na.max(1.0));
        }
    }

    #[test]
    fn odd_width_is_a_geometry_error() {
        let x = Tensor::zeros(&[1, 6]);
        assert!(matches!(rope_apply(&x, &[0], 2, DEFAULT_ROPE_BASE), Err(Error::Geometry(_))));
    }
}
