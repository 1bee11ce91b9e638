//! One-sided (Hestenes) Jacobi SVD.
//!
//! The columns of a working copy of `A` are rotated pairwise until mutually
//! orthogonal; the column norms are then the singular values and the
//! accumulated rotations form `V`. Wide inputs are handled through `Aᵀ`.

use super::Tensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-15;
/// Singular values below this fraction of `‖A‖_F` are reported as zero.
const NULL_REL: f64 = 1e-12;

/// Thin factorization `A ≈ U · diag(sigma) · Vᵀ` keeping `sigma.len()` triplets.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub vt: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(sigma) · Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        self.u.matmul(&self.sigma_vt()).expect("consistent factors")
    }

    /// `diag(sigma) · Vᵀ`, the up-projection factor used by upcycling.
    pub fn sigma_vt(&self) -> Tensor {
        let n = self.vt.cols();
        Tensor::from_fn(&[self.rank(), n], |i| self.sigma[i / n] * self.vt.data()[i])
    }

    pub fn truncate(&self, r: usize) -> Result<SvdResult> {
        if r == 0 || r > self.rank() {
            return Err(Error::Rank {
                what: "svd truncation",
                rank: r,
                max: self.rank(),
            });
        }
        Ok(SvdResult {
            u: self.u.slice_last(0, r)?,
            sigma: self.sigma[..r].to_vec(),
            vt: self.vt.slice_rows(0, r)?,
        })
    }
}

/// Column-major working storage.
struct Columns {
    len: usize,
    data: Vec<f64>,
}

impl Columns {
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.len..(j + 1) * self.len]
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let len = self.len;
        let (lo, hi) = self.data.split_at_mut(q * len);
        let cp = &mut lo[p * len..(p + 1) * len];
        let cq = &mut hi[..len];
        for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
            let (a, b) = (*x, *y);
            *x = c * a - s * b;
            *y = s * a + c * b;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full thin SVD of a tall-or-square `m×n` matrix given row-major data.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut w = Columns {
        len: m,
        data: vec![0.0; m * n],
    };
    for i in 0..m {
        for j in 0..n {
            w.data[j * m + i] = a[i * n + j];
        }
    }
    let mut v = Columns {
        len: n,
        data: vec![0.0; n * n],
    };
    for j in 0..n {
        v.data[j * n + j] = 1.0;
    }

    // Columns below this squared norm are rounding residue of a null direction;
    // rotating them against each other never converges.
    let total: f64 = a.iter().map(|x| x * x).sum();
    let negligible = total * NULL_REL * NULL_REL;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(w.col(p), w.col(p));
                let beta = dot(w.col(q), w.col(q));
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(w.col(p), w.col(q));
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                w.rotate(p, q, c, s);
                v.rotate(p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n).map(|j| dot(w.col(j), w.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));

    let scale = sigma.iter().copied().fold(0.0, f64::max);
    let tiny = (scale * (m.max(n) as f64) * f64::EPSILON).max(negligible.sqrt());

    // u column-major (n columns of length m), vt row-major n×n
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vt = vec![0.0; n * n];
    let mut sorted_sigma = Vec::with_capacity(n);
    let mut null_slots = Vec::new();
    for (row, &j) in order.iter().enumerate() {
        let s = sigma[j];
        if s > tiny && s > 0.0 {
            u_cols.push(w.col(j).iter().map(|x| x / s).collect());
            sorted_sigma.push(s);
        } else {
            u_cols.push(vec![0.0; m]);
            sorted_sigma.push(0.0);
            null_slots.push(row);
        }
        vt[row * n..(row + 1) * n].copy_from_slice(v.col(j));
    }
    complete_basis(&mut u_cols, &null_slots, m);
    sigma.clear();

    // sign convention: largest-magnitude entry of each left vector is nonnegative
    for (row, col) in u_cols.iter_mut().enumerate() {
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
            vt[row * n..(row + 1) * n].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let mut u = vec![0.0; m * n];
    for (j, col) in u_cols.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            u[i * n + j] = *x;
        }
    }
    (u, sorted_sigma, vt)
}

/// Fill zero-singular-value slots with unit vectors orthogonal to the rest.
fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in slots {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == slot || c.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Thin SVD keeping all `min(m, n)` triplets.
pub fn svd_full(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = match a.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::dim("svd", s, &[])),
    };
    if m == 0 || n == 0 {
        return Err(Error::dim("svd", a.shape(), &[]));
    }
    if m >= n {
        let (u, sigma, vt) = jacobi_tall(a.data(), m, n);
        Ok(SvdResult {
            u: Tensor::new(&[m, n], u)?,
            sigma,
            vt: Tensor::new(&[n, n], vt)?,
        })
    } else {
        // Aᵀ = U' Σ V'ᵀ  ⇒  A = V' Σ U'ᵀ
        let at = a.transpose()?;
        let (u2, sigma, vt2) = jacobi_tall(at.data(), n, m);
        let mut u = Tensor::new(&[m, m], vt2)?.transpose()?;
        let mut vt = Tensor::new(&[n, m], u2)?.transpose()?;
        // re-apply the sign convention on the new left factor
        for j in 0..m {
            let mut best = 0;
            for i in 0..m {
                if u.at(i, j).abs() > u.at(best, j).abs() {
                    best = i;
                }
            }
            if u.at(best, j) < 0.0 {
                for i in 0..m {
                    u.data_mut()[i * m + j] *= -1.0;
                }
                for x in &mut vt.data_mut()[j * n..(j + 1) * n] {
                    *x = -*x;
                }
            }
        }
        Ok(SvdResult { u, sigma, vt })
    }
}

/// The `r` largest singular triplets of `a`.
pub fn svd_truncated(a: &Tensor, r: usize) -> Result<SvdResult> {
    let max = match a.shape() {
        [m, n] => (*m).min(*n),
        s => return Err(Error::dim("svd", s, &[])),
    };
    if r == 0 || r > max {
        return Err(Error::Rank {
            what: "svd_truncated",
            rank: r,
            max,
        });
    }
    svd_full(a)?.truncate(r)
}
