//! Dense singular value decomposition via one-sided Jacobi rotations.
//!
//! The matrices this library decomposes are rearranged attention operators
//! and unfolded tensors, at most a few thousand entries per side, so a
//! simple cyclic Hestenes sweep is accurate and fast enough. Working on
//! columns keeps every rotation a local update and the singular vectors
//! drop out as normalized columns at the end.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Thin decomposition M = U diag(sigma) V^T with singular values descending.
/// For a p x q input, `u` is p x q, `sigma` has q entries, `v` is q x q.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseTensor,
    pub sigma: Vec<f64>,
    pub v: DenseTensor,
}

impl Svd {
    /// Number of singular values strictly above `tol` times the largest.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.sigma.iter().take_while(|&&s| s > tol * top).count()
    }

    /// Reconstruct U diag(sigma) V^T, for residual checks.
    pub fn reconstruct(&self) -> DenseTensor {
        let p = self.u.shape()[0];
        let q = self.v.shape()[0];
        let r = self.sigma.len();
        let mut out = DenseTensor::zeros(&[p, q]);
        let u = self.u.data();
        let v = self.v.data();
        let o = out.data_mut();
        for i in 0..p {
            for t in 0..r {
                let us = u[i * r + t] * self.sigma[t];
                if us == 0.0 {
                    continue;
                }
                for j in 0..q {
                    o[i * q + j] += us * v[j * r + t];
                }
            }
        }
        out
    }
}

const MAX_SWEEPS: usize = 60;

/// Decompose a 2-D tensor. Inputs with more rows than columns are handled
/// directly; wide inputs are transposed first and the factors swapped back.
pub fn svd_descending(m: &DenseTensor) -> Result<Svd> {
    if m.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "svd expects a matrix, got rank {}",
            m.rank()
        )));
    }
    let (p, q) = (m.shape()[0], m.shape()[1]);
    if p == 0 || q == 0 {
        return Err(Error::ShapeMismatch("svd of an empty matrix".into()));
    }
    if p < q {
        let mt = transpose(m);
        let Svd { u, sigma, v } = svd_tall(&mt)?;
        return Ok(Svd { u: v, sigma, v: u });
    }
    svd_tall(m)
}

fn transpose(m: &DenseTensor) -> DenseTensor {
    let (p, q) = (m.shape()[0], m.shape()[1]);
    let src = m.data();
    DenseTensor::from_fn(&[q, p], |idx| src[idx[1] * q + idx[0]])
}

/// One-sided Jacobi on a tall matrix: orthogonalize the columns of a working
/// copy A by plane rotations, accumulating the same rotations into V, so that
/// A -> U diag(sigma) with sigma the final column norms.
fn svd_tall(m: &DenseTensor) -> Result<Svd> {
    let (p, q) = (m.shape()[0], m.shape()[1]);
    let mut a = m.data().to_vec();
    let mut v = vec![0.0f64; q * q];
    for j in 0..q {
        v[j * q + j] = 1.0;
    }

    let col_dot = |a: &[f64], j: usize, k: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..p {
            s += a[i * q + j] * a[i * q + k];
        }
        s
    };

    let mut converged = false;
    let mut worst = 0.0f64;
    for _sweep in 0..MAX_SWEEPS {
        worst = 0.0;
        for j in 0..q {
            for k in j + 1..q {
                let ajj = col_dot(&a, j, j);
                let akk = col_dot(&a, k, k);
                let g = col_dot(&a, j, k);
                let scale = (ajj * akk).sqrt();
                if scale == 0.0 || g.abs() <= 1e-14 * scale {
                    continue;
                }
                worst = worst.max(g.abs() / scale);
                // classic rotation choice: zeta from the norm gap, then the
                // smaller-angle tangent root for stability
                let zeta = (akk - ajj) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..p {
                    let x = a[i * q + j];
                    let y = a[i * q + k];
                    a[i * q + j] = c * x - s * y;
                    a[i * q + k] = s * x + c * y;
                }
                for i in 0..q {
                    let x = v[i * q + j];
                    let y = v[i * q + k];
                    v[i * q + j] = c * x - s * y;
                    v[i * q + k] = s * x + c * y;
                }
            }
        }
        if worst <= 1e-15 {
            converged = true;
            break;
        }
    }
    if !converged && worst > 1e-10 {
        return Err(Error::NoConvergence {
            algorithm: "one-sided jacobi svd",
            iters: MAX_SWEEPS,
            residual: worst,
        });
    }

    // column norms are the singular values; normalized columns give U
    let mut order: Vec<usize> = (0..q).collect();
    let mut sigma = vec![0.0f64; q];
    for (j, s) in sigma.iter_mut().enumerate() {
        *s = col_dot(&a, j, j).sqrt();
    }
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap());

    let mut u = vec![0.0f64; p * q];
    let mut vs = vec![0.0f64; q * q];
    let mut sorted_sigma = vec![0.0f64; q];
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        sorted_sigma[dst] = s;
        if s > 0.0 {
            for i in 0..p {
                u[i * q + dst] = a[i * q + src] / s;
            }
        }
        for i in 0..q {
            vs[i * q + dst] = v[i * q + src];
        }
    }
    // zero singular values leave U columns empty; complete them to an
    // orthonormal set so U^T U = I regardless of rank
    complete_orthonormal(&mut u, p, q, &sorted_sigma);

    Ok(Svd {
        u: DenseTensor::new(vec![p, q], u)?,
        sigma: sorted_sigma,
        v: DenseTensor::new(vec![q, q], vs)?,
    })
}

fn complete_orthonormal(u: &mut [f64], p: usize, q: usize, sigma: &[f64]) {
    for j in 0..q {
        if sigma[j] > 0.0 {
            continue;
        }
        // try basis vectors until one survives projection onto the others
        for seed in 0..p {
            let mut cand = vec![0.0f64; p];
            cand[seed] = 1.0;
            for pass in 0..2 {
                let _ = pass;
                for k in 0..q {
                    if k == j {
                        continue;
                    }
                    let mut dot = 0.0;
                    for i in 0..p {
                        dot += cand[i] * u[i * q + k];
                    }
                    for i in 0..p {
                        cand[i] -= dot * u[i * q + k];
                    }
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for i in 0..p {
                    u[i * q + j] = cand[i] / norm;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn assert_orthonormal_cols(m: &DenseTensor, tol: f64) {
        let (p, q) = (m.shape()[0], m.shape()[1]);
        let d = m.data();
        for j in 0..q {
            for k in j..q {
                let mut dot = 0.0;
                for i in 0..p {
                    dot += d[i * q + j] * d[i * q + k];
                }
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((dot - want).abs() <= tol, "col {j},{k}: {dot}");
            }
        }
    }

    #[test]
    fn known_two_by_two() {
        // [[3,0],[4,5]] has singular values sqrt(45 +/- 45)/... use exact:
        // M^T M = [[25,20],[20,25]], eigenvalues 45 and 5
        let m = DenseTensor::new(vec![2, 2], vec![3.0, 0.0, 4.0, 5.0]).unwrap();
        let svd = svd_descending(&m).unwrap();
        assert!((svd.sigma[0] - 45f64.sqrt()).abs() < 1e-12);
        assert!((svd.sigma[1] - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_and_orthonormality_random() {
        for (p, q, s) in [(7usize, 5usize, 1u64), (5, 9, 2), (12, 12, 3), (1, 4, 4)] {
            let mut r = rng::seeded(s);
            let m = rng::normal_tensor(&[p, q], &mut r);
            let svd = svd_descending(&m).unwrap();
            let err = svd.reconstruct().max_abs_diff(&m).unwrap();
            assert!(err <= 1e-8 * m.frobenius_norm().max(1.0), "{p}x{q}: {err}");
            assert_orthonormal_cols(&svd.u, 1e-10);
            assert_orthonormal_cols(&svd.v, 1e-10);
            for w in svd.sigma.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }

    #[test]
    fn rank_deficient_matrix() {
        // outer product of two vectors: rank one
        let x = [1.0, -2.0, 0.5, 3.0];
        let y = [2.0, 1.0, -1.0];
        let m = DenseTensor::from_fn(&[4, 3], |idx| x[idx[0]] * y[idx[1]]);
        let svd = svd_descending(&m).unwrap();
        assert_eq!(svd.numerical_rank(1e-9), 1);
        let xn: f64 = x.iter().map(|a| a * a).sum::<f64>();
        let yn: f64 = y.iter().map(|a| a * a).sum::<f64>();
        assert!((svd.sigma[0] - (xn * yn).sqrt()).abs() < 1e-10);
        assert!(svd.sigma[1].abs() < 1e-10);
        assert_orthonormal_cols(&svd.u, 1e-9);
        let err = svd.reconstruct().max_abs_diff(&m).unwrap();
        assert!(err <= 1e-9);
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let m = DenseTensor::identity(6);
        let svd = svd_descending(&m).unwrap();
        for s in &svd.sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(svd.numerical_rank(1e-9), 6);
    }

    #[test]
    fn zero_matrix() {
        let m = DenseTensor::zeros(&[3, 2]);
        let svd = svd_descending(&m).unwrap();
        assert_eq!(svd.numerical_rank(1e-9), 0);
        assert_orthonormal_cols(&svd.u, 1e-10);
    }
}
