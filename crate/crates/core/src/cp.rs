//! Canonical polyadic (CP) tensor decomposition by alternating least squares.
//!
//! A rank-r CP model writes T[i_0..i_{m-1}] = sum_t lambda_t prod_j A_j[i_j, t].
//! Each ALS step solves for one factor in closed form from the matricized
//! tensor times the Khatri-Rao product of the others (MTTKRP), with the
//! normal-equations Gram assembled as a Hadamard product of the small
//! per-factor Grams. Index conventions here are row-major throughout: the
//! unfolding enumerates the remaining axes ascending, and the Khatri-Rao
//! product makes its first input the most significant, so the two always
//! pair up without permutations.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::DenseTensor;
use rand::Rng;

/// Result of an ALS run. Factors have unit-norm columns; `lambda` carries
/// the component weights, sorted descending. `rel_error` is
/// ||T - That||_F / ||T||_F at the last sweep.
#[derive(Debug, Clone)]
pub struct CpDecomposition {
    pub factors: Vec<DenseTensor>,
    pub lambda: Vec<f64>,
    pub rel_error: f64,
    pub iters: usize,
}

impl CpDecomposition {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    /// Dense reconstruction, intended for small tensors in tests.
    pub fn reconstruct(&self) -> DenseTensor {
        let shape: Vec<usize> = self.factors.iter().map(|f| f.shape()[0]).collect();
        let r = self.rank();
        let mut out = DenseTensor::zeros(&shape);
        let total = out.len();
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..total {
            let mut rem = flat;
            for (ax, &n) in shape.iter().enumerate().rev() {
                idx[ax] = rem % n;
                rem /= n;
            }
            let mut acc = 0.0;
            for t in 0..r {
                let mut p = self.lambda[t];
                for (ax, f) in self.factors.iter().enumerate() {
                    p *= f.get(&[idx[ax], t]);
                }
                acc += p;
            }
            out.data_mut()[flat] = acc;
        }
        out
    }
}

/// Mode-i matricization: [n_i, prod_{j != i} n_j], columns enumerating the
/// remaining axes ascending in row-major order.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<DenseTensor> {
    let m = t.rank();
    if mode >= m {
        return Err(Error::DimIndexOutOfRange { index: mode, rank: m });
    }
    let n_i = t.shape()[mode];
    let other: usize = t.len() / n_i;
    let mut out = DenseTensor::zeros(&[n_i, other]);
    let shape = t.shape().to_vec();
    let src = t.data();
    let dst = out.data_mut();
    let mut idx = vec![0usize; m];
    for (flat, &val) in src.iter().enumerate() {
        let mut rem = flat;
        for (ax, &n) in shape.iter().enumerate().rev() {
            idx[ax] = rem % n;
            rem /= n;
        }
        let mut col = 0usize;
        for ax in 0..m {
            if ax != mode {
                col = col * shape[ax] + idx[ax];
            }
        }
        dst[idx[mode] * other + col] = val;
    }
    Ok(out)
}

/// Khatri-Rao (column-wise Kronecker) product of factor matrices, first
/// input most significant in the combined row index.
pub fn khatri_rao(mats: &[&DenseTensor]) -> Result<DenseTensor> {
    let r = match mats.first() {
        Some(m) => m.shape()[1],
        None => return Ok(DenseTensor::filled(&[1, 0], 1.0)),
    };
    let mut acc = DenseTensor::filled(&[1, r], 1.0);
    for m in mats {
        if m.rank() != 2 || m.shape()[1] != r {
            return Err(Error::ShapeMismatch(
                "khatri-rao inputs must share a column count".into(),
            ));
        }
        let rows_a = acc.shape()[0];
        let rows_m = m.shape()[0];
        let mut next = DenseTensor::zeros(&[rows_a * rows_m, r]);
        let a = acc.data();
        let b = m.data();
        let dst = next.data_mut();
        for i in 0..rows_a {
            for j in 0..rows_m {
                let row = i * rows_m + j;
                for t in 0..r {
                    dst[row * r + t] = a[i * r + t] * b[j * r + t];
                }
            }
        }
        acc = next;
    }
    Ok(acc)
}

fn gram(m: &DenseTensor) -> DenseTensor {
    let (n, r) = (m.shape()[0], m.shape()[1]);
    let d = m.data();
    let mut g = DenseTensor::zeros(&[r, r]);
    let gd = g.data_mut();
    for i in 0..n {
        let row = &d[i * r..(i + 1) * r];
        for a in 0..r {
            for b in a..r {
                gd[a * r + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            gd[a * r + b] = gd[b * r + a];
        }
    }
    g
}

/// Solve H X^T = B^T for X (i.e. X = B H^{-1}) where H is r x r symmetric
/// positive semidefinite. A relative ridge keeps collinear components from
/// blowing up mid-sweep.
fn solve_normal(h: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let r = h.shape()[0];
    let rows = b.shape()[0];
    let mut m = h.data().to_vec();
    let trace: f64 = (0..r).map(|i| m[i * r + i]).sum();
    let ridge = 1e-12 * (trace / r as f64).max(1e-300);
    for i in 0..r {
        m[i * r + i] += ridge;
    }
    // rhs laid out column-major per unknown row of X
    let mut rhs = vec![0.0f64; r * rows];
    for i in 0..rows {
        for t in 0..r {
            rhs[t * rows + i] = b.get(&[i, t]);
        }
    }
    // gaussian elimination with partial pivoting on the shared matrix
    let mut perm: Vec<usize> = (0..r).collect();
    for col in 0..r {
        let mut best = col;
        for row in col + 1..r {
            if m[perm[row] * r + col].abs() > m[perm[best] * r + col].abs() {
                best = row;
            }
        }
        perm.swap(col, best);
        let piv = m[perm[col] * r + col];
        if piv.abs() < 1e-300 {
            return Err(Error::InvalidArgument(
                "singular normal equations in als update".into(),
            ));
        }
        for row in col + 1..r {
            let f = m[perm[row] * r + col] / piv;
            if f == 0.0 {
                continue;
            }
            for c in col..r {
                m[perm[row] * r + c] -= f * m[perm[col] * r + c];
            }
            for i in 0..rows {
                rhs[perm[row] * rows + i] -= f * rhs[perm[col] * rows + i];
            }
        }
    }
    let mut x = DenseTensor::zeros(&[rows, r]);
    for t in (0..r).rev() {
        for i in 0..rows {
            let mut s = rhs[perm[t] * rows + i];
            for c in t + 1..r {
                s -= m[perm[t] * r + c] * x.get(&[i, c]);
            }
            x.set(&[i, t], s / m[perm[t] * r + t]);
        }
    }
    Ok(x)
}

fn normalize_columns(f: &mut DenseTensor) -> Vec<f64> {
    let (n, r) = (f.shape()[0], f.shape()[1]);
    let d = f.data_mut();
    let mut norms = vec![0.0f64; r];
    for i in 0..n {
        for t in 0..r {
            norms[t] += d[i * r + t] * d[i * r + t];
        }
    }
    for nm in norms.iter_mut() {
        *nm = nm.sqrt();
    }
    for i in 0..n {
        for t in 0..r {
            if norms[t] > 0.0 {
                d[i * r + t] /= norms[t];
            }
        }
    }
    norms
}

fn random_factors(shape: &[usize], rank: usize, seed: u64) -> Vec<DenseTensor> {
    let mut r = rng::substream(seed, 0x6370);
    shape
        .iter()
        .map(|&n| {
            let mut f = rng::normal_tensor(&[n, rank], &mut r);
            normalize_columns(&mut f);
            f
        })
        .collect()
}

/// ALS from a caller-supplied starting point. Factors must match the tensor
/// axes and share one column count, which fixes the rank.
pub fn cp_als_with_init(
    t: &DenseTensor,
    init: Vec<DenseTensor>,
    max_sweeps: usize,
) -> Result<CpDecomposition> {
    let m = t.rank();
    if init.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{} factors for an order-{m} tensor",
            init.len()
        )));
    }
    let rank = init[0].shape()[1];
    if rank == 0 {
        return Err(Error::InvalidArgument("cp rank must be positive".into()));
    }
    for (ax, f) in init.iter().enumerate() {
        if f.rank() != 2 || f.shape()[0] != t.shape()[ax] || f.shape()[1] != rank {
            return Err(Error::ShapeMismatch(format!(
                "factor {ax} shape {:?} does not fit tensor axis {}",
                f.shape(),
                t.shape()[ax]
            )));
        }
    }

    let norm_t = t.frobenius_norm();
    if norm_t == 0.0 {
        return Ok(CpDecomposition {
            factors: init,
            lambda: vec![0.0; rank],
            rel_error: 0.0,
            iters: 0,
        });
    }

    let unfoldings: Vec<DenseTensor> = (0..m).map(|i| unfold(t, i)).collect::<Result<_>>()?;
    let mut factors = init;
    let mut grams: Vec<DenseTensor> = factors.iter().map(gram).collect();
    let mut lambda = vec![1.0f64; rank];
    let mut prev_fit = f64::NEG_INFINITY;
    let mut rel_error = 1.0;
    let mut iters = 0;

    for sweep in 0..max_sweeps {
        iters = sweep + 1;
        let mut last_mttkrp = None;
        for i in 0..m {
            // MTTKRP: T_(i) times the Khatri-Rao of the other factors
            let others: Vec<&DenseTensor> = (0..m).filter(|&j| j != i).map(|j| &factors[j]).collect();
            let kr = khatri_rao(&others)?;
            let mtt = crate::tensor::matmul(&unfoldings[i], &kr)?;
            // Hadamard of the other Grams
            let mut h = DenseTensor::filled(&[rank, rank], 1.0);
            for (j, g) in grams.iter().enumerate() {
                if j == i {
                    continue;
                }
                for (hv, gv) in h.data_mut().iter_mut().zip(g.data()) {
                    *hv *= gv;
                }
            }
            let mut updated = solve_normal(&h, &mtt)?;
            let norms = normalize_columns(&mut updated);
            lambda = norms;
            grams[i] = gram(&updated);
            factors[i] = updated;
            if i == m - 1 {
                last_mttkrp = Some(mtt);
            }
        }

        // fit from cached pieces: ||That||^2 = lambda' (hadamard of all
        // grams) lambda, <T, That> = sum_t lambda_t <mttkrp_t, A_last_t>
        let mtt = last_mttkrp.expect("m >= 1 so the loop ran");
        let mut h_all = DenseTensor::filled(&[rank, rank], 1.0);
        for g in &grams {
            for (hv, gv) in h_all.data_mut().iter_mut().zip(g.data()) {
                *hv *= gv;
            }
        }
        let mut norm_hat_sq = 0.0;
        for a in 0..rank {
            for b in 0..rank {
                norm_hat_sq += lambda[a] * h_all.get(&[a, b]) * lambda[b];
            }
        }
        let last = &factors[m - 1];
        let mut inner = 0.0;
        for i in 0..last.shape()[0] {
            for t in 0..rank {
                inner += lambda[t] * mtt.get(&[i, t]) * last.get(&[i, t]);
            }
        }
        let resid_sq = (norm_t * norm_t - 2.0 * inner + norm_hat_sq).max(0.0);
        rel_error = resid_sq.sqrt() / norm_t;
        let fit = 1.0 - rel_error;
        // the cached formula cancels catastrophically near an exact fit, so
        // a residual this small means converged rather than a real digit
        if rel_error <= 1e-7 || (fit - prev_fit).abs() < 1e-10 {
            break;
        }
        prev_fit = fit;
    }

    // the sweep-loop fit is only good to ~sqrt(eps) relative; one dense
    // residual at the end is cheap and exact
    let dec_for_resid = CpDecomposition {
        factors: factors.clone(),
        lambda: lambda.clone(),
        rel_error,
        iters,
    };
    rel_error = dec_for_resid.reconstruct().residual_norm(t)? / norm_t;

    // order components by weight, heaviest first
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| lambda[b].partial_cmp(&lambda[a]).unwrap());
    let lambda_sorted: Vec<f64> = order.iter().map(|&t| lambda[t]).collect();
    let factors_sorted: Vec<DenseTensor> = factors
        .iter()
        .map(|f| {
            let n = f.shape()[0];
            DenseTensor::from_fn(&[n, rank], |idx| f.get(&[idx[0], order[idx[1]]]))
        })
        .collect();

    Ok(CpDecomposition {
        factors: factors_sorted,
        lambda: lambda_sorted,
        rel_error,
        iters,
    })
}

/// ALS from one random start.
pub fn cp_als(t: &DenseTensor, rank: usize, seed: u64, max_sweeps: usize) -> Result<CpDecomposition> {
    if rank == 0 {
        return Err(Error::InvalidArgument("cp rank must be positive".into()));
    }
    cp_als_with_init(t, random_factors(t.shape(), rank, seed), max_sweeps)
}

/// Best of several random restarts, judged by final relative error. ALS
/// only finds local optima, so a handful of seeded starts is cheap
/// insurance on the small tensors this library decomposes.
pub fn cp_als_restarts(
    t: &DenseTensor,
    rank: usize,
    restarts: usize,
    seed: u64,
    max_sweeps: usize,
) -> Result<CpDecomposition> {
    let mut best: Option<CpDecomposition> = None;
    for s in 0..restarts.max(1) {
        let mut r = rng::substream(seed, s as u64);
        let sub_seed: u64 = r.random();
        let cand = cp_als(t, rank, sub_seed, max_sweeps)?;
        let better = match &best {
            None => true,
            Some(b) => cand.rel_error < b.rel_error,
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one restart"))
}
