//! Low-rank structure of attention matrices, measured two ways.
//!
//! Vector space: ordinary SVD of the n x n matrix, where rank r costs r*n
//! parameters (one singular column vector per rank). Tensor space: the
//! matrix is rearranged so that Kronecker structure becomes low-rank
//! structure, after which rank r costs r * sum_i n_i^2 parameters. For two
//! blocks the rearrangement is a matrix and plain SVD applies; for three or
//! more it is a higher-order tensor and CP-ALS takes over.
//!
//! The rearrangement sends A[row, col] with row = (i_1..i_m) and
//! col = (j_1..j_m) in mixed radix over the block sizes to
//! T[p_1..p_m], p_t = i_t * n_t + j_t. If A = B_1 kron ... kron B_m the
//! image is the outer product of the row-major vec(B_t), so Kronecker rank
//! equals plain rank of the image. The map is a bijection on entries and
//! the inverse restores A exactly.

use crate::cp::{cp_als, cp_als_with_init, CpDecomposition};
use crate::error::{Error, Result};
use crate::rng;
use crate::svd::svd_descending;
use crate::tensor::DenseTensor;
use rand::Rng;

/// Block sizes {n_1..n_m} with product equal to the matrix side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KroneckerScheme {
    block_sizes: Vec<usize>,
}

impl KroneckerScheme {
    pub fn new(block_sizes: Vec<usize>) -> Result<Self> {
        if block_sizes.is_empty() {
            return Err(Error::InvalidArgument("empty kronecker scheme".into()));
        }
        if block_sizes.contains(&0) {
            return Err(Error::InvalidArgument("zero block size".into()));
        }
        Ok(KroneckerScheme { block_sizes })
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn order(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn side(&self) -> usize {
        self.block_sizes.iter().product()
    }

    pub fn label(&self) -> String {
        let parts: Vec<String> = self.block_sizes.iter().map(|n| n.to_string()).collect();
        parts.join("x")
    }

    fn check_matrix(&self, a: &DenseTensor) -> Result<()> {
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "kronecker analysis needs a square matrix, got {:?}",
                a.shape()
            )));
        }
        if a.shape()[0] != self.side() {
            return Err(Error::ShapeMismatch(format!(
                "scheme {} does not factor side {}",
                self.label(),
                a.shape()[0]
            )));
        }
        Ok(())
    }
}

fn mixed_radix(mut flat: usize, dims: &[usize], out: &mut [usize]) {
    for (ax, &n) in dims.iter().enumerate().rev() {
        out[ax] = flat % n;
        flat /= n;
    }
}

/// Rearrange a square matrix into the order-m tensor whose plain rank is the
/// Kronecker rank of the matrix under the given blocking. m = 2 yields the
/// classic [n_1^2, n_2^2] matrix.
pub fn rearrange_for_kronecker(a: &DenseTensor, scheme: &KroneckerScheme) -> Result<DenseTensor> {
    scheme.check_matrix(a)?;
    let dims = scheme.block_sizes();
    let m = dims.len();
    let n = scheme.side();
    let out_shape: Vec<usize> = dims.iter().map(|&d| d * d).collect();
    let mut out = DenseTensor::zeros(&out_shape);
    let src = a.data();
    let dst = out.data_mut();
    let mut ri = vec![0usize; m];
    let mut ci = vec![0usize; m];
    for row in 0..n {
        mixed_radix(row, dims, &mut ri);
        for col in 0..n {
            mixed_radix(col, dims, &mut ci);
            let mut p = 0usize;
            for t in 0..m {
                p = p * (dims[t] * dims[t]) + (ri[t] * dims[t] + ci[t]);
            }
            dst[p] = src[row * n + col];
        }
    }
    Ok(out)
}

/// Inverse of [`rearrange_for_kronecker`]: restores the original matrix.
pub fn rearrange_inverse(t: &DenseTensor, scheme: &KroneckerScheme) -> Result<DenseTensor> {
    let dims = scheme.block_sizes();
    let expect: Vec<usize> = dims.iter().map(|&d| d * d).collect();
    if t.shape() != expect.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "rearranged tensor shape {:?} does not match scheme {}",
            t.shape(),
            scheme.label()
        )));
    }
    let m = dims.len();
    let n = scheme.side();
    let mut out = DenseTensor::zeros(&[n, n]);
    let src = t.data();
    let dst = out.data_mut();
    let mut ri = vec![0usize; m];
    let mut ci = vec![0usize; m];
    for row in 0..n {
        mixed_radix(row, dims, &mut ri);
        for col in 0..n {
            mixed_radix(col, dims, &mut ci);
            let mut p = 0usize;
            for t in 0..m {
                p = p * (dims[t] * dims[t]) + (ri[t] * dims[t] + ci[t]);
            }
            dst[row * n + col] = src[p];
        }
    }
    Ok(out)
}

/// One row of an energy-vs-parameters curve.
#[derive(Debug, Clone)]
pub struct SpectrumPoint {
    pub rank: usize,
    /// normalized spectrum weight of this rank (sigma_r / sum sigma)
    pub sigma: f64,
    /// fraction of squared Frobenius norm captured at this rank
    pub cum_energy: f64,
    pub params: usize,
    pub rel_error: f64,
}

/// Spectrum of one analysis space: normalized singular values plus the
/// per-rank energy, parameter-count and error curves.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// "vector" or "tensor-m"
    pub space: String,
    /// "n" for vector space, "n1xn2x..." for tensor space
    pub scheme_label: String,
    /// descending, nonnegative, sums to 1 (all-zero input yields all zeros)
    pub singular_values: Vec<f64>,
    pub points: Vec<SpectrumPoint>,
}

impl SpectrumReport {
    /// Minimal rank whose captured energy reaches `threshold`.
    pub fn rank_for_energy(&self, threshold: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.cum_energy >= threshold)
            .map(|p| p.rank)
    }

    pub fn energy_at(&self, rank: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.rank == rank)
            .map(|p| p.cum_energy)
    }

    /// Count of spectrum weights above `tol` times the largest.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|&&s| s > tol * top)
            .count()
    }
}

fn normalize_spectrum(sigma: &[f64]) -> Vec<f64> {
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return vec![0.0; sigma.len()];
    }
    sigma.iter().map(|s| s / total).collect()
}

fn svd_report(
    m: &DenseTensor,
    space: String,
    scheme_label: String,
    params_per_rank: &dyn Fn(usize) -> usize,
    max_rank: Option<usize>,
) -> Result<SpectrumReport> {
    let svd = svd_descending(m)?;
    let total_sq: f64 = svd.sigma.iter().map(|s| s * s).sum();
    let count = max_rank
        .unwrap_or(svd.sigma.len())
        .min(svd.sigma.len())
        .max(1);
    let mut points = Vec::with_capacity(count);
    let mut head_sq = 0.0;
    let normalized = normalize_spectrum(&svd.sigma);
    for r in 1..=count {
        head_sq += svd.sigma[r - 1] * svd.sigma[r - 1];
        let (energy, rel) = if total_sq > 0.0 {
            let e = (head_sq / total_sq).min(1.0);
            (e, (1.0 - e).max(0.0).sqrt())
        } else {
            (1.0, 0.0)
        };
        points.push(SpectrumPoint {
            rank: r,
            sigma: normalized[r - 1],
            cum_energy: energy,
            params: params_per_rank(r),
            rel_error: rel,
        });
    }
    Ok(SpectrumReport {
        space,
        scheme_label,
        singular_values: normalized,
        points,
    })
}

/// Plain SVD spectrum of the matrix itself.
pub fn vector_spectrum(a: &DenseTensor, max_rank: Option<usize>) -> Result<SpectrumReport> {
    if a.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "vector spectrum needs a matrix, got rank {}",
            a.rank()
        )));
    }
    let n = a.shape()[0];
    svd_report(a, "vector".into(), n.to_string(), &|r| r * n, max_rank)
}

const CP_RESTARTS: usize = 5;
const CP_SWEEPS: usize = 200;
const DEFAULT_CP_MAX_RANK: usize = 8;

/// Spectrum in the rearranged (tensor) space. Two blocks reduce to an SVD;
/// three or more run a warm-started CP-ALS rank sweep with random restarts,
/// so the error curve is monotone by construction.
pub fn tensor_spectrum(
    a: &DenseTensor,
    scheme: &KroneckerScheme,
    max_rank: Option<usize>,
    seed: u64,
) -> Result<SpectrumReport> {
    scheme.check_matrix(a)?;
    let m = scheme.order();
    let params_for = |r: usize| r * scheme.block_sizes().iter().map(|&n| n * n).sum::<usize>();
    let space = format!("tensor-{m}");
    let rearranged = rearrange_for_kronecker(a, scheme)?;

    if m == 1 {
        // single block: vec(A) is a rank-1 "tensor" trivially
        let norm = rearranged.frobenius_norm();
        return Ok(SpectrumReport {
            space,
            scheme_label: scheme.label(),
            singular_values: vec![if norm > 0.0 { 1.0 } else { 0.0 }],
            points: vec![SpectrumPoint {
                rank: 1,
                sigma: if norm > 0.0 { 1.0 } else { 0.0 },
                cum_energy: 1.0,
                params: params_for(1),
                rel_error: 0.0,
            }],
        });
    }

    if m == 2 {
        let as_matrix = rearranged
            .clone()
            .reshape(&[rearranged.shape()[0], rearranged.shape()[1]])?;
        return svd_report(&as_matrix, space, scheme.label(), &params_for, max_rank);
    }

    // CP route: sweep ranks, warm-starting each from the previous solution
    // padded with one random column, plus seeded restarts
    let top_rank = max_rank
        .unwrap_or(DEFAULT_CP_MAX_RANK)
        .min(rearranged.len())
        .max(1);
    let norm = rearranged.frobenius_norm();
    let mut points = Vec::with_capacity(top_rank);
    let mut best_top: Option<CpDecomposition> = None;
    let mut prev: Option<CpDecomposition> = None;
    for r in 1..=top_rank {
        let mut best: Option<CpDecomposition> = None;
        let mut consider = |cand: CpDecomposition| {
            let better = match &best {
                None => true,
                Some(b) => cand.rel_error < b.rel_error,
            };
            if better {
                best = Some(cand);
            }
        };
        if let Some(p) = &prev {
            let mut rr = rng::substream(seed, 0x9000 + r as u64);
            let grown: Vec<DenseTensor> = p
                .factors
                .iter()
                .map(|f| {
                    let n = f.shape()[0];
                    let extra: Vec<f64> = (0..n).map(|_| rr.random_range(-1.0..1.0)).collect();
                    DenseTensor::from_fn(&[n, r], |idx| {
                        if idx[1] < p.rank() {
                            f.get(&[idx[0], idx[1]])
                        } else {
                            extra[idx[0]]
                        }
                    })
                })
                .collect();
            consider(cp_als_with_init(&rearranged, grown, CP_SWEEPS)?);
        }
        for s in 0..CP_RESTARTS {
            let mut rr = rng::substream(seed, (r as u64) << 8 | s as u64);
            let sub: u64 = rr.random();
            consider(cp_als(&rearranged, r, sub, CP_SWEEPS)?);
        }
        let chosen = best.expect("restarts > 0");
        let rel = chosen.rel_error;
        let energy = (1.0 - rel * rel).clamp(0.0, 1.0);
        points.push(SpectrumPoint {
            rank: r,
            sigma: 0.0, // filled below from the top-rank weights
            cum_energy: if norm > 0.0 { energy } else { 1.0 },
            params: params_for(r),
            rel_error: rel,
        });
        prev = Some(chosen.clone());
        best_top = Some(chosen);
    }
    let weights = best_top.map(|d| normalize_spectrum(&d.lambda)).unwrap_or_default();
    for (i, p) in points.iter_mut().enumerate() {
        p.sigma = weights.get(i).copied().unwrap_or(0.0);
    }
    Ok(SpectrumReport {
        space: format!("tensor-{m}"),
        scheme_label: scheme.label(),
        singular_values: weights,
        points,
    })
}

/// Vector-space report plus one tensor-space report per scheme.
pub fn analyze_attention(
    a: &DenseTensor,
    schemes: &[KroneckerScheme],
    max_rank: Option<usize>,
    seed: u64,
) -> Result<Vec<SpectrumReport>> {
    let mut reports = vec![vector_spectrum(a, max_rank)?];
    for s in schemes {
        reports.push(tensor_spectrum(a, s, max_rank, seed)?);
    }
    Ok(reports)
}

/// CSV body shared by the library and the CLI: one row per (space, rank).
pub fn spectrum_csv(reports: &[SpectrumReport]) -> String {
    let mut out = String::from("space,scheme,rank,sigma,cum_energy,params,rel_error\n");
    for rep in reports {
        for p in &rep.points {
            out.push_str(&format!(
                "{},{},{},{:.12e},{:.12e},{},{:.12e}\n",
                rep.space, rep.scheme_label, p.rank, p.sigma, p.cum_energy, p.params, p.rel_error
            ));
        }
    }
    out
}

/// Random matrix with exact Kronecker rank `r` under the scheme: a sum of r
/// Kronecker products of dense Gaussian blocks. Used by demos and tests.
pub fn synth_kronecker_sum(scheme: &KroneckerScheme, r: usize, seed: u64) -> DenseTensor {
    let n = scheme.side();
    let mut a = DenseTensor::zeros(&[n, n]);
    let m = scheme.order();
    let dims = scheme.block_sizes().to_vec();
    for j in 0..r {
        let mut rr = rng::substream(seed, j as u64);
        let blocks: Vec<DenseTensor> = dims
            .iter()
            .map(|&d| rng::normal_tensor(&[d, d], &mut rr))
            .collect();
        let mut ri = vec![0usize; m];
        let mut ci = vec![0usize; m];
        let data = a.data_mut();
        for row in 0..n {
            mixed_radix(row, &dims, &mut ri);
            for col in 0..n {
                mixed_radix(col, &dims, &mut ci);
                let mut v = 1.0;
                for t in 0..m {
                    v *= blocks[t].get(&[ri[t], ci[t]]);
                }
                data[row * n + col] += v;
            }
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kron2(b: &DenseTensor, c: &DenseTensor) -> DenseTensor {
        let (p, q) = (b.shape()[0], c.shape()[0]);
        DenseTensor::from_fn(&[p * q, p * q], |idx| {
            b.get(&[idx[0] / q, idx[1] / q]) * c.get(&[idx[0] % q, idx[1] % q])
        })
    }

    #[test]
    fn rearrangement_round_trips() {
        let mut r = rng::seeded(4);
        for dims in [vec![2usize, 3], vec![4, 3], vec![2, 2, 3]] {
            let scheme = KroneckerScheme::new(dims).unwrap();
            let n = scheme.side();
            let a = rng::normal_tensor(&[n, n], &mut r);
            let t = rearrange_for_kronecker(&a, &scheme).unwrap();
            let back = rearrange_inverse(&t, &scheme).unwrap();
            assert_eq!(back.data(), a.data());
        }
    }

    #[test]
    fn kronecker_product_rearranges_to_rank_one() {
        let mut r = rng::seeded(9);
        let b = rng::normal_tensor(&[3, 3], &mut r);
        let c = rng::normal_tensor(&[4, 4], &mut r);
        let a = kron2(&b, &c);
        let scheme = KroneckerScheme::new(vec![3, 4]).unwrap();
        let t = rearrange_for_kronecker(&a, &scheme).unwrap();
        let svd = svd_descending(&t).unwrap();
        assert!(svd.sigma[1] / svd.sigma[0] < 1e-12);
        // the rank-1 factors are vec(B) and vec(C) up to scale
        assert!((svd.sigma[0] - b.frobenius_norm() * c.frobenius_norm()).abs() < 1e-10);
    }

    #[test]
    fn identity_twelve_tensor_rank_one_vector_rank_twelve() {
        let a = DenseTensor::identity(12);
        let scheme = KroneckerScheme::new(vec![4, 3]).unwrap();
        let reports = analyze_attention(&a, &[scheme], None, 1).unwrap();
        let vector = &reports[0];
        let tensor = &reports[1];
        assert_eq!(vector.numerical_rank(1e-9), 12);
        assert_eq!(tensor.numerical_rank(1e-9), 1);
        assert!((tensor.energy_at(1).unwrap() - 1.0).abs() < 1e-12);
        // sigma_1 of the rearrangement is |vec I_4| * |vec I_3| = 2 sqrt(3)
        let t = rearrange_for_kronecker(&a, &KroneckerScheme::new(vec![4, 3]).unwrap()).unwrap();
        let svd = svd_descending(&t).unwrap();
        assert!((svd.sigma[0] - 2.0 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn scheme_two_one_is_a_reshape() {
        let a = DenseTensor::identity(2);
        let scheme = KroneckerScheme::new(vec![2, 1]).unwrap();
        let t = rearrange_for_kronecker(&a, &scheme).unwrap();
        assert_eq!(t.shape(), &[4, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
        let svd = svd_descending(&t).unwrap();
        assert_eq!(svd.sigma.iter().filter(|s| **s > 1e-12).count(), 1);
    }

    #[test]
    fn params_match_convention() {
        let scheme = KroneckerScheme::new(vec![8, 8, 8]).unwrap();
        let a = synth_kronecker_sum(&scheme, 1, 3);
        let rep = tensor_spectrum(&a, &scheme, Some(3), 5).unwrap();
        let p3 = rep.points.iter().find(|p| p.rank == 3).unwrap();
        assert_eq!(p3.params, 576);
        let vec_rep = vector_spectrum(&a, Some(3)).unwrap();
        assert_eq!(vec_rep.points[2].params, 3 * 512);
    }

    #[test]
    fn tensor2_error_equals_rearranged_vector_error() {
        let mut r = rng::seeded(17);
        let scheme = KroneckerScheme::new(vec![4, 5]).unwrap();
        let n = scheme.side();
        let a = rng::normal_tensor(&[n, n], &mut r);
        let t2 = tensor_spectrum(&a, &scheme, None, 1).unwrap();
        let rearranged = rearrange_for_kronecker(&a, &scheme).unwrap();
        let flat = vector_spectrum(&rearranged, None).unwrap();
        for (a_pt, b_pt) in t2.points.iter().zip(&flat.points) {
            assert!((a_pt.rel_error - b_pt.rel_error).abs() < 1e-10);
        }
    }

    #[test]
    fn kronecker_sum_recovered_at_its_rank() {
        let scheme = KroneckerScheme::new(vec![5, 4]).unwrap();
        let a = synth_kronecker_sum(&scheme, 3, 21);
        let rep = tensor_spectrum(&a, &scheme, Some(6), 2).unwrap();
        assert!(rep.energy_at(3).unwrap() > 0.999999, "{:?}", rep.points);
        assert_eq!(rep.rank_for_energy(0.999).unwrap(), 3);
    }

    #[test]
    fn cp_route_identity_512_is_rank_one() {
        let a = DenseTensor::identity(512);
        let scheme = KroneckerScheme::new(vec![8, 8, 8]).unwrap();
        let rep = tensor_spectrum(&a, &scheme, Some(2), 7).unwrap();
        assert!(rep.points[0].rel_error < 1e-7, "{:?}", rep.points);
        assert!((rep.energy_at(1).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn energy_monotone_error_monotone() {
        let mut r = rng::seeded(33);
        let a = rng::normal_tensor(&[24, 24], &mut r);
        let scheme3 = KroneckerScheme::new(vec![2, 3, 4]).unwrap();
        for rep in analyze_attention(&a, &[scheme3], Some(5), 11).unwrap() {
            for w in rep.points.windows(2) {
                assert!(w[1].cum_energy >= w[0].cum_energy - 1e-9, "{:?}", rep.space);
                assert!(w[1].rel_error <= w[0].rel_error + 1e-9);
            }
            let sum: f64 = rep.singular_values.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for w in rep.singular_values.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }

    #[test]
    fn csv_has_pinned_header() {
        let a = DenseTensor::identity(6);
        let scheme = KroneckerScheme::new(vec![3, 2]).unwrap();
        let reports = analyze_attention(&a, &[scheme], Some(2), 1).unwrap();
        let csv = spectrum_csv(&reports);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "space,scheme,rank,sigma,cum_energy,params,rel_error"
        );
        assert!(csv.contains("vector,6,1,"));
        assert!(csv.contains("tensor-2,3x2,1,"));
    }

    #[test]
    fn rejects_bad_scheme() {
        let a = DenseTensor::identity(6);
        let scheme = KroneckerScheme::new(vec![4, 2]).unwrap();
        assert!(tensor_spectrum(&a, &scheme, None, 1).is_err());
        assert!(KroneckerScheme::new(vec![]).is_err());
    }
}
