//! Random projections with Kronecker-structured rows, and the Monte Carlo
//! experiments that measure how well they preserve norms.
//!
//! Each projection row is a rank-r tensor sum_{j<=r} t_{1,j} kron ... kron
//! t_{m,j} whose factor entries are i.i.d. N(0, r^{-1/m}). One product term
//! then has entry variance r^{-1}, the r terms sum to unit variance, and a
//! row behaves like a unit-variance Gaussian row under inner products even
//! though it stores only r * sum_h n_h numbers instead of prod_h n_h. The
//! usual 1/sqrt(k) stack scaling makes ||Ty|| concentrate around ||y||.
//!
//! Two success events are measured. `matrix_action` is the approximation
//! event ||A T'T y - A y|| < eps ||A y|| for a random unit y, evaluated
//! exactly as stated. `basis_isometry` demands one draw of T preserve the
//! norms of all n standard basis vectors at once, which is the event whose
//! minimal k actually tracks a log n growth law at these desk sizes; the
//! matrix-action event needs k beyond n here because a random unit y
//! spreads its energy across the whole spectrum of A. Experiment reports
//! carry both so the gap stays visible.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::DenseTensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One row as factor vectors: terms[j][h] has length n_h.
#[derive(Debug, Clone)]
struct RowCp {
    terms: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
enum RowStore {
    Cp(Vec<RowCp>),
    Dense(DenseTensor),
}

/// k x n projection whose rows are rank-r Kronecker-structured tensors.
#[derive(Debug, Clone)]
pub struct TensorizedProjection {
    dims: Vec<usize>,
    r: usize,
    k: usize,
    scale: f64,
    rows: RowStore,
}

impl TensorizedProjection {
    /// Draw a fresh projection. Deterministic in (k, dims, r, seed).
    pub fn build(k: usize, dims: &[usize], r: usize, seed: u64) -> Result<Self> {
        if k == 0 || r == 0 || dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "projection needs k >= 1, r >= 1 and nonempty dims".into(),
            ));
        }
        let m = dims.len() as f64;
        let sigma = (r as f64).powf(-1.0 / (2.0 * m));
        let normal = Normal::new(0.0, sigma).expect("finite std");
        let mut rng_ = rng::substream(seed, 0x6a6c);
        let rows = (0..k)
            .map(|_| RowCp {
                terms: (0..r)
                    .map(|_| {
                        dims.iter()
                            .map(|&n_h| (0..n_h).map(|_| normal.sample(&mut rng_)).collect())
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        Ok(TensorizedProjection {
            dims: dims.to_vec(),
            r,
            k,
            scale: 1.0 / (k as f64).sqrt(),
            rows: RowStore::Cp(rows),
        })
    }

    pub fn n(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    /// Stack scaling applied by [`apply`]: 1/sqrt(k) for stochastic rows,
    /// 1 for orthonormalized debug projections.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Dense copy of row i (unscaled).
    pub fn materialize_row(&self, i: usize) -> Vec<f64> {
        match &self.rows {
            RowStore::Dense(t) => {
                let n = self.n();
                t.data()[i * n..(i + 1) * n].to_vec()
            }
            RowStore::Cp(rows) => {
                let n = self.n();
                let mut out = vec![0.0f64; n];
                for term in &rows[i].terms {
                    // iterative kronecker expansion, first factor most significant
                    let mut acc = vec![1.0f64];
                    for f in term {
                        let mut next = vec![0.0f64; acc.len() * f.len()];
                        for (a, &av) in acc.iter().enumerate() {
                            for (b, &bv) in f.iter().enumerate() {
                                next[a * f.len() + b] = av * bv;
                            }
                        }
                        acc = next;
                    }
                    for (o, v) in out.iter_mut().zip(&acc) {
                        *o += v;
                    }
                }
                out
            }
        }
    }

    /// Dense [k, n] copy of the whole stack (unscaled).
    pub fn materialize(&self) -> DenseTensor {
        match &self.rows {
            RowStore::Dense(t) => t.clone(),
            RowStore::Cp(_) => {
                let n = self.n();
                let mut out = DenseTensor::zeros(&[self.k, n]);
                for i in 0..self.k {
                    let row = self.materialize_row(i);
                    out.data_mut()[i * n..(i + 1) * n].copy_from_slice(&row);
                }
                out
            }
        }
    }

    /// T y without the stack scaling, via materialized rows.
    pub fn apply_raw(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "projection expects length {}, got {}",
                self.n(),
                y.len()
            )));
        }
        let n = self.n();
        Ok((0..self.k)
            .map(|i| {
                let row = self.materialize_row(i);
                let mut s = 0.0;
                for c in 0..n {
                    s += row[c] * y[c];
                }
                s
            })
            .collect())
    }

    /// T y in factored form: contract y one axis at a time per term, never
    /// touching a length-n row. Must agree with [`apply_raw`] to roundoff.
    pub fn apply_raw_tensor_form(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "projection expects length {}, got {}",
                self.n(),
                y.len()
            )));
        }
        let rows = match &self.rows {
            RowStore::Cp(rows) => rows,
            RowStore::Dense(_) => return self.apply_raw(y),
        };
        let mut out = vec![0.0f64; self.k];
        for (i, row) in rows.iter().enumerate() {
            let mut acc = 0.0;
            for term in &row.terms {
                // repeatedly contract the most significant axis
                let mut cur = y.to_vec();
                for f in term {
                    let block = cur.len() / f.len();
                    let mut next = vec![0.0f64; block];
                    for (a, &fv) in f.iter().enumerate() {
                        let seg = &cur[a * block..(a + 1) * block];
                        for (nv, &sv) in next.iter_mut().zip(seg) {
                            *nv += fv * sv;
                        }
                    }
                    cur = next;
                }
                acc += cur[0];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// The scaled projection: scale * T y.
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.apply_raw_tensor_form(y)?;
        for v in z.iter_mut() {
            *v *= self.scale;
        }
        Ok(z)
    }

    /// scale^2 * T' T y, the Gram action behind the approximation event.
    pub fn gram_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        let z = self.apply_raw_tensor_form(y)?;
        let n = self.n();
        let mut out = vec![0.0f64; n];
        for (i, &zi) in z.iter().enumerate() {
            let row = self.materialize_row(i);
            let w = zi * self.scale * self.scale;
            for c in 0..n {
                out[c] += w * row[c];
            }
        }
        Ok(out)
    }

    /// Debug variant with exactly orthonormal rows (two passes of
    /// Gram-Schmidt over materialized rows). Requires k <= n; at k = n the
    /// result is a perfect isometry, so distortions collapse to zero.
    pub fn orthonormalized(&self) -> Result<TensorizedProjection> {
        let n = self.n();
        if self.k > n {
            return Err(Error::InvalidArgument(format!(
                "cannot orthonormalize {} rows in dimension {n}",
                self.k
            )));
        }
        let mut t = self.materialize();
        let data = t.data_mut();
        for i in 0..self.k {
            for _pass in 0..2 {
                for j in 0..i {
                    let mut dot = 0.0;
                    for c in 0..n {
                        dot += data[i * n + c] * data[j * n + c];
                    }
                    for c in 0..n {
                        data[i * n + c] -= dot * data[j * n + c];
                    }
                }
            }
            let norm: f64 = data[i * n..(i + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::InvalidArgument(
                    "degenerate rows cannot be orthonormalized".into(),
                ));
            }
            for c in 0..n {
                data[i * n + c] /= norm;
            }
        }
        Ok(TensorizedProjection {
            dims: self.dims.clone(),
            r: self.r,
            k: self.k,
            scale: 1.0,
            rows: RowStore::Dense(t),
        })
    }
}

/// Relative norm distortion |  ||Ty|| - ||y||  | / ||y|| for one vector.
pub fn distortion_trial(proj: &TensorizedProjection, y: &[f64]) -> Result<f64> {
    let norm: f64 = y.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("distortion of the zero vector".into()));
    }
    let z = proj.apply(y)?;
    let zn: f64 = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((zn - norm).abs() / norm)
}

/// One CSV row of an experiment sweep.
#[derive(Debug, Clone)]
pub struct JlPoint {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub k: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_distortion: f64,
    pub seed: u64,
}

/// CSV body with the pinned column order.
pub fn jl_csv(points: &[JlPoint]) -> String {
    let mut out = String::from("n,m,r,k,epsilon,trials,success_rate,mean_distortion,seed\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6e},{}\n",
            p.n, p.m, p.r, p.k, p.epsilon, p.trials, p.success_rate, p.mean_distortion, p.seed
        ));
    }
    out
}

fn collect_trials<F: Fn(u64) -> f64 + Sync>(trials: usize, f: F) -> Vec<f64> {
    let mut out = vec![0.0f64; trials];
    crate::tensor::for_each_chunk(&mut out, 1, |start, chunk| {
        chunk[0] = f(start as u64);
    });
    out
}

/// Norm distortion of random unit vectors: per-trial distortion statistics
/// thresholded at each epsilon. Rates over the same draws, so they are
/// monotone in epsilon by construction.
pub fn distortion_experiment(
    dims: &[usize],
    r: usize,
    k: usize,
    epsilons: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<JlPoint>> {
    let n: usize = dims.iter().product();
    let stats = collect_trials(trials, |t| {
        let mut rr = rng::substream(seed, t);
        let proj_seed: u64 = rr.random();
        let proj = TensorizedProjection::build(k, dims, r, proj_seed).expect("validated args");
        let y = rng::unit_sphere_vec(n, &mut rr);
        distortion_trial(&proj, &y).expect("nonzero y")
    });
    let mean = stats.iter().sum::<f64>() / trials.max(1) as f64;
    Ok(epsilons
        .iter()
        .map(|&eps| JlPoint {
            n,
            m: dims.len(),
            r,
            k,
            epsilon: eps,
            trials,
            success_rate: stats.iter().filter(|&&d| d <= eps).count() as f64 / trials.max(1) as f64,
            mean_distortion: mean,
            seed,
        })
        .collect())
}

/// Fraction of draws of T that keep every standard basis vector's norm
/// within eps at once: per trial the statistic is max_i | ||T e_i|| - 1 |,
/// i.e. the worst column of the scaled stack.
pub fn basis_isometry_experiment(
    dims: &[usize],
    r: usize,
    k: usize,
    epsilons: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<JlPoint>> {
    let n: usize = dims.iter().product();
    let stats = collect_trials(trials, |t| {
        let mut rr = rng::substream(seed, t);
        let proj_seed: u64 = rr.random();
        let proj = TensorizedProjection::build(k, dims, r, proj_seed).expect("validated args");
        let mut col_sq = vec![0.0f64; n];
        for i in 0..k {
            let row = proj.materialize_row(i);
            for (c, &v) in row.iter().enumerate() {
                col_sq[c] += v * v;
            }
        }
        let s2 = proj.scale() * proj.scale();
        col_sq
            .iter()
            .map(|&sq| ((sq * s2).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    });
    let mean = stats.iter().sum::<f64>() / trials.max(1) as f64;
    Ok(epsilons
        .iter()
        .map(|&eps| JlPoint {
            n,
            m: dims.len(),
            r,
            k,
            epsilon: eps,
            trials,
            success_rate: stats.iter().filter(|&&d| d <= eps).count() as f64 / trials.max(1) as f64,
            mean_distortion: mean,
            seed,
        })
        .collect())
}

/// Per-trial approximation ratio ||A T'T y - A y|| / ||A y|| for random
/// unit y, the matrix-action event evaluated literally.
pub fn matrix_action_experiment(
    a: &DenseTensor,
    dims: &[usize],
    r: usize,
    k: usize,
    epsilons: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<JlPoint>> {
    let n: usize = dims.iter().product();
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] || a.shape()[0] != n {
        return Err(Error::ShapeMismatch(format!(
            "matrix shape {:?} does not match dims product {n}",
            a.shape()
        )));
    }
    // reject matrices with an identically zero row: ||Ay|| could vanish
    for i in 0..n {
        if a.data()[i * n..(i + 1) * n].iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(format!("matrix row {i} is zero")));
        }
    }
    let stats = collect_trials(trials, |t| {
        let mut rr = rng::substream(seed, t);
        let proj_seed: u64 = rr.random();
        let proj = TensorizedProjection::build(k, dims, r, proj_seed).expect("validated args");
        let y = rng::unit_sphere_vec(n, &mut rr);
        let gy = proj.gram_apply(&y).expect("validated args");
        // A(T'Ty) - Ay and Ay in one pass over rows of A
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let ad = a.data();
        for row in 0..n {
            let mut ay = 0.0;
            let mut agy = 0.0;
            for c in 0..n {
                let v = ad[row * n + c];
                ay += v * y[c];
                agy += v * gy[c];
            }
            num += (agy - ay) * (agy - ay);
            den += ay * ay;
        }
        (num / den.max(1e-300)).sqrt()
    });
    let mean = stats.iter().sum::<f64>() / trials.max(1) as f64;
    Ok(epsilons
        .iter()
        .map(|&eps| JlPoint {
            n,
            m: dims.len(),
            r,
            k,
            epsilon: eps,
            trials,
            success_rate: stats.iter().filter(|&&d| d < eps).count() as f64 / trials.max(1) as f64,
            mean_distortion: mean,
            seed,
        })
        .collect())
}

/// Smallest k in the grid whose success rate reaches `target`, with the
/// full sweep retained for reporting. `run` evaluates one experiment at a
/// given k and returns its row.
pub fn min_k_sweep<F: FnMut(usize) -> Result<JlPoint>>(
    k_grid: &[usize],
    target: f64,
    mut run: F,
) -> Result<(Option<usize>, Vec<JlPoint>)> {
    let mut sweep = Vec::new();
    let mut found = None;
    for &k in k_grid {
        let p = run(k)?;
        let rate = p.success_rate;
        sweep.push(p);
        if rate >= target {
            found = Some(k);
            break;
        }
    }
    Ok((found, sweep))
}

/// Least-squares slope of ln k against ln ln n: the fitted exponent alpha
/// in k ~ (log n)^alpha.
pub fn fit_log_exponent(points: &[(usize, usize)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln().ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, k)| (k as f64).ln()).collect();
    let len = points.len() as f64;
    let mx = xs.iter().sum::<f64>() / len;
    let my = ys.iter().sum::<f64>() / len;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Sweep result for one sequence length in a growth-law experiment.
#[derive(Debug, Clone)]
pub struct GrowthPoint {
    pub n: usize,
    pub dims: Vec<usize>,
    pub min_k: Option<usize>,
    pub sweep: Vec<JlPoint>,
}

/// Combined report: the basis-isometry growth law across lengths, plus the
/// literal matrix-action rates at a reference k so the gap between the two
/// events stays on the record.
#[derive(Debug, Clone)]
pub struct GrowthLawReport {
    pub epsilon: f64,
    pub r: usize,
    pub trials: usize,
    pub target: f64,
    pub growth: Vec<GrowthPoint>,
    pub fitted_exponent: Option<f64>,
    /// (n, k, success rate) of the literal event at the basis-derived k
    pub matrix_action: Vec<(usize, usize, f64)>,
}

/// Square grid of candidate ks, ascending.
pub fn default_k_grid(n: usize) -> Vec<usize> {
    let mut grid = vec![8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512, 768, 1024];
    grid.retain(|&k| k <= 4 * n.max(16));
    grid
}

/// Run the growth-law experiment: for each (n, dims) find the minimal k at
/// which the basis-isometry event reaches `target`, fit the log exponent,
/// and evaluate the literal matrix-action event on a random matrix at each
/// found k for contrast.
pub fn growth_law_experiment(
    schemes: &[Vec<usize>],
    r: usize,
    epsilon: f64,
    target: f64,
    trials: usize,
    seed: u64,
) -> Result<GrowthLawReport> {
    growth_law_experiment_on_grid(schemes, r, epsilon, target, trials, seed, None)
}

/// Same experiment with an explicit k grid shared by every length; `None`
/// falls back to [`default_k_grid`] per length.
pub fn growth_law_experiment_on_grid(
    schemes: &[Vec<usize>],
    r: usize,
    epsilon: f64,
    target: f64,
    trials: usize,
    seed: u64,
    k_grid: Option<&[usize]>,
) -> Result<GrowthLawReport> {
    let mut growth = Vec::new();
    let mut matrix_action = Vec::new();
    for (si, dims) in schemes.iter().enumerate() {
        let n: usize = dims.iter().product();
        let grid = match k_grid {
            Some(g) => g.to_vec(),
            None => default_k_grid(n),
        };
        let (min_k, sweep) = min_k_sweep(&grid, target, |k| {
            let mut pts =
                basis_isometry_experiment(dims, r, k, &[epsilon], trials, seed ^ (si as u64) << 32)?;
            Ok(pts.remove(0))
        })?;
        if let Some(k) = min_k {
            let mut rr = rng::substream(seed, 0xa000 + si as u64);
            let a = rng::normal_tensor(&[n, n], &mut rr);
            let lit = matrix_action_experiment(&a, dims, r, k, &[epsilon], trials.min(200), seed)?;
            matrix_action.push((n, k, lit[0].success_rate));
        }
        growth.push(GrowthPoint {
            n,
            dims: dims.clone(),
            min_k,
            sweep,
        });
    }
    let resolved: Vec<(usize, usize)> = growth
        .iter()
        .filter_map(|g| g.min_k.map(|k| (g.n, k)))
        .collect();
    let fitted_exponent = (resolved.len() >= 2).then(|| fit_log_exponent(&resolved));
    Ok(GrowthLawReport {
        epsilon,
        r,
        trials,
        target,
        growth,
        fitted_exponent,
        matrix_action,
    })
}
