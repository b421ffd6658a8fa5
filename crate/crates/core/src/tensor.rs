//! Dense row-major tensors and the reshaping primitives everything else is
//! built on: tensorization of a token sequence, mode-i flatten/fold, batched
//! matrix products, and masked softmax.
//!
//! All numeric state is `f64`. Layout is row-major (last axis fastest), so a
//! trailing feature axis is always contiguous and per-row operations reduce to
//! slice arithmetic.

use crate::error::{Error, Result};

// ── dense tensor ─────────────────────────────────────────────────────────────

/// Row-major dense tensor of `f64` with explicit extents.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Wraps `data` with the given extents. The element count must match the
    /// product of the extents and every extent must be nonzero.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch("tensor rank must be at least 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index, row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut coords = vec![0usize; shape.len()];
        for _ in 0..numel {
            data.push(f(&coords));
            // odometer increment, last axis fastest
            for ax in (0..shape.len()).rev() {
                coords[ax] += 1;
                if coords[ax] < shape[ax] {
                    break;
                }
                coords[ax] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// n-by-n identity.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Linear offset of a full multi-index.
    pub fn offset_of(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for ax in (0..self.shape.len()).rev() {
            debug_assert!(coords[ax] < self.shape[ax]);
            off += coords[ax] * stride;
            stride *= self.shape[ax];
        }
        off
    }

    pub fn get(&self, coords: &[usize]) -> f64 {
        self.data[self.offset_of(coords)]
    }

    pub fn set(&mut self, coords: &[usize], value: f64) {
        let off = self.offset_of(coords);
        self.data[off] = value;
    }

    /// Reinterprets the buffer under new extents. Pure metadata change, the
    /// element order is untouched; the element counts must agree.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements to {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// Elementwise `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "diff: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Frobenius norm of the elementwise difference. Shapes must match.
    pub fn residual_norm(&self, other: &DenseTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "diff: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

// ── boolean mask tensor ──────────────────────────────────────────────────────

/// Dense boolean tensor, row-major, used for attention masks. `true` means the
/// entry is allowed to attend.
#[derive(Debug, Clone, PartialEq)]
pub struct BoolTensor {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolTensor {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("bad mask shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {shape:?} wants {numel} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: &[usize], value: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Lower-triangular (causal) n-by-n mask: row r may attend to columns <= r.
    pub fn causal(n: usize) -> Self {
        let mut data = vec![false; n * n];
        for r in 0..n {
            for c in 0..=r {
                data[r * n + c] = true;
            }
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// How softmax treats a row whose entries are all masked out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskPolicy {
    /// A fully masked row is an error.
    #[default]
    Strict,
    /// A fully masked row produces an all-zero output row.
    Permissive,
}

// ── tensorization scheme ─────────────────────────────────────────────────────

/// A factorization of the sequence length into per-dimension extents, plus the
/// feature width carried along as a trailing axis.
///
/// Dimension 0 is the most significant axis of the reshaped sequence: token
/// `t` lands at multi-index `(t / (n_2*...*n_m), ..., t mod n_m)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorizationScheme {
    dims: Vec<usize>,
    feature_dim: usize,
}

impl TensorizationScheme {
    pub fn new(dims: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("scheme needs at least one dimension".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero extent in dims {dims:?}")));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature dim must be nonzero".into()));
        }
        Ok(Self { dims, feature_dim })
    }

    /// Per-dimension extents, most significant first.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of sequence dimensions m.
    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// Total sequence length n, the product of the extents.
    pub fn seq_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of fibers along dimension `i`, i.e. the batch size of the
    /// mode-i flattening: product of all other extents.
    pub fn batch_size(&self, i: usize) -> usize {
        self.seq_len() / self.dims[i]
    }

    /// Full tensorized shape: the extents followed by the feature axis.
    pub fn tensor_shape(&self) -> Vec<usize> {
        let mut s = self.dims.clone();
        s.push(self.feature_dim);
        s
    }

    /// Picks extents for `n` with as few dimensions as possible subject to a
    /// per-dimension cap, preferring near-equal factors. The extents come out
    /// largest first. Errors if `n` has a prime factor above the cap.
    pub fn balanced(n: usize, cap: usize, feature_dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("sequence length must be nonzero".into()));
        }
        if cap < 2 {
            return Err(Error::InvalidArgument("dimension cap must be at least 2".into()));
        }
        if n == 1 {
            return Self::new(vec![1], feature_dim);
        }
        // Smallest m that could possibly work is ceil(log_cap n); search up
        // from there so the order stays minimal.
        let mut m = 1usize;
        while cap.checked_pow(m as u32).is_some_and(|p| p < n) {
            m += 1;
        }
        while m <= 64 {
            if let Some(mut dims) = balanced_split(n, m, cap) {
                dims.sort_unstable_by(|a, b| b.cmp(a));
                return Self::new(dims, feature_dim);
            }
            m += 1;
        }
        Err(Error::InvalidArgument(format!(
            "no factorization of {n} with every extent <= {cap}"
        )))
    }
}

/// Splits `n` into exactly `parts` divisors each <= cap, greedily preferring
/// factors closest to n^(1/parts) in log space.
fn balanced_split(n: usize, parts: usize, cap: usize) -> Option<Vec<usize>> {
    if parts == 1 {
        return (n <= cap).then(|| vec![n]);
    }
    let ideal = (n as f64).ln() / parts as f64;
    let mut divisors: Vec<usize> = (1..=cap.min(n)).filter(|d| n.is_multiple_of(*d)).collect();
    divisors.sort_by(|a, b| {
        let da = ((*a as f64).ln() - ideal).abs();
        let db = ((*b as f64).ln() - ideal).abs();
        da.partial_cmp(&db).unwrap()
    });
    for d in divisors {
        if let Some(mut rest) = balanced_split(n / d, parts - 1, cap) {
            rest.insert(0, d);
            return Some(rest);
        }
    }
    None
}

/// Reshapes a `[n, d]` token sequence into the scheme's tensor layout
/// `[n_1, ..., n_m, d]`. Token `t` occupies the mixed-radix multi-index of `t`
/// over the extents; pure metadata, no data movement.
pub fn tensorize(seq: DenseTensor, scheme: &TensorizationScheme) -> Result<DenseTensor> {
    if seq.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "tensorize expects [n, d], got {:?}",
            seq.shape()
        )));
    }
    if seq.shape()[0] != scheme.seq_len() || seq.shape()[1] != scheme.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "sequence {:?} does not match scheme dims {:?} with feature {}",
            seq.shape(),
            scheme.dims(),
            scheme.feature_dim()
        )));
    }
    seq.reshape(&scheme.tensor_shape())
}

/// Inverse of [`tensorize`]: flattens the tensor layout back to `[n, d]`.
pub fn detensorize(t: DenseTensor, scheme: &TensorizationScheme) -> Result<DenseTensor> {
    if t.shape() != scheme.tensor_shape().as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "tensor {:?} does not match scheme shape {:?}",
            t.shape(),
            scheme.tensor_shape()
        )));
    }
    t.reshape(&[scheme.seq_len(), scheme.feature_dim()])
}

// ── mode-i flatten and fold ──────────────────────────────────────────────────

/// Iterates the batch coordinates of a mode-`i` flattening: every multi-index
/// over `dims` with axis `i` removed, row-major over the remaining axes, in
/// ascending axis order. Calls `f(batch_index, base_offset)` where
/// `base_offset` is the linear offset (in units of feature rows) of the fiber
/// start, so element `(b, k)` of the flattening lives at
/// `base_offset + k * stride_i`.
pub(crate) fn for_each_fiber(dims: &[usize], i: usize, mut f: impl FnMut(usize, usize)) {
    let strides = strides_of(dims);
    let rest: Vec<usize> = (0..dims.len()).filter(|&ax| ax != i).collect();
    let batch: usize = rest.iter().map(|&ax| dims[ax]).product();
    let mut coords = vec![0usize; rest.len()];
    for b in 0..batch {
        let base: usize = rest
            .iter()
            .zip(&coords)
            .map(|(&ax, &c)| c * strides[ax])
            .sum();
        f(b, base);
        for pos in (0..rest.len()).rev() {
            coords[pos] += 1;
            if coords[pos] < dims[rest[pos]] {
                break;
            }
            coords[pos] = 0;
        }
    }
}

fn split_seq_feature(shape: &[usize], seq_dims: usize) -> Result<(Vec<usize>, usize)> {
    if shape.len() == seq_dims {
        Ok((shape.to_vec(), 1))
    } else if shape.len() == seq_dims + 1 {
        Ok((shape[..seq_dims].to_vec(), shape[seq_dims]))
    } else {
        Err(Error::ShapeMismatch(format!(
            "tensor of rank {} cannot have {seq_dims} sequence dims",
            shape.len()
        )))
    }
}

/// Mode-`i` flattening: views `[n_1, ..., n_m, d]` (the feature axis is
/// optional, `d = 1` without it) as a batch of length-`n_i` fibers and lays
/// them out as `[B, n_i, d]` with `B` the product of the other extents. Batch
/// order is row-major over the remaining sequence axes in ascending order.
pub fn mode_flatten(t: &DenseTensor, i: usize, seq_dims: usize) -> Result<DenseTensor> {
    let (dims, d) = split_seq_feature(t.shape(), seq_dims)?;
    if i >= seq_dims {
        return Err(Error::DimIndexOutOfRange {
            index: i,
            rank: seq_dims,
        });
    }
    let n_i = dims[i];
    let batch: usize = dims.iter().product::<usize>() / n_i;
    let stride_i = strides_of(&dims)[i];
    let src = t.data();
    let mut out = vec![0.0f64; batch * n_i * d];
    for_each_fiber(&dims, i, |b, base| {
        let dst_fiber = &mut out[b * n_i * d..(b + 1) * n_i * d];
        for k in 0..n_i {
            let s = (base + k * stride_i) * d;
            dst_fiber[k * d..(k + 1) * d].copy_from_slice(&src[s..s + d]);
        }
    });
    DenseTensor::new(vec![batch, n_i, d], out)
}

/// Inverse of [`mode_flatten`]: scatters `[B, n_i, d]` fibers back into a
/// tensor of shape `target_shape` (which must be the shape the flattening came
/// from). Bit-exact round trip: fold(flatten(t)) == t.
pub fn mode_fold(
    flat: &DenseTensor,
    i: usize,
    target_shape: &[usize],
    seq_dims: usize,
) -> Result<DenseTensor> {
    let (dims, d) = split_seq_feature(target_shape, seq_dims)?;
    if i >= seq_dims {
        return Err(Error::DimIndexOutOfRange {
            index: i,
            rank: seq_dims,
        });
    }
    let n_i = dims[i];
    let batch: usize = dims.iter().product::<usize>() / n_i;
    if flat.shape() != [batch, n_i, d] {
        return Err(Error::ShapeMismatch(format!(
            "fold expects [{batch}, {n_i}, {d}], got {:?}",
            flat.shape()
        )));
    }
    let stride_i = strides_of(&dims)[i];
    let src = flat.data();
    let mut out = vec![0.0f64; batch * n_i * d];
    for_each_fiber(&dims, i, |b, base| {
        let src_fiber = &src[b * n_i * d..(b + 1) * n_i * d];
        for k in 0..n_i {
            let dst = (base + k * stride_i) * d;
            out[dst..dst + d].copy_from_slice(&src_fiber[k * d..(k + 1) * d]);
        }
    });
    DenseTensor::new(target_shape.to_vec(), out)
}

// ── parallel batch helper ────────────────────────────────────────────────────

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Configures the worker count for batch-parallel kernels. `1` (the default)
/// keeps everything on the calling thread. Results are bit-identical at any
/// setting: parallelism only ever splits the batch axis into disjoint output
/// slices, never a floating-point reduction.
pub fn set_threads(n: usize) {
    let n = n.max(1);
    if n > 1 {
        // Ignore the error if a global pool already exists, e.g. when called twice.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    THREADS.store(n, Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Runs `f(batch_index, out_chunk)` over equal disjoint chunks of `out`,
/// in parallel when [`set_threads`] enabled it.
pub(crate) fn for_each_chunk(out: &mut [f64], chunk: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if threads() > 1 && out.len() > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(b, c)| f(b, c));
    } else {
        for (b, c) in out.chunks_mut(chunk).enumerate() {
            f(b, c);
        }
    }
}

// ── batched matrix products ──────────────────────────────────────────────────

fn check_batched_3(t: &DenseTensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects a rank-3 [B, rows, cols] tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Batched product `out[b] = a[b] * b2[b]` for `a: [B, p, q]`, `b2: [B, q, r]`.
pub fn batched_matmul(a: &DenseTensor, b2: &DenseTensor) -> Result<DenseTensor> {
    let (ba, p, q) = check_batched_3(a, "matmul lhs")?;
    let (bb, q2, r) = check_batched_3(b2, "matmul rhs")?;
    if ba != bb || q != q2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul: {:?} vs {:?}",
            a.shape(),
            b2.shape()
        )));
    }
    let mut out = vec![0.0f64; ba * p * r];
    let ad = a.data();
    let bd = b2.data();
    for_each_chunk(&mut out, p * r, |b, chunk| {
        let ab = &ad[b * p * q..(b + 1) * p * q];
        let bb_ = &bd[b * q * r..(b + 1) * q * r];
        matmul_into(ab, bb_, chunk, p, q, r);
    });
    DenseTensor::new(vec![ba, p, r], out)
}

/// Batched product with the left operand transposed:
/// `out[b] = a[b]^T * b2[b]` for `a: [B, q, p]`, `b2: [B, q, r]`.
pub fn batched_matmul_transa(a: &DenseTensor, b2: &DenseTensor) -> Result<DenseTensor> {
    let (ba, q, p) = check_batched_3(a, "matmul lhs")?;
    let (bb, q2, r) = check_batched_3(b2, "matmul rhs")?;
    if ba != bb || q != q2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul transa: {:?} vs {:?}",
            a.shape(),
            b2.shape()
        )));
    }
    let mut out = vec![0.0f64; ba * p * r];
    let ad = a.data();
    let bd = b2.data();
    for_each_chunk(&mut out, p * r, |b, chunk| {
        let ab = &ad[b * q * p..(b + 1) * q * p];
        let bb_ = &bd[b * q * r..(b + 1) * q * r];
        // out[i, j] += a[k, i] * b[k, j]; k outer keeps both reads contiguous.
        for k in 0..q {
            let arow = &ab[k * p..(k + 1) * p];
            let brow = &bb_[k * r..(k + 1) * r];
            for i in 0..p {
                let aik = arow[i];
                if aik == 0.0 {
                    continue;
                }
                let orow = &mut chunk[i * r..(i + 1) * r];
                for j in 0..r {
                    orow[j] += aik * brow[j];
                }
            }
        }
    });
    DenseTensor::new(vec![ba, p, r], out)
}

/// Batched product with the right operand transposed:
/// `out[b] = a[b] * b2[b]^T` for `a: [B, p, d]`, `b2: [B, r, d]`.
/// This is the score kernel: rows of both operands are contiguous.
pub fn batched_matmul_transb(a: &DenseTensor, b2: &DenseTensor) -> Result<DenseTensor> {
    let (ba, p, d) = check_batched_3(a, "matmul lhs")?;
    let (bb, r, d2) = check_batched_3(b2, "matmul rhs")?;
    if ba != bb || d != d2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul transb: {:?} vs {:?}",
            a.shape(),
            b2.shape()
        )));
    }
    let mut out = vec![0.0f64; ba * p * r];
    let ad = a.data();
    let bd = b2.data();
    for_each_chunk(&mut out, p * r, |b, chunk| {
        let ab = &ad[b * p * d..(b + 1) * p * d];
        let bb_ = &bd[b * r * d..(b + 1) * r * d];
        matmul_transb_into(ab, bb_, chunk, p, r, d, 1.0);
    });
    DenseTensor::new(vec![ba, p, r], out)
}

/// `out += a * b` for row-major `a: p x q`, `b: q x r`, `out: p x r`.
/// ikj loop order keeps the inner traversals contiguous.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for j in 0..r {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// `out += scale * a * b^T` in 64x64 tiles: `a: p x d`, `b: r x d`, `out: p x r`.
/// The tiling bounds the working set regardless of p and r.
pub(crate) fn matmul_transb_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    p: usize,
    r: usize,
    d: usize,
    scale: f64,
) {
    debug_assert_eq!(a.len(), p * d);
    debug_assert_eq!(b.len(), r * d);
    debug_assert_eq!(out.len(), p * r);
    const TILE: usize = 64;
    for i0 in (0..p).step_by(TILE) {
        let i1 = (i0 + TILE).min(p);
        for j0 in (0..r).step_by(TILE) {
            let j1 = (j0 + TILE).min(r);
            for i in i0..i1 {
                let arow = &a[i * d..(i + 1) * d];
                let orow = &mut out[i * r..(i + 1) * r];
                for j in j0..j1 {
                    let brow = &b[j * d..(j + 1) * d];
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += arow[t] * brow[t];
                    }
                    orow[j] += scale * acc;
                }
            }
        }
    }
}

/// Plain 2-D product `a * b` for `a: [p, q]`, `b: [q, r]`.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0f64; p * r];
    matmul_into(a.data(), b.data(), &mut out, p, q, r);
    DenseTensor::new(vec![p, r], out)
}

/// `a^T * b` for `a: [q, p]`, `b: [q, r]`.
pub fn matmul_transa(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul transa: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (q, p, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0f64; p * r];
    for k in 0..q {
        let arow = &a.data()[k * p..(k + 1) * p];
        let brow = &b.data()[k * r..(k + 1) * r];
        for i in 0..p {
            let aik = arow[i];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] += aik * brow[j];
            }
        }
    }
    DenseTensor::new(vec![p, r], out)
}

/// `a * b^T` for `a: [p, d]`, `b: [r, d]`.
pub fn matmul_transb(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "matmul transb: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (p, d, r) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![0.0f64; p * r];
    matmul_transb_into(a.data(), b.data(), &mut out, p, r, d, 1.0);
    DenseTensor::new(vec![p, r], out)
}

// ── masked softmax ───────────────────────────────────────────────────────────

/// Softmax of one row in place. `allowed` gives the mask slice for the row
/// (None means everything allowed). Masked entries come out exactly 0.0 and
/// allowed entries sum to 1. The max is subtracted before exponentiation, so
/// the result is invariant to a constant shift of the row.
pub(crate) fn softmax_row_in_place(
    row: &mut [f64],
    allowed: Option<&[bool]>,
    policy: MaskPolicy,
    row_id: usize,
) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if allowed.is_none_or(|m| m[j]) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        // every entry masked out
        return match policy {
            MaskPolicy::Strict => Err(Error::FullyMaskedRow { row: row_id }),
            MaskPolicy::Permissive => {
                row.fill(0.0);
                Ok(())
            }
        };
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if allowed.is_none_or(|m| m[j]) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// Softmax along the last axis with an optional boolean mask.
///
/// The mask broadcasts by suffix alignment: its shape must equal the trailing
/// axes of `t`, and it repeats over the leading axes. Masked entries are
/// exactly 0 in the output; each surviving row sums to 1 (within roundoff).
/// Under [`MaskPolicy::Strict`] a fully masked row is an error; under
/// [`MaskPolicy::Permissive`] it becomes a zero row.
pub fn softmax_last_axis(
    t: &DenseTensor,
    mask: Option<&BoolTensor>,
    policy: MaskPolicy,
) -> Result<DenseTensor> {
    let cols = *t.shape().last().expect("rank >= 1");
    if let Some(m) = mask {
        let mr = m.shape().len();
        if mr > t.rank() || m.shape() != &t.shape()[t.rank() - mr..] {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} is not a trailing-shape suffix of {:?}",
                m.shape(),
                t.shape()
            )));
        }
    }
    let mut out = t.data().to_vec();
    let rows = out.len() / cols;
    // Suffix alignment in row-major order makes broadcasting periodic: the
    // mask row for flat row r is r modulo the mask's row count.
    let mask_rows = mask.map(|m| m.len() / cols);
    let err = std::sync::Mutex::new(None::<Error>);
    {
        let err = &err;
        for_each_chunk(&mut out, cols, |r, chunk| {
            let allowed = mask.map(|m| {
                let mr = r % mask_rows.unwrap();
                &m.data()[mr * cols..(mr + 1) * cols]
            });
            if let Err(e) = softmax_row_in_place(chunk, allowed, policy, r) {
                let mut g = err.lock().unwrap();
                // keep the smallest offending row id for a deterministic error
                let replace = match g.as_ref() {
                    Some(Error::FullyMaskedRow { row }) => r < *row,
                    Some(_) => false,
                    None => true,
                };
                if replace {
                    *g = Some(e);
                }
            }
        });
    }
    if let Some(e) = err.into_inner().unwrap() {
        return Err(e);
    }
    debug_assert_eq!(rows * cols, t.len());
    DenseTensor::new(t.shape().to_vec(), out)
}

// ── tests ────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[7]), vec![1]);
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(DenseTensor::new(vec![], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn from_fn_row_major_order() {
        let t = DenseTensor::from_fn(&[2, 3], |c| (c[0] * 10 + c[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn reshape_preserves_element_order() {
        let t = DenseTensor::new(vec![2, 3], (0..6).map(|x| x as f64).collect()).unwrap();
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn mode_flatten_transposes_2d() {
        // flattening [2, 2] along dim 0 groups columns into fibers:
        // [[1, 2], [3, 4]] -> batch over dim 1, fibers [1, 3] and [2, 4]
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = mode_flatten(&t, 0, 2).unwrap();
        assert_eq!(f.shape(), &[2, 2, 1]);
        assert_eq!(f.data(), &[1.0, 3.0, 2.0, 4.0]);
        // dim 1 fibers are the rows themselves
        let f1 = mode_flatten(&t, 1, 2).unwrap();
        assert_eq!(f1.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mode_flatten_matches_index_enumeration() {
        // independent oracle: place each element by explicit multi-index walk
        let dims = [2usize, 3, 4];
        let d = 5usize;
        let shape = [2usize, 3, 4, 5];
        let t = DenseTensor::from_fn(&shape, |c| {
            (c[0] * 1000 + c[1] * 100 + c[2] * 10 + c[3]) as f64
        });
        for i in 0..3 {
            let f = mode_flatten(&t, i, 3).unwrap();
            let rest: Vec<usize> = (0..3).filter(|&ax| ax != i).collect();
            let mut b = 0usize;
            let mut rc = [0usize; 2];
            loop {
                for k in 0..dims[i] {
                    for ft in 0..d {
                        let mut full = vec![0usize; 4];
                        full[i] = k;
                        for (pos, &ax) in rest.iter().enumerate() {
                            full[ax] = rc[pos];
                        }
                        full[3] = ft;
                        assert_eq!(f.get(&[b, k, ft]), t.get(&full));
                    }
                }
                b += 1;
                let mut pos = 1isize;
                loop {
                    if pos < 0 {
                        break;
                    }
                    rc[pos as usize] += 1;
                    if rc[pos as usize] < dims[rest[pos as usize]] {
                        break;
                    }
                    rc[pos as usize] = 0;
                    pos -= 1;
                }
                if rc.iter().all(|&c| c == 0) {
                    break;
                }
            }
            assert_eq!(b, 24 / dims[i]);
        }
    }

    #[test]
    fn fold_round_trips() {
        let t = DenseTensor::from_fn(&[3, 4, 2, 6], |c| {
            c.iter().enumerate().map(|(i, &x)| (i + 1) * x).sum::<usize>() as f64 + 0.25
        });
        for i in 0..3 {
            let f = mode_flatten(&t, i, 3).unwrap();
            let back = mode_fold(&f, i, t.shape(), 3).unwrap();
            assert_eq!(back, t);
        }
        // no feature axis: seq_dims == rank
        let t2 = DenseTensor::from_fn(&[3, 4], |c| (c[0] * 7 + c[1]) as f64);
        let f2 = mode_flatten(&t2, 1, 2).unwrap();
        assert_eq!(f2.shape(), &[3, 4, 1]);
        let back2 = mode_fold(&f2, 1, t2.shape(), 2).unwrap();
        assert_eq!(back2, t2);
    }

    #[test]
    fn flatten_rejects_bad_dims() {
        let t = DenseTensor::zeros(&[2, 3, 4]);
        assert!(mode_flatten(&t, 3, 3).is_err());
        assert!(mode_flatten(&t, 0, 1).is_err());
    }

    #[test]
    fn batched_matmul_known_product() {
        let a = DenseTensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DenseTensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = batched_matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = crate::rng::seeded(7);
        let a = crate::rng::normal_tensor(&[3, 4, 5], &mut rng);
        let b = crate::rng::normal_tensor(&[3, 5, 6], &mut rng);
        let c = batched_matmul(&a, &b).unwrap();
        for bt in 0..3 {
            for i in 0..4 {
                for j in 0..6 {
                    let mut acc = 0.0;
                    for k in 0..5 {
                        acc += a.get(&[bt, i, k]) * b.get(&[bt, k, j]);
                    }
                    assert!((c.get(&[bt, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
        // transb: scores layout
        let q = crate::rng::normal_tensor(&[2, 4, 3], &mut rng);
        let k = crate::rng::normal_tensor(&[2, 5, 3], &mut rng);
        let s = batched_matmul_transb(&q, &k).unwrap();
        for bt in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for t in 0..3 {
                        acc += q.get(&[bt, i, t]) * k.get(&[bt, j, t]);
                    }
                    assert!((s.get(&[bt, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
        // transa
        let at = crate::rng::normal_tensor(&[2, 5, 4], &mut rng);
        let bt_ = crate::rng::normal_tensor(&[2, 5, 6], &mut rng);
        let ct = batched_matmul_transa(&at, &bt_).unwrap();
        for b2 in 0..2 {
            for i in 0..4 {
                for j in 0..6 {
                    let mut acc = 0.0;
                    for k2 in 0..5 {
                        acc += at.get(&[b2, k2, i]) * bt_.get(&[b2, k2, j]);
                    }
                    assert!((ct.get(&[b2, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tiled_transb_matches_untiled_on_large_rows() {
        // exercise several tile boundaries: 63, 64, 65, 130 rows
        let mut rng = crate::rng::seeded(11);
        for &(p, r) in &[(63usize, 65usize), (64, 64), (65, 63), (130, 70)] {
            let a = crate::rng::normal_tensor(&[1, p, 7], &mut rng);
            let b = crate::rng::normal_tensor(&[1, r, 7], &mut rng);
            let c = batched_matmul_transb(&a, &b).unwrap();
            for i in (0..p).step_by(17) {
                for j in (0..r).step_by(13) {
                    let mut acc = 0.0;
                    for t in 0..7 {
                        acc += a.get(&[0, i, t]) * b.get(&[0, j, t]);
                    }
                    assert!((c.get(&[0, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_known_values() {
        // softmax([0, ln 3]) = [1/4, 3/4]
        let t = DenseTensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap();
        let s = softmax_last_axis(&t, None, MaskPolicy::Strict).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = crate::rng::seeded(3);
        let t = crate::rng::normal_tensor(&[4, 5, 9], &mut rng);
        let s = softmax_last_axis(&t, None, MaskPolicy::Strict).unwrap();
        for row in s.data().chunks(9) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let mut shifted = t.clone();
        for row in shifted.data_mut().chunks_mut(9) {
            for x in row {
                *x += 123.456;
            }
        }
        let s2 = softmax_last_axis(&shifted, None, MaskPolicy::Strict).unwrap();
        assert!(s.max_abs_diff(&s2).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_extreme_rows_stay_finite() {
        let t = DenseTensor::new(vec![1, 3], vec![1e6, 1e6 - 700.0, -1e6]).unwrap();
        let s = softmax_last_axis(&t, None, MaskPolicy::Strict).unwrap();
        assert!(s.data().iter().all(|x| x.is_finite()));
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_entries_are_exact_zeros() {
        let t = DenseTensor::new(vec![2, 3], vec![5.0, 1.0, 2.0, 0.5, 0.25, 0.125]).unwrap();
        let mask = BoolTensor::new(vec![3], vec![true, false, true]).unwrap();
        let s = softmax_last_axis(&t, Some(&mask), MaskPolicy::Strict).unwrap();
        assert_eq!(s.get(&[0, 1]), 0.0);
        assert_eq!(s.get(&[1, 1]), 0.0);
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| s.get(&[r, c])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_suffix_broadcast_mask() {
        // [n, n] mask broadcast over batch [B, n, n]
        let mut rng = crate::rng::seeded(5);
        let t = crate::rng::normal_tensor(&[3, 4, 4], &mut rng);
        let causal = BoolTensor::causal(4);
        let s = softmax_last_axis(&t, Some(&causal), MaskPolicy::Strict).unwrap();
        for b in 0..3 {
            for r in 0..4 {
                for c in (r + 1)..4 {
                    assert_eq!(s.get(&[b, r, c]), 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_fully_masked_row_policies() {
        let t = DenseTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let none = BoolTensor::new(vec![2], vec![false, false]).unwrap();
        match softmax_last_axis(&t, Some(&none), MaskPolicy::Strict) {
            Err(Error::FullyMaskedRow { row: 0 }) => {}
            other => panic!("expected strict fully-masked error, got {other:?}"),
        }
        let s = softmax_last_axis(&t, Some(&none), MaskPolicy::Permissive).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn scheme_basics() {
        let s = TensorizationScheme::new(vec![4, 3], 2).unwrap();
        assert_eq!(s.seq_len(), 12);
        assert_eq!(s.order(), 2);
        assert_eq!(s.batch_size(0), 3);
        assert_eq!(s.batch_size(1), 4);
        assert_eq!(s.tensor_shape(), vec![4, 3, 2]);
        assert!(TensorizationScheme::new(vec![], 2).is_err());
        assert!(TensorizationScheme::new(vec![4, 0], 2).is_err());
        assert!(TensorizationScheme::new(vec![4], 0).is_err());
    }

    #[test]
    fn tensorize_round_trip() {
        let s = TensorizationScheme::new(vec![2, 3], 4).unwrap();
        let seq = DenseTensor::from_fn(&[6, 4], |c| (c[0] * 10 + c[1]) as f64);
        let t = tensorize(seq.clone(), &s).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4]);
        // token 5 sits at multi-index (1, 2)
        assert_eq!(t.get(&[1, 2, 0]), 50.0);
        let back = detensorize(t, &s).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn balanced_scheme_policy() {
        let cases: &[(usize, &[usize])] = &[
            (1024, &[32, 32]),
            (2048, &[16, 16, 8]),
            (4096, &[16, 16, 16]),
            (8192, &[32, 16, 16]),
            (16384, &[32, 32, 16]),
            (64, &[8, 8]),
            (256, &[16, 16]),
            (1, &[1]),
            (30, &[30]),
        ];
        for &(n, want) in cases {
            let s = TensorizationScheme::balanced(n, 32, 1).unwrap();
            assert_eq!(s.dims(), want, "n = {n}");
        }
        // prime above the cap has no admissible factorization
        assert!(TensorizationScheme::balanced(37, 32, 1).is_err());
    }
}
