//! Attention over flat and tensorized sequences.
//!
//! The tensorized forward reshapes a length-n sequence into an order-m tensor
//! and runs one batched softmax-attention update per dimension, each update
//! confined to the fibers of that dimension. A brute-force composite-operator
//! oracle materializes the induced n-by-n linear map for cross-checking, and
//! an analytically derived backward pass supplies exact gradients.
//!
//! The per-dimension updates do not commute in general: each fiber gets its
//! own attention matrix, so permuting the update order changes the output
//! (see [`order_spread`]). What is order-invariant is the staged contraction
//! of a fixed joint attention matrix against the value tensor, one key axis
//! at a time ([`staged_value_contraction`]); that distinction is load-bearing
//! for the verification suite.

use crate::error::{Error, Result};
use crate::position::{apply_rope_inverse, apply_tensorized_rope, RopeConfig, RopeMode};
use crate::tensor::{
    batched_matmul, batched_matmul_transa, batched_matmul_transb, for_each_fiber, matmul_into,
    matmul_transb_into, mode_flatten, mode_fold, softmax_last_axis, softmax_row_in_place,
    strides_of, BoolTensor, DenseTensor, MaskPolicy, TensorizationScheme,
};

// ── per-dimension masks ──────────────────────────────────────────────────────

/// Mask for one dimension's update.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskEntry {
    /// No restriction.
    AllAllowed,
    /// One n_i x n_i pattern shared by every fiber of the dimension.
    Shared(BoolTensor),
    /// A separate n_i x n_i pattern per fiber: shape [B, n_i, n_i].
    Batched(BoolTensor),
}

/// Per-dimension attention masks, one entry per sequence dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DimMask {
    entries: Vec<MaskEntry>,
}

impl DimMask {
    pub fn new(entries: Vec<MaskEntry>) -> Self {
        Self { entries }
    }

    /// No masking on any of the m dimensions.
    pub fn all_allowed(m: usize) -> Self {
        Self {
            entries: vec![MaskEntry::AllAllowed; m],
        }
    }

    /// Causal within every dimension: position j may attend to positions
    /// <= j along each axis independently. This is hierarchical causality
    /// over the coordinate tuple, not flat-sequence causality.
    pub fn hierarchical_causal(scheme: &TensorizationScheme) -> Self {
        Self {
            entries: scheme
                .dims()
                .iter()
                .map(|&n_i| MaskEntry::Shared(BoolTensor::causal(n_i)))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn validate(&self, scheme: &TensorizationScheme) -> Result<()> {
        if self.entries.len() != scheme.order() {
            return Err(Error::ShapeMismatch(format!(
                "{} mask entries for {} dimensions",
                self.entries.len(),
                scheme.order()
            )));
        }
        for (i, entry) in self.entries.iter().enumerate() {
            let n_i = scheme.dims()[i];
            match entry {
                MaskEntry::AllAllowed => {}
                MaskEntry::Shared(m) => {
                    if m.shape() != [n_i, n_i] {
                        return Err(Error::ShapeMismatch(format!(
                            "shared mask for dim {i} has shape {:?}, want [{n_i}, {n_i}]",
                            m.shape()
                        )));
                    }
                }
                MaskEntry::Batched(m) => {
                    let b = scheme.batch_size(i);
                    if m.shape() != [b, n_i, n_i] {
                        return Err(Error::ShapeMismatch(format!(
                            "batched mask for dim {i} has shape {:?}, want [{b}, {n_i}, {n_i}]",
                            m.shape()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Mask for dimension `i` in the suffix-broadcast form the batched
    /// softmax consumes, or None when everything is allowed.
    pub(crate) fn suffix_mask(&self, i: usize) -> Option<&BoolTensor> {
        match &self.entries[i] {
            MaskEntry::AllAllowed => None,
            MaskEntry::Shared(m) | MaskEntry::Batched(m) => Some(m),
        }
    }
}

/// Combined n-by-n mask of the joint (flat-sequence) attention induced by
/// per-dimension masks: token t may attend to token s iff every dimension
/// allows the corresponding coordinate pair. Requires shared (or all-allowed)
/// entries, since a per-fiber mask has no joint counterpart.
pub fn joint_mask(scheme: &TensorizationScheme, masks: &DimMask) -> Result<Option<BoolTensor>> {
    masks.validate(scheme)?;
    if masks
        .entries()
        .iter()
        .all(|e| matches!(e, MaskEntry::AllAllowed))
    {
        return Ok(None);
    }
    let shared: Vec<Option<&BoolTensor>> = masks
        .entries()
        .iter()
        .map(|e| match e {
            MaskEntry::AllAllowed => Ok(None),
            MaskEntry::Shared(m) => Ok(Some(m)),
            MaskEntry::Batched(_) => Err(Error::InvalidArgument(
                "joint mask requires shared per-dimension masks".into(),
            )),
        })
        .collect::<Result<_>>()?;
    let n = scheme.seq_len();
    let dims = scheme.dims();
    let mut data = vec![false; n * n];
    let mut tc = vec![0usize; dims.len()];
    for t in 0..n {
        let mut sc = vec![0usize; dims.len()];
        for s in 0..n {
            data[t * n + s] = shared
                .iter()
                .enumerate()
                .all(|(i, m)| m.is_none_or(|m| m.data()[tc[i] * dims[i] + sc[i]]));
            incr(&mut sc, dims);
        }
        incr(&mut tc, dims);
    }
    Ok(Some(BoolTensor::new(vec![n, n], data)?))
}

fn incr(coords: &mut [usize], dims: &[usize]) {
    for ax in (0..dims.len()).rev() {
        coords[ax] += 1;
        if coords[ax] < dims[ax] {
            return;
        }
        coords[ax] = 0;
    }
}

// ── cost accounting ──────────────────────────────────────────────────────────

/// Multiply counts of one attention application, split by phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounts {
    pub scores: u128,
    pub softmax: u128,
    pub update: u128,
}

impl FlopCounts {
    pub fn total(&self) -> u128 {
        self.scores + self.softmax + self.update
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Full,
    Tensorized,
}

/// Closed-form multiply counts: full attention costs n^2 d for scores, n^2
/// for softmax, n^2 d for the value update; the tensorized variant pays
/// n * n_i (* d) per dimension, since dimension i runs n/n_i fibers of an
/// n_i x n_i attention each.
pub fn flop_estimate(scheme: &TensorizationScheme, variant: AttentionVariant) -> FlopCounts {
    let n = scheme.seq_len() as u128;
    let d = scheme.feature_dim() as u128;
    match variant {
        AttentionVariant::Full => FlopCounts {
            scores: n * n * d,
            softmax: n * n,
            update: n * n * d,
        },
        AttentionVariant::Tensorized => {
            let per_dim: u128 = scheme.dims().iter().map(|&n_i| n * n_i as u128).sum();
            FlopCounts {
                scores: per_dim * d,
                softmax: per_dim,
                update: per_dim * d,
            }
        }
    }
}

// ── full attention ───────────────────────────────────────────────────────────

/// Reference softmax attention over a flat `[n, d]` sequence with score scale
/// `1/sqrt(d)`. Streams 64-row query blocks so no n-by-n matrix is ever
/// materialized; memory stays O(block * n).
pub fn full_attention(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    mask: Option<&BoolTensor>,
    policy: MaskPolicy,
) -> Result<DenseTensor> {
    let d = check_flat_inputs(q, k, v)?;
    full_attention_scaled(q, k, v, mask, policy, 1.0 / (d as f64).sqrt())
}

/// [`full_attention`] with an explicit score scale.
pub fn full_attention_scaled(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    mask: Option<&BoolTensor>,
    policy: MaskPolicy,
    scale: f64,
) -> Result<DenseTensor> {
    let d = check_flat_inputs(q, k, v)?;
    let n = q.shape()[0];
    if let Some(m) = mask {
        if m.shape() != [n, n] {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} for n = {n}",
                m.shape()
            )));
        }
    }
    const BLOCK: usize = 64;
    let mut out = vec![0.0f64; n * d];
    let mut scores = vec![0.0f64; BLOCK * n];
    for r0 in (0..n).step_by(BLOCK) {
        let rows = (r0 + BLOCK).min(n) - r0;
        let block = &mut scores[..rows * n];
        block.fill(0.0);
        matmul_transb_into(
            &q.data()[r0 * d..(r0 + rows) * d],
            k.data(),
            block,
            rows,
            n,
            d,
            scale,
        );
        for r in 0..rows {
            let allowed = mask.map(|m| &m.data()[(r0 + r) * n..(r0 + r + 1) * n]);
            softmax_row_in_place(&mut block[r * n..(r + 1) * n], allowed, policy, r0 + r)?;
        }
        matmul_into(block, v.data(), &mut out[r0 * d..(r0 + rows) * d], rows, n, d);
    }
    DenseTensor::new(vec![n, d], out)
}

fn check_flat_inputs(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor) -> Result<usize> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "{name} must be [n, d], got {:?}",
                t.shape()
            )));
        }
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?} must match",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(q.shape()[1])
}

// ── tensorized forward ───────────────────────────────────────────────────────

/// Everything the backward pass needs, saved by the forward: per-dimension
/// attention weights, the value-tensor state after every stage, and the
/// (rotated) flattened queries and keys each stage actually used.
#[derive(Debug, Clone)]
pub struct AttentionIntermediates {
    /// A_i for each dimension i, shape [prod_{j != i} n_j, n_i, n_i],
    /// indexed by dimension (not by stage).
    pub per_dim_weights: Vec<DenseTensor>,
    /// Value states O(0) .. O(m) in chronological stage order; O(0) is the
    /// input V and O(m) the forward output.
    pub value_snapshots: Vec<DenseTensor>,
    /// Dimension index processed at each stage.
    pub order: Vec<usize>,
    /// Flattened, position-rotated queries and keys per dimension.
    pub stage_q: Vec<DenseTensor>,
    pub stage_k: Vec<DenseTensor>,
    pub scheme: TensorizationScheme,
    pub rope: Option<RopeConfig>,
}

/// Tensorized attention forward in ascending dimension order: initialize
/// O = V, then for each dimension flatten, attend within fibers, and fold
/// back. Returns the output and the intermediates for [`tensorized_attention_backward`].
pub fn tensorized_attention_forward(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    scheme: &TensorizationScheme,
    masks: &DimMask,
    rope: Option<&RopeConfig>,
    policy: MaskPolicy,
) -> Result<(DenseTensor, AttentionIntermediates)> {
    let order: Vec<usize> = (0..scheme.order()).collect();
    tensorized_attention_forward_ordered(q, k, v, scheme, masks, rope, policy, &order)
}

/// [`tensorized_attention_forward`] with an explicit dimension-update order.
/// The order matters: each fiber carries its own attention matrix, so the
/// per-dimension operators do not commute for generic inputs.
#[allow(clippy::too_many_arguments)]
pub fn tensorized_attention_forward_ordered(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    scheme: &TensorizationScheme,
    masks: &DimMask,
    rope: Option<&RopeConfig>,
    policy: MaskPolicy,
    order: &[usize],
) -> Result<(DenseTensor, AttentionIntermediates)> {
    check_tensor_inputs(q, k, v, scheme)?;
    masks.validate(scheme)?;
    check_order(order, scheme.order())?;
    if let Some(cfg) = rope {
        if cfg.mode != RopeMode::PerDimension {
            return Err(Error::InvalidArgument(
                "tensorized attention applies rotations per dimension; use RopeMode::PerDimension"
                    .into(),
            ));
        }
        if cfg.head_dim != scheme.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "rotary head dim {} vs feature dim {}",
                cfg.head_dim,
                scheme.feature_dim()
            )));
        }
    }
    let m = scheme.order();
    let scale = 1.0 / (scheme.feature_dim() as f64).sqrt();
    let mut o = v.clone();
    let mut snapshots = Vec::with_capacity(m + 1);
    snapshots.push(v.clone());
    let mut weights: Vec<Option<DenseTensor>> = vec![None; m];
    let mut stage_q: Vec<Option<DenseTensor>> = vec![None; m];
    let mut stage_k: Vec<Option<DenseTensor>> = vec![None; m];
    for &i in order {
        let mut qi = mode_flatten(q, i, m)?;
        let mut ki = mode_flatten(k, i, m)?;
        if let Some(cfg) = rope {
            let (qr, kr) = apply_tensorized_rope(&qi, &ki, i, scheme, cfg)?;
            qi = qr;
            ki = kr;
        }
        let mut scores = batched_matmul_transb(&qi, &ki)?;
        scores.scale(scale);
        let a = softmax_last_axis(&scores, masks.suffix_mask(i), policy)?;
        let oi = mode_flatten(&o, i, m)?;
        let oi_new = batched_matmul(&a, &oi)?;
        o = mode_fold(&oi_new, i, v.shape(), m)?;
        weights[i] = Some(a);
        stage_q[i] = Some(qi);
        stage_k[i] = Some(ki);
        snapshots.push(o.clone());
    }
    let inter = AttentionIntermediates {
        per_dim_weights: weights.into_iter().map(|w| w.unwrap()).collect(),
        value_snapshots: snapshots,
        order: order.to_vec(),
        stage_q: stage_q.into_iter().map(|w| w.unwrap()).collect(),
        stage_k: stage_k.into_iter().map(|w| w.unwrap()).collect(),
        scheme: scheme.clone(),
        rope: rope.cloned(),
    };
    Ok((o, inter))
}

fn check_tensor_inputs(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    scheme: &TensorizationScheme,
) -> Result<()> {
    let want = scheme.tensor_shape();
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "{name} has shape {:?}, scheme wants {want:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn check_order(order: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    if order.len() != m {
        return Err(Error::InvalidArgument(format!(
            "update order {order:?} must list each of {m} dimensions once"
        )));
    }
    for &i in order {
        if i >= m || seen[i] {
            return Err(Error::InvalidArgument(format!(
                "update order {order:?} must be a permutation of 0..{m}"
            )));
        }
        seen[i] = true;
    }
    Ok(())
}

/// All permutations of 0..m in a deterministic order.
pub fn permutations(m: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for idx in 0..rest.len() {
            let x = rest.remove(idx);
            prefix.push(x);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(idx, x);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..m).collect(), &mut out);
    out
}

/// Largest deviation of the forward output across all m! dimension-update
/// orders, measured against the ascending order. Nonzero in general: the
/// per-fiber attention matrices of different dimensions do not commute.
pub fn order_spread(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    scheme: &TensorizationScheme,
    masks: &DimMask,
    rope: Option<&RopeConfig>,
    policy: MaskPolicy,
) -> Result<f64> {
    let mut spread = 0.0f64;
    let mut reference: Option<DenseTensor> = None;
    for order in permutations(scheme.order()) {
        let (out, _) =
            tensorized_attention_forward_ordered(q, k, v, scheme, masks, rope, policy, &order)?;
        match &reference {
            None => reference = Some(out),
            Some(r) => spread = spread.max(r.max_abs_diff(&out)?),
        }
    }
    Ok(spread)
}

// ── staged contraction of the joint attention ────────────────────────────────

/// Contracts the joint flat-sequence attention (softmax over the full key
/// index, per-dimension masks combined into their joint cone) against the
/// value tensor one key axis at a time, in the given axis order.
///
/// Unlike the per-dimension softmax updates, this staged value updating is a
/// plain reassociation of one fixed multilinear sum, so every axis order
/// yields the same output up to roundoff, and the result equals full
/// attention under the joint mask. Streams one query row at a time; memory
/// stays O(n * d).
pub fn staged_value_contraction(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    scheme: &TensorizationScheme,
    masks: &DimMask,
    policy: MaskPolicy,
    order: &[usize],
) -> Result<DenseTensor> {
    check_tensor_inputs(q, k, v, scheme)?;
    check_order(order, scheme.order())?;
    let n = scheme.seq_len();
    let d = scheme.feature_dim();
    let joint = joint_mask(scheme, masks)?;
    let scale = 1.0 / (d as f64).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let dims = scheme.dims().to_vec();
    let mut out = vec![0.0f64; n * d];
    let mut row = vec![0.0f64; n];
    let mut prod = vec![0.0f64; n * d];
    for t in 0..n {
        row.fill(0.0);
        matmul_transb_into(&qd[t * d..(t + 1) * d], kd, &mut row, 1, n, d, scale);
        let allowed = joint.as_ref().map(|m| &m.data()[t * n..(t + 1) * n]);
        softmax_row_in_place(&mut row, allowed, policy, t)?;
        // elementwise A[t, w] * V[w, :], then sum the key axes in the given
        // order; each stage collapses one axis of the [n_1..n_m, d] block
        for (w, &a) in row.iter().enumerate() {
            for f in 0..d {
                prod[w * d + f] = a * vd[w * d + f];
            }
        }
        let mut shape: Vec<usize> = dims.clone();
        let mut live = prod[..n * d].to_vec();
        for &ax in order {
            live = sum_axis(&live, &shape, ax, d);
            shape[ax] = 1;
        }
        debug_assert_eq!(live.len(), d);
        out[t * d..(t + 1) * d].copy_from_slice(&live);
    }
    DenseTensor::new(vec![n, d], out)
}

/// Sums a row-major `[shape.., d]` buffer over sequence axis `ax`, keeping
/// that axis at extent 1. Summation runs in ascending index order.
fn sum_axis(data: &[f64], shape: &[usize], ax: usize, d: usize) -> Vec<f64> {
    let strides = strides_of(shape);
    let total: usize = shape.iter().product();
    let n_ax = shape[ax];
    let out_len = total / n_ax * d;
    let mut out = vec![0.0f64; out_len];
    for_each_fiber(shape, ax, |b, base| {
        let dst = &mut out[b * d..(b + 1) * d];
        for kx in 0..n_ax {
            let src = (base + kx * strides[ax]) * d;
            for f in 0..d {
                dst[f] += data[src + f];
            }
        }
    });
    // fiber order over the remaining axes is exactly the row-major layout of
    // the shape with extent 1 at `ax`, so the caller can keep indexing it
    out
}

// ── composite operator oracle ────────────────────────────────────────────────

/// Operand side large enough to need refusal rather than materialization.
pub const COMPOSITE_GUARD: usize = 4096;

/// Materializes the n-by-n linear map the sequential forward applies to the
/// vectorized value tensor: scatter each dimension's batched attention blocks
/// into a global operator G_i and form the ordered product
/// G_{m-1} * ... * G_0 (last applied first, ascending update order).
/// Multiplying any flat `[n, d]` value by the result reproduces
/// [`tensorized_attention_forward`] up to float reassociation.
///
/// Refuses n above [`COMPOSITE_GUARD`].
pub fn composite_operator(
    q: &DenseTensor,
    k: &DenseTensor,
    scheme: &TensorizationScheme,
    masks: &DimMask,
    policy: MaskPolicy,
) -> Result<DenseTensor> {
    let want = scheme.tensor_shape();
    for (name, t) in [("q", q), ("k", k)] {
        if t.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "{name} has shape {:?}, scheme wants {want:?}",
                t.shape()
            )));
        }
    }
    masks.validate(scheme)?;
    let n = scheme.seq_len();
    if n > COMPOSITE_GUARD {
        return Err(Error::SizeGuard {
            what: "composite operator matrix side",
            actual: n,
            limit: COMPOSITE_GUARD,
        });
    }
    let m = scheme.order();
    let dims = scheme.dims().to_vec();
    let tok_strides = strides_of(&dims);
    let scale = 1.0 / (scheme.feature_dim() as f64).sqrt();
    let mut mat: Option<Vec<f64>> = None;
    for i in 0..m {
        let qi = mode_flatten(q, i, m)?;
        let ki = mode_flatten(k, i, m)?;
        let mut scores = batched_matmul_transb(&qi, &ki)?;
        scores.scale(scale);
        let a = softmax_last_axis(&scores, masks.suffix_mask(i), policy)?;
        let n_i = dims[i];
        let ad = a.data();
        let stride = tok_strides[i];
        mat = Some(match mat {
            // first stage: scatter the blocks of G_0 directly
            None => {
                let mut g = vec![0.0f64; n * n];
                for_each_fiber(&dims, i, |b, base| {
                    let block = &ad[b * n_i * n_i..(b + 1) * n_i * n_i];
                    for r in 0..n_i {
                        let row = (base + r * stride) * n;
                        for c in 0..n_i {
                            g[row + base + c * stride] = block[r * n_i + c];
                        }
                    }
                });
                g
            }
            // later stages: left-multiply by G_i without materializing it,
            // exploiting that G_i only mixes rows within one fiber
            Some(prev) => {
                let mut next = vec![0.0f64; n * n];
                for_each_fiber(&dims, i, |b, base| {
                    let block = &ad[b * n_i * n_i..(b + 1) * n_i * n_i];
                    for r in 0..n_i {
                        let dst = (base + r * stride) * n;
                        for c in 0..n_i {
                            let w = block[r * n_i + c];
                            if w == 0.0 {
                                continue;
                            }
                            let src = (base + c * stride) * n;
                            for j in 0..n {
                                next[dst + j] += w * prev[src + j];
                            }
                        }
                    }
                });
                next
            }
        });
    }
    DenseTensor::new(vec![n, n], mat.expect("order >= 1"))
}

// ── backward ─────────────────────────────────────────────────────────────────

/// Softmax Jacobian applied rowwise: dS = A o (dA - rowsum(dA o A)).
/// Masked entries carry A = 0 and therefore dS = 0.
fn softmax_grad(a: &DenseTensor, da: &DenseTensor) -> Result<DenseTensor> {
    if a.shape() != da.shape() {
        return Err(Error::ShapeMismatch(format!(
            "softmax grad: {:?} vs {:?}",
            a.shape(),
            da.shape()
        )));
    }
    let cols = *a.shape().last().unwrap();
    let mut out = vec![0.0f64; a.len()];
    for ((orow, arow), darow) in out
        .chunks_mut(cols)
        .zip(a.data().chunks(cols))
        .zip(da.data().chunks(cols))
    {
        let dot: f64 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
        for j in 0..cols {
            orow[j] = arow[j] * (darow[j] - dot);
        }
    }
    DenseTensor::new(a.shape().to_vec(), out)
}

/// Exact reverse-mode gradients of the tensorized forward: walks the stages
/// in reverse, applying the batched softmax-attention Jacobian per dimension
/// with the saved value snapshot as that stage's value input, and un-rotating
/// position rotations before folding the query/key gradients back.
pub fn tensorized_attention_backward(
    d_out: &DenseTensor,
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    inter: &AttentionIntermediates,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let scheme = &inter.scheme;
    check_tensor_inputs(q, k, v, scheme)?;
    if d_out.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} vs output {:?}",
            d_out.shape(),
            v.shape()
        )));
    }
    let m = scheme.order();
    if inter.value_snapshots.len() != m + 1
        || inter.per_dim_weights.len() != m
        || inter.order.len() != m
    {
        return Err(Error::InvalidArgument(
            "intermediates do not match the scheme order".into(),
        ));
    }
    if inter.value_snapshots[0] != *v {
        return Err(Error::InvalidArgument(
            "intermediates were produced by a different forward call".into(),
        ));
    }
    let scale = 1.0 / (scheme.feature_dim() as f64).sqrt();
    let shape = v.shape();
    let mut d_state = d_out.clone();
    let mut d_q = DenseTensor::zeros(shape);
    let mut d_k = DenseTensor::zeros(shape);
    for s in (0..m).rev() {
        let i = inter.order[s];
        let a = &inter.per_dim_weights[i];
        let d_oi = mode_flatten(&d_state, i, m)?;
        let o_in = mode_flatten(&inter.value_snapshots[s], i, m)?;
        let d_a = batched_matmul_transb(&d_oi, &o_in)?;
        let d_oin = batched_matmul_transa(a, &d_oi)?;
        let d_s = softmax_grad(a, &d_a)?;
        let mut d_qi = batched_matmul(&d_s, &inter.stage_k[i])?;
        d_qi.scale(scale);
        let mut d_ki = batched_matmul_transa(&d_s, &inter.stage_q[i])?;
        d_ki.scale(scale);
        if let Some(cfg) = &inter.rope {
            let positions: Vec<u64> = (0..scheme.dims()[i] as u64).collect();
            d_qi = apply_rope_inverse(&d_qi, &positions, cfg)?;
            d_ki = apply_rope_inverse(&d_ki, &positions, cfg)?;
        }
        d_q.add_assign(&mode_fold(&d_qi, i, shape, m)?)?;
        d_k.add_assign(&mode_fold(&d_ki, i, shape, m)?)?;
        d_state = mode_fold(&d_oin, i, shape, m)?;
    }
    Ok((d_q, d_k, d_state))
}

// ── tests ────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn scheme(dims: &[usize], d: usize) -> TensorizationScheme {
        TensorizationScheme::new(dims.to_vec(), d).unwrap()
    }

    fn random_qkv(
        s: &TensorizationScheme,
        seed: u64,
    ) -> (DenseTensor, DenseTensor, DenseTensor) {
        let mut r = rng::seeded(seed);
        let shape = s.tensor_shape();
        (
            rng::normal_tensor(&shape, &mut r),
            rng::normal_tensor(&shape, &mut r),
            rng::normal_tensor(&shape, &mut r),
        )
    }

    #[test]
    fn full_attention_single_token_is_identity() {
        let x = DenseTensor::new(vec![1, 3], vec![2.0, -1.0, 0.5]).unwrap();
        let o = full_attention(&x, &x, &x, None, MaskPolicy::Strict).unwrap();
        assert!(o.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn full_attention_identical_keys_average_values() {
        // equal keys give uniform weights, every output row = mean of v rows
        let q = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let k = DenseTensor::new(vec![2, 2], vec![0.7, -0.2, 0.7, -0.2]).unwrap();
        let v = DenseTensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, -1.0]).unwrap();
        let o = full_attention(&q, &k, &v, None, MaskPolicy::Strict).unwrap();
        for r in 0..2 {
            assert!((o.get(&[r, 0]) - 2.0).abs() < 1e-12);
            assert!((o.get(&[r, 1]) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_attention_matches_double_loop_oracle() {
        let mut r = rng::seeded(13);
        let n = 8;
        let d = 4;
        let q = rng::normal_tensor(&[n, d], &mut r);
        let k = rng::normal_tensor(&[n, d], &mut r);
        let v = rng::normal_tensor(&[n, d], &mut r);
        let o = full_attention(&q, &k, &v, None, MaskPolicy::Strict).unwrap();
        // independent double-loop implementation
        let scale = 1.0 / (d as f64).sqrt();
        for t in 0..n {
            let mut weights = vec![0.0f64; n];
            for s in 0..n {
                let mut dot = 0.0;
                for f in 0..d {
                    dot += q.get(&[t, f]) * k.get(&[s, f]);
                }
                weights[s] = (dot * scale).exp();
            }
            let z: f64 = weights.iter().sum();
            for f in 0..d {
                let mut acc = 0.0;
                for s in 0..n {
                    acc += weights[s] / z * v.get(&[s, f]);
                }
                assert!((o.get(&[t, f]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_attention_spans_row_blocks() {
        // n = 130 crosses two 64-row block boundaries; compare block row 0
        // against a direct row computation
        let mut r = rng::seeded(17);
        let n = 130;
        let d = 3;
        let q = rng::normal_tensor(&[n, d], &mut r);
        let k = rng::normal_tensor(&[n, d], &mut r);
        let v = rng::normal_tensor(&[n, d], &mut r);
        let o = full_attention(&q, &k, &v, None, MaskPolicy::Strict).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        for &t in &[0usize, 63, 64, 127, 128, 129] {
            let mut w = vec![0.0f64; n];
            let mut mx = f64::NEG_INFINITY;
            for s in 0..n {
                let mut dot = 0.0;
                for f in 0..d {
                    dot += q.get(&[t, f]) * k.get(&[s, f]);
                }
                w[s] = dot * scale;
                mx = mx.max(w[s]);
            }
            let mut z = 0.0;
            for x in &mut w {
                *x = (*x - mx).exp();
                z += *x;
            }
            for f in 0..d {
                let acc: f64 = (0..n).map(|s| w[s] / z * v.get(&[s, f])).sum();
                assert!((o.get(&[t, f]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn m1_reduces_to_full_attention() {
        let s = scheme(&[9], 5);
        let (q, k, v) = random_qkv(&s, 21);
        let (o, inter) =
            tensorized_attention_forward(&q, &k, &v, &s, &DimMask::all_allowed(1), None, MaskPolicy::Strict)
                .unwrap();
        let of = full_attention(&q, &k, &v, None, MaskPolicy::Strict).unwrap();
        assert!(o.max_abs_diff(&of).unwrap() < 1e-12);
        assert_eq!(inter.value_snapshots.len(), 2);
        // causal mask too
        let masks = DimMask::hierarchical_causal(&s);
        let (oc, _) =
            tensorized_attention_forward(&q, &k, &v, &s, &masks, None, MaskPolicy::Strict).unwrap();
        let ofc = full_attention(&q, &k, &v, Some(&BoolTensor::causal(9)), MaskPolicy::Strict).unwrap();
        assert!(oc.max_abs_diff(&ofc).unwrap() < 1e-12);
    }

    #[test]
    fn constant_value_is_preserved() {
        let s = scheme(&[3, 4], 2);
        let (q, k, _) = random_qkv(&s, 5);
        let v = DenseTensor::filled(&s.tensor_shape(), 3.25);
        let (o, inter) =
            tensorized_attention_forward(&q, &k, &v, &s, &DimMask::all_allowed(2), None, MaskPolicy::Strict)
                .unwrap();
        assert!(o.max_abs_diff(&v).unwrap() < 1e-12);
        // row-stochastic weights within 1e-12
        for a in &inter.per_dim_weights {
            let cols = *a.shape().last().unwrap();
            for row in a.data().chunks(cols) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn snapshots_bracket_the_run() {
        let s = scheme(&[2, 2, 2], 3);
        let (q, k, v) = random_qkv(&s, 30);
        let (o, inter) =
            tensorized_attention_forward(&q, &k, &v, &s, &DimMask::all_allowed(3), None, MaskPolicy::Strict)
                .unwrap();
        assert_eq!(inter.value_snapshots[0], v);
        assert_eq!(inter.value_snapshots[3], o);
    }

    #[test]
    fn score_shift_invariance_propagates() {
        // adding a constant to every query feature-0 entry shifts all scores
        // in a given stage by a row constant only if keys share feature 0;
        // instead test directly: adding c to a whole k column shifts scores
        // per row uniformly when q rows are equal... simplest robust check:
        // duplicate forward with scores shifted via constant key offset along
        // a direction orthogonal to nothing is not shift-safe. So assert the
        // underlying primitive instead: softmax rows of (S + c) match S.
        let mut r = rng::seeded(77);
        let sc = rng::normal_tensor(&[4, 6, 6], &mut r);
        let mut shifted = sc.clone();
        for row in shifted.data_mut().chunks_mut(6) {
            for x in row {
                *x += 42.0;
            }
        }
        let a = softmax_last_axis(&sc, None, MaskPolicy::Strict).unwrap();
        let b = softmax_last_axis(&shifted, None, MaskPolicy::Strict).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn update_order_changes_output() {
        // characterization: per-fiber attention matrices of different
        // dimensions do not commute, so permuting the update order moves the
        // output by far more than roundoff
        let s = scheme(&[2, 2], 4);
        let (q, k, v) = random_qkv(&s, 3);
        let spread = order_spread(&q, &k, &v, &s, &DimMask::all_allowed(2), None, MaskPolicy::Strict)
            .unwrap();
        assert!(
            spread > 1e-3,
            "expected visible order dependence, got {spread:.3e}"
        );
    }

    #[test]
    fn staged_contraction_is_order_invariant_and_matches_full() {
        for dims in [vec![2usize, 3], vec![4, 4], vec![2, 2, 2]] {
            let s = TensorizationScheme::new(dims, 3).unwrap();
            let (q, k, v) = random_qkv(&s, 11);
            for masks in [DimMask::all_allowed(s.order()), DimMask::hierarchical_causal(&s)] {
                let reference = staged_value_contraction(
                    &q,
                    &k,
                    &v,
                    &s,
                    &masks,
                    MaskPolicy::Strict,
                    &(0..s.order()).collect::<Vec<_>>(),
                )
                .unwrap();
                for order in permutations(s.order()) {
                    let o =
                        staged_value_contraction(&q, &k, &v, &s, &masks, MaskPolicy::Strict, &order)
                            .unwrap();
                    assert!(reference.max_abs_diff(&o).unwrap() < 1e-10);
                }
                // equals full attention under the joint mask
                let n = s.seq_len();
                let d = s.feature_dim();
                let qf = q.clone().reshape(&[n, d]).unwrap();
                let kf = k.clone().reshape(&[n, d]).unwrap();
                let vf = v.clone().reshape(&[n, d]).unwrap();
                let jm = joint_mask(&s, &masks).unwrap();
                let of = full_attention(&qf, &kf, &vf, jm.as_ref(), MaskPolicy::Strict).unwrap();
                assert!(reference.max_abs_diff(&of).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn composite_m1_is_the_softmax_matrix() {
        let s = scheme(&[6], 3);
        let (q, k, v) = random_qkv(&s, 8);
        let g = composite_operator(&q, &k, &s, &DimMask::all_allowed(1), MaskPolicy::Strict).unwrap();
        let o = crate::tensor::matmul(&g, &v.clone().reshape(&[6, 3]).unwrap()).unwrap();
        let of = full_attention(
            &q.clone().reshape(&[6, 3]).unwrap(),
            &k.clone().reshape(&[6, 3]).unwrap(),
            &v.clone().reshape(&[6, 3]).unwrap(),
            None,
            MaskPolicy::Strict,
        )
        .unwrap();
        assert!(o.max_abs_diff(&of).unwrap() < 1e-12);
        // rows of the softmax matrix are stochastic
        for row in g.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_matches_forward() {
        for dims in [vec![2usize, 3], vec![2, 2, 2]] {
            let s = TensorizationScheme::new(dims, 4).unwrap();
            let (q, k, v) = random_qkv(&s, 99);
            for masks in [DimMask::all_allowed(s.order()), DimMask::hierarchical_causal(&s)] {
                let (o, _) =
                    tensorized_attention_forward(&q, &k, &v, &s, &masks, None, MaskPolicy::Strict)
                        .unwrap();
                let g = composite_operator(&q, &k, &s, &masks, MaskPolicy::Strict).unwrap();
                let n = s.seq_len();
                let d = s.feature_dim();
                let vf = v.clone().reshape(&[n, d]).unwrap();
                let via_oracle = crate::tensor::matmul(&g, &vf).unwrap();
                let of = o.clone().reshape(&[n, d]).unwrap();
                assert!(via_oracle.max_abs_diff(&of).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn composite_constant_keys_give_global_average() {
        // constant K flattens every score row, so each stage's weights are
        // uniform and the product of per-dimension averaging operators is the
        // global mean
        let s = scheme(&[2, 3], 2);
        let k = DenseTensor::filled(&s.tensor_shape(), 0.7);
        let mut r = rng::seeded(41);
        let q = rng::normal_tensor(&s.tensor_shape(), &mut r);
        let g = composite_operator(&q, &k, &s, &DimMask::all_allowed(2), MaskPolicy::Strict).unwrap();
        let n = s.seq_len();
        for &x in g.data() {
            assert!((x - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_refuses_above_guard() {
        let s = scheme(&[65, 64], 1);
        let q = DenseTensor::zeros(&s.tensor_shape());
        match composite_operator(&q, &q, &s, &DimMask::all_allowed(2), MaskPolicy::Strict) {
            Err(Error::SizeGuard { actual, limit, .. }) => {
                assert_eq!(actual, 4160);
                assert_eq!(limit, 4096);
            }
            other => panic!("expected size guard, got {other:?}"),
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let s = scheme(&[2, 3], 4);
        let (q, k, v) = random_qkv(&s, 55);
        let (_, inter) =
            tensorized_attention_forward(&q, &k, &v, &s, &DimMask::all_allowed(2), None, MaskPolicy::Strict)
                .unwrap();
        let zero = DenseTensor::zeros(&s.tensor_shape());
        let (dq, dk, dv) = tensorized_attention_backward(&zero, &q, &k, &v, &inter).unwrap();
        assert_eq!(dq.data().iter().filter(|&&x| x != 0.0).count(), 0);
        assert_eq!(dk.data().iter().filter(|&&x| x != 0.0).count(), 0);
        assert_eq!(dv.data().iter().filter(|&&x| x != 0.0).count(), 0);
    }

    #[test]
    fn backward_rejects_foreign_intermediates() {
        let s = scheme(&[2, 3], 4);
        let (q, k, v) = random_qkv(&s, 56);
        let (_, inter) =
            tensorized_attention_forward(&q, &k, &v, &s, &DimMask::all_allowed(2), None, MaskPolicy::Strict)
                .unwrap();
        let (_, _, other_v) = random_qkv(&s, 57);
        let d_out = DenseTensor::zeros(&s.tensor_shape());
        assert!(tensorized_attention_backward(&d_out, &q, &k, &other_v, &inter).is_err());
    }

    #[test]
    fn flop_estimates_match_closed_forms() {
        let s = TensorizationScheme::new(vec![64, 64], 1).unwrap();
        let full = flop_estimate(&s, AttentionVariant::Full);
        let tens = flop_estimate(&s, AttentionVariant::Tensorized);
        assert_eq!(full.scores, 16_777_216);
        assert_eq!(tens.scores, 524_288);
        let s3 = TensorizationScheme::new(vec![32, 32, 32], 128).unwrap();
        let t3 = flop_estimate(&s3, AttentionVariant::Tensorized);
        assert_eq!(t3.scores, 402_653_184);
        assert_eq!(
            flop_estimate(&s3, AttentionVariant::Full).scores,
            32768u128 * 32768 * 128
        );
        // m = 1: the two variants coincide
        let s1 = TensorizationScheme::new(vec![100], 16).unwrap();
        assert_eq!(
            flop_estimate(&s1, AttentionVariant::Full),
            flop_estimate(&s1, AttentionVariant::Tensorized)
        );
    }

    #[test]
    fn mask_validation_catches_mismatches() {
        let s = scheme(&[2, 3], 1);
        let bad = DimMask::new(vec![
            MaskEntry::Shared(BoolTensor::causal(3)),
            MaskEntry::AllAllowed,
        ]);
        assert!(bad.validate(&s).is_err());
        let wrong_arity = DimMask::all_allowed(3);
        assert!(wrong_arity.validate(&s).is_err());
        let batched = DimMask::new(vec![
            MaskEntry::Batched(BoolTensor::filled(&[3, 2, 2], true)),
            MaskEntry::AllAllowed,
        ]);
        assert!(batched.validate(&s).is_ok());
    }

    #[test]
    fn joint_mask_is_the_causal_cone() {
        let s = scheme(&[2, 3], 1);
        let jm = joint_mask(&s, &DimMask::hierarchical_causal(&s))
            .unwrap()
            .unwrap();
        // token (a, b) attends to (c, e) iff c <= a and e <= b
        for t in 0..6usize {
            for w in 0..6usize {
                let (a, b) = (t / 3, t % 3);
                let (c, e) = (w / 3, w % 3);
                assert_eq!(jm.data()[t * 6 + w], c <= a && e <= b, "({t},{w})");
            }
        }
        assert!(joint_mask(&s, &DimMask::all_allowed(2)).unwrap().is_none());
    }

    #[test]
    fn permutations_enumerate_m_factorial() {
        assert_eq!(permutations(1), vec![vec![0]]);
        assert_eq!(permutations(3).len(), 6);
        let p2 = permutations(2);
        assert!(p2.contains(&vec![0, 1]) && p2.contains(&vec![1, 0]));
    }

    #[test]
    fn rope_changes_output_but_keeps_row_stochastic_weights() {
        let s = scheme(&[3, 4], 6);
        let (q, k, v) = random_qkv(&s, 70);
        let cfg = RopeConfig::per_dimension(6).unwrap();
        let (plain, _) =
            tensorized_attention_forward(&q, &k, &v, &s, &DimMask::all_allowed(2), None, MaskPolicy::Strict)
                .unwrap();
        let (rotated, inter) = tensorized_attention_forward(
            &q,
            &k,
            &v,
            &s,
            &DimMask::all_allowed(2),
            Some(&cfg),
            MaskPolicy::Strict,
        )
        .unwrap();
        assert!(plain.max_abs_diff(&rotated).unwrap() > 1e-6);
        for a in &inter.per_dim_weights {
            let cols = *a.shape().last().unwrap();
            for row in a.data().chunks(cols) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // sequential-mode config is rejected here
        let seq = RopeConfig::sequential(6).unwrap();
        assert!(tensorized_attention_forward(
            &q,
            &k,
            &v,
            &s,
            &DimMask::all_allowed(2),
            Some(&seq),
            MaskPolicy::Strict
        )
        .is_err());
    }
}
