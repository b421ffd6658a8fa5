//! Rotary positional encoding and position arithmetic for tensorized
//! sequences: mixed-radix token coordinates, per-dimension rotation of the
//! flattened query/key fibers, and effective context length under
//! per-dimension extrapolation.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, TensorizationScheme};

/// Where rotations are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeMode {
    /// Rotate once by the flat token index, ordinary 1-D rotary encoding.
    Sequential,
    /// Rotate inside each per-dimension flattening by the coordinate along
    /// that dimension. Every dimension uses the full frequency bank.
    PerDimension,
}

/// Rotary encoding parameters. Frequencies follow the inverse power schedule
/// `theta_j = base^(-2j/d)` over feature pairs `(2j, 2j+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub base: f64,
    pub head_dim: usize,
    pub mode: RopeMode,
}

impl RopeConfig {
    pub fn new(base: f64, head_dim: usize, mode: RopeMode) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "rotary head dim must be even and nonzero, got {head_dim}"
            )));
        }
        if base.is_nan() || base <= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "rotary base must exceed 1, got {base}"
            )));
        }
        Ok(Self {
            base,
            head_dim,
            mode,
        })
    }

    /// Conventional base 10000, sequential mode.
    pub fn sequential(head_dim: usize) -> Result<Self> {
        Self::new(10000.0, head_dim, RopeMode::Sequential)
    }

    /// Conventional base 10000, per-dimension mode.
    pub fn per_dimension(head_dim: usize) -> Result<Self> {
        Self::new(10000.0, head_dim, RopeMode::PerDimension)
    }

    /// theta_j for pair j.
    pub fn freq(&self, j: usize) -> f64 {
        self.base.powf(-2.0 * j as f64 / self.head_dim as f64)
    }
}

/// Rotates every feature pair of one row by `pos * theta_j`. `sign` of -1.0
/// applies the inverse rotation (used by the backward pass).
fn rotate_row(row: &mut [f64], pos: f64, cfg: &RopeConfig, sign: f64) {
    let d = cfg.head_dim;
    for j in 0..d / 2 {
        let angle = sign * pos * cfg.freq(j);
        let (s, c) = angle.sin_cos();
        let x = row[2 * j];
        let y = row[2 * j + 1];
        row[2 * j] = c * x - s * y;
        row[2 * j + 1] = c * y + s * x;
    }
}

fn check_rope_operand(x: &DenseTensor, cfg: &RopeConfig) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "rotary encoding expects [..., rows, d], got {:?}",
            x.shape()
        )));
    }
    let d = *x.shape().last().unwrap();
    if d != cfg.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {d} does not match rotary head dim {}",
            cfg.head_dim
        )));
    }
    let rows = x.shape()[x.rank() - 2];
    Ok((rows, d))
}

fn apply_rope_signed(
    x: &DenseTensor,
    positions: &[u64],
    cfg: &RopeConfig,
    sign: f64,
) -> Result<DenseTensor> {
    let (rows, d) = check_rope_operand(x, cfg)?;
    if positions.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{} positions for {rows} rows",
            positions.len()
        )));
    }
    let mut out = x.clone();
    for (block_idx, block) in out.data_mut().chunks_mut(rows * d).enumerate() {
        debug_assert!(block_idx < x.len() / (rows * d) + 1);
        for (r, row) in block.chunks_mut(d).enumerate() {
            rotate_row(row, positions[r] as f64, cfg, sign);
        }
    }
    Ok(out)
}

/// Rotates the rows of `x` (shape `[..., rows, d]`) by the given positions,
/// one position per row, broadcast over leading axes. Pure rotation of each
/// feature pair, so pair norms are preserved.
pub fn apply_rope(x: &DenseTensor, positions: &[u64], cfg: &RopeConfig) -> Result<DenseTensor> {
    apply_rope_signed(x, positions, cfg, 1.0)
}

/// Inverse rotation, undoing [`apply_rope`] with the same positions.
pub fn apply_rope_inverse(
    x: &DenseTensor,
    positions: &[u64],
    cfg: &RopeConfig,
) -> Result<DenseTensor> {
    apply_rope_signed(x, positions, cfg, -1.0)
}

/// Rotates mode-`dim` flattened query and key fibers `[B, n_dim, d]` by the
/// coordinate along that dimension, 0 through n_dim - 1, the same for every
/// batch fiber. Requires [`RopeMode::PerDimension`].
pub fn apply_tensorized_rope(
    q_flat: &DenseTensor,
    k_flat: &DenseTensor,
    dim: usize,
    scheme: &TensorizationScheme,
    cfg: &RopeConfig,
) -> Result<(DenseTensor, DenseTensor)> {
    if cfg.mode != RopeMode::PerDimension {
        return Err(Error::InvalidArgument(
            "per-dimension rotation requires RopeMode::PerDimension".into(),
        ));
    }
    if dim >= scheme.order() {
        return Err(Error::DimIndexOutOfRange {
            index: dim,
            rank: scheme.order(),
        });
    }
    let n_i = scheme.dims()[dim];
    let expect = [scheme.batch_size(dim), n_i, scheme.feature_dim()];
    for (name, t) in [("q", q_flat), ("k", k_flat)] {
        if t.shape() != expect {
            return Err(Error::ShapeMismatch(format!(
                "{name} flat {:?} does not match dim {dim} of scheme {:?} (want {expect:?})",
                t.shape(),
                scheme.dims()
            )));
        }
    }
    let positions: Vec<u64> = (0..n_i as u64).collect();
    Ok((
        apply_rope(q_flat, &positions, cfg)?,
        apply_rope(k_flat, &positions, cfg)?,
    ))
}

// ── position arithmetic ──────────────────────────────────────────────────────

/// Mixed-radix coordinates of flat token index `t` under the scheme's
/// extents, most significant dimension first. Indices past the trained range
/// overflow into coordinate 0, which is how extrapolation extends dimension 0:
/// the low dimensions stay in range while coordinate 0 keeps counting.
pub fn linear_to_coords(t: u64, scheme: &TensorizationScheme) -> Vec<u64> {
    let m = scheme.order();
    let mut coords = vec![0u64; m];
    let mut rest = t;
    for i in (0..m).rev() {
        let e = scheme.dims()[i] as u64;
        if i == 0 {
            coords[0] = rest;
        } else {
            coords[i] = rest % e;
            rest /= e;
        }
    }
    coords
}

/// Inverse of [`linear_to_coords`]. Coordinates 1..m must be in range;
/// coordinate 0 may exceed its extent (extrapolated positions).
pub fn coords_to_linear(coords: &[u64], scheme: &TensorizationScheme) -> Result<u64> {
    if coords.len() != scheme.order() {
        return Err(Error::ShapeMismatch(format!(
            "{} coords for order {}",
            coords.len(),
            scheme.order()
        )));
    }
    let mut t = 0u64;
    for (i, &c) in coords.iter().enumerate() {
        let e = scheme.dims()[i] as u64;
        if i > 0 && c >= e {
            return Err(Error::InvalidArgument(format!(
                "coordinate {c} out of range for dimension {i} extent {e}"
            )));
        }
        t = t * e + c;
    }
    Ok(t)
}

/// Which dimensions get extended first when extrapolating the context.
/// Growing the last (least significant) dimension first keeps the change
/// local to the fastest-varying coordinate, so that is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtrapolationOrder {
    /// Extend the least significant dimension first (dimension m-1 downward).
    #[default]
    LastToFirst,
    /// Extend the most significant dimension first.
    FirstToLast,
}

impl ExtrapolationOrder {
    /// Dimension indices in the order they get extended.
    pub fn dim_sequence(&self, m: usize) -> Vec<usize> {
        match self {
            ExtrapolationOrder::LastToFirst => (0..m).rev().collect(),
            ExtrapolationOrder::FirstToLast => (0..m).collect(),
        }
    }
}

/// Total sequence length reachable when dimension `i` is extended by `p`
/// extra positions and every other extent stays trained:
/// `(n_i + p) * prod_{j != i} n_j`.
pub fn effective_length(scheme: &TensorizationScheme, i: usize, p: u64) -> Result<u64> {
    if i >= scheme.order() {
        return Err(Error::DimIndexOutOfRange {
            index: i,
            rank: scheme.order(),
        });
    }
    let others: u64 = scheme
        .dims()
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &e)| e as u64)
        .product();
    Ok((scheme.dims()[i] as u64 + p) * others)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn scheme(dims: &[usize], d: usize) -> TensorizationScheme {
        TensorizationScheme::new(dims.to_vec(), d).unwrap()
    }

    #[test]
    fn config_rejects_bad_params() {
        assert!(RopeConfig::new(10000.0, 3, RopeMode::Sequential).is_err());
        assert!(RopeConfig::new(10000.0, 0, RopeMode::Sequential).is_err());
        assert!(RopeConfig::new(1.0, 4, RopeMode::Sequential).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let cfg = RopeConfig::sequential(6).unwrap();
        let x = DenseTensor::new(vec![1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = apply_rope(&x, &[0], &cfg).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn d2_unit_rotation() {
        // d = 2, position 1: [1, 0] rotates to [cos 1, sin 1]
        let cfg = RopeConfig::sequential(2).unwrap();
        let x = DenseTensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let y = apply_rope(&x, &[1], &cfg).unwrap();
        assert!((y.data()[0] - 1.0f64.cos()).abs() < 1e-15);
        assert!((y.data()[1] - 1.0f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn pair_norms_preserved() {
        let cfg = RopeConfig::sequential(8).unwrap();
        let mut r = rng::seeded(2);
        let x = rng::normal_tensor(&[5, 8], &mut r);
        let positions: Vec<u64> = vec![0, 3, 17, 1000, 123456];
        let y = apply_rope(&x, &positions, &cfg).unwrap();
        for row in 0..5 {
            for j in 0..4 {
                let n0 = x.get(&[row, 2 * j]).powi(2) + x.get(&[row, 2 * j + 1]).powi(2);
                let n1 = y.get(&[row, 2 * j]).powi(2) + y.get(&[row, 2 * j + 1]).powi(2);
                assert!((n0 - n1).abs() <= 1e-14 * n0.max(1.0));
            }
        }
    }

    #[test]
    fn inverse_rotation_round_trips() {
        let cfg = RopeConfig::sequential(10).unwrap();
        let mut r = rng::seeded(9);
        let x = rng::normal_tensor(&[4, 10], &mut r);
        let positions = vec![2u64, 7, 11, 29];
        let y = apply_rope(&x, &positions, &cfg).unwrap();
        let back = apply_rope_inverse(&y, &positions, &cfg).unwrap();
        assert!(x.max_abs_diff(&back).unwrap() < 1e-12);
    }

    #[test]
    fn dot_products_depend_only_on_relative_position() {
        // <R(p) q, R(p + s) k> must match <R(0) q, R(s) k> for any offset p.
        let cfg = RopeConfig::sequential(8).unwrap();
        let mut r = rng::seeded(4);
        let q = rng::normal_vec(8, &mut r);
        let k = rng::normal_vec(8, &mut r);
        let qt = DenseTensor::new(vec![1, 8], q).unwrap();
        let kt = DenseTensor::new(vec![1, 8], k).unwrap();
        let dot = |a: &DenseTensor, b: &DenseTensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        for s in [0u64, 1, 5, 13] {
            let q0 = apply_rope(&qt, &[0], &cfg).unwrap();
            let k0 = apply_rope(&kt, &[s], &cfg).unwrap();
            let reference = dot(&q0, &k0);
            for p in [1u64, 9, 100, 4096] {
                let qp = apply_rope(&qt, &[p], &cfg).unwrap();
                let kp = apply_rope(&kt, &[p + s], &cfg).unwrap();
                assert!(
                    (dot(&qp, &kp) - reference).abs() < 1e-10,
                    "offset {p}, separation {s}"
                );
            }
        }
    }

    #[test]
    fn tensorized_rope_checks_shapes_and_mode() {
        let s = scheme(&[2, 3], 4);
        let q = DenseTensor::zeros(&[2, 3, 4]);
        let seq_cfg = RopeConfig::sequential(4).unwrap();
        assert!(apply_tensorized_rope(&q, &q, 1, &s, &seq_cfg).is_err());
        let cfg = RopeConfig::per_dimension(4).unwrap();
        assert!(apply_tensorized_rope(&q, &q, 1, &s, &cfg).is_ok());
        // wrong batch/fiber layout for dim 0
        assert!(apply_tensorized_rope(&q, &q, 0, &s, &cfg).is_err());
    }

    #[test]
    fn tensorized_rope_rotates_by_fiber_coordinate() {
        let s = scheme(&[2, 3], 4);
        let cfg = RopeConfig::per_dimension(4).unwrap();
        let mut r = rng::seeded(6);
        let q = rng::normal_tensor(&[2, 3, 4], &mut r);
        let k = rng::normal_tensor(&[2, 3, 4], &mut r);
        let (qr, kr) = apply_tensorized_rope(&q, &k, 1, &s, &cfg).unwrap();
        let positions: Vec<u64> = vec![0, 1, 2];
        let qe = apply_rope(&q, &positions, &cfg).unwrap();
        let ke = apply_rope(&k, &positions, &cfg).unwrap();
        assert_eq!(qr, qe);
        assert_eq!(kr, ke);
    }

    #[test]
    fn coords_round_trip_and_examples() {
        // token 5 under extents {2, 3} sits at (1, 2)
        let s23 = scheme(&[2, 3], 1);
        assert_eq!(linear_to_coords(5, &s23), vec![1, 2]);
        assert_eq!(coords_to_linear(&[1, 2], &s23).unwrap(), 5);
        // one past the end of {32, 32, 32}: coordinate 0 overflows to 32
        let s32 = scheme(&[32, 32, 32], 1);
        assert_eq!(linear_to_coords(32768, &s32), vec![32, 0, 0]);
        assert_eq!(coords_to_linear(&[32, 0, 0], &s32).unwrap(), 32768);
        // low coordinates must stay in range
        assert!(coords_to_linear(&[0, 3, 0], &s23).is_err());
        // round trip over a span
        for t in 0..64u64 {
            let c = linear_to_coords(t, &s32);
            assert_eq!(coords_to_linear(&c, &s32).unwrap(), t);
        }
    }

    #[test]
    fn effective_length_examples() {
        let s = scheme(&[32, 32, 32], 1);
        assert_eq!(effective_length(&s, 0, 0).unwrap(), 32768);
        assert_eq!(effective_length(&s, 0, 1).unwrap(), 33792);
        assert_eq!(effective_length(&s, 2, 1).unwrap(), 33792);
        assert_eq!(effective_length(&s, 1, 3).unwrap(), (32 + 3) * 1024);
        assert!(effective_length(&s, 3, 1).is_err());
    }

    #[test]
    fn extrapolation_order_sequences() {
        assert_eq!(ExtrapolationOrder::LastToFirst.dim_sequence(3), vec![2, 1, 0]);
        assert_eq!(ExtrapolationOrder::FirstToLast.dim_sequence(3), vec![0, 1, 2]);
        assert_eq!(ExtrapolationOrder::default(), ExtrapolationOrder::LastToFirst);
    }
}
