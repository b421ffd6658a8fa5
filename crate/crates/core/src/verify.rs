//! Self-check drivers shared by the CLI and the test suites. Each check
//! compares an implementation against an independent route (reduction to the
//! flat reference, a materialized operator, staged contraction, or central
//! finite differences) and reports the worst deviation it saw.

use crate::attention::{
    composite_operator, full_attention, joint_mask, order_spread, permutations,
    staged_value_contraction, tensorized_attention_backward, tensorized_attention_forward,
    DimMask,
};
use crate::error::Result;
use crate::position::{apply_rope, apply_tensorized_rope, RopeConfig, RopeMode};
use crate::rng;
use crate::tensor::{matmul, mode_flatten, BoolTensor, DenseTensor, MaskPolicy, TensorizationScheme};
use rand::Rng;

/// Outcome of one equivalence check: worst error over all compared values.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.max_err.is_finite() && self.max_err <= self.tol
    }
}

fn random_qkv(
    scheme: &TensorizationScheme,
    r: &mut impl Rng,
) -> (DenseTensor, DenseTensor, DenseTensor) {
    let shape = scheme.tensor_shape();
    (
        rng::normal_tensor(&shape, r),
        rng::normal_tensor(&shape, r),
        rng::normal_tensor(&shape, r),
    )
}

fn mask_variants(scheme: &TensorizationScheme) -> Vec<DimMask> {
    vec![
        DimMask::all_allowed(scheme.order()),
        DimMask::hierarchical_causal(scheme),
    ]
}

/// An order-1 scheme must reproduce flat attention exactly: random cases with
/// n up to `max_n`, d up to `max_d`, alternating unmasked and causal.
pub fn check_m1_reduction(
    cases: usize,
    max_n: usize,
    max_d: usize,
    seed: u64,
    policy: MaskPolicy,
) -> Result<CheckReport> {
    let mut max_err = 0.0f64;
    for case in 0..cases {
        let mut r = rng::substream(seed, case as u64);
        let n = r.random_range(1..=max_n);
        let d = r.random_range(1..=max_d);
        let scheme = TensorizationScheme::new(vec![n], d)?;
        let (q, k, v) = random_qkv(&scheme, &mut r);
        let causal = case % 2 == 1;
        let masks = if causal {
            DimMask::hierarchical_causal(&scheme)
        } else {
            DimMask::all_allowed(1)
        };
        let (o, _) =
            tensorized_attention_forward(&q, &k, &v, &scheme, &masks, None, policy)?;
        let flat_mask = causal.then(|| BoolTensor::causal(n));
        let of = full_attention(&q, &k, &v, flat_mask.as_ref(), policy)?;
        max_err = max_err.max(o.max_abs_diff(&of)?);
    }
    Ok(CheckReport {
        name: "m1-reduction",
        cases,
        max_err,
        tol: 1e-12,
    })
}

/// The sequential forward must match the materialized composite operator
/// applied to the flat value matrix, masked and unmasked.
pub fn check_composite(
    dims: &[usize],
    d: usize,
    seeds: usize,
    seed: u64,
    policy: MaskPolicy,
) -> Result<CheckReport> {
    let scheme = TensorizationScheme::new(dims.to_vec(), d)?;
    let n = scheme.seq_len();
    let mut max_err = 0.0f64;
    let mut cases = 0;
    for s in 0..seeds {
        let mut r = rng::substream(seed, s as u64);
        let (q, k, v) = random_qkv(&scheme, &mut r);
        for masks in mask_variants(&scheme) {
            let (o, _) =
                tensorized_attention_forward(&q, &k, &v, &scheme, &masks, None, policy)?;
            let g = composite_operator(&q, &k, &scheme, &masks, policy)?;
            let vf = v.clone().reshape(&[n, d])?;
            let of = o.clone().reshape(&[n, d])?;
            let via_g = matmul(&g, &vf)?;
            max_err = max_err.max(via_g.max_abs_diff(&of)?);
            cases += 1;
        }
    }
    Ok(CheckReport {
        name: "composite-operator",
        cases,
        max_err,
        tol: 1e-10,
    })
}

/// Staged value updating against a fixed joint attention matrix is one
/// multilinear sum, so every key-axis order must agree with direct flat
/// attention under the joint mask. This is the order-invariance the
/// sequential algorithm inherits from the joint form; the per-dimension
/// softmax updates themselves are order-dependent (see
/// [`measure_update_order_spread`]).
pub fn check_order_invariance(
    dims: &[usize],
    d: usize,
    seeds: usize,
    seed: u64,
    policy: MaskPolicy,
) -> Result<CheckReport> {
    let scheme = TensorizationScheme::new(dims.to_vec(), d)?;
    let n = scheme.seq_len();
    let mut max_err = 0.0f64;
    let mut cases = 0;
    for s in 0..seeds {
        let mut r = rng::substream(seed, s as u64);
        let (q, k, v) = random_qkv(&scheme, &mut r);
        for masks in mask_variants(&scheme) {
            let qf = q.clone().reshape(&[n, d])?;
            let kf = k.clone().reshape(&[n, d])?;
            let vf = v.clone().reshape(&[n, d])?;
            let jm = joint_mask(&scheme, &masks)?;
            let reference = full_attention(&qf, &kf, &vf, jm.as_ref(), policy)?;
            for order in permutations(scheme.order()) {
                let o = staged_value_contraction(
                    &q,
                    &k,
                    &v,
                    &scheme,
                    &masks,
                    policy,
                    &order,
                )?;
                max_err = max_err.max(reference.max_abs_diff(&o)?);
                cases += 1;
            }
        }
    }
    Ok(CheckReport {
        name: "order-invariance",
        cases,
        max_err,
        tol: 1e-10,
    })
}

/// Measured spread of the per-dimension softmax forward across all update
/// orders. Reported for transparency: nonzero by construction for m >= 2,
/// because each fiber carries its own attention matrix.
pub fn measure_update_order_spread(
    dims: &[usize],
    d: usize,
    seed: u64,
    policy: MaskPolicy,
) -> Result<f64> {
    let scheme = TensorizationScheme::new(dims.to_vec(), d)?;
    let mut r = rng::substream(seed, 0);
    let (q, k, v) = random_qkv(&scheme, &mut r);
    order_spread(
        &q,
        &k,
        &v,
        &scheme,
        &DimMask::all_allowed(scheme.order()),
        None,
        policy,
    )
}

/// Row-stochastic per-dimension weights preserve constant value tensors.
pub fn check_constant_v(
    dims: &[usize],
    d: usize,
    seeds: usize,
    seed: u64,
    policy: MaskPolicy,
) -> Result<CheckReport> {
    let scheme = TensorizationScheme::new(dims.to_vec(), d)?;
    let mut max_err = 0.0f64;
    let mut cases = 0;
    for s in 0..seeds {
        let mut r = rng::substream(seed, s as u64);
        let (q, k, _) = random_qkv(&scheme, &mut r);
        let c: f64 = r.random_range(-3.0..3.0);
        let v = DenseTensor::filled(&scheme.tensor_shape(), c);
        for masks in mask_variants(&scheme) {
            let (o, _) =
                tensorized_attention_forward(&q, &k, &v, &scheme, &masks, None, policy)?;
            max_err = max_err.max(o.max_abs_diff(&v)?);
            cases += 1;
        }
    }
    Ok(CheckReport {
        name: "constant-value",
        cases,
        max_err,
        tol: 1e-12,
    })
}

/// Central finite differences with the given step, every coordinate of
/// Q, K and V, against the analytic backward pass. The error metric is
/// relative with an absolute floor: |a - f| / max(floor, |a|, |f|), so
/// near-zero gradients are compared absolutely at the floor scale.
pub fn check_gradients(dims: &[usize], d: usize, seeds: usize, seed: u64) -> Result<CheckReport> {
    let scheme = TensorizationScheme::new(dims.to_vec(), d)?;
    let h = 1e-5;
    let floor = 1e-4f64;
    let mut max_err = 0.0f64;
    let mut cases = 0;
    for s in 0..seeds {
        let mut r = rng::substream(seed, s as u64);
        let (q, k, v) = random_qkv(&scheme, &mut r);
        let dir = rng::normal_tensor(&scheme.tensor_shape(), &mut r);
        let rope = RopeConfig::per_dimension(if d.is_multiple_of(2) { d } else { d + 1 }).ok();
        let configs: Vec<(DimMask, Option<RopeConfig>)> = {
            let mut c = vec![
                (DimMask::all_allowed(scheme.order()), None),
                (DimMask::hierarchical_causal(&scheme), None),
            ];
            // rotary needs an even feature width
            if d.is_multiple_of(2) {
                c.push((DimMask::hierarchical_causal(&scheme), rope));
            }
            c
        };
        for (masks, rope) in configs {
            let loss = |q: &DenseTensor, k: &DenseTensor, v: &DenseTensor| -> Result<f64> {
                let (o, _) = tensorized_attention_forward(
                    q,
                    k,
                    v,
                    &scheme,
                    &masks,
                    rope.as_ref(),
                    MaskPolicy::Strict,
                )?;
                Ok(o.data().iter().zip(dir.data()).map(|(x, y)| x * y).sum())
            };
            let (_, inter) = tensorized_attention_forward(
                &q,
                &k,
                &v,
                &scheme,
                &masks,
                rope.as_ref(),
                MaskPolicy::Strict,
            )?;
            let (dq, dk, dv) = tensorized_attention_backward(&dir, &q, &k, &v, &inter)?;
            let inputs: [(&DenseTensor, &DenseTensor); 3] = [(&q, &dq), (&k, &dk), (&v, &dv)];
            for (which, (x, analytic)) in inputs.iter().enumerate() {
                for idx in 0..x.len() {
                    let mut plus = (*x).clone();
                    plus.data_mut()[idx] += h;
                    let mut minus = (*x).clone();
                    minus.data_mut()[idx] -= h;
                    let (lp, lm) = match which {
                        0 => (loss(&plus, &k, &v)?, loss(&minus, &k, &v)?),
                        1 => (loss(&q, &plus, &v)?, loss(&q, &minus, &v)?),
                        _ => (loss(&q, &k, &plus)?, loss(&q, &k, &minus)?),
                    };
                    let fd = (lp - lm) / (2.0 * h);
                    let a = analytic.data()[idx];
                    let rel = (a - fd).abs() / floor.max(a.abs()).max(fd.abs());
                    max_err = max_err.max(rel);
                    cases += 1;
                }
            }
        }
    }
    Ok(CheckReport {
        name: "gradient-fd",
        cases,
        max_err,
        tol: 1e-4,
    })
}

/// Rotary encoding properties: rotations preserve feature-pair norms, score
/// dot products depend only on relative position, and the order-1 tensorized
/// rotation equals flat sequential rotation.
pub fn check_rope(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let d = 8usize;
    let cfg = RopeConfig::sequential(d)?;

    // pair norms: exact up to a few ulps
    let mut max_err = 0.0f64;
    let mut cases = 0;
    for s in 0..20u64 {
        let mut r = rng::substream(seed, s);
        let x = rng::normal_tensor(&[6, d], &mut r);
        let positions: Vec<u64> = (0..6).map(|i| i * i * 31 + s).collect();
        let y = apply_rope(&x, &positions, &cfg)?;
        for row in 0..6 {
            for j in 0..d / 2 {
                let n0 = x.get(&[row, 2 * j]).powi(2) + x.get(&[row, 2 * j + 1]).powi(2);
                let n1 = y.get(&[row, 2 * j]).powi(2) + y.get(&[row, 2 * j + 1]).powi(2);
                max_err = max_err.max((n0 - n1).abs() / n0.max(1.0));
                cases += 1;
            }
        }
    }
    reports.push(CheckReport {
        name: "rope-pair-norm",
        cases,
        max_err,
        tol: 1e-14,
    });

    // relative-position property of rotated dot products
    let mut max_err = 0.0f64;
    let mut cases = 0;
    for s in 0..20u64 {
        let mut r = rng::substream(seed.wrapping_add(1), s);
        let q = rng::normal_tensor(&[1, d], &mut r);
        let k = rng::normal_tensor(&[1, d], &mut r);
        for sep in [0u64, 1, 7, 63] {
            let q0 = apply_rope(&q, &[0], &cfg)?;
            let k0 = apply_rope(&k, &[sep], &cfg)?;
            let reference: f64 = q0.data().iter().zip(k0.data()).map(|(a, b)| a * b).sum();
            for offset in [1u64, 12, 500, 8192] {
                let qp = apply_rope(&q, &[offset], &cfg)?;
                let kp = apply_rope(&k, &[offset + sep], &cfg)?;
                let dot: f64 = qp.data().iter().zip(kp.data()).map(|(a, b)| a * b).sum();
                max_err = max_err.max((dot - reference).abs());
                cases += 1;
            }
        }
    }
    reports.push(CheckReport {
        name: "rope-relative-position",
        cases,
        max_err,
        tol: 1e-10,
    });

    // order-1 tensorized rotation == flat sequential rotation
    let mut max_err = 0.0f64;
    let mut cases = 0;
    let per_dim = RopeConfig::per_dimension(d)?;
    for s in 0..10u64 {
        let mut r = rng::substream(seed.wrapping_add(2), s);
        let n = 12usize;
        let scheme = TensorizationScheme::new(vec![n], d)?;
        let q = rng::normal_tensor(&[n, d], &mut r);
        let k = rng::normal_tensor(&[n, d], &mut r);
        let qf = mode_flatten(&q, 0, 1)?;
        let kf = mode_flatten(&k, 0, 1)?;
        let (qr, kr) = apply_tensorized_rope(&qf, &kf, 0, &scheme, &per_dim)?;
        let positions: Vec<u64> = (0..n as u64).collect();
        let qs = apply_rope(&q, &positions, &cfg)?;
        let ks = apply_rope(&k, &positions, &cfg)?;
        max_err = max_err.max(qr.clone().reshape(&[n, d])?.max_abs_diff(&qs)?);
        max_err = max_err.max(kr.clone().reshape(&[n, d])?.max_abs_diff(&ks)?);
        cases += 1;
    }
    reports.push(CheckReport {
        name: "rope-m1-equality",
        cases,
        max_err,
        tol: 1e-12,
    });
    let _ = RopeMode::Sequential;
    Ok(reports)
}
