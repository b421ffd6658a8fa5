//! Wall-time scaling of the two attention variants.
//!
//! Each length is timed with the same random inputs for both variants, the
//! tensorized one over a balanced factorization chosen by
//! [`TensorizationScheme::balanced`]. Medians over several repetitions feed
//! a log-log least-squares fit whose slope is the measured cost exponent.
//! CSV output keeps one row per (variant, length); the trailing summary
//! rows reuse the numeric `median_seconds` column to carry each variant's
//! fitted slope, with the other fields blank.

use crate::attention::{
    flop_estimate, full_attention, tensorized_attention_forward, AttentionVariant, DimMask,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{MaskPolicy, TensorizationScheme};
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: &'static str,
    pub n: usize,
    pub dims: Vec<usize>,
    pub d: usize,
    pub reps: usize,
    pub median_seconds: f64,
    pub flop_estimate: u128,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope of ln(y) against ln(x).
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = points.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Time both variants at every length. `dim_cap` bounds each balanced
/// factor (default policy cap is 32). One untimed warmup precedes the
/// timed repetitions.
pub fn bench_attention(
    lengths: &[usize],
    d: usize,
    reps: usize,
    dim_cap: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if reps < 3 {
        return Err(Error::InvalidArgument(
            "medians need at least 3 repetitions".into(),
        ));
    }
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("no lengths to benchmark".into()));
    }
    let mut rows = Vec::with_capacity(lengths.len() * 2);
    for (i, &n) in lengths.iter().enumerate() {
        let scheme = TensorizationScheme::balanced(n, dim_cap, d)?;
        let mut r = rng::substream(seed, i as u64);
        let q = rng::normal_tensor(&[n, d], &mut r);
        let k = rng::normal_tensor(&[n, d], &mut r);
        let v = rng::normal_tensor(&[n, d], &mut r);
        let qt = q.clone().reshape(&scheme.tensor_shape())?;
        let kt = k.clone().reshape(&scheme.tensor_shape())?;
        let vt = v.clone().reshape(&scheme.tensor_shape())?;
        let masks = DimMask::all_allowed(scheme.order());

        let mut time_full = Vec::with_capacity(reps);
        let mut time_tens = Vec::with_capacity(reps);
        for rep in 0..=reps {
            let t0 = Instant::now();
            let of = full_attention(&q, &k, &v, None, MaskPolicy::Strict)?;
            let dt_full = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let (ot, _) = tensorized_attention_forward(
                &qt,
                &kt,
                &vt,
                &scheme,
                &masks,
                None,
                MaskPolicy::Strict,
            )?;
            let dt_tens = t1.elapsed().as_secs_f64();
            if rep == 0 {
                // warmup rep doubles as an agreement check at trivial sizes
                if n == 1 {
                    let diff = of.max_abs_diff(&ot.clone().reshape(&[n, d])?)?;
                    if diff > 1e-12 {
                        return Err(Error::InvalidArgument(format!(
                            "variants disagree at n=1: {diff}"
                        )));
                    }
                }
                continue;
            }
            time_full.push(dt_full);
            time_tens.push(dt_tens);
        }
        let flat = TensorizationScheme::new(vec![n], d)?;
        rows.push(BenchRow {
            variant: "full",
            n,
            dims: vec![n],
            d,
            reps,
            median_seconds: median(time_full),
            flop_estimate: flop_estimate(&flat, AttentionVariant::Full).total(),
        });
        rows.push(BenchRow {
            variant: "tensorized",
            n,
            dims: scheme.dims().to_vec(),
            d,
            reps,
            median_seconds: median(time_tens),
            flop_estimate: flop_estimate(&scheme, AttentionVariant::Tensorized).total(),
        });
    }
    Ok(rows)
}

/// Fitted slope per variant, in (variant, slope) pairs. Needs at least two
/// distinct lengths per variant.
pub fn slopes(rows: &[BenchRow]) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for variant in ["full", "tensorized"] {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.n as f64, r.median_seconds.max(1e-9)))
            .collect();
        if pts.len() >= 2 {
            out.push((variant, fit_loglog_slope(&pts)));
        }
    }
    out
}

/// CSV body: measurement rows then one slope summary row per variant.
pub fn bench_csv(rows: &[BenchRow], slopes: &[(&'static str, f64)]) -> String {
    let mut out = String::from("variant,n,dims,d,reps,median_seconds,flop_estimate\n");
    for r in rows {
        let dims: Vec<String> = r.dims.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{:.6e},{}\n",
            r.variant,
            r.n,
            dims.join("x"),
            r.d,
            r.reps,
            r.median_seconds,
            r.flop_estimate
        ));
    }
    for (variant, slope) in slopes {
        out.push_str(&format!("slope-{variant},,,,,{slope:.4},\n"));
    }
    out
}
