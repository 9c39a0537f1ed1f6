//! Independent E4M3 definition and FP8 property checks.
#![allow(dead_code)]

use nanolab::fp8::{e4m3_decode, e4m3_round, quantize, QuantMode};
use nanolab::Tensor;
use rand::Rng;

use super::rng;

/// E4M3 value of a code built from its fields: normals are `(8 + m)·2^(e−10)`,
/// subnormals `m·2^−9`; `e = 15, m = 7` is NaN.
pub fn reference_value(code: u8) -> Option<f64> {
    let s = if code >> 7 == 1 { -1.0 } else { 1.0 };
    let e = (code >> 3) & 0xF;
    let m = (code & 7) as f64;
    match (e, code & 7) {
        (15, 7) => None,
        (0, _) => Some(s * m * 2f64.powi(-9)),
        _ => Some(s * (8.0 + m) * 2f64.powi(e as i32 - 10)),
    }
}

/// Every code decodes to the reference value; max is 448; only 0x7F/0xFF are
/// NaN; nothing is infinite.
pub fn table_matches_definition() -> bool {
    let mut max: f64 = 0.0;
    for c in 0..=255u8 {
        let v = e4m3_decode(c);
        match reference_value(c) {
            None => {
                if !v.is_nan() {
                    return false;
                }
            }
            Some(r) => {
                if v != r || v.is_infinite() {
                    return false;
                }
                max = max.max(v);
            }
        }
    }
    max == 448.0
}

/// Worst relative rounding error over the normal range, scanning every gap at
/// its endpoints, midpoint and random interior points.
pub fn worst_normal_rounding_error(samples_per_gap: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let normals: Vec<f64> = (8..=0x7E).map(e4m3_decode).collect();
    let mut worst: f64 = 0.0;
    let mut check = |x: f64| {
        for x in [x, -x] {
            let err = ((e4m3_decode(e4m3_round(x)) - x) / x).abs();
            worst = worst.max(err);
        }
    };
    for w in normals.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        check(lo);
        check(0.5 * (lo + hi));
        check(f64::from_bits((0.5 * (lo + hi)).to_bits() - 1));
        check(f64::from_bits((0.5 * (lo + hi)).to_bits() + 1));
        for _ in 0..samples_per_gap {
            check(r.gen_range(lo..hi));
        }
    }
    check(448.0);
    worst
}

/// Quantize, dequantize, quantize again: codes and scales must repeat exactly.
/// Checks `blocks` random blocks across both modes.
pub fn idempotent_on_random_blocks(blocks: usize, seed: u64) -> bool {
    let mut r = rng(seed);
    (0..blocks).all(|i| {
        let (mode, shape) = if i % 2 == 0 {
            (QuantMode::WeightBlock, vec![128, 128])
        } else {
            (QuantMode::ActivationTile, vec![1, 128])
        };
        let mag = 10f64.powf(r.gen_range(-6.0..6.0));
        let t = Tensor::<f64>::uniform(&shape, -mag, mag, &mut r);
        let q = quantize(&t, mode).unwrap();
        let q2 = quantize(&q.dequantize::<f64>(), mode).unwrap();
        q == q2
    })
}
