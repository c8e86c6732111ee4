//! Cross-checks the bit-level binary16 conversion against an independent
//! reference built from f64 arithmetic: pick the binade, divide by the
//! quantum, round half to even, reassemble.

use deskbert::half::{
    f16_to_f32, f32_to_f16, scale_loss, unscale_gradients, Binary16, LossScaler,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference narrowing. Returns `None` for NaN inputs.
fn reference_f16_value(x: f32) -> Option<f64> {
    if x.is_nan() {
        return None;
    }
    let v = x as f64;
    let mag = v.abs();
    if mag.is_infinite() {
        return Some(v);
    }
    // binade exponent, clamped to the subnormal quantum
    let e = if mag == 0.0 {
        -14
    } else {
        (mag.log2().floor() as i32).max(-14)
    };
    // log2 can be off by one right at powers of two
    let e = if mag >= 2f64.powi(e + 1) { e + 1 } else { e };
    let e = if e > -14 && mag < 2f64.powi(e) { e - 1 } else { e };
    let quantum = 2f64.powi(e - 10);
    let q = mag / quantum;
    let fl = q.floor();
    let frac = q - fl;
    let r = if frac > 0.5 || (frac == 0.5 && fl % 2.0 == 1.0) {
        fl + 1.0
    } else {
        fl
    };
    let rounded = r * quantum;
    let out = if rounded > 65504.0 { f64::INFINITY } else { rounded };
    Some(if v.is_sign_negative() { -out } else { out })
}

fn check(x: f32) {
    let got = f32_to_f16(x);
    match reference_f16_value(x) {
        None => assert!(got.is_nan(), "{x:e} should map to NaN"),
        Some(r) => {
            let g = f16_to_f32(got) as f64;
            assert!(
                g == r && g.is_sign_negative() == r.is_sign_negative(),
                "x={x:e} ({:#010x}) got {g:e} ref {r:e}",
                x.to_bits()
            );
        }
    }
}

#[test]
fn named_examples() {
    assert_eq!(f32_to_f16(1.0).to_bits(), 0x3C00);
    assert_eq!(f32_to_f16(2f32.powi(-25)), Binary16::ZERO);
    assert_eq!(f32_to_f16(65520.0), Binary16::INFINITY);
    assert_eq!(f32_to_f16(2f32.powi(-24)), Binary16::MIN_POSITIVE_SUBNORMAL);
    for x in [1.0, 2f32.powi(-25), 65520.0, 2f32.powi(-24), -0.0, 1e-8, 3.3] {
        check(x);
    }
}

/// Sweeps every f32 bit pattern. Takes a few tens of seconds in the test
/// profile; the strided sweep below covers the same ground by default.
#[test]
#[ignore = "exhaustive 2^32 sweep; run with --ignored"]
fn exhaustive_sweep_against_reference() {
    for bits in 0..=u32::MAX {
        check(f32::from_bits(bits));
    }
}

#[test]
fn strided_sweep_against_reference() {
    // odd stride visits every mantissa residue class and every exponent
    let mut bits: u32 = 0;
    loop {
        check(f32::from_bits(bits));
        let (next, overflow) = bits.overflowing_add(997);
        if overflow {
            break;
        }
        bits = next;
    }
    // plus every f32 whose low 13 mantissa bits sit at or next to a tie
    for hi in 0..(1u32 << 19) {
        for lo in [0x0FFFu32, 0x1000, 0x1001, 0x0000, 0x1FFF] {
            check(f32::from_bits((hi << 13) | lo));
        }
    }
}

#[test]
fn relative_error_bound_in_normal_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200_000 {
        let e: f32 = rng.random_range(-14.0..15.999);
        let x = 2f32.powf(e) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        if x.abs() > 65504.0 {
            continue;
        }
        let r = f16_to_f32(f32_to_f16(x));
        assert!(((r - x) / x).abs() <= 2f32.powi(-11), "x={x}");
    }
}

#[test]
fn loss_scaling_recovers_tiny_gradient() {
    // forward product chain: activation 2^-10 times upstream gradient 2^-10,
    // the intermediate product 2^-20 is representable only as a subnormal and
    // the next factor pushes it to 2^-30, below binary16 range.
    let s = LossScaler::new(4096.0).unwrap();
    let grad = 2f32.powi(-20);
    let scaled = f16_to_f32(f32_to_f16(grad * s.scale()));
    let mut g = vec![scaled];
    unscale_gradients(&mut g, &s).unwrap();
    assert_eq!(g[0], grad);

    let unscaled_chain = f16_to_f32(f32_to_f16(2f32.powi(-20) * 2f32.powi(-10)));
    assert_eq!(unscaled_chain, 0.0);
    // the FP32 oracle keeps it
    assert_eq!(2f32.powi(-20) * 2f32.powi(-10), 2f32.powi(-30));
    let scaled_chain = f16_to_f32(f32_to_f16(2f32.powi(-20) * s.scale() * 2f32.powi(-10)));
    assert_eq!(scaled_chain / s.scale(), 2f32.powi(-30));
}

/// Fraction of entries that a binary16 round trip flushes to zero.
fn zeroed_fraction(values: &[f32], scale: f32) -> f64 {
    let zeros = values
        .iter()
        .filter(|&&v| f16_to_f32(f32_to_f16(v * scale)) == 0.0)
        .count();
    zeros as f64 / values.len() as f64
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32, n: usize) -> Vec<f32> {
    (0..n).map(|_| 2f32.powf(rng.random_range(lo..hi))).collect()
}

#[test]
fn subnormals_keep_the_narrow_band_nonzero() {
    // every magnitude in [2^-24, 2^-14] has a nonzero binary16 neighbour
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grads = log_uniform(&mut rng, -24.0, -14.0, 100_000);
    assert_eq!(zeroed_fraction(&grads, 1.0), 0.0);
    assert_eq!(zeroed_fraction(&grads, 4096.0), 0.0);

    let s = LossScaler::default();
    let mut stored: Vec<f32> = grads
        .iter()
        .map(|&g| f16_to_f32(f32_to_f16(g * s.scale())))
        .collect();
    unscale_gradients(&mut stored, &s).unwrap();
    for (&a, &b) in stored.iter().zip(&grads) {
        assert!(((a - b) / b).abs() <= 1e-3);
    }
}

#[test]
fn scaling_rescues_gradients_below_the_subnormal_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grads = log_uniform(&mut rng, -30.0, -14.0, 100_000);
    let baseline = zeroed_fraction(&grads, 1.0);
    let scaled = zeroed_fraction(&grads, 4096.0);
    // values under 2^-25 flush: roughly 5/16 of the exponent range
    assert!(baseline > 0.25 && baseline < 0.4, "baseline {baseline}");
    assert!(scaled < 0.01, "scaled {scaled}");
}

/// A linear model `y = w·x` with squared loss; the gradient `2(w·x - t)x` is
/// computed with binary16 products and f32 accumulation under a 2^12 loss
/// scale and compared with the all-f32 gradient.
#[test]
fn mixed_precision_linear_gradient_matches_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = LossScaler::default();
    let h = |v: f32| f16_to_f32(f32_to_f16(v));
    for _ in 0..50 {
        let n = 32;
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let xs: Vec<Vec<f32>> = (0..16)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ts: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut exact = vec![0f32; n];
        let mut mixed = vec![0f32; n];
        for (x, &t) in xs.iter().zip(&ts) {
            let y: f32 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let yh: f32 = w.iter().zip(x).map(|(&a, &b)| h(a) * h(b)).sum();
            let dy = 2.0 * (y - t) / 16.0;
            let dyh = h(scale_loss(2.0 * (yh - t) / 16.0, &s));
            for j in 0..n {
                exact[j] += dy * x[j];
                mixed[j] += h(dyh * h(x[j]));
            }
        }
        unscale_gradients(&mut mixed, &s).unwrap();
        let norm: f32 = exact.iter().map(|v| v * v).sum::<f32>().sqrt();
        let diff: f32 = exact
            .iter()
            .zip(&mixed)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        assert!(diff / norm <= 1e-2, "relative {}", diff / norm);
    }
}

proptest! {
    #[test]
    fn round_trip_is_idempotent(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        let once = f32_to_f16(x);
        let twice = f32_to_f16(f16_to_f32(once));
        if once.is_nan() {
            prop_assert!(twice.is_nan());
        } else {
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn scale_then_unscale_is_identity(x in -1e30f32..1e30, k in -20i32..20) {
        let s = LossScaler::new(2f32.powi(k)).unwrap();
        let mut g = vec![scale_loss(x, &s)];
        prop_assume!(g[0].is_finite());
        unscale_gradients(&mut g, &s).unwrap();
        // exact unless scaling pushed the value into the f32 subnormal range
        prop_assume!((x * 2f32.powi(k)).abs() >= f32::MIN_POSITIVE || x == 0.0);
        prop_assert_eq!(g[0], x);
    }
}
