//! Quantizer properties against brute-force oracles.

use cherryq::quant::{
    avg_bits, code_range, dequantize, fake_quant_asymmetric, pack_codes, quantize_asymmetric, quantize_grouped,
    quantize_symmetric, quantize_with_scale, unpack_codes, QuantConfig,
};
use proptest::prelude::*;

const EPS: f64 = 0.01;

/// Index of the nearest level `S * (c + 0.5)`, searched exhaustively in f64.
/// `None` when two levels are equally near.
fn nearest_code(x: f32, scale: f32, bits: u8) -> Option<i8> {
    let (lo, hi) = code_range(bits);
    let mut dist: Vec<(f64, i32)> = (lo..=hi)
        .map(|c| ((x as f64 - scale as f64 * (c as f64 + 0.5)).abs(), c))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    (dist[0].0 != dist[1].0).then_some(dist[0].1 as i8)
}

fn group() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, 1..64)
}

proptest! {
    #[test]
    fn codes_are_the_nearest_level(x in group(), bits in 2u8..=4) {
        let (codes, s) = quantize_symmetric(&x, bits, EPS).unwrap();
        for (&v, &c) in x.iter().zip(&codes) {
            if let Some(oracle) = nearest_code(v, s, bits) {
                prop_assert_eq!(c, oracle, "x = {}, S = {}", v, s);
            }
        }
    }

    #[test]
    fn error_is_at_most_half_a_step(x in group(), bits in 2u8..=4) {
        let (codes, s) = quantize_symmetric(&x, bits, EPS).unwrap();
        let xh = dequantize(&codes, s, bits).unwrap();
        for (v, h) in x.iter().zip(&xh) {
            prop_assert!((v - h).abs() <= s / 2.0 * (1.0 + 1e-5), "{} -> {}", v, h);
        }
    }

    #[test]
    fn requantizing_on_the_same_grid_is_stable(x in group(), bits in 2u8..=4) {
        let (codes, s) = quantize_symmetric(&x, bits, EPS).unwrap();
        let xh = dequantize(&codes, s, bits).unwrap();
        prop_assert_eq!(quantize_with_scale(&xh, s, bits, EPS).unwrap(), codes);
    }

    #[test]
    fn packing_round_trips(codes in prop::collection::vec(-8i8..8, 0..300), bits in 2u8..=4) {
        let (lo, hi) = code_range(bits);
        let codes: Vec<i8> = codes.into_iter().map(|c| (c as i32).clamp(lo, hi) as i8).collect();
        let blob = pack_codes(&codes, bits).unwrap();
        prop_assert_eq!(blob.bytes.len(), (codes.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_codes(&blob).unwrap(), codes);
    }

    #[test]
    fn asymmetric_error_is_at_most_half_a_step(x in group(), bits in 1u8..=4) {
        let (codes, s, z) = quantize_asymmetric(&x, bits).unwrap();
        let top = (1u32 << bits) - 1;
        prop_assert!(codes.iter().all(|&c| c as u32 <= top));
        let xh = fake_quant_asymmetric(&x, bits).unwrap();
        for (v, h) in x.iter().zip(&xh) {
            prop_assert!((v - h).abs() <= s / 2.0 + 1e-5 * (1.0 + z.abs() + v.abs()), "{} -> {}", v, h);
        }
    }

    #[test]
    fn grouping_is_independent_per_group(
        rows in 1usize..5,
        cols in 1usize..20,
        group in 1usize..8,
        seed in any::<u64>(),
    ) {
        let m: Vec<f32> = (0..rows * cols)
            .map(|i| (((i as u64 + 1) * 0x9E37_79B9 ^ seed) % 2001) as f32 / 100.0 - 10.0)
            .collect();
        let q = quantize_grouped(&m, rows, cols, 3, group, EPS).unwrap();
        let gpr = cols.div_ceil(group);
        for r in 0..rows {
            for (g, chunk) in m[r * cols..(r + 1) * cols].chunks(group).enumerate() {
                let (codes, s) = quantize_symmetric(chunk, 3, EPS).unwrap();
                let start = r * cols + g * group;
                prop_assert_eq!(&q.codes[start..start + chunk.len()], &codes[..]);
                prop_assert_eq!(q.scales[r * gpr + g], s);
            }
        }
    }
}

#[test]
fn worked_three_bit_example() {
    let (codes, s) = quantize_symmetric(&[-1.0, 0.5], 3, EPS).unwrap();
    assert_eq!(s, 0.25);
    assert_eq!(codes, vec![-4, 2]);
    assert_eq!(dequantize(&codes, s, 3).unwrap(), vec![-0.875, 0.625]);
}

#[test]
fn a_lone_value_takes_the_top_code() {
    for bits in 2..=4u8 {
        let (_, hi) = code_range(bits);
        let (codes, s) = quantize_symmetric(&[3.0], bits, EPS).unwrap();
        assert_eq!(codes, vec![hi as i8]);
        let xh = dequantize(&codes, s, bits).unwrap()[0];
        // with one element per group the error is exactly half a step
        assert!((3.0 - xh - s / 2.0).abs() < 1e-6);
    }
}

#[test]
fn mean_error_shrinks_with_bits() {
    let x: Vec<f32> = (0..1000).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
    let err = |bits| {
        let (c, s) = quantize_symmetric(&x, bits, EPS).unwrap();
        let xh = dequantize(&c, s, bits).unwrap();
        x.iter().zip(&xh).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
    };
    assert!(err(2) > err(3) && err(3) > err(4));
}

#[test]
fn two_bit_byte_layout() {
    let blob = pack_codes(&[-2, -1, 0, 1], 2).unwrap();
    assert_eq!(blob.bytes, vec![0b1110_0100]);
}

#[test]
fn ten_thousand_codes_round_trip() {
    for bits in 2..=4u8 {
        let (lo, hi) = code_range(bits);
        let span = hi - lo + 1;
        let codes: Vec<i8> = (0..10_000).map(|i| (lo + (i * 7919) % span) as i8).collect();
        assert_eq!(unpack_codes(&pack_codes(&codes, bits).unwrap()).unwrap(), codes);
    }
}

#[test]
fn asymmetric_worked_example() {
    let (codes, s, z) = quantize_asymmetric(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
    assert_eq!((codes, s, z), (vec![0, 1, 2, 3], 1.0, 0.0));
    assert_eq!(fake_quant_asymmetric(&[5.0, 5.0], 2).unwrap(), vec![5.0, 5.0]);
}

#[test]
fn storage_cost_examples() {
    let at = |bits, g, f: f64, trick| {
        let q = QuantConfig::new(bits, g).with_cherry_fraction(f).with_scale_trick(trick);
        avg_bits(&q, 4096, 4096).unwrap()
    };
    assert!((at(3, 128, 1.0 / 256.0, false) - 3.1758).abs() < 1e-4);
    assert!((at(3, 128, 0.0, false) - 3.125).abs() < 1e-9);
    assert!(at(2, 128, 1.0 / 256.0, true) > at(2, 128, 1.0 / 256.0, false));
}
