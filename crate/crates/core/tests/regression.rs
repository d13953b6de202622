mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_core::gradcheck::{check_fn, random_tensor};
use vqa_core::regression::{
    encode_mos, expectation_decode, make_anchors, scale_mos, unscale_mos, vr_loss, MosRange,
    SvrParams,
};
use vqa_core::{ProbabilityVector, SvrDecoder};

#[test]
fn encoding_of_two_on_default_anchors() {
    let codec = make_anchors(6, 0.0, 5.0).unwrap();
    let y = encode_mos(2.0, &codec);
    // reference values are quoted to four decimals
    let frozen = [0.0103, 0.2076, 0.5642, 0.2076, 0.0103, 0.00007];
    for (a, b) in y.values().iter().zip(frozen) {
        assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
    }
    assert_eq!(y.argmax(), 2);
}

#[test]
fn encoding_matches_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let m = rng.random_range(2..10);
        let lo = rng.random_range(-3.0..3.0);
        let hi = lo + rng.random_range(0.5..8.0);
        let c = rng.random_range(lo - 1.0..hi + 1.0);
        let codec = make_anchors(m, lo, hi).unwrap();
        let y = encode_mos(c, &codec);
        for (a, b) in y.values().iter().zip(common::encode(c, m, lo, hi)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(y.argmax(), common::nearest_anchor(c, m, lo, hi));
    }
}

#[test]
fn vr_loss_examples() {
    assert_eq!(vr_loss(&[0.5, 0.5, 0.0], &[0.5, 0.5, 0.0]).unwrap(), 0.0);
    assert_eq!(vr_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    let v = vr_loss(&[0.5, 0.5, 0.0], &[0.5, 0.0, 0.5]).unwrap();
    assert!((v - 0.5).abs() < 1e-15);
    assert!(vr_loss(&[1.0, 0.0], &[1.0, 0.0, 0.0]).is_err());
}

#[test]
fn expectation_decode_examples() {
    let codec = make_anchors(6, 0.0, 5.0).unwrap();
    for i in 0..6 {
        let mut e = vec![0.0; 6];
        e[i] = 1.0;
        assert_eq!(expectation_decode(&e, &codec), i as f64);
    }
    assert!((expectation_decode(&[1.0 / 6.0; 6], &codec) - 2.5).abs() < 1e-15);
}

#[test]
fn decode_of_encode_sweep() {
    // The midpoint is exact by symmetry. Elsewhere the soft encoding pulls
    // toward the centre; the bias stays under 5% of the range for interior
    // scores and is largest at the ends.
    let codec = make_anchors(6, 0.0, 5.0).unwrap();
    assert_eq!(expectation_decode(encode_mos(2.5, &codec).values(), &codec), 2.5);
    let mut worst_interior = 0.0f64;
    for k in 0..=100 {
        let c = 5.0 * k as f64 / 100.0;
        let err = (expectation_decode(encode_mos(c, &codec).values(), &codec) - c).abs();
        if (0.5..=4.5).contains(&c) {
            worst_interior = worst_interior.max(err);
        }
    }
    assert!(worst_interior <= 0.05 * 5.0, "{worst_interior}");
    let edge = expectation_decode(encode_mos(0.0, &codec).values(), &codec);
    assert!(edge > 0.0 && edge < 0.5, "edge bias {edge}");
}

fn grid_pairs(codec_lo: f64, codec_hi: f64, n: usize) -> Vec<(Vec<f64>, f64)> {
    let codec = make_anchors(6, codec_lo, codec_hi).unwrap();
    (0..n)
        .map(|k| {
            let c = codec_lo + (codec_hi - codec_lo) * k as f64 / (n - 1) as f64;
            (encode_mos(c, &codec).into_inner(), c)
        })
        .collect()
}

#[test]
fn svr_on_dense_grid_recovers_held_out_scores() {
    let params = SvrParams::for_range(0.0, 5.0);
    let svr = SvrDecoder::fit(&grid_pairs(0.0, 5.0, 201), 0.0, 5.0, params).unwrap();
    let codec = make_anchors(6, 0.0, 5.0).unwrap();
    let mut errs = Vec::new();
    for k in 0..50 {
        let c = 0.05 + 4.9 * (k as f64 + 0.5) / 50.0;
        let p = svr.predict(encode_mos(c, &codec).values()).unwrap();
        errs.push((p - c).abs());
    }
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst <= 2.0 * params.epsilon, "worst held-out error {worst}");
}

#[test]
fn svr_on_one_hot_inputs_near_anchor_values() {
    // One-hot vectors are never seen in training (the grid encodings are
    // soft), so this measures extrapolation off the training manifold.
    let params = SvrParams::for_range(0.0, 5.0);
    let svr = SvrDecoder::fit(&grid_pairs(0.0, 5.0, 201), 0.0, 5.0, params).unwrap();
    for i in 0..6 {
        let mut e = vec![0.0; 6];
        e[i] = 1.0;
        let p = svr.predict(&e).unwrap();
        assert!((p - i as f64).abs() <= 2.0 * params.epsilon, "anchor {i}: {p}");
    }
}

#[test]
fn svr_agrees_with_expectation_decode_on_random_vectors() {
    let params = SvrParams::for_range(0.0, 5.0);
    let svr = SvrDecoder::fit(&grid_pairs(0.0, 5.0, 201), 0.0, 5.0, params).unwrap();
    let codec = make_anchors(6, 0.0, 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0.0;
    for _ in 0..500 {
        let raw: Vec<f64> = (0..6).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = raw.iter().sum();
        let y: Vec<f64> = raw.iter().map(|v| v / s).collect();
        total += (svr.predict(&y).unwrap() - expectation_decode(&y, &codec)).abs();
    }
    assert!(total / 500.0 <= 0.1 * 5.0, "mean abs diff {}", total / 500.0);
}

#[test]
fn svr_is_deterministic() {
    let params = SvrParams::for_range(0.0, 5.0);
    let a = SvrDecoder::fit(&grid_pairs(0.0, 5.0, 41), 0.0, 5.0, params).unwrap();
    let b = SvrDecoder::fit(&grid_pairs(0.0, 5.0, 41), 0.0, 5.0, params).unwrap();
    assert_eq!(a, b);
    let y = [0.1, 0.2, 0.3, 0.2, 0.1, 0.1];
    assert_eq!(a.predict(&y).unwrap(), a.predict(&y).unwrap());
}

#[test]
fn mos_scaling_round_trips() {
    let codec = make_anchors(6, 0.0, 5.0).unwrap();
    let r = MosRange::new(0.0, 100.0).unwrap();
    assert_eq!(scale_mos(50.0, r, &codec).unwrap(), 2.5);
    assert!((unscale_mos(scale_mos(73.0, r, &codec).unwrap(), r, &codec) - 73.0).abs() < 1e-12);
    // out of range values are clamped
    assert_eq!(scale_mos(120.0, r, &codec).unwrap(), 5.0);
    assert!(MosRange::new(3.0, 3.0).is_err());
}

#[test]
fn probability_vector_validation() {
    assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
    assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
    assert!(ProbabilityVector::new(vec![1.5, -0.5]).is_err());
    assert!(ProbabilityVector::new(vec![]).is_err());
}

#[test]
fn vr_gradient_through_head_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let codec = make_anchors(6, 0.0, 5.0).unwrap();
    let y = encode_mos(3.3, &codec).into_inner();
    let inputs = [
        random_tensor(&mut rng, &[1, 8], 1.0),
        random_tensor(&mut rng, &[8, 8], 0.5),
        random_tensor(&mut rng, &[8, 6], 0.5),
    ];
    let r = check_fn("head vr", &inputs, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.gelu(h);
        let l = g.matmul(h, v[2])?;
        let p = g.softmax(l, 1)?;
        g.vr_loss(p, &y)
    })
    .unwrap();
    assert!(r.passed(), "{}", r.max_rel_error);
}

proptest! {
    #[test]
    fn encoding_is_valid_and_peaks_at_nearest_anchor(c in -10.0f64..15.0, m in 2usize..12) {
        let codec = make_anchors(m, 0.0, 5.0).unwrap();
        let y = encode_mos(c, &codec);
        prop_assert!(ProbabilityVector::new(y.values().to_vec()).is_ok());
        prop_assert_eq!(y.argmax(), common::nearest_anchor(c, m, 0.0, 5.0));
    }

    #[test]
    fn encoding_is_translation_invariant(c in 0.0f64..5.0, d in -20.0f64..20.0) {
        let a = encode_mos(c, &make_anchors(6, 0.0, 5.0).unwrap());
        let b = encode_mos(c + d, &make_anchors(6, d, 5.0 + d).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn vr_loss_is_bounded_and_symmetric(
        a in prop::collection::vec(0.001f64..1.0, 6),
        b in prop::collection::vec(0.001f64..1.0, 6),
    ) {
        let l1 = vr_loss(&a, &b).unwrap();
        let l2 = vr_loss(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&l1));
        prop_assert!((l1 - l2).abs() < 1e-15);
        prop_assert_eq!(vr_loss(&a, &a).unwrap(), 0.0);
    }
}
