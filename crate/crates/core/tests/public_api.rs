// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rlens_core::mixing::{mixing_information_gain, token_mixing_entropy};
use rlens_core::rng::GaussianStream;
use rlens_core::spectral::{effective_rank, rid};
use rlens_core::tensor::{FormatError, Payload, TensorRecord};
use rlens_core::Matrix;

#[test]
fn rsdt_bytes_for_a_small_f32_matrix() {
    let t = TensorRecord::new(vec![1, 2], Payload::F32(vec![1.0, -2.0])).unwrap();
    let bytes = t.encode();
    let mut expected = Vec::new();
    expected.extend_from_slice(b"RSDT");
    expected.extend_from_slice(&1u32.to_le_bytes());
    expected.extend_from_slice(&[0, 2, 0, 0]);
    expected.extend_from_slice(&1u64.to_le_bytes());
    expected.extend_from_slice(&2u64.to_le_bytes());
    expected.extend_from_slice(&1.0f32.to_le_bytes());
    expected.extend_from_slice(&(-2.0f32).to_le_bytes());
    assert_eq!(bytes, expected);
    assert_eq!(bytes.len(), t.encoded_len());
    assert_eq!(TensorRecord::decode(&bytes).unwrap(), t);
}

#[test]
fn rsdt_rejects_malformed_headers() {
    let good = TensorRecord::new(vec![3], Payload::F64(vec![0.5; 3])).unwrap().encode();
    let mut b = good.clone();
    b[4] = 2;
    assert_eq!(TensorRecord::decode(&b), Err(FormatError::UnsupportedVersion(2)));
    let mut b = good.clone();
    b[8] = 7;
    assert_eq!(TensorRecord::decode(&b), Err(FormatError::UnsupportedDtype(7)));
    let mut b = good.clone();
    b[11] = 1;
    assert_eq!(TensorRecord::decode(&b), Err(FormatError::BadPadding));
    let mut b = good.clone();
    b.push(0);
    assert_eq!(TensorRecord::decode(&b), Err(FormatError::TrailingBytes(1)));
    assert!(matches!(
        TensorRecord::decode(&good[..good.len() - 1]),
        Err(FormatError::Truncated { .. })
    ));
    assert!(matches!(
        TensorRecord::decode(&good[..6]),
        Err(FormatError::Truncated { .. })
    ));
}

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    GaussianStream::new(seed).matrix(rows, cols, 0.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rsdt_roundtrip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>(), f32_payload in any::<bool>()) {
        let n: usize = dims.iter().product();
        let mut g = GaussianStream::new(seed);
        let vals: Vec<f64> = (0..n).map(|_| g.next_standard()).collect();
        let payload = if f32_payload {
            Payload::F32(vals.iter().map(|&v| v as f32).collect())
        } else {
            Payload::F64(vals)
        };
        let t = TensorRecord::new(dims, payload).unwrap();
        prop_assert_eq!(TensorRecord::decode(&t.encode()).unwrap(), t);
    }

    #[test]
    fn update_with_itself_is_neutral(s in 2usize..12, h in 2usize..12, seed in any::<u64>()) {
        let x = matrix(s, h, seed);
        prop_assert!(rid(&x, &x).unwrap().rid <= 1e-9);
        prop_assert!(mixing_information_gain(&x, &x).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn tme_ignores_row_order(s in 2usize..10, h in 2usize..8, seed in any::<u64>(), shift in 1usize..9) {
        let x = matrix(s, h, seed);
        let rolled = Matrix::from_fn(s, h, |i, j| x[((i + shift) % s, j)]);
        let (a, b) = (token_mixing_entropy(&x).unwrap(), token_mixing_entropy(&rolled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a >= -1e-12 && a <= (s as f64).ln() + 1e-12);
    }

    #[test]
    fn effective_rank_is_bounded(s in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let e = effective_rank(&matrix(s, h, seed)).unwrap();
        prop_assert!((1.0..=s.min(h) as f64).contains(&e));
    }

    #[test]
    fn rid_ignores_token_permutation(s in 2usize..10, h in 2usize..10, seed in any::<u64>(), shift in 1usize..9) {
        let x = matrix(s, h, seed);
        let xp = x.add(&matrix(s, h, seed ^ 1).scale(0.3));
        let roll = |m: &Matrix| Matrix::from_fn(s, h, |i, j| m[((i + shift) % s, j)]);
        let (a, b) = (rid(&x, &xp).unwrap(), rid(&roll(&x), &roll(&xp)).unwrap());
        prop_assert!((a.rid - b.rid).abs() <= 1e-8, "{} vs {}", a.rid, b.rid);
    }
}
