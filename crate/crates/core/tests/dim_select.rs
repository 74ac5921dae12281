use ksvs::dim_select::{apply_mask, select_from_pairs, DEFAULT_Z_THRESHOLD};
use ksvs::io_formats::{Matrix, SelectionMask};
use proptest::prelude::*;

type Pair = (Matrix, Matrix);

/// Straightforward re-statement of the selection rule.
fn brute_force(pairs: &[Pair]) -> Option<Vec<usize>> {
    let dim = pairs[0].0.cols();
    let avg = |m: &Matrix, d: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..m.rows() {
            s += m.get(t, d) as f64;
        }
        s / m.rows() as f64
    };
    let mut medians = Vec::new();
    for d in 0..dim {
        let mut v: Vec<f64> = pairs.iter().map(|(a, b)| (avg(a, d) - avg(b, d)).abs()).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        medians.push(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 });
    }
    let mean = medians.iter().sum::<f64>() / dim as f64;
    let std = (medians.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / dim as f64).sqrt();
    if std == 0.0 {
        return None;
    }
    Some((0..dim).filter(|&d| (medians[d] - mean) / std >= 1.0).collect())
}

fn corpus() -> impl Strategy<Value = Vec<Pair>> {
    (1usize..=10, 1usize..=16).prop_flat_map(|(pairs, dim)| {
        let side = (1usize..6).prop_flat_map(move |frames| {
            prop::collection::vec(-3.0f32..3.0, frames * dim).prop_map(move |v| Matrix::new(frames, dim, v).unwrap())
        });
        prop::collection::vec((side.clone(), side), pairs)
    })
}

fn select(pairs: &[Pair]) -> Option<Vec<usize>> {
    select_from_pairs(pairs.iter().map(|(a, b)| ("s", a, b)), DEFAULT_Z_THRESHOLD)
        .ok()
        .map(|r| r.mask.indices().to_vec())
}

fn map(m: &Matrix, f: impl Fn(usize, usize) -> f32) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * m.cols());
    for t in 0..m.rows() {
        for d in 0..m.cols() {
            data.push(f(t, d));
        }
    }
    Matrix::new(m.rows(), m.cols(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matches_brute_force(pairs in corpus()) {
        prop_assert_eq!(select(&pairs), brute_force(&pairs));
    }

    #[test]
    fn scaling_by_powers_of_two_keeps_the_mask(pairs in corpus(), k in -3i32..=3) {
        let c = 2f32.powi(k);
        let scaled: Vec<Pair> = pairs
            .iter()
            .map(|(a, b)| (map(a, |t, d| a.get(t, d) * c), map(b, |t, d| b.get(t, d) * c)))
            .collect();
        prop_assert_eq!(select(&scaled), select(&pairs));
    }

    #[test]
    fn permuting_dims_permutes_the_mask(pairs in corpus(), seed in any::<u64>()) {
        let dim = pairs[0].0.cols();
        let mut perm: Vec<usize> = (0..dim).collect();
        let mut s = seed;
        for i in (1..dim).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        // column j of the permuted corpus is column perm[j] of the original
        let permuted: Vec<Pair> = pairs
            .iter()
            .map(|(a, b)| (map(a, |t, j| a.get(t, perm[j])), map(b, |t, j| b.get(t, perm[j]))))
            .collect();
        let original = select(&pairs);
        let moved = select(&permuted);
        prop_assert_eq!(original.is_some(), moved.is_some());
        if let (Some(o), Some(m)) = (original, moved) {
            let mut back: Vec<usize> = m.iter().map(|&j| perm[j]).collect();
            back.sort_unstable();
            prop_assert_eq!(back, o);
        }
    }
}

#[test]
fn planted_dimensions_are_found() {
    let frames = 4;
    let dim = 10;
    let pairs: Vec<Pair> = (0..5)
        .map(|p| {
            let speech = Matrix::new(frames, dim, (0..frames * dim).map(|i| ((i * 7 + p) % 5) as f32 * 0.01).collect()).unwrap();
            let singing = map(&speech, |t, d| speech.get(t, d) + if d == 3 || d == 7 { 2.0 } else { 0.0 });
            (speech, singing)
        })
        .collect();
    assert_eq!(select(&pairs), Some(vec![3, 7]));
    assert_eq!(brute_force(&pairs), Some(vec![3, 7]));
}

#[test]
fn masks_of_reference_sizes() {
    let emb = Matrix::new(3, 768, (0..3 * 768).map(|i| i as f32).collect()).unwrap();
    for k in [93usize, 89] {
        let mask = SelectionMask::new(768, (0..k).map(|i| i * 8).collect()).unwrap();
        let r = apply_mask(&emb, &mask).unwrap();
        assert_eq!((r.rows(), r.cols()), (3, k));
        assert_eq!(r.get(1, 2), emb.get(1, 16));
    }
    assert_eq!(apply_mask(&emb, &SelectionMask::full(768)).unwrap(), emb);
}
