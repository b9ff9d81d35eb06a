mod common;

use proptest::collection::vec;
use proptest::prelude::*;
use sstoken_core::model::TokenLogProbs;
use sstoken_core::select::{
    excess_loss, fuse_scores, global_selection_count, normalize_rel, retrospective_excess_loss, select_global_topk,
    select_topk, selection_count,
};

/// A position is selected iff fewer than k positions beat it, where "beat"
/// means a higher score or an equal score at an earlier position.
fn brute_force_topk(scores: &[f64], k: usize) -> Vec<bool> {
    (0..scores.len())
        .map(|i| {
            let beaten_by = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            beaten_by < k
        })
        .collect()
}

fn brute_force_global(pool: &[Vec<f64>], budget: usize) -> Vec<Vec<bool>> {
    let flat: Vec<(usize, usize, f64)> = pool
        .iter()
        .enumerate()
        .flat_map(|(s, v)| v.iter().enumerate().map(move |(i, &x)| (s, i, x)))
        .collect();
    pool.iter()
        .enumerate()
        .map(|(s, v)| {
            (0..v.len())
                .map(|i| {
                    let x = pool[s][i];
                    let beaten_by = flat
                        .iter()
                        .filter(|&&(s2, i2, y)| y > x || (y == x && (s2, i2) < (s, i)))
                        .count();
                    beaten_by < budget
                })
                .collect()
        })
        .collect()
}

/// Scores drawn from a small grid so duplicates (ties) are common.
fn tied_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    vec((0u8..8).prop_map(|v| v as f64 / 8.0), 1..=max_len)
}

fn any_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![tied_scores(max_len), vec(0.0f64..1.0, 1..=max_len)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn topk_matches_brute_force(scores in any_scores(64), rho in 0.01f64..=1.0) {
        let mask = select_topk(&scores, rho);
        let k = selection_count(rho, scores.len());
        prop_assert_eq!(mask.k, k);
        prop_assert_eq!(mask.bits.iter().filter(|&&b| b).count(), k);
        prop_assert_eq!(mask.bits, brute_force_topk(&scores, k));
    }

    #[test]
    fn global_topk_matches_brute_force(pool in vec(any_scores(12), 1..8), rho in 0.01f64..=1.0) {
        let masks = select_global_topk(&pool, rho);
        let total: usize = pool.iter().map(Vec::len).sum();
        let expected = brute_force_global(&pool, global_selection_count(rho, total));
        for (m, e) in masks.iter().zip(&expected) {
            prop_assert_eq!(&m.bits, e);
        }
    }

    #[test]
    fn masks_are_nested_in_rho(scores in any_scores(64), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = select_topk(&scores, lo);
        let large = select_topk(&scores, hi);
        prop_assert!(small.bits.iter().zip(&large.bits).all(|(&s, &l)| !s || l));
    }

    #[test]
    fn masks_survive_increasing_transforms(scores in any_scores(64), rho in 0.01f64..=1.0) {
        let base = select_topk(&scores, rho);
        let scaled: Vec<f64> = scores.iter().map(|x| x * 4.0).collect();
        let cubed: Vec<f64> = scores.iter().map(|x| x * x * x + 3.0).collect();
        prop_assert_eq!(&base.bits, &select_topk(&scaled, rho).bits);
        let exp: Vec<f64> = scores.iter().map(|x| x.exp()).collect();
        prop_assert_eq!(&base.bits, &select_topk(&exp, rho).bits);
        // x³ + 3 can merge near-equal values; only check when it did not.
        let distinct = |v: &[f64]| { let mut s = v.to_vec(); s.sort_by(f64::total_cmp); s.dedup(); s.len() };
        if distinct(&cubed) == distinct(&scores) {
            prop_assert_eq!(&base.bits, &select_topk(&cubed, rho).bits);
        }
    }

    #[test]
    fn fused_scores_stay_in_unit_interval(
        pairs in vec((0.0f64..=1.0, 0.0f64..=1.0), 1..64),
        gamma in 0.0f64..=1.0,
    ) {
        let (r, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let fused = fuse_scores(&r, &a, gamma).unwrap();
        prop_assert!(fused.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gamma_endpoints_reduce_to_single_signal(
        pairs in vec((0.0f64..=1.0, 0.0f64..=1.0), 1..64),
        rho in 0.01f64..=1.0,
    ) {
        let (r, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert_eq!(select_topk(&fuse_scores(&r, &a, 1.0).unwrap(), rho).bits, select_topk(&r, rho).bits);
        prop_assert_eq!(select_topk(&fuse_scores(&r, &a, 0.0).unwrap(), rho).bits, select_topk(&a, rho).bits);
    }

    #[test]
    fn normalization_is_affine_invariant(rel in vec(-10.0f64..10.0, 1..64), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = normalize_rel(&rel);
        prop_assert!(base.iter().all(|v| (0.0..=1.0).contains(v)));
        let moved: Vec<f64> = rel.iter().map(|x| a * x + b).collect();
        let spread = rel.iter().cloned().fold(f64::MIN, f64::max) - rel.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-6 {
            for (x, y) in base.iter().zip(normalize_rel(&moved)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rel_is_negated_el(pairs in vec((-20.0f64..0.0, -20.0f64..0.0), 1..64)) {
        let (h, c): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (h, c) = (TokenLogProbs(h), TokenLogProbs(c));
        let rel = retrospective_excess_loss(&h, &c).unwrap();
        let el = excess_loss(&c, &h).unwrap();
        prop_assert!(rel.iter().zip(&el).all(|(r, e)| r.to_bits() == (-e).to_bits()));
        let anti = excess_loss(&h, &c).unwrap();
        prop_assert!(el.iter().zip(&anti).all(|(x, y)| x.to_bits() == (-y).to_bits()));
    }
}
