//! Prototype store and shift estimators.

use std::collections::BTreeMap;

use cil_core::numerics::{Rng, Tensor};
use cil_core::prototypes::{
    class_statistics, estimate_shift_knearest, estimate_shift_prototype, estimate_shift_sample, true_shift, ClassStats,
    CovarianceKind, PrototypeStore, ShiftReport,
};
use proptest::prelude::*;

fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

fn store_of(protos: &[Vec<f64>]) -> PrototypeStore {
    let d = protos[0].len();
    let mut s = PrototypeStore::new(d, CovarianceKind::Full);
    for (c, p) in protos.iter().enumerate() {
        s.classes.insert(
            100 + c,
            ClassStats {
                proto: p.clone(),
                cov: Tensor::identity(d),
                session: 0,
                count: 1,
            },
        );
    }
    s
}

fn labelled(protos: &[Vec<f64>]) -> BTreeMap<usize, Vec<f64>> {
    protos.iter().cloned().enumerate().collect()
}

/// Weighted drift written out from the definition.
fn oracle(proto: &[f64], before: &[Vec<f64>], after: &[Vec<f64>], clamp: bool) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let w: Vec<f64> = before
        .iter()
        .map(|b| {
            let c = dot(b, proto) / (norm(b) * norm(proto));
            if clamp {
                c.max(0.0)
            } else {
                c
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; proto.len()];
    if total == 0.0 {
        return out;
    }
    for ((wi, b), a) in w.iter().zip(before).zip(after) {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o += wi * (x - y) / total;
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identical_models_give_zero_shift(old in vecs(5, 4), new in vecs(3, 4), clamp: bool) {
        let store = store_of(&old);
        let m = labelled(&new);
        let r = estimate_shift_prototype(&store, &m, &m, clamp).unwrap();
        prop_assert!(r.shifts.iter().flatten().all(|&v| v == 0.0));
        let x = Tensor::from_rows(&new).unwrap();
        let s = estimate_shift_sample(&store, &x, &x, None).unwrap();
        prop_assert!(s.shifts.iter().flatten().all(|&v| v == 0.0));
        let k = estimate_shift_knearest(&store, &x, &x, 2).unwrap();
        prop_assert!(k.shifts.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_new_class_drift_is_every_shift(old in vecs(6, 5), b in vecs(1, 5), a in vecs(1, 5)) {
        let store = store_of(&old);
        let r = estimate_shift_prototype(&store, &labelled(&b), &labelled(&a), false).unwrap();
        let drift: Vec<f64> = a[0].iter().zip(&b[0]).map(|(x, y)| x - y).collect();
        for s in &r.shifts {
            prop_assert!(s.iter().zip(&drift).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
    }

    #[test]
    fn matches_definition(old in vecs(4, 3), b in vecs(4, 3), a in vecs(4, 3), clamp: bool) {
        let store = store_of(&old);
        let r = estimate_shift_prototype(&store, &labelled(&b), &labelled(&a), clamp).unwrap();
        for (k, p) in old.iter().enumerate() {
            prop_assert!(close(&r.shifts[k], &oracle(p, &b, &a, clamp), 1e-10));
        }
    }

    #[test]
    fn new_class_order_does_not_matter(old in vecs(4, 3), b in vecs(4, 3), a in vecs(4, 3), seed: u64) {
        let store = store_of(&old);
        let base = estimate_shift_prototype(&store, &labelled(&b), &labelled(&a), true).unwrap();
        let perm = Rng::new(seed).permutation(4);
        // Same classes inserted in another order.
        let mut before = BTreeMap::new();
        let mut after = BTreeMap::new();
        for &i in &perm {
            before.insert(i, b[i].clone());
            after.insert(i, a[i].clone());
        }
        let again = estimate_shift_prototype(&store, &before, &after, true).unwrap();
        prop_assert_eq!(&base.shifts, &again.shifts);
        // Classes relabelled by the permutation.
        let before: BTreeMap<usize, Vec<f64>> = perm.iter().enumerate().map(|(k, &i)| (k, b[i].clone())).collect();
        let after: BTreeMap<usize, Vec<f64>> = perm.iter().enumerate().map(|(k, &i)| (k, a[i].clone())).collect();
        let relabelled = estimate_shift_prototype(&store, &before, &after, true).unwrap();
        for (x, y) in base.shifts.iter().zip(&relabelled.shifts) {
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn clamped_shift_stays_in_drift_hull(old in vecs(5, 3), b in vecs(3, 3), a in vecs(3, 3)) {
        let store = store_of(&old);
        let r = estimate_shift_prototype(&store, &labelled(&b), &labelled(&a), true).unwrap();
        for s in &r.shifts {
            if s.iter().all(|&v| v == 0.0) {
                continue;
            }
            for j in 0..3 {
                let lo = (0..3).map(|i| a[i][j] - b[i][j]).fold(f64::INFINITY, f64::min);
                let hi = (0..3).map(|i| a[i][j] - b[i][j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s[j] >= lo - 1e-12 && s[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn uniform_translation_is_recovered(old in vecs(4, 3), x in vecs(12, 3), t in prop::collection::vec(-2.0f64..2.0, 3)) {
        let store = store_of(&old);
        let before = Tensor::from_rows(&x).unwrap();
        let moved: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&t).map(|(a, b)| a + b).collect()).collect();
        let after = Tensor::from_rows(&moved).unwrap();
        for r in [
            estimate_shift_sample(&store, &before, &after, None).unwrap(),
            estimate_shift_knearest(&store, &before, &after, 5).unwrap(),
        ] {
            for s in &r.shifts {
                prop_assert!(close(s, &t, 1e-9));
            }
        }
    }

    #[test]
    fn update_moves_only_prototypes(old in vecs(3, 4), shifts in vecs(3, 4)) {
        let mut store = store_of(&old);
        let map: BTreeMap<usize, Vec<f64>> = shifts.iter().cloned().enumerate().map(|(i, s)| (100 + i, s)).collect();
        let covs: Vec<Tensor> = store.classes.values().map(|s| s.cov.clone()).collect();
        store.update(&ShiftReport::from_shifts(&map), BTreeMap::new()).unwrap();
        for (k, s) in store.classes.values().enumerate() {
            let want: Vec<f64> = old[k].iter().zip(&shifts[k]).map(|(a, b)| a + b).collect();
            prop_assert_eq!(&s.proto, &want);
            prop_assert_eq!(&s.cov, &covs[k]);
        }
    }
}

#[test]
fn knearest_with_all_samples_is_mean_drift() {
    let mut rng = Rng::new(3);
    let before = Tensor::matrix(10, 3, rng.normal_vec(30, 1.0)).unwrap();
    let after = Tensor::matrix(10, 3, rng.normal_vec(30, 1.0)).unwrap();
    let store = store_of(&[vec![1.0, 0.0, 0.0], vec![0.0, -1.0, 2.0]]);
    let r = estimate_shift_knearest(&store, &before, &after, 10).unwrap();
    let mean: Vec<f64> = (0..3)
        .map(|j| (0..10).map(|i| after.row(i)[j] - before.row(i)[j]).sum::<f64>() / 10.0)
        .collect();
    for s in &r.shifts {
        assert!(close(s, &mean, 1e-12));
    }
    assert!(estimate_shift_knearest(&store, &before, &after, 11).is_err());
}

#[test]
fn true_shift_is_difference_of_class_means() {
    let before = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, 1.0]]).unwrap();
    let after = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 4.0], vec![5.0, 0.0]]).unwrap();
    let t = true_shift(&before, &after, &[0, 0, 1]).unwrap();
    assert_eq!(t[&0].0, vec![1.0, 1.0]);
    assert_eq!(t[&0].1, vec![2.0, 2.0]);
    assert_eq!(t[&1].0, vec![0.0, -1.0]);
}

#[test]
fn statistics_match_hand_values() {
    let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![9.0, 9.0]]).unwrap();
    let s = class_statistics(&f, &[4, 4, 5], &[4, 5], CovarianceKind::Full, 2).unwrap();
    assert_eq!(s[&4].proto, vec![2.0, 4.0]);
    // Unbiased: deviations (±1, ±2).
    assert_eq!(s[&4].cov.data(), &[2.0, 4.0, 4.0, 8.0]);
    assert_eq!(s[&5].cov.data(), &[0.0; 4]);
    assert_eq!((s[&4].session, s[&4].count), (2, 2));
    assert!(class_statistics(&f, &[4, 4, 5], &[6], CovarianceKind::Full, 0).is_err());
}

#[test]
fn duplicate_and_missing_classes_rejected() {
    let mut store = store_of(&[vec![1.0, 0.0]]);
    let stats = class_statistics(&Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(), &[100], &[100], CovarianceKind::Full, 1)
        .unwrap();
    assert!(store.insert(stats).is_err());
    assert!(store.update(&ShiftReport::from_shifts(&BTreeMap::new()), BTreeMap::new()).is_err());
}
