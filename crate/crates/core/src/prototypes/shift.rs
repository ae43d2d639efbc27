use std::collections::BTreeMap;
use std::time::Instant;

use super::store::PrototypeStore;
use crate::backbone::Model;
use crate::data::LabeledSet;
use crate::error::{CilError, Result};
use crate::numerics::{cosine_similarity, sq_dist, Tensor};

/// Estimated displacement of every stored class.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    pub old_classes: Vec<usize>,
    /// `shifts[k]` belongs to `old_classes[k]`.
    pub shifts: Vec<Vec<f64>>,
    /// New classes whose drift fed the estimate (prototype estimator only).
    pub new_classes: Vec<usize>,
    pub drifts: Vec<Vec<f64>>,
    /// `[old × new]` weights before normalization (prototype estimator only).
    pub weights: Option<Tensor>,
    pub elapsed_s: f64,
}

impl ShiftReport {
    /// All-zero shifts for the given classes.
    pub fn zero(classes: &[usize], dim: usize) -> Self {
        Self {
            old_classes: classes.to_vec(),
            shifts: vec![vec![0.0; dim]; classes.len()],
            new_classes: Vec::new(),
            drifts: Vec::new(),
            weights: None,
            elapsed_s: 0.0,
        }
    }

    /// Report with externally supplied shifts, e.g. from the oracle.
    pub fn from_shifts(shifts: &BTreeMap<usize, Vec<f64>>) -> Self {
        Self {
            old_classes: shifts.keys().copied().collect(),
            shifts: shifts.values().cloned().collect(),
            new_classes: Vec::new(),
            drifts: Vec::new(),
            weights: None,
            elapsed_s: 0.0,
        }
    }

    pub fn shift_of(&self, class: usize) -> Option<&[f64]> {
        self.old_classes
            .iter()
            .position(|&c| c == class)
            .map(|k| self.shifts[k].as_slice())
    }

    pub fn negated(&self) -> Self {
        let mut r = self.clone();
        for s in &mut r.shifts {
            for v in s.iter_mut() {
                *v = -*v;
            }
        }
        r
    }
}

fn check_dims(store: &PrototypeStore, vectors: &BTreeMap<usize, Vec<f64>>, op: &'static str) -> Result<()> {
    match vectors.values().find(|v| v.len() != store.dim) {
        Some(v) => Err(CilError::dim(op, &[store.dim], &[v.len()])),
        None => Ok(()),
    }
}

/// Shift of each stored class from the drift of the new classes' prototypes.
///
/// With `drift_i = after_i − before_i` and `α_ci = cos(before_i, φ_c)`
/// (both on the previous model), `Δ_c = Σ α_ci·drift_i / Σ α_ci`, or zero
/// when the weights sum to zero. When `clamp` is set negative weights are
/// replaced by zero first. Sums run over the new classes sorted by their
/// prototype values, so the result is bit-identical under any reordering
/// or relabelling of the new classes.
pub fn estimate_shift_prototype(
    store: &PrototypeStore,
    before: &BTreeMap<usize, Vec<f64>>,
    after: &BTreeMap<usize, Vec<f64>>,
    clamp: bool,
) -> Result<ShiftReport> {
    let start = Instant::now();
    if before.is_empty() {
        return Err(CilError::contract("shift estimation needs at least one new class"));
    }
    if before.keys().ne(after.keys()) {
        return Err(CilError::contract("new-class prototypes differ in class sets between models"));
    }
    check_dims(store, before, "estimate_shift_prototype")?;
    check_dims(store, after, "estimate_shift_prototype")?;
    let d = store.dim;
    let new_classes: Vec<usize> = before.keys().copied().collect();
    let drifts: Vec<Vec<f64>> = new_classes
        .iter()
        .map(|c| after[c].iter().zip(&before[c]).map(|(a, b)| a - b).collect())
        .collect();

    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let mut order: Vec<usize> = (0..new_classes.len()).collect();
    order.sort_by_cached_key(|&i| (bits(&before[&new_classes[i]]), bits(&after[&new_classes[i]])));

    let old_classes: Vec<usize> = store.classes.keys().copied().collect();
    let mut weights = Tensor::zeros(&[old_classes.len(), new_classes.len()]);
    let mut shifts = Vec::with_capacity(old_classes.len());
    for (k, c) in old_classes.iter().enumerate() {
        let proto = &store.classes[c].proto;
        let row = &mut weights.data_mut()[k * new_classes.len()..(k + 1) * new_classes.len()];
        for (a, nc) in row.iter_mut().zip(&new_classes) {
            let cos = cosine_similarity(&before[nc], proto)?;
            *a = if clamp { cos.max(0.0) } else { cos };
        }
        let total: f64 = order.iter().map(|&i| row[i]).sum();
        let mut acc = vec![0.0; d];
        if total != 0.0 {
            for &i in &order {
                let w = row[i] / total;
                for (s, v) in acc.iter_mut().zip(&drifts[i]) {
                    *s += w * v;
                }
            }
        }
        shifts.push(acc);
    }
    Ok(ShiftReport {
        old_classes,
        shifts,
        new_classes,
        drifts,
        weights: Some(weights),
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

fn check_pairs(store: &PrototypeStore, before: &Tensor, after: &Tensor, op: &'static str) -> Result<()> {
    if before.shape() != after.shape() {
        return Err(CilError::dim(op, before.shape(), after.shape()));
    }
    if before.rank() != 2 || before.cols() != store.dim {
        return Err(CilError::dim(op, before.shape(), &[store.dim]));
    }
    if before.rows() == 0 {
        return Err(CilError::contract("no current-session samples"));
    }
    Ok(())
}

/// Largest number of rows used by [`median_pairwise_distance`].
pub const MEDIAN_SAMPLE_CAP: usize = 500;

/// Median Euclidean distance over all row pairs, computed on an evenly
/// strided subset of at most [`MEDIAN_SAMPLE_CAP`] rows.
pub fn median_pairwise_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    let stride = n.div_ceil(MEDIAN_SAMPLE_CAP).max(1);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let mut dist = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            dist.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    if dist.is_empty() {
        return 0.0;
    }
    let mid = dist.len() / 2;
    let (_, m, _) = dist.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Kernel-weighted mean of per-sample drift, weighting sample `i` for class
/// `c` by `exp(−‖before_i − φ_c‖² / 2σ²)`. `bandwidth = None` uses
/// [`median_pairwise_distance`] of `before`.
pub fn estimate_shift_sample(
    store: &PrototypeStore,
    before: &Tensor,
    after: &Tensor,
    bandwidth: Option<f64>,
) -> Result<ShiftReport> {
    let start = Instant::now();
    check_pairs(store, before, after, "estimate_shift_sample")?;
    let sigma = match bandwidth {
        Some(s) => s,
        None => median_pairwise_distance(before),
    };
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CilError::contract(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    let (n, d) = (before.rows(), before.cols());
    let delta: Vec<f64> = after.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let old_classes: Vec<usize> = store.classes.keys().copied().collect();
    let mut shifts = Vec::with_capacity(old_classes.len());
    let mut dist = vec![0.0; n];
    for c in &old_classes {
        let proto = &store.classes[c].proto;
        for (i, slot) in dist.iter_mut().enumerate() {
            *slot = sq_dist(before.row(i), proto);
        }
        // Weights are only used as ratios; shifting the exponent avoids underflow.
        let nearest = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        let mut acc = vec![0.0; d];
        for (i, &dd) in dist.iter().enumerate() {
            let w = (-(dd - nearest) * inv).exp();
            total += w;
            for (s, v) in acc.iter_mut().zip(&delta[i * d..(i + 1) * d]) {
                *s += w * v;
            }
        }
        acc.iter_mut().for_each(|v| *v /= total);
        shifts.push(acc);
    }
    Ok(ShiftReport {
        old_classes,
        shifts,
        new_classes: Vec::new(),
        drifts: Vec::new(),
        weights: None,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Mean drift of the `k` samples whose previous-model embedding is nearest
/// to each stored prototype. Ties are broken by sample index.
pub fn estimate_shift_knearest(store: &PrototypeStore, before: &Tensor, after: &Tensor, k: usize) -> Result<ShiftReport> {
    let start = Instant::now();
    check_pairs(store, before, after, "estimate_shift_knearest")?;
    let (n, d) = (before.rows(), before.cols());
    if k == 0 || k > n {
        return Err(CilError::contract(format!("k = {k} outside 1..={n}")));
    }
    let old_classes: Vec<usize> = store.classes.keys().copied().collect();
    let mut shifts = Vec::with_capacity(old_classes.len());
    for c in &old_classes {
        let proto = &store.classes[c].proto;
        let mut order: Vec<(f64, usize)> = (0..n).map(|i| (sq_dist(before.row(i), proto), i)).collect();
        if k < n {
            order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let mut chosen: Vec<usize> = order[..k].iter().map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        let mut acc = vec![0.0; d];
        for &i in &chosen {
            for ((s, a), b) in acc.iter_mut().zip(after.row(i)).zip(before.row(i)) {
                *s += a - b;
            }
        }
        acc.iter_mut().for_each(|v| *v /= k as f64);
        shifts.push(acc);
    }
    Ok(ShiftReport {
        old_classes,
        shifts,
        new_classes: Vec::new(),
        drifts: Vec::new(),
        weights: None,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Per-class mean feature under each of two embeddings of the same samples,
/// returned as `(mean_after − mean_before, mean_after)`.
pub fn true_shift(
    before: &Tensor,
    after: &Tensor,
    labels: &[usize],
) -> Result<BTreeMap<usize, (Vec<f64>, Vec<f64>)>> {
    if before.shape() != after.shape() || before.rows() != labels.len() {
        return Err(CilError::dim("true_shift", before.shape(), after.shape()));
    }
    let d = before.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; d], vec![0.0; d], 0));
        for (s, v) in e.0.iter_mut().zip(before.row(i)) {
            *s += v;
        }
        for (s, v) in e.1.iter_mut().zip(after.row(i)) {
            *s += v;
        }
        e.2 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (b, a, n))| {
            let mean_a: Vec<f64> = a.iter().map(|v| v / n as f64).collect();
            let shift = mean_a.iter().zip(&b).map(|(ma, sb)| ma - sb / n as f64).collect();
            (c, (shift, mean_a))
        })
        .collect())
}

/// Ground-truth shift of each retained class between two models. Only the
/// evaluation harness has retained samples; the method never sees them.
pub fn oracle_true_shift(
    retained: &LabeledSet,
    old_model: &Model,
    new_model: &Model,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let before = old_model.features(&retained.inputs)?;
    let after = new_model.features(&retained.inputs)?;
    Ok(true_shift(&before, &after, &retained.labels)?
        .into_iter()
        .map(|(c, (s, _))| (c, s))
        .collect())
}
