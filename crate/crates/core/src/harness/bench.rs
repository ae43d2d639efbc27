use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use super::config::ShiftConfig;
use crate::error::Result;
use crate::numerics::{Rng, Tensor};
use crate::prototypes::{
    estimate_shift_prototype, estimate_shift_sample, median_pairwise_distance, ClassStats, CovarianceKind, PrototypeStore,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BenchSize {
    /// Current-session samples.
    pub n: usize,
    pub old_classes: usize,
    pub new_classes: usize,
    pub dim: usize,
}

impl BenchSize {
    pub fn new(n: usize, old_classes: usize, new_classes: usize, dim: usize) -> Self {
        Self {
            n,
            old_classes,
            new_classes,
            dim,
        }
    }

    /// The speed requirement only applies to non-trivial problems.
    pub fn asserted(&self) -> bool {
        self.n >= 1000 && self.old_classes >= 50
    }
}

pub fn default_sizes() -> Vec<BenchSize> {
    [500, 1000, 2500, 5000].into_iter().map(|n| BenchSize::new(n, 100, 10, 64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: BenchSize,
    pub prototype_s: f64,
    pub sample_s: f64,
    /// `sample_s / prototype_s`.
    pub speedup: f64,
    /// `Some(speedup >= 5)` for sizes where the requirement applies.
    pub passed: Option<bool>,
}

fn best_of<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times both shift estimators on random problems of each size, keeping
/// the fastest of `reps` runs. Prototype timing includes computing the
/// new-class means from the samples; the sample estimator gets its kernel
/// width precomputed.
pub fn shift_bench(cfg: &ShiftConfig, sizes: &[BenchSize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for (i, size) in sizes.iter().enumerate() {
        let mut rng = Rng::new(seed).derive(i as u64);
        let d = size.dim;
        let mut store = PrototypeStore::new(d, CovarianceKind::Diagonal);
        for c in 0..size.old_classes {
            store.classes.insert(
                c,
                ClassStats {
                    proto: rng.normal_vec(d, 1.0),
                    cov: Tensor::filled(&[d], 1.0),
                    session: 0,
                    count: 1,
                },
            );
        }
        let before = Tensor::matrix(size.n, d, rng.normal_vec(size.n * d, 1.0))?;
        let mut after = before.clone();
        for v in after.data_mut() {
            *v += 0.1 * rng.normal();
        }
        let labels: Vec<usize> = (0..size.n).map(|k| size.old_classes + k % size.new_classes).collect();
        let bandwidth = cfg.bandwidth.unwrap_or_else(|| median_pairwise_distance(&before));

        let prototype_s = best_of(reps, || {
            let means = |x: &Tensor| {
                let mut m: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
                for (k, &l) in labels.iter().enumerate() {
                    let e = m.entry(l).or_insert_with(|| (vec![0.0; d], 0));
                    e.0.iter_mut().zip(x.row(k)).for_each(|(s, v)| *s += v);
                    e.1 += 1;
                }
                m.into_iter()
                    .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
                    .collect::<BTreeMap<usize, Vec<f64>>>()
            };
            estimate_shift_prototype(&store, &means(&before), &means(&after), cfg.clamp_negative_weights)
        })?;
        let sample_s = best_of(reps, || estimate_shift_sample(&store, &before, &after, Some(bandwidth)))?;
        let speedup = sample_s / prototype_s.max(f64::MIN_POSITIVE);
        rows.push(BenchRow {
            size: *size,
            prototype_s,
            sample_s,
            speedup,
            passed: size.asserted().then_some(speedup >= 5.0),
        });
    }
    Ok(rows)
}

/// Plain-text table of a benchmark run.
pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:>6} {:>6} {:>6} {:>4} {:>12} {:>12} {:>8}  check\n",
        "N", "C_old", "C_new", "d", "prototype_s", "sample_s", "speedup"
    );
    for r in rows {
        let check = match r.passed {
            Some(true) => "ok",
            Some(false) => "FAIL",
            None => "-",
        };
        out.push_str(&format!(
            "{:>6} {:>6} {:>6} {:>4} {:>12.6} {:>12.6} {:>8.1}  {check}\n",
            r.size.n, r.size.old_classes, r.size.new_classes, r.size.dim, r.prototype_s, r.sample_s, r.speedup
        ));
    }
    out
}
