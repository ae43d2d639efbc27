//! Acceptance suite: runs every criterion on the default benchmark and
//! prints one PASS/FAIL line per criterion. Exits nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use cil_core::backbone::{FrozenWeights, Model, PetAttachment, PetConfig, PetKind, Placement};
use cil_core::container::Container;
use cil_core::data::{read_embeddings, write_embeddings};
use cil_core::harness::{
    self, default_sizes, format_bench, prepare, run_trajectory, AlignMode, ExperimentConfig, Prepared, Regime,
    ShiftEstimator, TrajectoryOptions, TrajectoryResult, Variant, VariantRun,
};
use cil_core::numerics::{Graph, Rng, Tensor};
use cil_core::prototypes::{class_statistics, estimate_shift_prototype, ClassStats, CovarianceKind, PrototypeStore};
use cil_core::training::{session_loss, CosineHead, HeadKind, LossConfig};
use cil_core::CilError;

type Outcome = (bool, String);

const MODES: [AlignMode; 3] = [AlignMode::None, AlignMode::Ca, AlignMode::Ssca];

fn variants() -> Vec<Variant> {
    MODES
        .iter()
        .map(|&mode| Variant {
            mode,
            estimator: ShiftEstimator::Prototype,
        })
        .collect()
}

fn variant(r: &TrajectoryResult, mode: AlignMode) -> &VariantRun {
    r.variants.iter().find(|v| v.variant.mode == mode).expect("variant present")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// State shared between criteria so trajectories are trained once.
struct Shared {
    cfg: ExperimentConfig,
    prepared: Prepared,
    frozen_bytes: Vec<u8>,
    /// Seeds 0..10 with modes none, CA and SSCA; seeds 0..3 carry a probe.
    main: Vec<TrajectoryResult>,
    main_secs: f64,
    models: Vec<Model>,
}

impl Shared {
    fn new() -> Self {
        let cfg = ExperimentConfig::default();
        let prepared = prepare(&cfg).expect("pretraining");
        let frozen_bytes = prepared.frozen.as_ref().expect("backbone").fingerprint();
        Self {
            cfg,
            prepared,
            frozen_bytes,
            main: Vec::new(),
            main_secs: 0.0,
            models: Vec::new(),
        }
    }

    fn trajectory(&mut self, cfg: &ExperimentConfig, seed: u64, opts: &TrajectoryOptions) -> TrajectoryResult {
        let mut r = run_trajectory(cfg, &self.prepared, seed, opts).expect("trajectory");
        if let Some(m) = r.model.take() {
            self.models.push(m);
        }
        r
    }

    fn ensure_main(&mut self) {
        if !self.main.is_empty() {
            return;
        }
        let start = Instant::now();
        let cfg = self.cfg.clone();
        for seed in 0..10 {
            let opts = TrajectoryOptions {
                variants: variants(),
                sensitivity: false,
                probe: seed < 3,
            };
            let r = self.trajectory(&cfg, seed, &opts);
            self.main.push(r);
        }
        self.main_secs = start.elapsed().as_secs_f64();
    }
}

fn c1_gradients(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for case in common::op_cases() {
        let e = common::case_error(&case, 20);
        worst = worst.max(e);
        if e > 1e-4 {
            failed.push(case.name.to_string());
        }
    }
    for seed in 0..20 {
        let e = common::loss_gradient_error(seed);
        worst = worst.max(e);
        if e > 1e-4 {
            failed.push(format!("loss#{seed}"));
        }
    }
    for (kind, placement) in [
        (PetKind::Adapter, Placement::Parallel),
        (PetKind::Adapter, Placement::Sequential),
        (PetKind::Ssf, Placement::Parallel),
        (PetKind::VptShallow, Placement::Parallel),
        (PetKind::VptDeep, Placement::Parallel),
        (PetKind::Full, Placement::Parallel),
    ] {
        for seed in 0..20 {
            let e = common::encoder_gradient_error(kind, placement, seed);
            worst = worst.max(e);
            if e > 1e-4 {
                failed.push(format!("{kind}#{seed}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        failed.is_empty() && secs < 60.0,
        format!("worst relative error {worst:.2e} over 20 instances per case, {secs:.1}s, failing {failed:?}"),
    )
}

fn c2_identity(s: &mut Shared) -> Outcome {
    let frozen = s.prepared.frozen.clone().expect("backbone");
    let x = Tensor::matrix(16, 64, Rng::new(3).normal_vec(16 * 64, 1.0)).unwrap();
    let plain = Model::new(frozen.clone(), PetAttachment::None).features(&x).unwrap();
    let mut worst: f64 = 0.0;
    for (kind, prompts) in [(PetKind::Adapter, 4), (PetKind::Ssf, 4), (PetKind::VptShallow, 0), (PetKind::VptDeep, 0)] {
        let cfg = PetConfig {
            kind,
            prompts,
            ..PetConfig::default()
        };
        let pet = PetAttachment::init(&cfg, &frozen, &mut Rng::new(9)).unwrap();
        let f = Model::new(frozen.clone(), pet).features(&x).unwrap();
        worst = worst.max(max_abs_diff(&f, &plain));
    }
    // Train through every session of one seed per attachment kind and
    // compare the backbone bytes afterwards.
    s.ensure_main();
    let cfg = s.cfg.clone();
    let none_only = TrajectoryOptions {
        variants: vec![variants()[0]],
        sensitivity: false,
        probe: false,
    };
    for kind in [PetKind::Ssf, PetKind::VptDeep, PetKind::Full] {
        let mut c = cfg.clone();
        c.pet.kind = kind;
        c.data.sessions = 2;
        s.trajectory(&c, 0, &none_only);
    }
    let untouched = s.models.iter().all(|m| m.frozen.fingerprint() == s.frozen_bytes)
        && frozen.fingerprint() == s.frozen_bytes;
    (
        worst <= 1e-12 && untouched,
        format!(
            "identity max |Δ| {worst:.1e}; frozen bytes unchanged after {} trained models: {untouched}",
            s.models.len()
        ),
    )
}

fn c3_masking(_: &mut Shared) -> Outcome {
    let mut bad = 0;
    let mut checked = 0;
    for kind in [HeadKind::Cosine, HeadKind::Linear] {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let mut head = CosineHead::new(kind, 6);
            let sessions: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();
            for (c, &t) in sessions.iter().enumerate() {
                head.add_classes(&[c], t, &mut rng).unwrap();
            }
            let current = 1 + rng.below(2);
            let own: Vec<usize> = (0..8).filter(|&c| sessions[c] == current).collect();
            if own.is_empty() {
                continue;
            }
            let labels: Vec<usize> = (0..5).map(|_| own[rng.below(own.len())]).collect();
            let mut g = Graph::new();
            let f = g.param(Tensor::matrix(5, 6, rng.normal_vec(30, 1.0)).unwrap());
            let w = g.param(head.rows.clone());
            let loss = session_loss(&mut g, f, w, &head, &own, &labels, &LossConfig::default()).unwrap();
            let grad = g.backward(loss).unwrap().wrt(w);
            for c in 0..8 {
                if sessions[c] != current {
                    checked += 1;
                    if grad.row(head.row_of(c).unwrap()).iter().any(|&v| v != 0.0) {
                        bad += 1;
                    }
                }
            }
        }
    }
    (bad == 0, format!("{checked} out-of-session rows checked, {bad} with nonzero gradient"))
}

fn random_vecs(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng.normal_vec(d, 1.0)).collect()
}

fn store_of(protos: &[Vec<f64>]) -> PrototypeStore {
    let d = protos[0].len();
    let mut s = PrototypeStore::new(d, CovarianceKind::Diagonal);
    for (c, p) in protos.iter().enumerate() {
        s.classes.insert(
            50 + c,
            ClassStats {
                proto: p.clone(),
                cov: Tensor::filled(&[d], 1.0),
                session: 0,
                count: 1,
            },
        );
    }
    s
}

fn c4_shift(_: &mut Shared) -> Outcome {
    let (mut zero_bad, mut single_err, mut perm_err): (usize, f64, f64) = (0, 0.0, 0.0);
    for seed in 0..200 {
        let mut rng = Rng::new(seed);
        let d = 2 + rng.below(8);
        let old = 1 + rng.below(10);
        let store = store_of(&random_vecs(&mut rng, old, d));
        let n = 1 + rng.below(6);
        let before: BTreeMap<usize, Vec<f64>> = random_vecs(&mut rng, n, d).into_iter().enumerate().collect();
        let after: BTreeMap<usize, Vec<f64>> = random_vecs(&mut rng, n, d).into_iter().enumerate().collect();
        for clamp in [false, true] {
            let same = estimate_shift_prototype(&store, &before, &before, clamp).unwrap();
            zero_bad += same.shifts.iter().flatten().filter(|&&v| v != 0.0).count();

            let b1: BTreeMap<usize, Vec<f64>> = [(7, before[&0].clone())].into();
            let a1: BTreeMap<usize, Vec<f64>> = [(7, after[&0].clone())].into();
            let drift: Vec<f64> = a1[&7].iter().zip(&b1[&7]).map(|(a, b)| a - b).collect();
            let one = estimate_shift_prototype(&store, &b1, &a1, clamp).unwrap();
            for (k, s) in one.shifts.iter().enumerate() {
                // A clamped weight that is zero leaves nothing to average.
                let weight = cil_core::numerics::cosine_similarity(&b1[&7], &store.classes[&(50 + k)].proto).unwrap();
                if clamp && weight <= 0.0 {
                    continue;
                }
                single_err = single_err.max(s.iter().zip(&drift).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            }

            let base = estimate_shift_prototype(&store, &before, &after, clamp).unwrap();
            let perm = rng.permutation(n);
            let pb: BTreeMap<usize, Vec<f64>> = perm.iter().enumerate().map(|(k, &i)| (k, before[&i].clone())).collect();
            let pa: BTreeMap<usize, Vec<f64>> = perm.iter().enumerate().map(|(k, &i)| (k, after[&i].clone())).collect();
            let permuted = estimate_shift_prototype(&store, &pb, &pa, clamp).unwrap();
            for (x, y) in base.shifts.iter().zip(&permuted.shifts) {
                perm_err = perm_err.max(x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
            }
        }
    }
    (
        zero_bad == 0 && single_err <= 1e-12 && perm_err == 0.0,
        format!(
            "200 instances: nonzero entries for identical models {zero_bad}, single-class max |Δ| {single_err:.1e}, permutation max |Δ| {perm_err:.1e}"
        ),
    )
}

fn c5_shift_oracle(s: &mut Shared) -> Outcome {
    s.ensure_main();
    let mut wins = 0;
    let mut rows = Vec::new();
    for r in &s.main {
        let diag: Vec<_> = variant(r, AlignMode::Ssca).sessions.iter().filter_map(|x| x.shift).collect();
        let comp = mean(&diag.iter().map(|d| d.compensated_error).collect::<Vec<_>>());
        let stale = mean(&diag.iter().map(|d| d.stale_error).collect::<Vec<_>>());
        wins += usize::from(comp < stale);
        rows.push(format!("{:.3}/{:.3}", comp, stale));
    }
    (
        wins >= 8 && s.main_secs < 300.0,
        format!(
            "compensated < stale in {wins}/10 seeds [{}], {:.0}s for 10 seeds",
            rows.join(" "),
            s.main_secs
        ),
    )
}

fn mode_means(results: &[TrajectoryResult]) -> [f64; 3] {
    MODES.map(|m| mean(&results.iter().map(|r| variant(r, m).a_avg()).collect::<Vec<_>>()))
}

fn c6_alignment(s: &mut Shared) -> Outcome {
    s.ensure_main();
    let cosine = mode_means(&s.main[..5]);
    let mut cfg = s.cfg.clone();
    cfg.head = HeadKind::Linear;
    let opts = TrajectoryOptions {
        variants: variants(),
        sensitivity: false,
        probe: false,
    };
    let linear_runs: Vec<TrajectoryResult> = (0..5).map(|seed| s.trajectory(&cfg, seed, &opts)).collect();
    let linear = mode_means(&linear_runs);
    let ok = cosine[2] >= cosine[1]
        && cosine[1] >= cosine[0]
        && cosine[2] - cosine[0] >= 0.01
        && linear[2] >= linear[1]
        && linear[1] >= linear[0];
    (
        ok,
        format!(
            "cosine none {:.4} ca {:.4} ssca {:.4}; linear none {:.4} ca {:.4} ssca {:.4}",
            cosine[0], cosine[1], cosine[2], linear[0], linear[1], linear[2]
        ),
    )
}

fn c7_probe(s: &mut Shared) -> Outcome {
    s.ensure_main();
    let all: Vec<f64> = s.main[..3].iter().map(|r| r.probe_accuracy.expect("probe")).collect();
    let mut per_regime = BTreeMap::new();
    for regime in [Regime::None, Regime::FirstSession] {
        let mut cfg = s.cfg.clone();
        cfg.regime = regime;
        cfg.seeds = vec![0, 1, 2];
        per_regime.insert(regime.as_str(), harness::probe(&cfg, &s.prepared).expect("probe"));
    }
    let (none, first) = (mean(&per_regime["none"]), mean(&per_regime["first_session"]));
    let all_m = mean(&all);
    let band = 0.005;
    (
        all_m - first >= -band && first - none >= -band,
        format!(
            "probe none {none:.4} {:?}, first {first:.4} {:?}, all {all_m:.4} {:?}",
            per_regime["none"], per_regime["first_session"], all
        ),
    )
}

fn c8_pet(s: &mut Shared) -> Outcome {
    s.ensure_main();
    let adapter = mean(&s.main[..3].iter().map(|r| variant(r, AlignMode::None).a_avg()).collect::<Vec<_>>());
    let opts = TrajectoryOptions {
        variants: vec![variants()[0]],
        sensitivity: false,
        probe: false,
    };
    let mut scores = vec![("adapter", adapter)];
    for kind in [PetKind::Ssf, PetKind::VptShallow, PetKind::VptDeep] {
        let mut cfg = s.cfg.clone();
        cfg.pet.kind = kind;
        let runs: Vec<f64> = cfg.seeds.clone().into_iter().map(|seed| s.trajectory(&cfg, seed, &opts).variants[0].a_avg()).collect();
        scores.push((kind.as_str(), mean(&runs)));
    }
    let best = scores.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    (
        adapter >= best,
        format!(
            "mode none, seeds {:?}: {}",
            s.cfg.seeds,
            scores.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c9_timing(s: &mut Shared) -> Outcome {
    let rows = harness::shift_bench(&s.cfg.shift, &default_sizes(), 3, 0).expect("bench");
    print!("{}", format_bench(&rows));
    let target = rows
        .iter()
        .find(|r| r.size.n == 5000 && r.size.old_classes == 100 && r.size.new_classes == 10 && r.size.dim == 64)
        .expect("N=5000 row");
    (
        rows.len() == 4 && target.speedup >= 5.0,
        format!("{} size points, speedup at N=5000 {:.1}x", rows.len(), target.speedup),
    )
}

fn c10_sensitivity(s: &mut Shared) -> Outcome {
    let mut cfg = s.cfg.clone();
    let a = harness::sensitivity_report(&cfg, &s.prepared).expect("sensitivity");
    cfg.sensitivity_epsilon *= 10.0;
    let b = harness::sensitivity_report(&cfg, &s.prepared).expect("sensitivity");
    let values: Vec<f64> = a.sessions.iter().flat_map(|r| r.values()).collect();
    let scaled: Vec<f64> = b.sessions.iter().flat_map(|r| r.values()).collect();
    let nonpositive = values.iter().chain(&scaled).all(|&v| v <= 0.0);
    let worst = values
        .iter()
        .zip(&scaled)
        .map(|(x, y)| if *x == 0.0 { y.abs() } else { ((y / x) - 10.0).abs() / 10.0 })
        .fold(0.0, f64::max);
    let pairs = a.consecutive_similarity.len() == a.sessions.len() - 1
        && a.consecutive_similarity.iter().all(|(_, _, v)| v.is_some());
    (
        nonpositive && worst <= 1e-9 && pairs,
        format!(
            "{} values, all ≤ 0: {nonpositive}; scaling rtol {worst:.1e}; similarities {:?}",
            values.len(),
            a.consecutive_similarity.iter().map(|(_, _, v)| v.map(|x| (x * 1e4).round() / 1e4)).collect::<Vec<_>>()
        ),
    )
}

fn c11_sampling(_: &mut Shared) -> Outcome {
    let checks: Vec<common::SamplingCheck> = (0..3).map(|seed| common::gaussian_sampling_check(seed, 8, 10_000)).collect();
    let m = checks.iter().map(|c| c.mean_units).fold(0.0, f64::max);
    let c = checks.iter().map(|c| c.cov_units).fold(0.0, f64::max);
    (
        m < 4.0 && c < 5.0,
        format!("3 seeds, d=8, S=10000: mean {m:.2} σ_max/√S, covariance {c:.2} ‖Σ‖/√S"),
    )
}

fn c12_determinism(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_cil"))
            .args(["run", "--seed", "0,1", "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        reports.push(std::fs::read(out.join("report.jsonl")).unwrap());
    }
    (
        reports[0] == reports[1] && !reports[0].is_empty(),
        format!("two `cil run --seed 0,1` reports, {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]),
    )
}

fn c13_formats(s: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let frozen: &Arc<FrozenWeights> = s.prepared.frozen.as_ref().unwrap();
    let path = dir.path().join("w.cilb");
    frozen.save(&path).unwrap();
    let weights_ok = FrozenWeights::load(&path).unwrap().fingerprint() == frozen.fingerprint();

    let stream = s.prepared.stream(&s.cfg, 0).unwrap();
    let first = &stream.sessions[0].train;
    let mut store_ok = true;
    for kind in [CovarianceKind::Full, CovarianceKind::Diagonal] {
        let mut store = PrototypeStore::new(first.dim(), kind);
        store.insert(class_statistics(&first.inputs, &first.labels, &stream.sessions[0].classes, kind, 1).unwrap()).unwrap();
        let p = dir.path().join("s.cilb");
        store.save(&p).unwrap();
        let back = PrototypeStore::load(&p).unwrap();
        store_ok &= back.to_container().to_bytes() == store.to_container().to_bytes();
    }

    let mut csv = Vec::new();
    write_embeddings(&stream, &mut csv).unwrap();
    let csv_ok = read_embeddings(csv.as_slice()).unwrap() == stream;

    let bytes = frozen.to_container().to_bytes();
    let truncated = matches!(
        Container::from_bytes(&bytes[..bytes.len() / 2]),
        Err(CilError::Format { ref field, .. }) if !field.is_empty()
    );
    let bad_csv = "session,split,label,f0\n0,train,1,0.5\n0,train,1,x\n";
    let located = matches!(
        read_embeddings(bad_csv.as_bytes()),
        Err(CilError::Parse { line: 3, ref field, .. }) if field == "f0"
    );
    (
        weights_ok && store_ok && csv_ok && truncated && located,
        format!("weights {weights_ok}, store {store_ok}, csv {csv_ok}, malformed container located {truncated}, malformed csv located {located}"),
    )
}

type Criterion = (&'static str, fn(&mut Shared) -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 13] = [
        ("gradient oracle", c1_gradients),
        ("attachment identity and frozen backbone", c2_identity),
        ("local masking", c3_masking),
        ("shift analytics", c4_shift),
        ("shift against retained-sample truth", c5_shift_oracle),
        ("alignment ordering", c6_alignment),
        ("linear-probe ordering", c7_probe),
        ("attachment comparison", c8_pet),
        ("shift estimation timing", c9_timing),
        ("sensitivity contract", c10_sensitivity),
        ("gaussian sampling", c11_sampling),
        ("determinism", c12_determinism),
        ("format round trips", c13_formats),
    ];
    let start = Instant::now();
    let mut shared = Shared::new();
    // Timing first, before anything else competes for caches.
    let order = [8, 0, 2, 3, 10, 12, 4, 5, 6, 7, 1, 9, 11];
    let mut results: Vec<Option<Outcome>> = vec![None; criteria.len()];
    for i in order {
        let (name, f) = criteria[i];
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut shared)))
            .unwrap_or_else(|e| (false, format!("panicked: {:?}", e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())))));
        println!(
            "criterion {:>2} {} {name} ({:.1}s): {}",
            i + 1,
            if outcome.0 { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            outcome.1
        );
        results[i] = Some(outcome);
    }
    println!("\nsummary ({:.0}s total):", start.elapsed().as_secs_f64());
    let mut failed = 0;
    for (i, (name, _)) in criteria.iter().enumerate() {
        let ok = results[i].as_ref().is_some_and(|o| o.0);
        failed += usize::from(!ok);
        println!("criterion {:>2} {} {name}", i + 1, if ok { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
