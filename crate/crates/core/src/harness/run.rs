use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::config::{AlignMode, ExperimentConfig, Regime, ShiftEstimator, Source};
use crate::alignment::retrain_unified_classifier;
use crate::backbone::{pretrain, FrozenWeights, Model, PetAttachment};
use crate::data::{fewshot_subsample, generate_synthetic, ingest_embeddings, split_cil, LabeledSet, SessionStream, SyntheticData};
use crate::error::{CilError, Result};
use crate::numerics::{cosine_similarity, sq_dist, Rng, Tensor};
use crate::prototypes::{
    class_statistics, estimate_shift_knearest, estimate_shift_prototype, estimate_shift_sample, true_shift, PrototypeStore,
    ShiftReport,
};
use crate::training::{
    parameter_sensitivity, train_head_session, train_session, CosineHead, SensitivityReport, TrainOptions,
};

/// Data and backbone shared by every seed of an experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub synthetic: Option<SyntheticData>,
    pub stream: Option<SessionStream>,
    pub frozen: Option<Arc<FrozenWeights>>,
    pub pretrain_accuracy: Option<f64>,
}

/// Generates or loads the data and obtains the frozen backbone (loaded or
/// pretrained on the base classes).
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (synthetic, stream) = match cfg.data.source {
        Source::Synthetic => (Some(generate_synthetic(&cfg.data.synthetic, cfg.data.data_seed)?), None),
        Source::Embeddings => (None, Some(ingest_embeddings(cfg.data.path.as_ref().expect("validated"))?)),
    };
    let (frozen, pretrain_accuracy) = if cfg.bypass_backbone {
        (None, None)
    } else if let Some(path) = &cfg.weights {
        let w = FrozenWeights::load(path)?;
        if w.config != cfg.backbone {
            return Err(CilError::Config(format!("weights in {} do not match the backbone config", path.display())));
        }
        (Some(Arc::new(w)), None)
    } else {
        let base = &synthetic.as_ref().expect("synthetic source").base;
        let report = pretrain(&cfg.backbone, base, &cfg.pretrain, &mut Rng::new(cfg.data.data_seed).derive(9))?;
        (Some(Arc::new(report.weights)), Some(report.train_accuracy))
    };
    Ok(Prepared {
        synthetic,
        stream,
        frozen,
        pretrain_accuracy,
    })
}

impl Prepared {
    /// The session stream for one experiment seed.
    pub fn stream(&self, cfg: &ExperimentConfig, seed: u64) -> Result<SessionStream> {
        let stream = match (&self.synthetic, &self.stream) {
            (Some(s), _) => split_cil(&s.cil, cfg.data.sessions, seed)?,
            (None, Some(s)) => s.clone(),
            (None, None) => return Err(CilError::contract("prepared context holds no data")),
        };
        match cfg.data.fewshot {
            Some(f) => fewshot_subsample(&stream, f.shots, f.from_session, seed),
            None => Ok(stream),
        }
    }
}

/// Alignment mode plus the estimator used when the mode compensates shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub mode: AlignMode,
    pub estimator: ShiftEstimator,
}

impl Variant {
    pub fn label(&self) -> String {
        match self.mode {
            AlignMode::Ssca => format!("ssca-{}", self.estimator.label()),
            m => m.as_str().to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub train_s: f64,
    pub shift_s: f64,
    pub align_s: f64,
}

/// Rows are true classes, columns predictions, both in `classes` order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Confusion {
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in &self.classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(&c.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Prototype error against the true class means of retained samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShiftDiagnostics {
    /// Mean over old classes of ‖stored prototype − true mean‖.
    pub compensated_error: f64,
    /// Same for prototypes that were never shifted.
    pub stale_error: f64,
    /// Mean cosine between estimated and true per-session shift, over
    /// classes where both are nonzero.
    pub mean_cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionRecord {
    pub acc: f64,
    pub acc_new: f64,
    pub acc_old: Option<f64>,
    pub confusion: Confusion,
    pub timings: Timings,
    pub shift: Option<ShiftDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub sessions: Vec<SessionRecord>,
}

impl VariantRun {
    pub fn accuracies(&self) -> Vec<f64> {
        self.sessions.iter().map(|s| s.acc).collect()
    }

    pub fn a_last(&self) -> f64 {
        self.sessions.last().map_or(0.0, |s| s.acc)
    }

    pub fn a_avg(&self) -> f64 {
        let a = self.accuracies();
        if a.is_empty() {
            0.0
        } else {
            a.iter().sum::<f64>() / a.len() as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryOptions {
    pub variants: Vec<Variant>,
    /// Compute parameter sensitivity at the start of every session.
    pub sensitivity: bool,
    /// Linear-probe the final features on all seen classes.
    pub probe: bool,
}

#[derive(Clone, Debug)]
pub struct TrajectoryResult {
    pub seed: u64,
    pub variants: Vec<VariantRun>,
    pub sensitivity: Vec<SensitivityReport>,
    pub probe_accuracy: Option<f64>,
    pub model: Option<Model>,
}

enum Extractor {
    Backbone(Model),
    Identity,
}

impl Extractor {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Extractor::Backbone(m) => m.features(x),
            Extractor::Identity => Ok(x.clone()),
        }
    }
}

struct VariantState {
    variant: Variant,
    head: CosineHead,
    store: Option<PrototypeStore>,
    records: Vec<SessionRecord>,
}

fn timed<T>(record: bool, f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, if record { start.elapsed().as_secs_f64() } else { 0.0 }))
}

fn class_means(features: &Tensor, labels: &[usize], classes: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let d = features.cols();
    classes
        .iter()
        .map(|&c| {
            let mut sum = vec![0.0; d];
            let mut n = 0usize;
            for (i, &l) in labels.iter().enumerate() {
                if l == c {
                    sum.iter_mut().zip(features.row(i)).for_each(|(s, v)| *s += v);
                    n += 1;
                }
            }
            (c, sum.into_iter().map(|s| s / n.max(1) as f64).collect())
        })
        .collect()
}

fn evaluate(head: &CosineHead, feats: &Tensor, test: &LabeledSet, new_classes: &[usize]) -> Result<(f64, f64, Option<f64>, Confusion)> {
    let pred = head.predict(feats)?;
    let k = head.len();
    let mut counts = vec![vec![0u64; k]; k];
    let (mut hit, mut hit_new, mut n_new, mut hit_old, mut n_old) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, l) in pred.iter().zip(&test.labels) {
        let row = head.row_of(*l).ok_or_else(|| CilError::contract(format!("test class {l} has no head row")))?;
        let col = head.row_of(*p).expect("predicted from head");
        counts[row][col] += 1;
        let ok = p == l;
        hit += usize::from(ok);
        if new_classes.contains(l) {
            n_new += 1;
            hit_new += usize::from(ok);
        } else {
            n_old += 1;
            hit_old += usize::from(ok);
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((
        frac(hit, test.len()),
        frac(hit_new, n_new),
        (n_old > 0).then(|| frac(hit_old, n_old)),
        Confusion {
            classes: head.classes.clone(),
            counts,
        },
    ))
}

fn mean_distance(store: &PrototypeStore, truth: &BTreeMap<usize, (Vec<f64>, Vec<f64>)>) -> f64 {
    let errs: Vec<f64> = truth
        .iter()
        .filter_map(|(c, (_, mean))| store.get(*c).map(|s| sq_dist(&s.proto, mean).sqrt()))
        .collect();
    errs.iter().sum::<f64>() / errs.len().max(1) as f64
}

/// Runs session training over the whole stream once and
/// evaluates every requested variant along the way. Local training never
/// reads old head rows, so the attachment trajectory is the same for every
/// variant; each variant keeps its own head and prototype store.
pub fn run_trajectory(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64, opts: &TrajectoryOptions) -> Result<TrajectoryResult> {
    let stream = prepared.stream(cfg, seed)?;
    if stream.is_empty() {
        return Err(CilError::contract("stream has no sessions"));
    }
    let root = Rng::new(seed);
    let mut extractor = match &prepared.frozen {
        Some(frozen) => {
            let pet = PetAttachment::init(&cfg.pet, frozen, &mut root.derive(1))?;
            Extractor::Backbone(Model::new(frozen.clone(), pet))
        }
        None => Extractor::Identity,
    };
    let dim = match &extractor {
        Extractor::Backbone(m) => m.embed_dim(),
        Extractor::Identity => stream.dim(),
    };
    let mut local = CosineHead::new(cfg.head, dim);
    let mut stale = PrototypeStore::new(dim, cfg.covariance);
    let mut states: Vec<VariantState> = opts
        .variants
        .iter()
        .map(|&variant| VariantState {
            variant,
            head: CosineHead::new(cfg.head, dim),
            store: (variant.mode == AlignMode::Ssca).then(|| PrototypeStore::new(dim, cfg.covariance)),
            records: Vec::new(),
        })
        .collect();
    let mut sensitivity = Vec::new();

    for (t, session) in stream.sessions.iter().enumerate() {
        let mut step = || -> Result<()> {
            let rng_t = root.derive(100 + t as u64);
            let train_pet = match &extractor {
                Extractor::Backbone(m) => cfg.regime.trains(t) && m.pet.trainable_count() > 0,
                Extractor::Identity => false,
            };
            let opts_t = TrainOptions {
                loss: cfg.loss,
                schedule: cfg.schedule,
                epochs: cfg.schedule.epochs_for(t),
                train_pet,
            };
            let retained = if t > 0 { Some(stream.cumulative_train(t - 1)?) } else { None };
            let before = if train_pet { Some(extractor.features(&session.train.inputs)?) } else { None };
            let retained_before = match &retained {
                Some(r) => Some(extractor.features(&r.inputs)?),
                None => None,
            };

            let mut train_rng = rng_t.derive(1);
            local.add_classes(&session.classes, t, &mut train_rng.derive(0))?;
            if let (true, Extractor::Backbone(m)) = (opts.sensitivity, &extractor) {
                sensitivity.push(parameter_sensitivity(m, &local, &session.train, &cfg.loss, cfg.sensitivity_epsilon)?);
            }
            let teacher = match (&extractor, cfg.loss.kd_weight > 0.0) {
                (Extractor::Backbone(m), true) => Some(m.clone()),
                _ => None,
            };
            let (_, train_s) = timed(cfg.record_timings, || match &mut extractor {
                Extractor::Backbone(m) => train_session(m, &mut local, &session.train, t, &opts_t, teacher.as_ref(), &mut train_rng),
                Extractor::Identity => train_head_session(&mut local, &session.train, t, &opts_t, &mut train_rng),
            })?;

            let after = extractor.features(&session.train.inputs)?;
            let new_stats = class_statistics(&after, &session.train.labels, &session.classes, cfg.covariance, t)?;
            let truth = match (&retained, &retained_before) {
                (Some(r), Some(rb)) => Some(true_shift(rb, &extractor.features(&r.inputs)?, &r.labels)?),
                _ => None,
            };
            let test = stream.cumulative_test(t)?;
            let test_feats = extractor.features(&test.inputs)?;

            let stale_before_update = stale.clone();
            stale.insert(new_stats.clone())?;

            for st in states.iter_mut() {
                let mut shift_s = 0.0;
                let mut diag = None;
                if let Some(store) = st.store.as_mut() {
                    let (report, secs) = timed(cfg.record_timings, || {
                        estimate(cfg, st.variant.estimator, store, before.as_ref(), &after, &session.train, truth.as_ref())
                    })?;
                    shift_s = secs;
                    store.update(&report, new_stats.clone())?;
                    if let Some(truth) = &truth {
                        let cosines: Vec<f64> = truth
                            .iter()
                            .filter_map(|(c, (s, _))| cosine_similarity(report.shift_of(*c)?, s).ok())
                            .collect();
                        diag = Some(ShiftDiagnostics {
                            compensated_error: mean_distance(store, truth),
                            stale_error: mean_distance(&stale_before_update, truth),
                            mean_cosine: (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64),
                        });
                    }
                }
                let mut rows = st.head.rows.data().to_vec();
                for &c in &session.classes {
                    rows.extend_from_slice(local.rows.row(local.row_of(c).expect("trained")));
                    st.head.classes.push(c);
                    st.head.sessions.push(t);
                }
                st.head.rows = Tensor::matrix(st.head.classes.len(), dim, rows)?;

                let align_s = match st.variant.mode {
                    AlignMode::None => 0.0,
                    AlignMode::Ca => timed(cfg.record_timings, || {
                        retrain_unified_classifier(&mut st.head, &stale, &cfg.alignment, &rng_t.derive(2))
                    })?
                    .1,
                    AlignMode::Ssca => {
                        let store = st.store.as_ref().expect("ssca store");
                        timed(cfg.record_timings, || {
                            retrain_unified_classifier(&mut st.head, store, &cfg.alignment, &rng_t.derive(2))
                        })?
                        .1
                    }
                };
                let (acc, acc_new, acc_old, confusion) = evaluate(&st.head, &test_feats, &test, &session.classes)?;
                st.records.push(SessionRecord {
                    acc,
                    acc_new,
                    acc_old,
                    confusion,
                    timings: Timings {
                        train_s,
                        shift_s,
                        align_s,
                    },
                    shift: diag,
                });
            }
            Ok(())
        };
        step().map_err(|e| e.in_session(t + 1))?;
    }

    let model = match extractor {
        Extractor::Backbone(m) => Some(m),
        Extractor::Identity => None,
    };
    let probe_accuracy = match (&model, opts.probe) {
        (Some(m), true) => {
            let last = stream.len() - 1;
            Some(crate::training::linear_probe(
                m,
                &stream.cumulative_train(last)?,
                &stream.cumulative_test(last)?,
                &cfg.probe,
                &mut root.derive(3),
            )?)
        }
        _ => None,
    };
    Ok(TrajectoryResult {
        seed,
        variants: states
            .into_iter()
            .map(|s| VariantRun {
                variant: s.variant,
                sessions: s.records,
            })
            .collect(),
        sensitivity,
        probe_accuracy,
        model,
    })
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    cfg: &ExperimentConfig,
    estimator: ShiftEstimator,
    store: &PrototypeStore,
    before: Option<&Tensor>,
    after: &Tensor,
    train: &LabeledSet,
    truth: Option<&BTreeMap<usize, (Vec<f64>, Vec<f64>)>>,
) -> Result<ShiftReport> {
    let classes: Vec<usize> = store.classes.keys().copied().collect();
    let Some(before) = before else {
        // The extractor did not change this session.
        return Ok(ShiftReport::zero(&classes, store.dim));
    };
    if store.is_empty() {
        return Ok(ShiftReport::zero(&classes, store.dim));
    }
    match estimator {
        ShiftEstimator::Prototype => {
            let new = train.classes();
            estimate_shift_prototype(
                store,
                &class_means(before, &train.labels, &new),
                &class_means(after, &train.labels, &new),
                cfg.shift.clamp_negative_weights,
            )
        }
        ShiftEstimator::Sample => estimate_shift_sample(store, before, after, cfg.shift.bandwidth),
        // Sessions can be smaller than the configured k (few-shot).
        ShiftEstimator::Knearest(k) => estimate_shift_knearest(store, before, after, k.min(before.rows())),
        ShiftEstimator::Oracle => {
            let truth = truth.ok_or_else(|| CilError::contract("oracle estimator needs retained samples"))?;
            let shifts = classes
                .iter()
                .map(|c| {
                    truth
                        .get(c)
                        .map(|(s, _)| (*c, s.clone()))
                        .ok_or_else(|| CilError::contract(format!("no retained samples for class {c}")))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(ShiftReport::from_shifts(&shifts))
        }
    }
}

/// One seed of [`run_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRun {
    pub run_id: String,
    pub seed: u64,
    pub sessions: Vec<SessionRecord>,
    pub a_last: f64,
    pub a_avg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub runs: Vec<SeedRun>,
    pub a_last_mean: f64,
    pub a_last_std: f64,
    pub a_avg_mean: f64,
    pub a_avg_std: f64,
    pub pretrain_accuracy: Option<f64>,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    let head = match cfg.head {
        crate::training::HeadKind::Cosine => "cosine",
        crate::training::HeadKind::Linear => "linear",
    };
    let regime = match cfg.regime {
        Regime::None => "noadapt",
        Regime::FirstSession => "firstadapt",
        Regime::AllSessions => "alladapt",
    };
    format!("{}-{}-{}-{}-seed{}", cfg.pet.kind, head, cfg.mode.as_str(), regime, seed)
}

/// The configured method over every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

pub fn run_prepared(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ExperimentReport> {
    let opts = TrajectoryOptions {
        variants: vec![Variant {
            mode: cfg.mode,
            estimator: cfg.shift.estimator,
        }],
        sensitivity: false,
        probe: false,
    };
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let tr = run_trajectory(cfg, prepared, seed, &opts)?;
        let v = tr.variants.into_iter().next().expect("one variant");
        runs.push(SeedRun {
            run_id: run_id(cfg, seed),
            seed,
            a_last: v.a_last(),
            a_avg: v.a_avg(),
            sessions: v.sessions,
        });
    }
    let (a_last_mean, a_last_std) = mean_std(&runs.iter().map(|r| r.a_last).collect::<Vec<_>>());
    let (a_avg_mean, a_avg_std) = mean_std(&runs.iter().map(|r| r.a_avg).collect::<Vec<_>>());
    Ok(ExperimentReport {
        runs,
        a_last_mean,
        a_last_std,
        a_avg_mean,
        a_avg_std,
        pretrain_accuracy: prepared.pretrain_accuracy,
    })
}
