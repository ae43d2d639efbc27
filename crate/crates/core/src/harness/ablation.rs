use serde::Serialize;

use super::config::{AlignMode, ExperimentConfig, Regime, ShiftEstimator};
use super::run::{mean_std, run_trajectory, Prepared, TrajectoryOptions, TrajectoryResult, Variant, VariantRun};
use crate::backbone::PetKind;
use crate::error::{CilError, Result};
use crate::training::{HeadKind, SensitivityReport};

/// Attachments compared by the PET ablation.
pub const PET_KINDS: [PetKind; 4] = [PetKind::Adapter, PetKind::Ssf, PetKind::VptShallow, PetKind::VptDeep];

const MODES: [AlignMode; 3] = [AlignMode::None, AlignMode::Ca, AlignMode::Ssca];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeCell {
    pub label: String,
    pub a_last: f64,
    pub a_avg: f64,
    pub a_avg_std: f64,
    pub per_seed_a_avg: Vec<f64>,
}

impl ModeCell {
    fn from_runs(label: String, runs: &[&VariantRun]) -> Self {
        let avg: Vec<f64> = runs.iter().map(|r| r.a_avg()).collect();
        let (a_avg, a_avg_std) = mean_std(&avg);
        let (a_last, _) = mean_std(&runs.iter().map(|r| r.a_last()).collect::<Vec<_>>());
        Self {
            label,
            a_last,
            a_avg,
            a_avg_std,
            per_seed_a_avg: avg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PetCell {
    pub pet: PetKind,
    pub modes: Vec<ModeCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifierCell {
    pub head: HeadKind,
    pub modes: Vec<ModeCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeCell {
    pub regime: Regime,
    pub probe_mean: f64,
    pub probe_std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftCell {
    pub estimator: String,
    pub accuracy: ModeCell,
    /// Mean prototype error after compensation, over seeds and sessions.
    pub compensated_error: f64,
    /// Same without compensation.
    pub stale_error: f64,
    pub mean_cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub pet: Vec<PetCell>,
    pub classifier: Vec<ClassifierCell>,
    pub regimes: Vec<RegimeCell>,
    pub shift: Vec<ShiftCell>,
}

fn mode_variants() -> Vec<Variant> {
    MODES
        .iter()
        .map(|&mode| Variant {
            mode,
            estimator: ShiftEstimator::Prototype,
        })
        .collect()
}

/// Runs one trajectory per seed of `cfg`.
pub fn run_seeds(cfg: &ExperimentConfig, prepared: &Prepared, opts: &TrajectoryOptions) -> Result<Vec<TrajectoryResult>> {
    cfg.seeds.iter().map(|&s| run_trajectory(cfg, prepared, s, opts)).collect()
}

/// Aggregates the runs of one variant across seeds.
pub fn variant_cell(results: &[TrajectoryResult], variant: Variant) -> Result<ModeCell> {
    let runs = results
        .iter()
        .map(|r| {
            r.variants
                .iter()
                .find(|v| v.variant == variant)
                .ok_or_else(|| CilError::contract(format!("variant {} was not run", variant.label())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeCell::from_runs(variant.label(), &runs))
}

fn mode_cells(results: &[TrajectoryResult]) -> Result<Vec<ModeCell>> {
    mode_variants().into_iter().map(|v| variant_cell(results, v)).collect()
}

/// Shift estimators compared on the base configuration. `n` is the size of
/// an incremental session's training set.
pub fn shift_variants(n: usize) -> Vec<Variant> {
    let mut ks = vec![(n / 10).max(1), (n / 2).max(1), n.max(1)];
    ks.dedup();
    let mut est = vec![ShiftEstimator::Prototype, ShiftEstimator::Sample];
    est.extend(ks.into_iter().map(ShiftEstimator::Knearest));
    est.push(ShiftEstimator::Oracle);
    est.into_iter()
        .map(|estimator| Variant {
            mode: AlignMode::Ssca,
            estimator,
        })
        .collect()
}

/// Shift-quality cell for one SSCA variant.
pub fn shift_cell(results: &[TrajectoryResult], variant: Variant) -> Result<ShiftCell> {
    let accuracy = variant_cell(results, variant)?;
    let diags: Vec<_> = results
        .iter()
        .flat_map(|r| r.variants.iter().filter(|v| v.variant == variant))
        .flat_map(|v| v.sessions.iter().filter_map(|s| s.shift))
        .collect();
    let mean = |f: &dyn Fn(&super::run::ShiftDiagnostics) -> f64| {
        diags.iter().map(f).sum::<f64>() / diags.len().max(1) as f64
    };
    let cos: Vec<f64> = diags.iter().filter_map(|d| d.mean_cosine).collect();
    Ok(ShiftCell {
        estimator: variant.estimator.label(),
        accuracy,
        compensated_error: mean(&|d| d.compensated_error),
        stale_error: mean(&|d| d.stale_error),
        mean_cosine: (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64),
    })
}

/// Linear-probe accuracy of the final features for each seed.
pub fn probe(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<f64>> {
    let opts = TrajectoryOptions {
        variants: vec![Variant {
            mode: AlignMode::None,
            estimator: ShiftEstimator::Prototype,
        }],
        sensitivity: false,
        probe: true,
    };
    run_seeds(cfg, prepared, &opts)?
        .into_iter()
        .map(|r| r.probe_accuracy.ok_or_else(|| CilError::contract("linear probe needs a backbone")))
        .collect()
}

fn regime_cell(regime: Regime, per_seed: Vec<f64>) -> RegimeCell {
    let (probe_mean, probe_std) = mean_std(&per_seed);
    RegimeCell {
        regime,
        probe_mean,
        probe_std,
        per_seed,
    }
}

/// PET, classifier, adaptation-regime and shift-estimator comparisons over
/// the seeds of `base`. Trajectories are shared wherever the configuration
/// coincides with `base`.
pub fn ablation_suite(base: &ExperimentConfig, prepared: &Prepared) -> Result<AblationReport> {
    let n = prepared.stream(base, base.seeds[0])?.sessions.get(1).map_or(1, |s| s.train.len());
    let shift = shift_variants(n);
    let mut variants = mode_variants();
    variants.extend(shift.iter().copied().filter(|v| v.estimator != ShiftEstimator::Prototype));
    let base_runs = run_seeds(
        base,
        prepared,
        &TrajectoryOptions {
            variants,
            sensitivity: false,
            probe: true,
        },
    )?;
    let modes_only = TrajectoryOptions {
        variants: mode_variants(),
        sensitivity: false,
        probe: false,
    };

    let mut pet = Vec::new();
    for kind in PET_KINDS {
        let modes = if kind == base.pet.kind {
            mode_cells(&base_runs)?
        } else {
            let mut cfg = base.clone();
            cfg.pet.kind = kind;
            mode_cells(&run_seeds(&cfg, prepared, &modes_only)?)?
        };
        pet.push(PetCell { pet: kind, modes });
    }

    let mut classifier = Vec::new();
    for head in [HeadKind::Linear, HeadKind::Cosine] {
        let modes = if head == base.head {
            mode_cells(&base_runs)?
        } else {
            let mut cfg = base.clone();
            cfg.head = head;
            mode_cells(&run_seeds(&cfg, prepared, &modes_only)?)?
        };
        classifier.push(ClassifierCell { head, modes });
    }

    let mut regimes = Vec::new();
    for regime in [Regime::None, Regime::FirstSession, Regime::AllSessions] {
        let per_seed = if regime == base.regime {
            base_runs.iter().map(|r| r.probe_accuracy.unwrap_or(0.0)).collect()
        } else {
            let mut cfg = base.clone();
            cfg.regime = regime;
            probe(&cfg, prepared)?
        };
        regimes.push(regime_cell(regime, per_seed));
    }

    Ok(AblationReport {
        seeds: base.seeds.clone(),
        pet,
        classifier,
        regimes,
        shift: shift.into_iter().map(|v| shift_cell(&base_runs, v)).collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityDump {
    pub seed: u64,
    /// One report per session, computed before that session's training.
    pub sessions: Vec<SensitivityReport>,
    /// Cosine similarity of sessions `t` and `t + 1` (0-based pairs).
    pub consecutive_similarity: Vec<(usize, usize, Option<f64>)>,
    pub most_sensitive: Vec<Option<String>>,
}

/// Per-session sensitivity of the attachment tensors for the first seed.
pub fn sensitivity_report(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<SensitivityDump> {
    let seed = cfg.seeds[0];
    let stream = prepared.stream(cfg, seed)?;
    if stream.len() < 2 {
        return Err(CilError::contract("sensitivity comparison needs at least two sessions"));
    }
    let r = run_trajectory(
        cfg,
        prepared,
        seed,
        &TrajectoryOptions {
            variants: Vec::new(),
            sensitivity: true,
            probe: false,
        },
    )?;
    if r.sensitivity.len() != stream.len() {
        return Err(CilError::contract("sensitivity needs a backbone"));
    }
    let consecutive_similarity = r
        .sensitivity
        .windows(2)
        .enumerate()
        .map(|(t, w)| (t, t + 1, w[0].similarity(&w[1])))
        .collect();
    Ok(SensitivityDump {
        seed,
        most_sensitive: r.sensitivity.iter().map(|s| s.most_sensitive().map(str::to_string)).collect(),
        consecutive_similarity,
        sessions: r.sensitivity,
    })
}
