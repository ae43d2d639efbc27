//! Unified classifier retraining on features drawn from per-class Gaussians.

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::numerics::{l2_norm, sample_gaussian, Rng, Tensor};
use crate::prototypes::PrototypeStore;
use crate::training::{fit_rows, CosineHead, HeadKind, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub samples_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    /// L2-normalize sampled features before a cosine head sees them.
    pub normalize: bool,
    /// Logit scale for a cosine head.
    pub scale: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Initial diagonal jitter for singular covariances.
    pub jitter: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 256,
            epochs: 5,
            lr: 0.01,
            normalize: true,
            scale: 20.0,
            batch_size: 32,
            momentum: 0.9,
            jitter: 1e-6,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 || !(self.lr > 0.0) || !(self.scale > 0.0) || self.batch_size == 0 {
            return Err(CilError::Config(format!("invalid alignment config {self:?}")));
        }
        Ok(())
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            lr0: self.lr,
            epochs_first: self.epochs,
            epochs_later: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
        }
    }
}

/// Draws `samples_per_class` features per head class from `N(φ_c, Σ_c)`.
/// Returns the samples and their head-row targets. Class `c` uses its own
/// stream derived from `rng`, so results do not depend on class order.
pub fn sample_features(head: &CosineHead, store: &PrototypeStore, cfg: &AlignmentConfig, rng: &Rng) -> Result<(Tensor, Vec<usize>)> {
    let d = head.dim();
    let n = cfg.samples_per_class;
    let mut data = Vec::with_capacity(head.len() * n * d);
    let mut targets = Vec::with_capacity(head.len() * n);
    for (row, &c) in head.classes.iter().enumerate() {
        let stats = store
            .get(c)
            .ok_or_else(|| CilError::contract(format!("store has no statistics for class {c}")))?;
        let lower = stats.factor(cfg.jitter)?;
        let mut draws = sample_gaussian(&mut rng.derive(c as u64), &stats.proto, &lower, n)?;
        if cfg.normalize && head.kind == HeadKind::Cosine {
            for i in 0..n {
                let r = draws.row_mut(i);
                let norm = l2_norm(r);
                if norm > 0.0 {
                    r.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        data.extend_from_slice(draws.data());
        targets.extend(std::iter::repeat(row).take(n));
    }
    Ok((Tensor::matrix(targets.len(), d, data)?, targets))
}

/// Retrains every head row jointly with cross-entropy over all classes on
/// features sampled from the store. Returns the per-epoch loss.
pub fn retrain_unified_classifier(
    head: &mut CosineHead,
    store: &PrototypeStore,
    cfg: &AlignmentConfig,
    rng: &Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.epochs == 0 || head.is_empty() {
        return Ok(Vec::new());
    }
    let (feats, targets) = sample_features(head, store, cfg, rng)?;
    fit_rows(
        &mut head.rows,
        head.kind,
        cfg.scale,
        &feats,
        &targets,
        cfg.epochs,
        &cfg.schedule(),
        &mut rng.derive(u64::MAX),
    )
}

/// The same retraining fed with a store whose old prototypes were never
/// shift-compensated.
pub fn classifier_align_baseline(
    head: &mut CosineHead,
    stale_store: &PrototypeStore,
    cfg: &AlignmentConfig,
    rng: &Rng,
) -> Result<Vec<f64>> {
    retrain_unified_classifier(head, stale_store, cfg, rng)
}
