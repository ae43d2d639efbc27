use serde::{Deserialize, Serialize};

use super::head::{head_logits, CosineHead, HeadKind};
use crate::error::{CilError, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub loss_scale: f64,
    pub margin: f64,
    /// Weight of the feature-distillation term; 0 trains unconstrained.
    pub kd_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            loss_scale: 20.0,
            margin: 0.1,
            kd_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_scale > 0.0) || !(self.margin >= 0.0) || !(self.kd_weight >= 0.0) {
            return Err(CilError::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

/// Session-local classification loss on a graph.
///
/// Only the head rows of `session_classes` enter the softmax, so rows of
/// every other class get exactly zero gradient. For a cosine head the
/// logits are `s·(cos θ − m)` for the true class and `s·cos θ` otherwise;
/// a linear head uses raw dot products with no scale or margin.
#[allow(clippy::too_many_arguments)]
pub fn session_loss(
    g: &mut Graph,
    features: Var,
    rows: Var,
    head: &CosineHead,
    session_classes: &[usize],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    if g.shape(features).first() != Some(&labels.len()) {
        return Err(CilError::dim("session_loss", g.shape(features), &[labels.len()]));
    }
    let row_idx = head.rows_for(session_classes)?;
    let targets = labels
        .iter()
        .map(|l| {
            session_classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| CilError::contract(format!("label {l} is not a current-session class")))
        })
        .collect::<Result<Vec<_>>>()?;
    let local = g.select_rows(rows, &row_idx)?;
    let raw = head_logits(g, features, local, head.kind)?;
    let logits = match head.kind {
        HeadKind::Cosine => {
            let scaled = g.scale(raw, cfg.loss_scale);
            if cfg.margin == 0.0 {
                scaled
            } else {
                let k = row_idx.len();
                let mut m = Tensor::zeros(&[labels.len(), k]);
                for (b, &t) in targets.iter().enumerate() {
                    m.data_mut()[b * k + t] = cfg.loss_scale * cfg.margin;
                }
                let m = g.constant(m);
                g.sub(scaled, m)?
            }
        }
        HeadKind::Linear => raw,
    };
    g.cross_entropy(logits, &targets)
}

/// Value of [`session_loss`] for fixed features and head.
pub fn cosine_margin_loss(
    features: &Tensor,
    labels: &[usize],
    head: &CosineHead,
    session_classes: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let w = g.constant(head.rows.clone());
    let loss = session_loss(&mut g, f, w, head, session_classes, labels, cfg)?;
    Ok(g.value(loss).data()[0])
}

/// Mean over samples of the squared distance between two feature batches.
pub fn kd_feature_loss(g: &mut Graph, current: Var, reference: Var) -> Result<Var> {
    let n = g.shape(current).first().copied().unwrap_or(1).max(1);
    let diff = g.sub(current, reference)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n as f64))
}
