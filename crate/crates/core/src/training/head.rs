use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Cosine similarity between normalized features and normalized rows.
    #[default]
    Cosine,
    /// Raw dot products.
    Linear,
}

/// Classifier with one weight row per class seen so far.
///
/// Rows are stored in arrival order; `classes[i]` is the label of row `i`
/// and `sessions[i]` the session that introduced it.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineHead {
    pub kind: HeadKind,
    pub rows: Tensor,
    pub classes: Vec<usize>,
    pub sessions: Vec<usize>,
}

impl CosineHead {
    pub fn new(kind: HeadKind, dim: usize) -> Self {
        Self {
            kind,
            rows: Tensor::new(vec![0, dim], Vec::new()).expect("empty"),
            classes: Vec::new(),
            sessions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Row indices for `classes`, failing on any class without a row.
    pub fn rows_for(&self, classes: &[usize]) -> Result<Vec<usize>> {
        classes
            .iter()
            .map(|&c| {
                self.row_of(c)
                    .ok_or_else(|| CilError::contract(format!("head has no row for class {c}")))
            })
            .collect()
    }

    /// Appends rows `N(0, 1/d)` for every class not yet present. A class
    /// already owned by a different session is a contract violation.
    pub fn add_classes(&mut self, classes: &[usize], session: usize, rng: &mut Rng) -> Result<()> {
        let d = self.dim();
        let mut data = self.rows.data().to_vec();
        for &c in classes {
            match self.row_of(c) {
                Some(r) if self.sessions[r] != session => {
                    return Err(CilError::contract(format!(
                        "class {c} already belongs to session {}",
                        self.sessions[r]
                    )))
                }
                Some(_) => {}
                None => {
                    data.extend(rng.normal_vec(d, 1.0 / (d as f64).sqrt()));
                    self.classes.push(c);
                    self.sessions.push(session);
                }
            }
        }
        self.rows = Tensor::matrix(self.classes.len(), d, data)?;
        Ok(())
    }

    /// Logits for every row: cosine similarities (unscaled) or dot products.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let w = g.constant(self.rows.clone());
        let out = head_logits(&mut g, f, w, self.kind)?;
        Ok(g.value(out).clone())
    }

    /// Predicted class label per feature row.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(CilError::contract("prediction with an empty head"));
        }
        let logits = self.logits(features)?;
        Ok((0..logits.rows()).map(|i| self.classes[argmax(logits.row(i))]).collect())
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        Ok(accuracy(&pred, labels))
    }

    /// Byte image of the given rows.
    pub fn row_bytes(&self, rows: &[usize]) -> Vec<u8> {
        rows.iter()
            .flat_map(|&r| self.rows.row(r).iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// `[B×d] × [C×d] → [B×C]` logits on a graph.
pub fn head_logits(g: &mut Graph, features: Var, rows: Var, kind: HeadKind) -> Result<Var> {
    let (f, w) = match kind {
        HeadKind::Cosine => (g.l2_normalize_rows(features)?, g.l2_normalize_rows(rows)?),
        HeadKind::Linear => (features, rows),
    };
    let wt = g.transpose(w)?;
    g.matmul(f, wt)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}
