use std::collections::BTreeSet;

use crate::error::{CilError, Result};
use crate::numerics::Tensor;

/// Row-aligned inputs and integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 2 || inputs.rows() != labels.len() {
            return Err(CilError::dim("labeled_set", inputs.shape(), &[labels.len()]));
        }
        Ok(Self { inputs, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            inputs: Tensor::new(vec![0, dim], Vec::new()).expect("empty"),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Self {
            inputs: Tensor::new(vec![indices.len(), d], data).expect("shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows whose label is in `classes`, keeping their order.
    pub fn restrict(&self, classes: &[usize]) -> Self {
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[&LabeledSet]) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != dim {
                return Err(CilError::dim("concat_sets", &[dim], &[p.dim()]));
            }
            data.extend_from_slice(p.inputs.data());
            labels.extend_from_slice(&p.labels);
        }
        Self::new(Tensor::new(vec![labels.len(), dim], data)?, labels)
    }

    /// The given rows as a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.subset(indices);
        (s.inputs, s.labels)
    }
}
