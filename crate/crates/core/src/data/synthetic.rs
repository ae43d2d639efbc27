use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::set::LabeledSet;
use crate::error::{CilError, Result};
use crate::numerics::{Rng, Tensor};

/// Gaussian-mixture benchmark.
///
/// Every class mean is `separation · (√(1−ρ²)·B·u + ρ·R·v)` with unit
/// random `u`, `v`, where `B` spans a `shared_dim`-dimensional subspace
/// and `R` spans `novel_dim` directions of its orthogonal complement (all
/// of it when `novel_dim` is 0), after a random rotation of the input
/// space. All incremental classes share `R`. Base classes use `ρ = 0`; incremental classes use
/// `ρ = drift_intensity`, so the larger it is the more of their identity
/// lives in directions the base classes never exercise. Each class is a
/// mixture of `clusters_per_class` components whose offsets from the class
/// mean have expected norm about `cluster_spread`, each with isotropic
/// per-coordinate noise `cluster_std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub base_classes: usize,
    pub cil_classes: usize,
    pub input_dim: usize,
    pub shared_dim: usize,
    pub novel_dim: usize,
    pub clusters_per_class: usize,
    pub cluster_std: f64,
    pub cluster_spread: f64,
    pub separation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub drift_intensity: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            base_classes: 10,
            cil_classes: 40,
            input_dim: 64,
            shared_dim: 16,
            novel_dim: 8,
            clusters_per_class: 2,
            cluster_std: 1.0,
            cluster_spread: 1.0,
            separation: 6.0,
            train_per_class: 100,
            test_per_class: 50,
            drift_intensity: 0.7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.separation > 0.0) {
            return Err(CilError::contract(format!("separation must be positive, got {}", self.separation)));
        }
        if self.cil_classes == 0
            || self.input_dim == 0
            || self.clusters_per_class == 0
            || self.train_per_class == 0
            || self.shared_dim == 0
            || self.shared_dim > self.input_dim
        {
            return Err(CilError::Config(format!("invalid synthetic spec {self:?}")));
        }
        if self.shared_dim + self.novel_dim > self.input_dim {
            return Err(CilError::Config("shared_dim + novel_dim exceeds input_dim".into()));
        }
        if self.shared_dim == self.input_dim && self.drift_intensity != 0.0 {
            return Err(CilError::Config("drift needs shared_dim < input_dim".into()));
        }
        if !(0.0..=1.0).contains(&self.drift_intensity) || !(self.cluster_std >= 0.0) || !(self.cluster_spread >= 0.0) {
            return Err(CilError::Config(format!("invalid synthetic spec {self:?}")));
        }
        Ok(())
    }

    /// Labels of the incremental classes: `0..K`.
    pub fn cil_labels(&self) -> Vec<usize> {
        (0..self.cil_classes).collect()
    }

    /// Labels of the base classes: `K..K+B`, disjoint from the incremental ones.
    pub fn base_labels(&self) -> Vec<usize> {
        (self.cil_classes..self.cil_classes + self.base_classes).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CilDataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// Pretraining data (train split of the base classes).
    pub base: LabeledSet,
    pub cil: CilDataset,
    /// Mixture component centers per class.
    pub centers: BTreeMap<usize, Vec<Vec<f64>>>,
}

fn unit(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v = rng.normal_vec(n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Random orthonormal basis (rows) by Gram–Schmidt on Gaussian vectors.
fn orthonormal(rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = rng.normal_vec(n, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn combine(basis: &[Vec<f64>], coef: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (b, c) in basis.iter().zip(coef) {
        out.iter_mut().zip(b).for_each(|(o, x)| *o += c * x);
    }
    out
}

/// Deterministic function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let root = Rng::new(seed);
    let dim = spec.input_dim;
    let basis = orthonormal(&mut root.derive(0), dim);
    let (shared, rest) = basis.split_at(spec.shared_dim);
    let rest = if spec.novel_dim == 0 { rest } else { &rest[..spec.novel_dim] };

    let mut centers = BTreeMap::new();
    let mut class_mean = |label: usize, rho: f64| {
        let mut rng = root.derive(1).derive(label as u64);
        let u = unit(&mut rng, shared.len());
        let a = combine(shared, &u, dim);
        let mean: Vec<f64> = if rest.is_empty() || rho == 0.0 {
            a.iter().map(|x| spec.separation * x).collect()
        } else {
            let v = unit(&mut rng, rest.len());
            let b = combine(rest, &v, dim);
            let keep = (1.0 - rho * rho).sqrt();
            a.iter().zip(&b).map(|(x, y)| spec.separation * (keep * x + rho * y)).collect()
        };
        let comps: Vec<Vec<f64>> = (0..spec.clusters_per_class)
            .map(|_| {
                mean.iter()
                    .zip(rng.normal_vec(dim, spec.cluster_spread / (dim as f64).sqrt()))
                    .map(|(m, o)| m + o)
                    .collect()
            })
            .collect();
        centers.insert(label, comps.clone());
        comps
    };

    let draw = |comps: &[Vec<f64>], label: usize, split: u64, count: usize| -> Vec<f64> {
        let mut rng = root.derive(2).derive(4 * label as u64 + split);
        let mut out = Vec::with_capacity(count * dim);
        for i in 0..count {
            let c = &comps[i % comps.len()];
            out.extend(c.iter().zip(rng.normal_vec(dim, spec.cluster_std)).map(|(m, e)| m + e));
        }
        out
    };

    let mut base_x = Vec::new();
    let mut base_y = Vec::new();
    for label in spec.base_labels() {
        let comps = class_mean(label, 0.0);
        base_x.extend(draw(&comps, label, 1, spec.train_per_class));
        base_y.extend(std::iter::repeat(label).take(spec.train_per_class));
    }
    let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for label in spec.cil_labels() {
        let comps = class_mean(label, spec.drift_intensity);
        tr_x.extend(draw(&comps, label, 1, spec.train_per_class));
        tr_y.extend(std::iter::repeat(label).take(spec.train_per_class));
        te_x.extend(draw(&comps, label, 2, spec.test_per_class));
        te_y.extend(std::iter::repeat(label).take(spec.test_per_class));
    }
    Ok(SyntheticData {
        base: LabeledSet::new(Tensor::matrix(base_y.len(), dim, base_x)?, base_y)?,
        cil: CilDataset {
            train: LabeledSet::new(Tensor::matrix(tr_y.len(), dim, tr_x)?, tr_y)?,
            test: LabeledSet::new(Tensor::matrix(te_y.len(), dim, te_x)?, te_y)?,
        },
        centers,
    })
}
