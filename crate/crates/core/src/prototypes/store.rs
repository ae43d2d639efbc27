use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::shift::ShiftReport;
use crate::backbone::Model;
use crate::container::Container;
use crate::data::LabeledSet;
use crate::error::{CilError, Result};
use crate::numerics::{cholesky, mean_and_covariance, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

/// Statistics of one class's features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub proto: Vec<f64>,
    /// `[d×d]` for full covariance, `[d]` variances for diagonal.
    pub cov: Tensor,
    pub session: usize,
    pub count: usize,
}

impl ClassStats {
    /// Lower-triangular factor of the covariance, with escalating jitter
    /// for singular matrices.
    pub fn factor(&self, jitter: f64) -> Result<Tensor> {
        let d = self.proto.len();
        if self.cov.rank() == 1 {
            let mut l = Tensor::zeros(&[d, d]);
            for i in 0..d {
                l.data_mut()[i * d + i] = self.cov.data()[i].max(0.0).sqrt();
            }
            return Ok(l);
        }
        Ok(cholesky(&self.cov, jitter)?.lower)
    }
}

/// Per-class mean and covariance of `features`, for each of `classes`.
/// Covariances use the unbiased denominator and are zero for one sample.
pub fn class_statistics(
    features: &Tensor,
    labels: &[usize],
    classes: &[usize],
    kind: CovarianceKind,
    session: usize,
) -> Result<BTreeMap<usize, ClassStats>> {
    if features.rows() != labels.len() {
        return Err(CilError::dim("class_statistics", features.shape(), &[labels.len()]));
    }
    let d = features.cols();
    let mut out = BTreeMap::new();
    for &c in classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            return Err(CilError::contract(format!("class {c} has no samples")));
        }
        let rows = Tensor::matrix(idx.len(), d, idx.iter().flat_map(|&i| features.row(i).to_vec()).collect())?;
        let (proto, full) = mean_and_covariance(&rows);
        let cov = match kind {
            CovarianceKind::Full => full,
            CovarianceKind::Diagonal => Tensor::vector((0..d).map(|i| full.data()[i * d + i]).collect()),
        };
        out.insert(
            c,
            ClassStats {
                proto,
                cov,
                session,
                count: idx.len(),
            },
        );
    }
    Ok(out)
}

/// Class statistics of `data` under `model`.
pub fn compute_prototypes(
    model: &Model,
    data: &LabeledSet,
    kind: CovarianceKind,
    session: usize,
) -> Result<BTreeMap<usize, ClassStats>> {
    let feats = model.features(&data.inputs)?;
    class_statistics(&feats, &data.labels, &data.classes(), kind, session)
}

/// Prototype and covariance per class seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeStore {
    pub dim: usize,
    pub kind: CovarianceKind,
    pub classes: BTreeMap<usize, ClassStats>,
}

impl PrototypeStore {
    pub fn new(dim: usize, kind: CovarianceKind) -> Self {
        Self {
            dim,
            kind,
            classes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&ClassStats> {
        self.classes.get(&class)
    }

    pub fn prototypes(&self) -> BTreeMap<usize, Vec<f64>> {
        self.classes.iter().map(|(&c, s)| (c, s.proto.clone())).collect()
    }

    /// Inserts classes not yet stored.
    pub fn insert(&mut self, stats: BTreeMap<usize, ClassStats>) -> Result<()> {
        for (c, s) in stats {
            if s.proto.len() != self.dim {
                return Err(CilError::dim("store_insert", &[self.dim], &[s.proto.len()]));
            }
            if self.classes.contains_key(&c) {
                return Err(CilError::contract(format!("class {c} is already stored")));
            }
            self.classes.insert(c, s);
        }
        Ok(())
    }

    /// Shifts every stored prototype by its estimate, then inserts the new
    /// classes with their fresh statistics. Covariances of stored classes
    /// are left as they were.
    pub fn update(&mut self, report: &ShiftReport, new_stats: BTreeMap<usize, ClassStats>) -> Result<()> {
        for (c, s) in &self.classes {
            let shift = report
                .shift_of(*c)
                .ok_or_else(|| CilError::contract(format!("shift report misses stored class {c}")))?;
            if shift.len() != s.proto.len() {
                return Err(CilError::dim("update_prototypes", &[s.proto.len()], &[shift.len()]));
            }
        }
        if let Some(c) = new_stats.keys().find(|c| self.classes.contains_key(c)) {
            return Err(CilError::contract(format!("new class {c} is already stored")));
        }
        for (c, s) in self.classes.iter_mut() {
            let shift = report.shift_of(*c).expect("checked");
            for (p, d) in s.proto.iter_mut().zip(shift) {
                *p += d;
            }
        }
        self.insert(new_stats)
    }

    pub fn to_container(&self) -> Container {
        let kind = match self.kind {
            CovarianceKind::Full => 0,
            CovarianceKind::Diagonal => 1,
        };
        let mut c = Container::new(vec![self.dim as u32, kind, self.classes.len() as u32]);
        let index: Vec<f64> = self
            .classes
            .iter()
            .flat_map(|(&k, s)| [k as f64, s.session as f64, s.count as f64])
            .collect();
        c.push("index", Tensor::matrix(self.classes.len(), 3, index).expect("shape"));
        for (k, s) in &self.classes {
            c.push(format!("proto.{k}"), Tensor::vector(s.proto.clone()));
            c.push(format!("cov.{k}"), s.cov.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |field: &str, message: String| CilError::Format {
            offset: 0,
            field: field.to_string(),
            message,
        };
        let [dim, kind, n] = c.config[..] else {
            return Err(bad("config", format!("expected 3 integers, found {}", c.config.len())));
        };
        let (dim, n) = (dim as usize, n as usize);
        let kind = match kind {
            0 => CovarianceKind::Full,
            1 => CovarianceKind::Diagonal,
            k => return Err(bad("config[1]", format!("unknown covariance kind {k}"))),
        };
        let index = c.get("index")?;
        if index.shape() != [n, 3] {
            return Err(bad("index", format!("expected [{n}, 3], found {:?}", index.shape())));
        }
        let mut store = Self::new(dim, kind);
        for r in 0..n {
            let row = index.row(r);
            let as_int = |v: f64, what: &str| {
                if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
                    Ok(v as usize)
                } else {
                    Err(bad("index", format!("row {r}: {what} {v} is not a non-negative integer")))
                }
            };
            let class = as_int(row[0], "class")?;
            let proto = c.get(&format!("proto.{class}"))?;
            let cov = c.get(&format!("cov.{class}"))?;
            let cov_shape: Vec<usize> = match kind {
                CovarianceKind::Full => vec![dim, dim],
                CovarianceKind::Diagonal => vec![dim],
            };
            if proto.shape() != [dim] || cov.shape() != cov_shape.as_slice() {
                return Err(bad(&format!("proto.{class}"), "shape does not match the store dimension".into()));
            }
            let stats = ClassStats {
                proto: proto.data().to_vec(),
                cov: cov.clone(),
                session: as_int(row[1], "session")?,
                count: as_int(row[2], "count")?,
            };
            if store.classes.insert(class, stats).is_some() {
                return Err(bad("index", format!("class {class} listed twice")));
            }
        }
        if c.arrays.len() != 1 + 2 * n {
            return Err(bad("array count", format!("expected {}, found {}", 1 + 2 * n, c.arrays.len())));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
