use serde::Serialize;

use super::head::{head_logits, CosineHead, HeadKind};
use super::loss::{kd_feature_loss, session_loss, LossConfig};
use super::optim::{Schedule, Sgd};
use crate::backbone::{encode, Model, Pet};
use crate::data::LabeledSet;
use crate::error::{CilError, Result};
use crate::numerics::{cosine_similarity, Graph, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub epochs: usize,
    /// Whether the attachment is updated; the head is always trained.
    pub train_pet: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Shuffled mini-batch loop with a per-step cosine learning rate. `step`
/// receives the batch indices and the current rate and returns the batch
/// loss.
pub(crate) fn run_epochs(
    n: usize,
    epochs: usize,
    schedule: &Schedule,
    rng: &mut Rng,
    mut step: impl FnMut(&[usize], f64) -> Result<f64>,
) -> Result<Vec<f64>> {
    let bs = schedule.batch_size.min(n).max(1);
    let total = epochs * n.div_ceil(bs);
    let mut k = 0;
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let order = rng.permutation(n);
        let mut sum = 0.0;
        for batch in order.chunks(bs) {
            sum += step(batch, schedule.lr_at(k, total))? * batch.len() as f64;
            k += 1;
        }
        curve.push(sum / n as f64);
    }
    Ok(curve)
}

/// One incremental session: grows the head by the session's classes and
/// trains those rows (plus the attachment when `train_pet`) on the
/// session-local loss. Old head rows and the frozen backbone are never
/// touched. `teacher` supplies reference features for the distillation
/// term and is required when `kd_weight > 0` and the attachment trains.
pub fn train_session(
    model: &mut Model,
    head: &mut CosineHead,
    data: &LabeledSet,
    session: usize,
    opts: &TrainOptions,
    teacher: Option<&Model>,
    rng: &mut Rng,
) -> Result<SessionReport> {
    if !(opts.train_pet && model.pet.trainable_count() > 0) {
        if data.is_empty() {
            return Err(CilError::contract("session training data is empty"));
        }
        let feats = LabeledSet::new(model.features(&data.inputs)?, data.labels.clone())?;
        return train_head_session(head, &feats, session, opts, rng);
    }
    run_session(Some(model), head, data, session, opts, teacher, rng)
}

/// [`train_session`] for a head on fixed features: `features.inputs` are
/// used directly as backbone outputs.
pub fn train_head_session(
    head: &mut CosineHead,
    features: &LabeledSet,
    session: usize,
    opts: &TrainOptions,
    rng: &mut Rng,
) -> Result<SessionReport> {
    run_session(None, head, features, session, opts, None, rng)
}

fn run_session(
    mut model: Option<&mut Model>,
    head: &mut CosineHead,
    data: &LabeledSet,
    session: usize,
    opts: &TrainOptions,
    teacher: Option<&Model>,
    rng: &mut Rng,
) -> Result<SessionReport> {
    opts.loss.validate()?;
    opts.schedule.validate()?;
    if data.is_empty() {
        return Err(CilError::contract("session training data is empty"));
    }
    let classes = data.classes();
    head.add_classes(&classes, session, &mut rng.derive(0))?;
    if opts.epochs == 0 {
        return Ok(SessionReport::default());
    }
    let kd = model.is_some() && opts.loss.kd_weight > 0.0;
    if kd && teacher.is_none() {
        return Err(CilError::contract("distillation weight set but no teacher model"));
    }

    let idx = head.rows_for(&classes)?;
    let mut local = CosineHead {
        kind: head.kind,
        rows: Tensor::matrix(idx.len(), head.dim(), idx.iter().flat_map(|&r| head.rows.row(r).to_vec()).collect())?,
        classes: classes.clone(),
        sessions: vec![session; classes.len()],
    };
    let mut opt = Sgd::new(opts.schedule.momentum);

    let curve = run_epochs(data.len(), opts.epochs, &opts.schedule, &mut rng.derive(1), |batch, lr| {
        let (x, y) = data.batch(batch);
        let mut g = Graph::new();
        let rows = g.param(local.rows.clone());
        let (f, pet_vars) = match model.as_deref() {
            None => (g.constant(x.clone()), Vec::new()),
            Some(m) => {
                let bound = m.bind(&mut g, true);
                (encode(&mut g, &bound, m.config(), &x)?, bound.trainable())
            }
        };
        let mut loss = session_loss(&mut g, f, rows, &local, &classes, &y, &opts.loss)?;
        if kd {
            let reference = teacher.expect("checked").features(&x)?;
            let reference = g.constant(reference);
            let term = kd_feature_loss(&mut g, f, reference)?;
            let term = g.scale(term, opts.loss.kd_weight);
            loss = g.add(loss, term)?;
        }
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let mut gs: Vec<Tensor> = pet_vars.iter().map(|&v| grads.take(v)).collect();
        gs.push(grads.take(rows));
        let mut params: Vec<&mut Tensor> = match model.as_deref_mut() {
            Some(m) => m.pet.leaves_mut(),
            None => Vec::new(),
        };
        params.push(&mut local.rows);
        opt.step(&mut params, &gs, lr)?;
        Ok(value)
    })?;

    for (k, &r) in idx.iter().enumerate() {
        head.rows.row_mut(r).copy_from_slice(local.rows.row(k));
    }
    Ok(SessionReport { loss_curve: curve })
}

fn gather(t: &Tensor, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect()
}

/// Trains every row of `rows` jointly with cross-entropy over all rows on
/// fixed features. Cosine logits are multiplied by `scale`.
#[allow(clippy::too_many_arguments)]
pub fn fit_rows(
    rows: &mut Tensor,
    kind: HeadKind,
    scale: f64,
    features: &Tensor,
    targets: &[usize],
    epochs: usize,
    schedule: &Schedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if features.rows() != targets.len() {
        return Err(CilError::dim("fit_rows", features.shape(), &[targets.len()]));
    }
    if targets.is_empty() {
        return Err(CilError::contract("no samples to fit"));
    }
    let mut opt = Sgd::new(schedule.momentum);
    run_epochs(targets.len(), epochs, schedule, rng, |batch, lr| {
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(batch.len(), features.cols(), gather(features, batch))?);
        let w = g.param(rows.clone());
        let mut logits = head_logits(&mut g, f, w, kind)?;
        if kind == HeadKind::Cosine {
            logits = g.scale(logits, scale);
        }
        let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
        let loss = g.cross_entropy(logits, &y)?;
        let value = g.value(loss).data()[0];
        let grad = g.backward(loss)?.take(w);
        opt.step(&mut [rows], &[grad], lr)?;
        Ok(value)
    })
}

/// Top-1 accuracy of a fresh linear head trained on frozen features.
/// Runs `schedule.epochs_first` epochs over `train`, evaluates on `test`.
pub fn linear_probe(model: &Model, train: &LabeledSet, test: &LabeledSet, schedule: &Schedule, rng: &mut Rng) -> Result<f64> {
    schedule.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(CilError::contract("linear probe needs non-empty train and test sets"));
    }
    let feats = model.features(&train.inputs)?;
    let mut head = CosineHead::new(HeadKind::Linear, model.embed_dim());
    let classes = train.classes();
    head.add_classes(&classes, 0, &mut rng.derive(0))?;
    let targets: Vec<usize> = train.labels.iter().map(|l| head.row_of(*l).expect("added")).collect();
    fit_rows(
        &mut head.rows,
        HeadKind::Linear,
        1.0,
        &feats,
        &targets,
        schedule.epochs_first,
        schedule,
        &mut rng.derive(1),
    )?;
    head.accuracy(&model.features(&test.inputs)?, &test.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub epsilon: f64,
    /// `(group name, s_i)` in attachment order.
    pub groups: Vec<(String, f64)>,
}

impl SensitivityReport {
    pub fn values(&self) -> Vec<f64> {
        self.groups.iter().map(|(_, v)| *v).collect()
    }

    /// Group indices from most to least sensitive (most negative first).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.groups.len()).collect();
        idx.sort_by(|&a, &b| self.groups[a].1.total_cmp(&self.groups[b].1));
        idx
    }

    pub fn most_sensitive(&self) -> Option<&str> {
        self.ranking().first().map(|&i| self.groups[i].0.as_str())
    }

    /// Cosine similarity of the two sensitivity vectors; `None` if either is
    /// all zero or the layouts differ.
    pub fn similarity(&self, other: &SensitivityReport) -> Option<f64> {
        if self.groups.len() != other.groups.len() {
            return None;
        }
        cosine_similarity(&self.values(), &other.values()).ok()
    }
}

/// First-order sensitivity of each attachment tensor: `s_i = −ε·Σ(∂L/∂θ)²`
/// with the session-local loss evaluated on all of `data` in one batch.
/// The head must already hold rows for the data's classes.
pub fn parameter_sensitivity(
    model: &Model,
    head: &CosineHead,
    data: &LabeledSet,
    loss: &LossConfig,
    epsilon: f64,
) -> Result<SensitivityReport> {
    if !(epsilon > 0.0) {
        return Err(CilError::contract(format!("sensitivity step must be positive, got {epsilon}")));
    }
    if data.is_empty() {
        return Err(CilError::contract("sensitivity needs data"));
    }
    let classes = data.classes();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let f = encode(&mut g, &bound, model.config(), &data.inputs)?;
    let rows = g.constant(head.rows.clone());
    let l = session_loss(&mut g, f, rows, head, &classes, &data.labels, loss)?;
    let grads = g.backward(l)?;
    let names = match &model.pet {
        Pet::None => Vec::new(),
        pet => pet.named().into_iter().map(|(n, _)| n).collect(),
    };
    let groups = names
        .into_iter()
        .zip(bound.trainable())
        .map(|(name, v)| {
            let sq: f64 = grads.get(v).map_or(0.0, |t| t.data().iter().map(|x| x * x).sum());
            (name, -epsilon * sq)
        })
        .collect();
    Ok(SensitivityReport { epsilon, groups })
}
