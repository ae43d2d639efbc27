use super::encoder::{encode, Model};
use super::pet::Pet;
use super::weights::{BackboneConfig, FrozenWeights};
use crate::data::LabeledSet;
use crate::error::{CilError, Result};
use crate::numerics::{Graph, Rng, Tensor};
use crate::training::optim::{Schedule, Sgd};

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub weights: FrozenWeights,
    pub train_accuracy: f64,
    pub loss_curve: Vec<f64>,
}

/// Trains the whole encoder plus a temporary linear head on `base`, then
/// drops the head. Runs `schedule.epochs_first` epochs.
pub fn pretrain(cfg: &BackboneConfig, base: &LabeledSet, schedule: &Schedule, rng: &mut Rng) -> Result<PretrainReport> {
    cfg.validate()?;
    schedule.validate()?;
    if base.is_empty() {
        return Err(CilError::contract("pretraining needs a non-empty base set"));
    }
    let classes = base.classes();
    let targets: Vec<usize> = base
        .labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    let d = cfg.embed_dim;
    let c = classes.len();

    let init = FrozenWeights::init(*cfg, &mut rng.derive(0))?;
    let mut encoder = init.weights.clone();
    let mut head_w = Tensor::matrix(d, c, rng.derive(1).normal_vec(d * c, 1.0 / (d as f64).sqrt()))?;
    let mut head_b = Tensor::zeros(&[c]);

    let epochs = schedule.epochs_first;
    let n = base.len();
    let bs = schedule.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total = epochs * steps_per_epoch;
    let mut opt = Sgd::new(schedule.momentum);
    let mut order_rng = rng.derive(2);
    let mut loss_curve = Vec::with_capacity(epochs);
    let mut step = 0;
    for _ in 0..epochs {
        let order = order_rng.permutation(n);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let (x, _) = base.batch(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let mut g = Graph::new();
            let w = encoder.map(|t| g.param(t.clone()));
            let bound = super::encoder::Bound {
                weights: w.clone(),
                pet: Pet::Full(w),
            };
            let hw = g.param(head_w.clone());
            let hb = g.param(head_b.clone());
            let f = encode(&mut g, &bound, cfg, &x)?;
            let logits = g.matmul(f, hw)?;
            let logits = g.add_row(logits, hb)?;
            let loss = g.cross_entropy(logits, &y)?;
            epoch_loss += g.value(loss).data()[0] * chunk.len() as f64;
            let mut grads = g.backward(loss)?;
            let mut vars = bound.trainable();
            vars.push(hw);
            vars.push(hb);
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            let mut params: Vec<&mut Tensor> = encoder.leaves_mut();
            params.push(&mut head_w);
            params.push(&mut head_b);
            opt.step(&mut params, &grads, schedule.lr_at(step, total))?;
            step += 1;
        }
        loss_curve.push(epoch_loss / n as f64);
    }

    let weights = FrozenWeights {
        config: *cfg,
        weights: encoder,
    };
    let model = Model::new(std::sync::Arc::new(weights.clone()), Pet::None);
    let feats = model.features(&base.inputs)?;
    let logits = feats.matmul(&head_w)?;
    let correct = (0..n)
        .filter(|&i| {
            let row = logits.row(i);
            let pred = (0..c)
                .max_by(|&a, &b| (row[a] + head_b.data()[a]).total_cmp(&(row[b] + head_b.data()[b])))
                .unwrap_or(0);
            pred == targets[i]
        })
        .count();
    Ok(PretrainReport {
        weights,
        train_accuracy: correct as f64 / n as f64,
        loss_curve,
    })
}
