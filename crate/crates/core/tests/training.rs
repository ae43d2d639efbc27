//! Session training, the local loss and parameter sensitivity.

mod common;

use std::sync::Arc;

use cil_core::backbone::{BackboneConfig, FrozenWeights, Model, PetAttachment, PetConfig, PetKind};
use cil_core::data::LabeledSet;
use cil_core::numerics::{Graph, Rng, Tensor};
use cil_core::training::{
    cosine_margin_loss, parameter_sensitivity, session_loss, train_head_session, train_session, CosineHead, HeadKind,
    LossConfig, Schedule, TrainOptions,
};
use cil_core::CilError;
use common::{check, random};

fn tiny() -> BackboneConfig {
    BackboneConfig {
        input_dim: 8,
        token_count: 2,
        embed_dim: 8,
        depth: 1,
        mlp_hidden: 16,
        heads: 2,
    }
}

fn model(kind: PetKind, seed: u64) -> Model {
    let mut rng = Rng::new(seed);
    let frozen = Arc::new(FrozenWeights::init(tiny(), &mut rng).unwrap());
    let pet = PetAttachment::init(
        &PetConfig {
            kind,
            ..PetConfig::default()
        },
        &frozen,
        &mut rng,
    )
    .unwrap();
    Model::new(frozen, pet)
}

/// `per_class` samples around well-separated means, one class per label.
fn blobs(labels: &[usize], per_class: usize, dim: usize, sep: f64, seed: u64) -> LabeledSet {
    let mut rng = Rng::new(seed);
    let means: Vec<Vec<f64>> = labels.iter().map(|_| rng.normal_vec(dim, sep)).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (m, &l) in means.iter().zip(labels) {
        for _ in 0..per_class {
            x.extend(m.iter().map(|v| v + 0.3 * rng.normal()));
            y.push(l);
        }
    }
    LabeledSet::new(Tensor::matrix(y.len(), dim, x).unwrap(), y).unwrap()
}

fn head_with(classes: &[(usize, usize)], dim: usize, kind: HeadKind, seed: u64) -> CosineHead {
    let mut head = CosineHead::new(kind, dim);
    let mut rng = Rng::new(seed);
    for &(c, s) in classes {
        head.add_classes(&[c], s, &mut rng).unwrap();
    }
    head
}

fn opts(epochs: usize, train_pet: bool) -> TrainOptions {
    TrainOptions {
        loss: LossConfig::default(),
        schedule: Schedule {
            lr0: 0.05,
            batch_size: 16,
            ..Schedule::default()
        },
        epochs,
        train_pet,
    }
}

/// Direct evaluation of the margin loss from its definition.
fn oracle_loss(f: &Tensor, w: &Tensor, rows: &[usize], targets: &[usize], s: f64, m: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let fi = f.row(i);
        let logits: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                let wr = w.row(r);
                let cos = fi.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() / (norm(fi) * norm(wr));
                s * cos - if k == t { s * m } else { 0.0 }
            })
            .collect();
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        total += -(logits[t].exp() / denom).ln();
    }
    total / targets.len() as f64
}

#[test]
fn margin_loss_matches_definition() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let head = {
            let mut h = head_with(&[(7, 0), (3, 0), (1, 1), (9, 1), (4, 1)], 4, HeadKind::Cosine, seed);
            h.rows = random(&mut rng, &[5, 4]);
            h
        };
        let f = random(&mut rng, &[3, 4]);
        let labels = [9, 1, 4];
        let cfg = LossConfig {
            loss_scale: 1.0 + 10.0 * rng.uniform(),
            margin: 0.5 * rng.uniform(),
            kd_weight: 0.0,
        };
        let got = cosine_margin_loss(&f, &labels, &head, &[1, 9, 4], &cfg).unwrap();
        let want = oracle_loss(&f, &head.rows, &[2, 3, 4], &[1, 0, 2], cfg.loss_scale, cfg.margin);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn margin_loss_gradients_match_finite_differences() {
    let head = head_with(&[(0, 0), (1, 1), (2, 1), (3, 1)], 4, HeadKind::Cosine, 1);
    let cfg = LossConfig {
        loss_scale: 4.0,
        margin: 0.2,
        kd_weight: 0.0,
    };
    for seed in 0..20 {
        let mut rng = Rng::new(40 + seed);
        let params = vec![random(&mut rng, &[2, 4]), random(&mut rng, &[4, 4])];
        let err = check(&params, &|g, v| session_loss(g, v[0], v[1], &head, &[1, 2, 3], &[3, 1], &cfg).unwrap());
        assert!(err <= 1e-4, "instance {seed}: {err:e}");
    }
}

#[test]
fn rows_outside_the_session_get_exactly_zero_gradient() {
    for kind in [HeadKind::Cosine, HeadKind::Linear] {
        let mut rng = Rng::new(5);
        let head = head_with(&[(10, 0), (11, 0), (12, 1), (13, 1), (14, 2)], 6, kind, 2);
        let mut g = Graph::new();
        let f = g.param(random(&mut rng, &[4, 6]));
        let w = g.param(head.rows.clone());
        let loss = session_loss(&mut g, f, w, &head, &[12, 13], &[12, 13, 13, 12], &LossConfig::default()).unwrap();
        let grad = g.backward(loss).unwrap().wrt(w);
        for r in [0, 1, 4] {
            assert!(grad.row(r).iter().all(|&v| v == 0.0), "{kind:?} row {r}: {:?}", grad.row(r));
        }
        for r in [2, 3] {
            assert!(grad.row(r).iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn loss_grows_with_margin() {
    let mut rng = Rng::new(8);
    let mut head = head_with(&[(0, 0), (1, 0), (2, 0)], 5, HeadKind::Cosine, 3);
    head.rows = random(&mut rng, &[3, 5]);
    let f = random(&mut rng, &[6, 5]);
    let labels = [0, 1, 2, 0, 1, 2];
    let mut prev = f64::NEG_INFINITY;
    for k in 0..8 {
        let cfg = LossConfig {
            margin: 0.1 * k as f64,
            ..LossConfig::default()
        };
        let l = cosine_margin_loss(&f, &labels, &head, &[0, 1, 2], &cfg).unwrap();
        assert!(l > prev);
        prev = l;
    }
}

#[test]
fn zero_epochs_only_add_rows() {
    let mut m = model(PetKind::Adapter, 1);
    let before = m.pet.fingerprint();
    let mut head = CosineHead::new(HeadKind::Cosine, 8);
    let data = blobs(&[0, 1], 10, 8, 3.0, 2);
    train_session(&mut m, &mut head, &data, 0, &opts(0, true), None, &mut Rng::new(3)).unwrap();
    assert_eq!(m.pet.fingerprint(), before);
    assert_eq!(head.classes, vec![0, 1]);
}

#[test]
fn old_rows_and_backbone_are_untouched() {
    let mut m = model(PetKind::Adapter, 4);
    let frozen = m.frozen.fingerprint();
    let mut head = CosineHead::new(HeadKind::Cosine, 8);
    let first = blobs(&[0, 1, 2], 12, 8, 3.0, 5);
    train_session(&mut m, &mut head, &first, 0, &opts(2, true), None, &mut Rng::new(6)).unwrap();
    let old = head.row_bytes(&[0, 1, 2]);
    let pet_after_first = m.pet.fingerprint();

    let second = blobs(&[3, 4], 12, 8, 3.0, 7);
    train_session(&mut m, &mut head, &second, 1, &opts(2, true), None, &mut Rng::new(8)).unwrap();
    assert_eq!(head.row_bytes(&[0, 1, 2]), old);
    assert_eq!(m.frozen.fingerprint(), frozen);
    assert_ne!(m.pet.fingerprint(), pet_after_first);
    assert_eq!(head.sessions, vec![0, 0, 0, 1, 1]);
}

#[test]
fn frozen_regime_leaves_attachment_alone() {
    let mut m = model(PetKind::Ssf, 9);
    let pet = m.pet.fingerprint();
    let mut head = CosineHead::new(HeadKind::Cosine, 8);
    let data = blobs(&[0, 1], 10, 8, 3.0, 10);
    train_session(&mut m, &mut head, &data, 0, &opts(3, false), None, &mut Rng::new(11)).unwrap();
    assert_eq!(m.pet.fingerprint(), pet);
}

#[test]
fn separable_session_is_learned() {
    for kind in [HeadKind::Cosine, HeadKind::Linear] {
        let mut m = model(PetKind::Adapter, 12);
        let mut head = CosineHead::new(kind, 8);
        let data = blobs(&[0, 1, 2, 3], 25, 8, 3.0, 13);
        let report = train_session(&mut m, &mut head, &data, 0, &opts(15, true), None, &mut Rng::new(14)).unwrap();
        let acc = head.accuracy(&m.features(&data.inputs).unwrap(), &data.labels).unwrap();
        assert!(acc >= 0.9, "{kind:?}: accuracy {acc}");
        assert!(report.loss_curve.last() < report.loss_curve.first());
    }
}

#[test]
fn fixed_feature_training_is_deterministic() {
    let data = blobs(&[5, 6, 7], 20, 6, 2.0, 15);
    let run = || {
        let mut head = CosineHead::new(HeadKind::Cosine, 6);
        train_head_session(&mut head, &data, 0, &opts(5, false), &mut Rng::new(16)).unwrap();
        head.rows
    };
    assert_eq!(run().data(), run().data());
}

fn displacement(kd_weight: f64) -> f64 {
    let mut m = model(PetKind::Adapter, 17);
    let mut head = CosineHead::new(HeadKind::Cosine, 8);
    let data = blobs(&[0, 1, 2], 15, 8, 3.0, 18);
    let start = m.features(&data.inputs).unwrap();
    let teacher = m.clone();
    let mut o = opts(10, true);
    o.loss.kd_weight = kd_weight;
    train_session(&mut m, &mut head, &data, 0, &o, Some(&teacher), &mut Rng::new(19)).unwrap();
    let end = m.features(&data.inputs).unwrap();
    start.data().iter().zip(end.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[test]
fn distillation_limits_feature_displacement() {
    let free = displacement(0.0);
    let tied = displacement(20.0);
    assert!(free > 0.0);
    assert!(tied < free, "with distillation {tied}, without {free}");
}

#[test]
fn distillation_needs_a_teacher() {
    let mut m = model(PetKind::Adapter, 20);
    let mut head = CosineHead::new(HeadKind::Cosine, 8);
    let data = blobs(&[0, 1], 5, 8, 3.0, 21);
    let mut o = opts(1, true);
    o.loss.kd_weight = 1.0;
    let err = train_session(&mut m, &mut head, &data, 0, &o, None, &mut Rng::new(22)).unwrap_err();
    assert!(matches!(err, CilError::Contract(_)));
}

#[test]
fn sensitivity_is_nonpositive_and_linear_in_step() {
    for kind in [PetKind::Adapter, PetKind::Ssf, PetKind::VptDeep] {
        let mut m = model(kind, 23);
        for leaf in m.pet.leaves_mut() {
            let mut rng = Rng::new(24);
            leaf.data_mut().iter_mut().for_each(|x| *x += 0.1 * rng.normal());
        }
        let data = blobs(&[0, 1, 2], 8, 8, 3.0, 25);
        let head = head_with(&[(0, 0), (1, 0), (2, 0)], 8, HeadKind::Cosine, 26);
        let a = parameter_sensitivity(&m, &head, &data, &LossConfig::default(), 1e-3).unwrap();
        let b = parameter_sensitivity(&m, &head, &data, &LossConfig::default(), 2e-3).unwrap();
        assert_eq!(a.groups.len(), m.pet.named().len());
        for ((name, x), (_, y)) in a.groups.iter().zip(&b.groups) {
            assert!(*x <= 0.0, "{name}: {x}");
            assert!((y - 2.0 * x).abs() <= 1e-9 * y.abs().max(1e-300), "{name}: {x} {y}");
        }
        assert!(a.most_sensitive().is_some());
        assert!((a.similarity(&b).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sensitivity_rejects_nonpositive_step() {
    let m = model(PetKind::Adapter, 27);
    let data = blobs(&[0], 3, 8, 1.0, 28);
    let head = head_with(&[(0, 0)], 8, HeadKind::Cosine, 29);
    assert!(parameter_sensitivity(&m, &head, &data, &LossConfig::default(), 0.0).is_err());
}
