//! Retrains a classifier purely from stored class Gaussians: no real
//! features are kept, only a mean and covariance per class.

use cil_core::alignment::{retrain_unified_classifier, sample_features, AlignmentConfig};
use cil_core::numerics::{Rng, Tensor};
use cil_core::prototypes::{ClassStats, CovarianceKind, PrototypeStore};
use cil_core::training::{CosineHead, HeadKind};

fn main() -> cil_core::Result<()> {
    let d = 16;
    let mut rng = Rng::new(4);
    let mut store = PrototypeStore::new(d, CovarianceKind::Diagonal);
    let mut head = CosineHead::new(HeadKind::Cosine, d);
    for c in 0..8 {
        store.classes.insert(
            c,
            ClassStats {
                proto: rng.normal_vec(d, 1.0),
                cov: Tensor::filled(&[d], 0.2),
                session: c / 4,
                count: 100,
            },
        );
        head.add_classes(&[c], c / 4, &mut rng)?;
    }

    let cfg = AlignmentConfig::default();
    let (test, targets) = sample_features(&head, &store, &cfg, &Rng::new(99))?;
    let labels: Vec<usize> = targets.iter().map(|&r| head.classes[r]).collect();
    println!("accuracy with random rows:  {:.3}", head.accuracy(&test, &labels)?);
    let losses = retrain_unified_classifier(&mut head, &store, &cfg, &Rng::new(1))?;
    println!("loss per epoch: {:?}", losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    println!("accuracy after realignment: {:.3}", head.accuracy(&test, &labels)?);
    Ok(())
}
