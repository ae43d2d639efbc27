//! Pretrains the encoder on the synthetic base classes, saves it and
//! checks that the reloaded weights are bit-identical.

use cil_core::backbone::{pretrain, BackboneConfig, FrozenWeights};
use cil_core::data::{generate_synthetic, SyntheticSpec};
use cil_core::numerics::Rng;
use cil_core::training::Schedule;

fn main() -> cil_core::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::default(), 7)?;
    let schedule = Schedule {
        lr0: 0.05,
        ..Schedule::default()
    };
    let report = pretrain(&BackboneConfig::default(), &data.base, &schedule, &mut Rng::new(1))?;
    println!(
        "{} base samples, train accuracy {:.3}, loss {:.3} -> {:.3}",
        data.base.len(),
        report.train_accuracy,
        report.loss_curve.first().unwrap_or(&f64::NAN),
        report.loss_curve.last().unwrap_or(&f64::NAN)
    );

    let dir = std::env::temp_dir().join("cil-pretrain-example");
    std::fs::create_dir_all(&dir).map_err(|e| cil_core::CilError::io(&dir, e))?;
    let path = dir.join("backbone.cilb");
    report.weights.save(&path)?;
    let back = FrozenWeights::load(&path)?;
    println!("saved to {}, round trip exact: {}", path.display(), back == report.weights);
    Ok(())
}
