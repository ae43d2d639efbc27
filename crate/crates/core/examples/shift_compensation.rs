//! One trajectory evaluated with no alignment, plain alignment and
//! shift-compensated alignment, plus the prototype error against the
//! true class means of retained samples.

use cil_core::harness::{prepare, run_trajectory, AlignMode, ExperimentConfig, ShiftEstimator, TrajectoryOptions, Variant};

fn main() -> cil_core::Result<()> {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg)?;
    let variants = [
        (AlignMode::None, ShiftEstimator::Prototype),
        (AlignMode::Ca, ShiftEstimator::Prototype),
        (AlignMode::Ssca, ShiftEstimator::Prototype),
        (AlignMode::Ssca, ShiftEstimator::Sample),
        (AlignMode::Ssca, ShiftEstimator::Oracle),
    ]
    .map(|(mode, estimator)| Variant { mode, estimator })
    .to_vec();
    let opts = TrajectoryOptions {
        variants,
        sensitivity: false,
        probe: false,
    };
    let r = run_trajectory(&cfg, &prepared, 0, &opts)?;
    for v in &r.variants {
        let acc: Vec<String> = v.accuracies().iter().map(|a| format!("{a:.3}")).collect();
        println!("{:<16} A_avg {:.4}  [{}]", v.variant.label(), v.a_avg(), acc.join(" "));
        for (t, s) in v.sessions.iter().enumerate() {
            if let Some(d) = s.shift {
                println!(
                    "    session {}: prototype error {:.3} (uncompensated {:.3})",
                    t + 1,
                    d.compensated_error,
                    d.stale_error
                );
            }
        }
    }
    Ok(())
}
