//! Attachment, classifier, adaptation-regime and estimator comparisons on
//! a single seed. Pass a TOML config path to override the defaults.

use cil_core::harness::{ablation_suite, prepare, ExperimentConfig};

fn main() -> cil_core::Result<()> {
    let mut cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    cfg.seeds.truncate(1);
    let prepared = prepare(&cfg)?;
    let report = ablation_suite(&cfg, &prepared)?;
    for cell in &report.pet {
        let modes: Vec<String> = cell.modes.iter().map(|m| format!("{} {:.3}", m.label, m.a_avg)).collect();
        println!("{:<12} {}", cell.pet.as_str(), modes.join("  "));
    }
    for cell in &report.classifier {
        let modes: Vec<String> = cell.modes.iter().map(|m| format!("{} {:.3}", m.label, m.a_avg)).collect();
        println!("{:<12} {}", format!("{:?}", cell.head).to_lowercase(), modes.join("  "));
    }
    for cell in &report.regimes {
        println!("probe {:<14} {:.3}", cell.regime.as_str(), cell.probe_mean);
    }
    for cell in &report.shift {
        println!(
            "{:<16} A_avg {:.3}  prototype error {:.3} vs {:.3}",
            cell.estimator, cell.accuracy.a_avg, cell.compensated_error, cell.stale_error
        );
    }
    Ok(())
}
