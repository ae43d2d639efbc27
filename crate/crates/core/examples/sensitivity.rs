//! First-order sensitivity of each attachment tensor at the start of every
//! session, and how similar consecutive sessions' profiles are.

use cil_core::harness::{prepare, sensitivity_report, ExperimentConfig};

fn main() -> cil_core::Result<()> {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg)?;
    let dump = sensitivity_report(&cfg, &prepared)?;
    for (t, s) in dump.sessions.iter().enumerate() {
        println!("session {}", t + 1);
        for (name, v) in &s.groups {
            println!("    {name:<24} {v:.3e}");
        }
    }
    for (a, b, sim) in &dump.consecutive_similarity {
        println!("similarity {}-{}: {}", a + 1, b + 1, sim.map_or("-".into(), |v| format!("{v:.4}")));
    }
    Ok(())
}
