//! The full protocol for one seed: pretrain, adapt each session, compensate
//! prototype shift and realign the classifier. Writes the JSON-Lines report.

use cil_core::harness::{report_jsonl, run_experiment, ExperimentConfig};

fn main() -> cil_core::Result<()> {
    let cfg = ExperimentConfig {
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&cfg)?;
    let run = &report.runs[0];
    println!("{}", run.run_id);
    for (t, s) in run.sessions.iter().enumerate() {
        let old = s.acc_old.map_or("-".to_string(), |a| format!("{a:.3}"));
        println!("session {}  acc {:.3}  new {:.3}  old {old}", t + 1, s.acc, s.acc_new);
    }
    println!("A_last {:.4}  A_avg {:.4}\n", run.a_last, run.a_avg);
    print!("{}", report_jsonl(&report));
    Ok(())
}
