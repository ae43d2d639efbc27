use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cil_core::backbone::PetKind;
use cil_core::data::{export_embeddings, ingest_embeddings};
use cil_core::harness::{self, AlignMode, ExperimentConfig};
use cil_core::{CilError, Result};

#[derive(Parser)]
#[command(name = "cil", about = "Class-incremental learning experiments on a small transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Alignment mode: none, ca or ssca.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Attachment kind: adapter, ssf, vpt-shallow, vpt-deep, full or none.
    #[arg(long, global = true)]
    pet: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone on the base classes and save its weights.
    Pretrain,
    /// Run the incremental protocol and write the JSON-Lines report.
    Run,
    /// Run the PET, classifier, regime and shift-estimator comparisons.
    Ablate,
    /// Linear-probe the adapted features for each seed.
    Probe,
    /// Dump per-session parameter sensitivity.
    Sensitivity,
    /// Time the prototype and sample shift estimators.
    ShiftBench {
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Write the synthetic stream of the first seed as an embedding CSV.
    GenData,
    /// Parse an embedding CSV and summarize it.
    IngestCheck { path: PathBuf },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &c.seed {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(m) = &c.mode {
        cfg.mode = m.parse::<AlignMode>()?;
    }
    if let Some(p) = &c.pet {
        cfg.pet.kind = p.parse::<PetKind>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CilError::io(dir, e))
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Pretrain => {
            cfg.weights = None;
            cfg.bypass_backbone = false;
            let prepared = harness::prepare(&cfg)?;
            let frozen = prepared.frozen.expect("pretrained");
            mkdir(&out)?;
            let path = out.join("backbone.cilb");
            frozen.save(&path)?;
            println!(
                "pretrain accuracy {:.4}; weights written to {}",
                prepared.pretrain_accuracy.unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Run => {
            let report = harness::run_experiment(&cfg)?;
            harness::write_report(&report, &out)?;
            for r in &report.runs {
                println!("{}  A_last {:.4}  A_avg {:.4}", r.run_id, r.a_last, r.a_avg);
            }
            println!(
                "A_last {:.4} ± {:.4}  A_avg {:.4} ± {:.4}",
                report.a_last_mean, report.a_last_std, report.a_avg_mean, report.a_avg_std
            );
        }
        Command::Ablate => {
            let prepared = harness::prepare(&cfg)?;
            let report = harness::ablation_suite(&cfg, &prepared)?;
            harness::write_json(&report, &out.join("ablation.json"))?;
            for cell in &report.pet {
                for m in &cell.modes {
                    println!("pet {:<12} {:<16} A_avg {:.4}", cell.pet.as_str(), m.label, m.a_avg);
                }
            }
            for cell in &report.classifier {
                for m in &cell.modes {
                    println!("head {:<11?} {:<16} A_avg {:.4}", cell.head, m.label, m.a_avg);
                }
            }
            for cell in &report.regimes {
                println!("regime {:<14} probe {:.4}", cell.regime.as_str(), cell.probe_mean);
            }
            for cell in &report.shift {
                println!(
                    "shift {:<16} A_avg {:.4}  error {:.4} (stale {:.4})",
                    cell.estimator, cell.accuracy.a_avg, cell.compensated_error, cell.stale_error
                );
            }
        }
        Command::Probe => {
            let prepared = harness::prepare(&cfg)?;
            let acc = harness::probe(&cfg, &prepared)?;
            harness::write_json(&(cfg.regime, &cfg.seeds, &acc), &out.join("probe.json"))?;
            for (s, a) in cfg.seeds.iter().zip(&acc) {
                println!("seed {s}  regime {}  probe {:.4}", cfg.regime.as_str(), a);
            }
        }
        Command::Sensitivity => {
            let prepared = harness::prepare(&cfg)?;
            let dump = harness::sensitivity_report(&cfg, &prepared)?;
            harness::write_json(&dump, &out.join("sensitivity.json"))?;
            for (t, m) in dump.most_sensitive.iter().enumerate() {
                println!("session {}  most sensitive {}", t + 1, m.as_deref().unwrap_or("-"));
            }
            for (a, b, s) in &dump.consecutive_similarity {
                println!("similarity s{}-s{}  {}", a + 1, b + 1, s.map_or("-".into(), |v| format!("{v:.4}")));
            }
        }
        Command::ShiftBench { reps } => {
            let rows = harness::shift_bench(&cfg.shift, &harness::default_sizes(), reps, cfg.seeds[0])?;
            harness::write_json(&rows, &out.join("shift_bench.json"))?;
            print!("{}", harness::format_bench(&rows));
            if rows.iter().any(|r| r.passed == Some(false)) {
                return Err(CilError::contract("prototype estimator was not 5x faster than the sample estimator"));
            }
        }
        Command::GenData => {
            let prepared = harness::prepare(&ExperimentConfig {
                bypass_backbone: true,
                ..cfg.clone()
            })?;
            let stream = prepared.stream(&cfg, cfg.seeds[0])?;
            mkdir(&out)?;
            let path = out.join("embeddings.csv");
            export_embeddings(&stream, &path)?;
            println!("{} sessions, dim {}, written to {}", stream.len(), stream.dim(), path.display());
        }
        Command::IngestCheck { path } => {
            let stream = ingest_embeddings(&path)?;
            println!("dim {}", stream.dim());
            for (t, s) in stream.sessions.iter().enumerate() {
                println!(
                    "session {}: {} classes, {} train, {} test",
                    t + 1,
                    s.classes.len(),
                    s.train.len(),
                    s.test.len()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
