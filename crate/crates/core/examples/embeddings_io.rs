//! Exports a session stream as an embedding CSV, reads it back and runs
//! the protocol directly on the stored features.

use cil_core::harness::{run_experiment, ExperimentConfig, Source};

fn main() -> cil_core::Result<()> {
    let dir = std::env::temp_dir().join("cil-embeddings-example");
    std::fs::create_dir_all(&dir).map_err(|e| cil_core::CilError::io(&dir, e))?;
    let path = dir.join("embeddings.csv");

    let mut cfg = ExperimentConfig {
        seeds: vec![0],
        bypass_backbone: true,
        ..ExperimentConfig::default()
    };
    let prepared = cil_core::harness::prepare(&cfg)?;
    let stream = prepared.stream(&cfg, 0)?;
    cil_core::data::export_embeddings(&stream, &path)?;
    let back = cil_core::data::ingest_embeddings(&path)?;
    println!("{} sessions of dim {} written to {}, round trip exact: {}", back.len(), back.dim(), path.display(), back == stream);

    cfg.data.source = Source::Embeddings;
    cfg.data.path = Some(path);
    let report = run_experiment(&cfg)?;
    let acc: Vec<String> = report.runs[0].sessions.iter().map(|s| format!("{:.3}", s.acc)).collect();
    println!("raw-feature run: [{}]  A_avg {:.4}", acc.join(" "), report.a_avg_mean);
    Ok(())
}
