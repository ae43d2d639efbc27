//! Synthetic benchmark generation, session streams and the embedding file
//! format.

pub mod embeddings;
mod set;
pub mod stream;
pub mod synthetic;

pub use embeddings::{export_embeddings, ingest_embeddings, read_embeddings, write_embeddings};
pub use set::LabeledSet;
pub use stream::{fewshot_subsample, split_cil, Session, SessionStream};
pub use synthetic::{generate_synthetic, CilDataset, SyntheticData, SyntheticSpec};
