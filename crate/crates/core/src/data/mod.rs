//! Line-delimited dataset files, batching, and a synthetic multi-scenario
//! generator.

mod batch;
mod format;
mod synth;

pub use batch::{batch_indices, EncodedDataset};
pub use format::{load_dataset, parse_dataset, record_to_json, Dataset, DATASET_FORMAT};
pub use synth::{generate_synthetic, preference_vectors, SyntheticSpec, SyntheticWorld};
