//! Tracing, suppressing and measuring biased feed-forward neurons in a
//! masked-LM encoder.

pub mod artifacts;
pub mod attribution;
pub mod downstream;
pub mod error;
pub mod fixture;
pub mod intervention;
pub mod model;
pub mod pipeline;
pub mod reference;
pub mod relation;
pub mod report;
pub mod selection;
pub mod stats;

pub use artifacts::Meta;
pub use attribution::{AttrRecord, AttributionConfig, AttributionMap, Cloze, IgPath, Method};
pub use downstream::{EvalRecord, Rq3Summary, TaskSpec, Variant};
pub use error::{Error, Result};
pub use intervention::{ControlPooling, ErasureConfig, ErasureResult, Intervention, Rq2Report};
pub use model::{Encoder, LanguageModel, ModelConfig, NeuronId, NeuronOverride, OverrideScope, OverrideSpec};
pub use pipeline::{run_pipeline, Manifest, RunConfig};
pub use reference::PaperReference;
pub use relation::{BiasCategory, BiasPrompt, BiasedRelation, RelationDataset};
pub use selection::{NeuronSet, SelectionConfig, SelectionMode};
pub use stats::Rq2Stats;

use sha2::{Digest, Sha256};

/// Stable per-item seed: the first 8 bytes of sha256(seed || tag).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
