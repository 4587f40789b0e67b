//! Synthetic corpus, ROI ingestion, masking and batch assembly.

pub mod batch;
pub mod corpus;
pub mod masking;
pub mod roi;
pub mod synth;
pub mod vocab;

pub use batch::{make_batch, text_span, Batch, BatchConfig, PairInput, Slot};
pub use corpus::{read_corpus, read_split, write_corpus, write_split};
pub use masking::{apply_masking, MaskingConfig, MaskingPlan, Replacement};
pub use roi::{ingest_roi_features, select_rois, write_detections, IngestedRois};
pub use synth::{
    generate_split, generate_synthetic_corpus, GeneratorSpec, MultimodalSample, Split,
    SyntheticCorpus, SyntheticWorld,
};
pub use vocab::Vocabulary;
