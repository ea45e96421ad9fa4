//! Frame-level phoneme regulation and corpus ingestion.

mod manifest;
mod mix;
mod regulate;

pub use manifest::{
    ingest_corpus, read_f0_sidecar, write_f0_sidecar, CorpusKind, IngestConfig, IngestReport,
    Rejection, UtteranceRecord,
};
pub use mix::{select_by_caps, DataMix, MixSampler};
pub use regulate::{frame_rate_of, regulate, FrameRate, PhonemeFrameSequence, PhonemeVocab};
