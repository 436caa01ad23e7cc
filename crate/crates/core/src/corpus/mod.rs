//! Synthetic multi-speaker corpus whose speaker variability is a per-channel
//! gain, plus its on-disk formats.

mod features;
mod manifest;
mod synth;

pub use features::{load_features, read_features, save_features, write_features};
pub use manifest::{load_manifest, read_manifest, read_utterances, save_manifest, write_corpus, write_manifest, ManifestEntry, MANIFEST_HEADER};
pub use synth::{corrupt_references, draw_gains, generate_corpus, Corpus, CorpusSpec, Prototypes, SpeakerInfo, Split, Utterance, GAIN_MAX, GAIN_MIN};
