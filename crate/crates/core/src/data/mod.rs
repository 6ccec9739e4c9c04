//! Utterances, batching, dataset containers, the synthetic multi-speaker
//! corpus, and analysis of utterance summaries.

mod container;
mod export;
mod purity;
mod synthetic;
mod utterance;

pub use container::{load_dataset, save_dataset, DatasetManifest, UtteranceEntry};
pub use export::{export_summaries, read_summaries, write_summaries, SummaryRecord};
pub use purity::{cluster_purity, kmeans, modal_frequency, purity_of_assignment, KMeansResult};
pub use synthetic::{gen_synthetic, SpeakerProfile, SyntheticCorpus, SyntheticSpec};
pub use utterance::{Batch, Utterance};
