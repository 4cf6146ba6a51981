//! Trial records, site outcomes, embedding files, splitting and the
//! synthetic data generator.

mod embeddings;
mod records;
mod split;
pub mod synth;

pub use embeddings::{decode_embeddings, encode_embeddings, load_embeddings, save_embeddings, EmbeddingMatrix};
pub use records::{
    derive_site_rate, filter_pg_eligible, load_sites, load_trials, load_trials_with_report, save_sites,
    save_trials, sites_by_trial, LabelSet, LoadReport, SiteOutcome, TrialRecord, TrialStatus, RATE_WINDOW_EPS,
};
pub(crate) use records::{read_jsonl, write_jsonl};
pub use split::{enrollment_deciles, split_dataset, DatasetSplit, SplitManifest, SplitSizes};
pub use synth::{generate_synthetic, load_latents, GeneratorConfig, SynthDataset, TrialLatents};
