//! Click-log ingestion, indexing, splitting and synthetic data.

mod cache;
mod dataset;
mod movielens;
mod preprocess;
mod schema;
mod synth;

pub use cache::{read_splits, write_splits, CACHE_MAGIC, CACHE_VERSION};
pub use dataset::{Batch, Dataset, SplitTag, Splits};
pub use movielens::{load_movielens, rating_label};
pub use preprocess::{
    discretize_numeric, ingest, read_csv, reencode, split, split_indices, threshold_infrequent, IngestOptions,
    RawTable, ThresholdScope, AVAZU_THRESHOLD, CRITEO_THRESHOLD,
};
pub use schema::{FeatureSchema, Field, FieldKind, Vocabulary, UNKNOWN_TOKEN};
pub use synth::{synthesize, synthesize_with_truth, PlantedTruth, SyntheticField, SyntheticSpec};
