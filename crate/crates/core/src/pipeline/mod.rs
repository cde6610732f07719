//! Dataset curation: caption ingestion, length and perplexity filters,
//! caption-band cropping, feature clustering, outlier removal, template
//! selection and stratified splitting.

pub mod crop;
pub mod dataset;
pub mod features;
pub mod filters;
pub mod kmeans;
pub mod lm;
pub mod manifest;
pub mod ocr;
pub mod outliers;
pub mod run;
pub mod split;
pub mod template;

pub use dataset::{load_patterns, load_training_set, manifest_vocabulary};
pub use manifest::{ClusterEntry, DatasetManifest, ManifestSample};
pub use run::{reapply_filters, run_pipeline, PipelineConfig, PipelineReport};
pub use split::Split;
