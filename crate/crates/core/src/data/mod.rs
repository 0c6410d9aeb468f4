//! Datasets, image files, the synthetic lesion generator and metrics.

mod dataset;
pub mod image;
mod metrics;
pub mod synth;

pub use dataset::{
    augment, load_dataset, read_image, split_dataset, write_dataset, AugmentOp, LabeledDataset, LoadOptions, Provenance,
};
pub use metrics::{compute_metrics, ClassMetrics, MetricsReport};
pub use synth::{generate_synthetic, ClassProfile, SynthSpec};
