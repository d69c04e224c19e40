//! Datasets, the synthetic task, non-IID partitioners and the CEFI file
//! format.

mod dataset;
pub mod format;
mod partition;
mod synth;

pub use dataset::{holdout_shared, Dataset, SharedSplit};
pub use format::{
    read_container, read_container_checked, read_features, write_container, write_features, Container,
    FeatureFile, Section, SectionData,
};
pub use partition::{
    largest_remainder, manual_allocation, partition, partition_dirichlet, partition_manual, PartitionScheme,
    MAX_DIRICHLET_REDRAWS,
};
pub use synth::{synth_generate, SyntheticTask, SyntheticTaskConfig};
