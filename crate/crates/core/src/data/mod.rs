//! Synthetic domains and on-disk formats.

pub mod checkpoint;
pub mod synth;

pub use checkpoint::{
    fnv1a, read_checkpoint, read_features, write_checkpoint, write_features, Checkpoint, FeatureSet,
};
pub use synth::{
    generate_domains, shared_embedding, Affine, DomainRecipe, DomainSpec, Sample, Split, SyntheticDataset,
};
