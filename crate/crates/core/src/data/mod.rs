//! Volumes, files, normalization, patch sampling, augmentation and batching.

pub mod augment;
pub mod io;
pub mod loader;
pub mod normalize;
pub mod patch;
pub mod synth;
pub mod volume;

pub use augment::{augment, flip, flip_patch, AugmentConfig, Axis};
pub use io::{
    load_manifest, read_labels, read_manifest, read_volume, save_case, write_labels,
    write_manifest, write_volume, CaseDescriptor,
};
pub use loader::{for_each_batch, Batch, BatchPlan};
pub use normalize::{normalize_case, normalize_volume};
pub use patch::{center_patch, crop, sample_patch, Patch};
pub use synth::{synth_case, synth_cohort, SynthConfig};
pub use volume::{class_to_label, label_to_class, Case, LabelVolume, Volume, LABEL_SET, MODALITIES};
