//! Procedural multi-domain segmentation data, splits and augmentation.

mod augment;
mod domain;
mod seed;
mod split;

pub use augment::{strong_augment, weak_augment, StrongParams, WeakParams, MAX_SHIFT};
pub use domain::{apply_domain, generate_pretrain_sample, generate_sample, render_clean, DomainSpec, Sample, IMAGE_SIZE};
pub use seed::{rng_for, sub_seed};
pub use split::{build_split, stack_images, Dataset, Entry, Role, SplitConfig, SplitManifest};
