//! Offline trajectories: on-disk format, collection, subsets, windows.

mod dataset;
mod episode;
mod window;

pub use dataset::{
    collect_dataset, collect_task, derive_seed, derive_subset, Dataset, DatasetKind, Manifest,
    SubsetRule, TaskEntry, EPISODE_DIR, MANIFEST_FILE, MANIFEST_FORMAT_VERSION,
};
pub use episode::{Episode, EPISODE_FORMAT_VERSION, EPISODE_MAGIC};
pub use window::{compute_returns_to_go, sample_window, MixtureSampler, WindowBatch, WindowSampler};
