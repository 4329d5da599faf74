//! Dataset files, synthetic tasks, run configuration and the feature cache.

mod cache;
mod config;
mod dataset;
mod synthetic;

pub use cache::{cache_path, compute_features, decode_features, encode_features, load_or_build_features, prepare_all};
pub use config::RunConfig;
pub use dataset::{load_dataset, save_dataset, Dataset};
pub use synthetic::{
    average_spd, connected_erdos_renyi, diameter, generate_synthetic, triangle_count, SyntheticSpec, SyntheticTask,
};

use crate::error::Result;
use crate::model::PreparedGraph;

/// Prepare graphs in memory (no cache).
pub fn prepare_dataset(data: &Dataset, max_path_len: usize) -> Result<Vec<PreparedGraph>> {
    let feats = compute_features(&data.graphs, max_path_len);
    prepare_all(data.graphs.clone(), feats)
}

/// Split off the last `fraction` of the graphs for validation.
pub fn split_tail<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_valid = (items.len() as f64 * fraction).round() as usize;
    let cut = items.len() - n_valid.min(items.len());
    (items[..cut].to_vec(), items[cut..].to_vec())
}
