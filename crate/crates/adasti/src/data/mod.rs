//! Dataset ingestion, adjacency construction, windowing/normalization and
//! observation-mask generation.

mod adjacency;
mod mask;
mod series;
mod window;

pub use adjacency::{build_adjacency, normalized_adjacency, GraphSpec};
pub use mask::{
    evaluation_mask_pair, generate_block_mask, generate_random_mask, split_target_condition,
    MaskPair,
};
pub use series::{load_series_csv, write_matrix_csv, load_matrix_csv, RawSeriesTable};
pub use window::{window_and_normalize, MaskedSample, NormStats};
