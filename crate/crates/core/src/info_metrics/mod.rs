//! Information-theoretic utilities used by the leader/follower game.

mod digamma;
mod kl;
mod ksg;

use thiserror::Error;

pub use digamma::digamma;
pub use kl::{histogram_kl, kl_divergence, HistogramKlConfig};
pub use ksg::{
    chebyshev_distance, ksg_axis_mutual_information, ksg_mutual_information, ksg_pair_mi,
    neighbor_counts, pair_neighbor_counts, pair_neighbor_counts_brute, write_neighbor_diagnostics,
    FeatureBlock, KsgConfig, NeighborCounts, PairedSignalSet,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("digamma needs a positive finite argument, got {0}")]
    NonPositiveArgument(f64),
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("zero neighbour distance at point {point} (duplicate or constant data)")]
    DegenerateData { point: usize },
    #[error("{n} samples are not enough for k = {k}")]
    TooFewSamples { n: usize, k: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
