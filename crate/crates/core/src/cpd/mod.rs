//! Penalized change-point detection used as a baseline.
//!
//! A [`CostKind`] is fitted to a [`Signal`] once (prefix sums, Gram tables)
//! and then queried for arbitrary segments by the search methods.

mod cost;
mod search;

pub use cost::{median_heuristic, segment_cost, Cost, CostKind, Signal, DEFAULT_AR_ORDER};
pub(crate) use cost::average_ranks;
pub use search::{
    brute_force_segmentation, brute_force_with_cost, detect_change_points, detect_with_cost,
    penalized_cost, Method, SearchParams, Segmentation, BRUTE_FORCE_MAX_LEN, DEFAULT_JUMP,
    DEFAULT_PENALTIES, DEFAULT_WINDOW_WIDTH,
};
