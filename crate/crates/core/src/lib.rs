//! Expert pruning with neuron-level segment reuse for GLU mixture-of-experts
//! layers.
//!
//! The pipeline runs per layer:
//!
//! 1. [`calibration`]: score experts by the routing mass they receive on a
//!    calibration set and split them into retained and pruned.
//! 2. [`segments`]: break pruned experts into neuron segments, hand each one
//!    to the retained expert holding its closest match (if close enough), and
//!    move a matching share of router weight along with it.
//! 3. [`clustering`]: cluster every retained expert's own and received
//!    segments with spherical weighted k-means and rebuild a compact expert
//!    from the centroids.
//!
//! [`pipeline`] ties the stages together with two baselines, evaluation and
//! similarity diagnostics; [`format`] holds the on-disk containers.

pub mod calibration;
pub mod clustering;
pub mod error;
pub mod format;
pub mod linalg;
pub mod model;
pub mod numfmt;
pub mod pipeline;
pub mod segments;

pub use calibration::{
    collect_stats, importance_scores, select_retained, synth_calibration, CalibrationSet,
    ImportanceReport, RoutingStats,
};
pub use clustering::{
    compress_layer, init_centroids, objective, reconstruct_expert, run_kmeans, ClusterConfig,
    ClusterState, InitStrategy,
};
pub use error::{DernError, Result};
pub use format::{load_calibration, load_model, save_calibration, save_model};
pub use linalg::{cosine, dot, l2_norm, linf_norm, Matrix};
pub use model::{
    expert_forward, layer_forward, param_count, route, ExpertWeights, MoeLayer, MoeModel,
    RouterWeights, Routing,
};
pub use pipeline::{
    evaluate, gen_synthetic_model, run_dern, run_expert_average, run_prune_only, similarity_report,
    Baseline, EvalReport, PipelineConfig, SimReport, SyntheticSpec,
};
pub use segments::{
    decompose, reassign, sim_to_expert, transfer_router_mass, vectorize, ComponentMask, Segment,
    SegmentPool,
};
