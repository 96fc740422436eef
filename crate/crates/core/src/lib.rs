//! Cross-modality pseudo-label assignment over oriented boxes.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: oriented boxes, exact intersection area and IoU.
//! - [`filter`]: batch-adaptive score filtering of pseudo-labels.
//! - [`matcher`]: search-region gated, IoU-ranked greedy pairing.
//! - [`correction`]: the per-scene label bag and its epoch update rule.
//! - [`schedule`]: three-stage phase schedule, loss composition and EMA.
//! - [`sim`]: synthetic misaligned scenes and a closed-form detector.
//! - [`pipeline`]: the teacher-student loop wiring everything together.
//! - [`eval`]: average precision and correspondence scoring.
//! - [`sweep`]: the position-shift robustness grid.
//! - [`records`]: line-delimited record I/O shared by the file formats.

pub mod correction;
pub mod error;
pub mod eval;
pub mod filter;
pub mod geometry;
pub mod matcher;
pub mod pipeline;
pub mod records;
pub mod schedule;
pub mod sim;
pub mod sweep;

pub use correction::{init_bag, update_bag, LabelBag, LabelPair, PairOrigin, UpdatePolicy};
pub use error::{Error, Result};
pub use eval::{average_precision, correspondence_score, mean_ap, GroundTruth, PrCurve};
pub use filter::{batch_threshold, filter_batch, score_of, BatchThreshold, ScoredBox};
pub use geometry::{
    corners_of, intersect_area, iou, point_in_obb, raster_iou_oracle, rotation_matrix, ConvexPolygon, OrientedBox,
    Point2,
};
pub use matcher::{
    candidates_for, match_scene, match_scene_with, search_region, MatchResult, MatchStrategy, MatchedPair,
    MatcherConfig, SearchRegion,
};
pub use pipeline::{run_pipeline, Ablation, PipelineConfig, PipelineReport};
pub use schedule::{
    ema_update, lambda_at, loss_terms_at, phase_of, Branch, EmaState, LossTerm, Phase, StageConfig, StageState,
};
pub use sim::{detect, generate_scenes, student_step, Modality, Scene, SimConfig, SimDetectorParams};

/// Identifier of a box within one modality of one scene.
pub type BoxId = u64;
