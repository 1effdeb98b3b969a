//! Locating ground control point markers in tiled UAV imagery, filtering
//! and ranking the candidates, and scoring them against synthetic truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod detector;
pub mod eval;
pub mod filter;
pub mod geometry;
pub mod locator;
pub mod pipeline;
pub mod plot;
pub mod ranker;
pub mod seeding;
pub mod survey;
pub mod synth;
pub mod tiler;

pub use config::PipelineConfig;
pub use detector::{Detection, OracleConfig};
pub use eval::{MatchParams, MatchResult};
pub use filter::ThresholdReport;
pub use geometry::{MarkerClass, OrientedBox, PixelPoint};
pub use locator::GcpCandidate;
pub use pipeline::{PipelineError, Stage};
pub use ranker::{GcpGroup, ScoredCandidate};
pub use survey::{IndexEntry, SurveyIndex};
pub use synth::{CameraModel, SceneTruth};
pub use tiler::{TileGrid, TileIndex};
