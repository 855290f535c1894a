//! Grounding-aware evaluation of visually grounded form extraction.
//!
//! Model outputs are scored jointly on value correctness (Normalised Match)
//! and evidence localisation (IoU / IoP against annotated regions), then
//! aggregated into leaderboard rows and per-document audit packets.

pub mod adapter;
pub mod evaluate;
pub mod geometry;
pub mod ingest;
pub mod metrics;
pub mod normalize;
pub mod report;
pub mod review;
pub mod schema;

pub use geometry::{BBox, Convention, CoordConvention};
pub use metrics::{FailureMode, FieldJudgement, ModelScore, Regime, ScoringConfig};
pub use schema::{FieldSpec, FormSchema, PageSize, ValueKind};
