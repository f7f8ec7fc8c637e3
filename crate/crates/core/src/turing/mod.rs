//! Expert real-versus-synthetic evaluation: pool assembly under a quota,
//! verdict types, and scoring of collected verdicts.
//!
//! The HTTP service that presents pools to raters lives in its own crate;
//! everything here is storage-agnostic.

mod pool;
mod report;

pub use pool::{create_pool, opaque_image_id, presentation_order, EvalPool, PoolItem, Quota, TrueSource};
pub use report::{
    aggregate_results, annotation_count, equal_weight, export_annotations, is_correct, AnnotationFilter,
    AnnotationRow, Breakdown, Judgment, PieSlice, RaterAverage, RaterBreakdown, RegionAnnotation, StageRow, Tally,
    TuringReport, Verdict, VerdictRecord,
};
