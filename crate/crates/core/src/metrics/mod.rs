//! Detection/segmentation AP and corpus statistics.

pub mod ap;
pub mod stats;

pub use ap::{compute_ap, evaluate, iou_thresholds, EvalResult, GroundTruth, IouType, Prediction};
pub use stats::{dataset_stats, size_bucket, BucketCounts, DatasetStats, SizeBucket};
