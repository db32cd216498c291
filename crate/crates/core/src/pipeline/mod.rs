//! Training, patch-based inference, noise sweeps and reports.

mod infer;
mod report;
mod train;

pub use infer::{noise_sweep, upsample_cloud, EvalCase, NoiseRow, NoiseSweep, DEFAULT_PATCH_SIZE};
pub use report::{
    git_blob_hash, gradcheck_config, gradcheck_suite, GradCheckSuite, ParamsReport, RunManifest,
    TensorGradCheck, REFERENCE_TOTALS,
};
pub use train::{batch_loss, eval_loss, train, EpochLog, OptimizerKind, TrainConfig, TrainOutcome, TrainPair};

use crate::metrics::MetricReport;
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::metrics::SurfaceRef;

/// CD / HD / P2F of a prediction against ground truth and surface.
pub fn evaluate(pred: &PointCloud, gt: &PointCloud, surface: &SurfaceRef) -> Result<MetricReport> {
    MetricReport::compute(pred.points(), gt.points(), surface)
}
