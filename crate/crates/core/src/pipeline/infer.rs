use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{add_noise, extract_patches, merge_upsampled, normalize_unit_ball, PointCloud, COVERAGE_FACTOR};
use crate::metrics::{MetricReport, SurfaceRef};
use crate::model::Model;
use crate::tensor::Real;

/// Default seed-patch size.
pub const DEFAULT_PATCH_SIZE: usize = 256;

/// Patch-based inference: seed patches, an eval-mode forward pass per
/// normalized patch, de-normalization and an FPS merge down to exactly `rN`
/// points. Clouds smaller than `patch_size` are processed as one patch.
pub fn upsample_cloud<T: Real>(model: &Model<T>, cloud: &PointCloud, patch_size: usize) -> Result<PointCloud> {
    let n = cloud.len();
    if n < model.cfg.k {
        return Err(Error::Argument(format!(
            "input has {n} points, fewer than k = {}",
            model.cfg.k
        )));
    }
    let patch_size = patch_size.min(n);
    if patch_size < model.cfg.k {
        return Err(Error::Argument(format!(
            "patch size {patch_size} is below k = {}",
            model.cfg.k
        )));
    }
    let set = extract_patches(cloud, patch_size, COVERAGE_FACTOR)?;
    let outputs = set
        .patches
        .iter()
        .map(|p| Ok(p.denormalize(&model.upsample(&p.normalized)?)))
        .collect::<Result<Vec<_>>>()?;
    merge_upsampled(&outputs, model.cfg.ratio * n)
}

/// One evaluation input: sparse cloud, ground truth and reference surface.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub input: PointCloud,
    pub gt: PointCloud,
    pub surface: SurfaceRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub beta: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSweep {
    pub rows: Vec<NoiseRow>,
}

impl NoiseSweep {
    /// Plain-text table: one row per noise level, CD / HD / P2F columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} | {:>12} | {:>12} | {:>12}", "beta", "CD(e-3)", "HD(e-3)", "P2F(e-3)");
        let _ = writeln!(out, "{:-<8}-+-{:-<12}-+-{:-<12}-+-{:-<12}", "", "", "", "");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>7}% | {:>12.6} | {:>12.6} | {:>12.6}",
                r.beta * 100.0,
                r.report.cd,
                r.report.hd,
                r.report.p2f
            );
        }
        out
    }
}

/// Metrics averaged over cases after adding Gaussian noise of standard
/// deviation `beta · radius` to each input, where `radius` is the input's
/// bounding radius about its centroid. `beta = 0` leaves inputs untouched.
pub fn noise_sweep<T: Real>(
    model: &Model<T>,
    cases: &[EvalCase],
    betas: &[f64],
    patch_size: usize,
    seed: u64,
) -> Result<NoiseSweep> {
    if cases.is_empty() {
        return Err(Error::EmptySet("noise sweep cases"));
    }
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut sum = [0.0; 3];
        let (mut n_pred, mut n_gt) = (0, 0);
        for (i, case) in cases.iter().enumerate() {
            let (_, _, radius) = normalize_unit_ball(&case.input);
            let noisy = add_noise(&case.input, beta * radius, seed.wrapping_add(i as u64))?;
            let pred = upsample_cloud(model, &noisy, patch_size)?;
            let r = MetricReport::compute(pred.points(), case.gt.points(), &case.surface)?;
            sum[0] += r.cd;
            sum[1] += r.hd;
            sum[2] += r.p2f;
            n_pred += r.n_pred;
            n_gt += r.n_gt;
        }
        let k = cases.len() as f64;
        rows.push(NoiseRow {
            beta,
            report: MetricReport {
                cd: sum[0] / k,
                hd: sum[1] / k,
                p2f: sum[2] / k,
                n_pred: n_pred / cases.len(),
                n_gt: n_gt / cases.len(),
            },
        });
    }
    Ok(NoiseSweep { rows })
}
