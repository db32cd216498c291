use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::MetricReport;
use crate::model::{forward, param_count, points_tensor, BatchNeighbors, Ctx, Mode, ModelConfig, ModelParams, ParamCount};
use crate::tensor::{grad_check, Tape, Tensor, Var};

/// Git blob hash: SHA-1 of `"blob <len>\0"` followed by the bytes.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_config: BTreeMap<String, String>,
    pub train_config: TrainConfig,
    pub checkpoint_hash: Option<String>,
    pub loss_curve: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
    pub final_report: Option<BTreeMap<String, f64>>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.loss_curve.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("loss curve has non-finite values".into()));
        }
        if self.loss_curve.len() != self.epoch_seconds.len() {
            return Err(Error::Argument("loss curve and epoch timings differ in length".into()));
        }
        Ok(())
    }

    pub fn config_map(cfg: &ModelConfig) -> BTreeMap<String, String> {
        cfg.to_kv()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn report_map(r: &MetricReport) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("cd_e-3".to_string(), r.cd),
            ("hd_e-3".to_string(), r.hd),
            ("p2f_e-3".to_string(), r.p2f),
            ("n_pred".to_string(), r.n_pred as f64),
            ("n_gt".to_string(), r.n_gt as f64),
        ])
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Argument(format!("manifest encoding: {e}")))
    }
}

/// Published totals for the default family with `L` encoders.
pub const REFERENCE_TOTALS: [(usize, f64); 4] = [(3, 438.3e3), (4, 547.3e3), (5, 969.9e3), (6, 2634.4e3)];

/// Parameter counts of one config with the published reference, if any.
#[derive(Clone, Debug)]
pub struct ParamsReport {
    pub cfg: ModelConfig,
    pub count: ParamCount,
    pub reference: Option<f64>,
}

impl ParamsReport {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let count = param_count(cfg)?;
        let family = ModelConfig::with_layers(cfg.layers());
        let reference = if *cfg == family {
            REFERENCE_TOTALS
                .iter()
                .find(|(l, _)| *l == cfg.layers())
                .map(|(_, v)| *v)
        } else {
            None
        };
        Ok(ParamsReport {
            cfg: cfg.clone(),
            count,
            reference,
        })
    }

    /// Relative deviation from the reference total, in percent.
    pub fn delta_percent(&self) -> Option<f64> {
        self.reference
            .map(|r| (self.count.total as f64 - r) / r * 100.0)
    }
}

impl fmt::Display for ParamsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "config: L={} channels={:?} head={} k={} psi={} r={}",
            self.cfg.layers(), self.cfg.channels, self.cfg.head_channels,
            self.cfg.k, self.cfg.psi, self.cfg.ratio)?;
        for (block, n) in &self.count.blocks {
            writeln!(f, "{block:>8}  {n:>10}")?;
        }
        writeln!(f, "{:>8}  {:>10}", "total", self.count.total)?;
        writeln!(f, "{:>8}  {:>10}  (running statistics, not trained)", "buffers", self.count.buffers)?;
        if let (Some(r), Some(d)) = (self.reference, self.delta_percent()) {
            let label = if self.cfg.layers() == 5 {
                "Table 5".to_string()
            } else {
                format!("Table 5, L={}", self.cfg.layers())
            };
            writeln!(f, "Δ vs {label} ({:.1}k): {d:+.2}%", r / 1e3)?;
        }
        Ok(())
    }
}

/// Worst relative error of one tensor's gradient.
#[derive(Clone, Debug)]
pub struct TensorGradCheck {
    pub name: String,
    pub block: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckSuite {
    pub tol: f64,
    pub tensors: Vec<TensorGradCheck>,
}

impl GradCheckSuite {
    pub fn failures(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_err.is_nan() || t.max_rel_err >= self.tol)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Largest error per block, in first-seen order.
    pub fn per_block(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for t in &self.tensors {
            match out.iter_mut().find(|(b, _)| *b == t.block) {
                Some(entry) => entry.1 = entry.1.max(t.max_rel_err),
                None => out.push((t.block.clone(), t.max_rel_err)),
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (block, err) in self.per_block() {
            let flag = if err < self.tol { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{block:>8}  max rel err {err:.3e}  {flag}");
        }
        out
    }
}

/// The small config the gradient suite runs on.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        channels: vec![8, 16],
        head_channels: 8,
        k: 3,
        psi: 2,
        ratio: 2,
        ..ModelConfig::default()
    }
}

fn block_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}

/// Central-difference check of every trainable tensor and of the input
/// coordinates, in `f64`.
///
/// The objective is `Σ out ⊙ R` for a fixed random `R`, with batch norms in
/// train mode over a batch of two random clouds of `n` points. Biases, norm
/// shifts and running statistics are randomized so no gradient is trivially
/// zero.
pub fn gradcheck_suite(cfg: &ModelConfig, n: usize, seed: u64, tol: f64) -> Result<GradCheckSuite> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(cfg, seed)?;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let kind = params.kind(name).unwrap();
        let t = params.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = match kind {
                crate::model::ParamKind::Weight => *v,
                crate::model::ParamKind::RunningVar | crate::model::ParamKind::NormScale => {
                    rng.random_range(0.5..1.5)
                }
                _ => rng.random_range(-0.5..0.5),
            };
        }
    }
    let clouds: Vec<PointCloud> = (0..2)
        .map(|_| {
            PointCloud::new(
                (0..n)
                    .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let nbr = BatchNeighbors::build(&clouds, cfg.k)?;
    let points: Tensor<f64> = points_tensor(&clouds)?;
    let out_len = 2 * n * cfg.ratio * 3;
    let weights = Tensor::new(
        vec![2, n * cfg.ratio, 3],
        (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    let objective = |tape: &mut Tape<f64>, probe: Option<(&str, Var)>, input: Option<Var>| -> Result<Var> {
        let mut vars = params.bind(tape, false);
        if let Some((name, v)) = probe {
            vars.insert(name, v);
        }
        let pts = input.unwrap_or_else(|| tape.constant(points.clone()));
        let mut ctx = Ctx::new(cfg, &params, &vars, Mode::Train);
        let out = forward(tape, &mut ctx, pts, &nbr)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    };

    let h = 1e-6;
    let mut tensors = Vec::new();
    let input = grad_check(|tape, x| objective(tape, None, Some(x)), &points, h, tol)?;
    tensors.push(TensorGradCheck {
        name: "input".into(),
        block: "input".into(),
        numel: points.numel(),
        max_rel_err: input.max_rel_err,
    });
    for name in params.trainable_names() {
        let x = params.get(&name).unwrap().clone();
        let report = grad_check(|tape, v| objective(tape, Some((&name, v)), None), &x, h, tol)?;
        tensors.push(TensorGradCheck {
            block: block_of(&name),
            numel: x.numel(),
            max_rel_err: report.max_rel_err,
            name,
        });
    }
    Ok(GradCheckSuite { tol, tensors })
}
