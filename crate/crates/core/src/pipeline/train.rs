use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_rng, save_checkpoint, SampleRecord};
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_ball, PointCloud};
use crate::model::{points_tensor, Mode, Model, ModelParams};
use crate::tensor::{Real, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_interval: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Small-batch CPU preset.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr0: 1e-3,
            lr_decay: 0.7,
            decay_interval: 20,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_steps: None,
            dataset: None,
            checkpoint: None,
        }
    }

    /// Full-size preset: batch 64.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 64,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_interval == 0 {
            return Err(Error::Config(
                "epochs, batch_size and decay_interval must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Step schedule: `lr0 · lr_decay^⌊epoch / decay_interval⌋`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_interval) as i32)
    }
}

/// One normalized training pair: the sparse cloud mapped into the unit ball
/// and the dense cloud mapped with the same transform.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub input: PointCloud,
    pub target: PointCloud,
}

impl TrainPair {
    pub fn from_record(rec: &SampleRecord) -> Result<Self> {
        let (input, c, s) = normalize_unit_ball(&rec.sparse);
        let target = PointCloud::new(
            rec.dense
                .points()
                .iter()
                .map(|p| [(p[0] - c[0]) / s, (p[1] - c[1]) / s, (p[2] - c[2]) / s])
                .collect(),
        )?;
        Ok(TrainPair { input, target })
    }
}

/// Per-tensor first and second moments.
struct Adam<T> {
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// Mean Chamfer loss over a batch of pairs in the given mode, without gradients.
pub fn batch_loss<T: Real>(model: &Model<T>, pairs: &[TrainPair], mode: Mode) -> Result<f64> {
    let mut tape = Tape::new();
    let inputs: Vec<PointCloud> = pairs.iter().map(|p| p.input.clone()).collect();
    let targets: Vec<PointCloud> = pairs.iter().map(|p| p.target.clone()).collect();
    let pass = model.forward_batch(&mut tape, &inputs, mode, false)?;
    let target = tape.constant(points_tensor(&targets)?);
    let loss = tape.chamfer_loss(pass.output, target)?;
    Ok(tape.value(loss).data()[0].to_f64_lossy())
}

/// Eval-mode loss averaged over `pairs`, one cloud at a time.
pub fn eval_loss<T: Real>(model: &Model<T>, pairs: &[TrainPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("eval_loss"));
    }
    let mut total = 0.0;
    for p in pairs {
        total += batch_loss(model, std::slice::from_ref(p), Mode::Eval)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters after the last step.
    pub model: Model<T>,
    /// Parameters at the end of the epoch with the lowest mean loss.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

impl<T> TrainOutcome<T> {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Applies one optimizer update to every trainable tensor.
fn apply_update<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[(String, Vec<T>)],
    cfg: &TrainConfig,
    lr: f64,
    adam: &mut Adam<T>,
) -> Result<()> {
    adam.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(adam.t);
    let bc2 = 1.0 - b2.powi(adam.t);
    let lr_t = T::from_f64_lossy(lr);
    let step = T::from_f64_lossy(lr * bc2.sqrt() / bc1);
    let eps = T::from_f64_lossy(cfg.adam_eps * bc2.sqrt());
    let (tb1, tb2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (ob1, ob2) = (T::one() - tb1, T::one() - tb2);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("no parameter {name}")))?
            .data_mut();
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (w, &gi) in p.iter_mut().zip(g) {
                    *w -= lr_t * gi;
                }
            }
            OptimizerKind::Adam => {
                let m = adam.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
                let v = adam.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
                for i in 0..g.len() {
                    m[i] = tb1 * m[i] + ob1 * g[i];
                    v[i] = tb2 * v[i] + ob2 * g[i] * g[i];
                    p[i] -= step * m[i] / (v[i].sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Minibatch training on Chamfer loss.
///
/// Each epoch visits the pairs in a permutation drawn from the seed; batches
/// are consecutive runs of `batch_size` (the last one may be shorter, and a
/// trailing single-cloud batch is folded into the previous one). Training
/// stops on the first non-finite loss with its epoch and batch.
pub fn train<T: Real>(
    mut model: Model<T>,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptySet("training set"));
    }
    let mut adam = Adam::new();
    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut epochs = Vec::new();
    let mut steps = 0;
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        if steps >= limit {
            break;
        }
        let started = Instant::now();
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut sample_rng(cfg.seed, epoch));
        let mut bounds: Vec<(usize, usize)> = (0..pairs.len())
            .step_by(cfg.batch_size)
            .map(|s| (s, (s + cfg.batch_size).min(pairs.len())))
            .collect();
        if bounds.len() > 1 && bounds.last().is_some_and(|&(a, b)| b - a == 1) {
            let (_, end) = bounds.pop().unwrap();
            bounds.last_mut().unwrap().1 = end;
        }
        let mut sum = 0.0;
        let mut count = 0;
        for (batch, &(from, to)) in bounds.iter().enumerate() {
            if steps >= limit {
                if count == 0 {
                    break 'epochs;
                }
                break;
            }
            let nan = || Error::NonFiniteLoss { epoch, batch };
            let inputs: Vec<PointCloud> = order[from..to].iter().map(|&i| pairs[i].input.clone()).collect();
            let targets: Vec<PointCloud> = order[from..to].iter().map(|&i| pairs[i].target.clone()).collect();
            let mut tape = Tape::new();
            let pass = model
                .forward_batch(&mut tape, &inputs, Mode::Train, true)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => nan(),
                    other => other,
                })?;
            let target = tape.constant(points_tensor(&targets)?);
            let loss_var = tape.chamfer_loss(pass.output, target).map_err(|_| nan())?;
            let loss = tape.value(loss_var).data()[0].to_f64_lossy();
            if !loss.is_finite() {
                return Err(nan());
            }
            tape.backward(loss_var).map_err(|_| nan())?;
            let mut grads = Vec::new();
            for (name, var) in pass.vars.iter() {
                let g = tape.grad_or_zeros(var).into_data();
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(nan());
                }
                grads.push((name.to_string(), g));
            }
            apply_update(&mut model.params, &grads, cfg, lr, &mut adam)?;
            model
                .params
                .update_running_stats(&pass.bn_stats, model.cfg.bn_momentum)?;
            sum += loss;
            count += 1;
            steps += 1;
        }
        let log = EpochLog {
            epoch,
            lr,
            mean_loss: sum / count as f64,
            steps: count,
            seconds: started.elapsed().as_secs_f64(),
        };
        if log.mean_loss < best.0 {
            best = (log.mean_loss, model.clone(), epoch);
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(&model.params, &model.cfg, path)?;
            }
        }
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome {
        model,
        best: best.1,
        best_epoch: best.2,
        epochs,
        steps,
    })
}
