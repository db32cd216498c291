use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ScMsaConfig};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Linear weight `[fan_in, fan_out]`, Glorot-uniform initialised.
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running mean (not trainable).
    RunningMean,
    /// Batch-norm running variance (not trainable).
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Top-level block the tensor belongs to (`head`, `enc0`, …, `tail`).
    pub block: String,
}

fn push_linear(out: &mut Vec<ParamSpec>, block: &str, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.W"),
        shape: vec![fan_in, fan_out],
        kind: ParamKind::Weight,
        block: block.into(),
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![fan_out],
        kind: ParamKind::Bias,
        block: block.into(),
    });
}

fn push_norm(out: &mut Vec<ParamSpec>, block: &str, prefix: &str, c: usize, running: bool) {
    let mut add = |field: &str, kind| {
        out.push(ParamSpec {
            name: format!("{prefix}.{field}"),
            shape: vec![c],
            kind,
            block: block.into(),
        })
    };
    add("gamma", ParamKind::NormScale);
    add("beta", ParamKind::NormShift);
    if running {
        add("running_mean", ParamKind::RunningMean);
        add("running_var", ParamKind::RunningVar);
    }
}

/// Every tensor a config needs, in construction order. Shapes depend on the
/// config alone.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut out = Vec::new();
    push_linear(&mut out, "head", "head", 3, cfg.head_channels);
    push_norm(&mut out, "head", "head.bn", cfg.head_channels, true);
    let mut c_in = cfg.head_channels;
    for (l, &c) in cfg.channels.iter().enumerate() {
        let b = format!("enc{l}");
        let half = c / 2;
        push_linear(&mut out, &b, &format!("{b}.posfus.phi"), 6, half);
        push_norm(&mut out, &b, &format!("{b}.posfus.phi.bn"), half, true);
        push_linear(&mut out, &b, &format!("{b}.posfus.theta"), 2 * c_in, half);
        push_norm(&mut out, &b, &format!("{b}.posfus.theta.bn"), half, true);
        push_norm(&mut out, &b, &format!("{b}.ln1"), c, false);
        let sc = ScMsaConfig::from_psi(c, cfg.psi)?;
        for q in ["q", "k", "v"] {
            push_linear(&mut out, &b, &format!("{b}.attn.{q}"), c, c);
        }
        push_linear(&mut out, &b, &format!("{b}.attn.o"), sc.concat_width(), c);
        push_norm(&mut out, &b, &format!("{b}.ln2"), c, false);
        push_linear(&mut out, &b, &format!("{b}.mlp"), c, c);
        c_in = c;
    }
    push_linear(&mut out, "tail", "tail", c_in / cfg.ratio, 3);
    Ok(out)
}

/// Trainable scalar counts per block plus the total.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub blocks: Vec<(String, usize)>,
    pub total: usize,
    /// Non-trainable running statistics, reported separately.
    pub buffers: usize,
}

pub fn param_count(cfg: &ModelConfig) -> Result<ParamCount> {
    let mut blocks: Vec<(String, usize)> = Vec::new();
    let mut buffers = 0;
    for spec in param_specs(cfg)? {
        let n: usize = spec.shape.iter().product();
        if !spec.kind.trainable() {
            buffers += n;
            continue;
        }
        match blocks.last_mut() {
            Some((b, count)) if *b == spec.block => *count += n,
            _ => blocks.push((spec.block.clone(), n)),
        }
    }
    let total = blocks.iter().map(|(_, n)| n).sum();
    Ok(ParamCount {
        blocks,
        total,
        buffers,
    })
}

/// Named tensors of a model, trainable and running statistics alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    kinds: BTreeMap<String, ParamKind>,
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, unit norm scales, zero shifts.
    /// Running means start at 0 and running variances at 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        for spec in param_specs(cfg)? {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.kind {
                ParamKind::Weight => {
                    let s = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-s..s)).collect()
                }
                ParamKind::Bias | ParamKind::NormShift | ParamKind::RunningMean => vec![0.0; n],
                ParamKind::NormScale | ParamKind::RunningVar => vec![1.0; n],
            };
            tensors.insert(spec.name.clone(), Tensor::from_f64(&spec.shape, &data)?);
            kinds.insert(spec.name, spec.kind);
        }
        Ok(ModelParams { tensors, kinds })
    }

    /// Rebuilds params from named tensors, checking names and shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let specs = param_specs(cfg)?;
        let mut kinds = BTreeMap::new();
        let mut out = BTreeMap::new();
        for spec in specs {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("param", t.shape(), &spec.shape));
            }
            out.insert(spec.name.clone(), t);
            kinds.insert(spec.name, spec.kind);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(ModelParams {
            tensors: out,
            kinds,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.kinds.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.kinds
            .iter()
            .filter(|(_, k)| k.trainable())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            kinds: self.kinds.clone(),
        }
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    /// Records every trainable tensor on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .filter(|(n, _)| self.kinds[*n].trainable())
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    /// Folds train-mode batch statistics into the running averages:
    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchNormStats<T>)], momentum: f64) -> Result<()> {
        let m = T::from_f64_lossy(momentum);
        let one_m = T::from_f64_lossy(1.0 - momentum);
        for (prefix, s) in stats {
            for (field, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{field}");
                let t = self
                    .tensors
                    .get_mut(&name)
                    .ok_or_else(|| Error::Argument(format!("no running stat {name}")))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + one_m * b;
                }
            }
        }
        Ok(())
    }
}

/// Tape handles for the trainable tensors of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Binds `name` to `var`, replacing any previous binding.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Option<Var> {
        self.vars.insert(name.into(), var)
    }
}
