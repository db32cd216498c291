//! The upsampling network: a batch-normalised point-wise head, a stack of
//! transformer encoders (positional fusion, shifted-channel attention, MLP,
//! both with pre-norm residuals) and a periodic-shuffle tail.

mod blocks;
mod config;
mod params;

pub use blocks::{
    forward, points_tensor, positional_fusion, relative_positions, sc_msa, shuffle,
    transformer_encoder, unshuffle, BatchNeighbors, Ctx, Mode,
};
pub use config::{ModelConfig, ScMsaConfig};
pub use params::{param_count, param_specs, BoundParams, ModelParams, ParamCount, ParamKind, ParamSpec};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::tensor::{BatchNormStats, Real, Tape, Var};

/// A config with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ModelParams<T>,
}

/// Handles produced by [`Model::forward_batch`].
pub struct ForwardPass<T> {
    pub input: Var,
    pub output: Var,
    pub vars: BoundParams,
    pub bn_stats: Vec<(String, BatchNormStats<T>)>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        cfg.validate()?;
        // Re-check names and shapes.
        let params = ModelParams::from_tensors(&cfg, params.into_tensors())?;
        Ok(Model { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    /// Records a forward pass over equally sized clouds on `tape`.
    /// The output var has shape `[B, rN, 3]`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        clouds: &[PointCloud],
        mode: Mode,
        requires_grad: bool,
    ) -> Result<ForwardPass<T>> {
        let n = clouds.first().map(PointCloud::len).unwrap_or(0);
        if n < self.cfg.k {
            return Err(Error::Argument(format!(
                "clouds have {n} points, fewer than k = {}",
                self.cfg.k
            )));
        }
        let nbr = BatchNeighbors::build(clouds, self.cfg.k)?;
        let input = tape.constant(points_tensor(clouds)?);
        let vars = self.params.bind(tape, requires_grad);
        let mut ctx = Ctx::new(&self.cfg, &self.params, &vars, mode);
        let output = forward(tape, &mut ctx, input, &nbr)?;
        let bn_stats = std::mem::take(&mut ctx.bn_stats);
        Ok(ForwardPass {
            input,
            output,
            vars,
            bn_stats,
        })
    }

    /// Eval-mode upsampling of one cloud: `N` points in, `rN` out.
    pub fn upsample(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let mut tape = Tape::new();
        let pass = self.forward_batch(&mut tape, std::slice::from_ref(cloud), Mode::Eval, false)?;
        let flat: Vec<f64> = tape.value(pass.output).to_f64_vec();
        PointCloud::from_flat(&flat)
    }
}
