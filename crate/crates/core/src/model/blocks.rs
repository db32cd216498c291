use super::config::{ModelConfig, ScMsaConfig};
use super::params::{BoundParams, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{knn, NeighborIndex, PointCloud};
use crate::tensor::{BatchNormStats, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norms use and report batch statistics.
    Train,
    /// Batch norms use running statistics; every point is processed independently.
    Eval,
}

/// Neighbour rows for a batch of equally sized clouds, as flat row indices
/// into the `[B·N]` point axis.
#[derive(Clone, Debug)]
pub struct BatchNeighbors {
    pub batch: usize,
    pub n: usize,
    pub k: usize,
    rows: Vec<usize>,
}

impl BatchNeighbors {
    pub fn from_indices(indices: &[NeighborIndex]) -> Result<Self> {
        let first = indices
            .first()
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        let (n, k) = (first.n(), first.k());
        let mut rows = Vec::with_capacity(indices.len() * n * k);
        for (b, nb) in indices.iter().enumerate() {
            if nb.n() != n || nb.k() != k {
                return Err(Error::shape("batch neighbors", &[n, k], &[nb.n(), nb.k()]));
            }
            rows.extend(nb.as_slice().iter().map(|&j| b * n + j));
        }
        Ok(BatchNeighbors {
            batch: indices.len(),
            n,
            k,
            rows,
        })
    }

    /// kNN of every cloud, computed once and shared by all encoders.
    pub fn build(clouds: &[PointCloud], k: usize) -> Result<Self> {
        let idx = clouds
            .iter()
            .map(|c| knn(c, k))
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(&idx)
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
}

/// Stacks equally sized clouds into a `[B, N, 3]` tensor.
pub fn points_tensor<T: Real>(clouds: &[PointCloud]) -> Result<Tensor<T>> {
    let n = clouds.first().map(PointCloud::len).unwrap_or(0);
    if clouds.is_empty() || clouds.iter().any(|c| c.len() != n) {
        return Err(Error::Argument("batch clouds must be non-empty and equally sized".into()));
    }
    let flat: Vec<f64> = clouds.iter().flat_map(|c| c.to_flat()).collect();
    Tensor::from_f64(&[clouds.len(), n, 3], &flat)
}

/// Shared state of one forward pass.
pub struct Ctx<'a, T> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams<T>,
    pub vars: &'a BoundParams,
    pub mode: Mode,
    /// Batch statistics observed by train-mode batch norms, keyed by prefix.
    pub bn_stats: Vec<(String, BatchNormStats<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams<T>, vars: &'a BoundParams, mode: Mode) -> Self {
        Ctx {
            cfg,
            params,
            vars,
            mode,
            bn_stats: Vec::new(),
        }
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars.var(name)
    }

    fn batch_norm(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let (rm, rv) = self.running(prefix)?;
        let (y, stats) = tape.batch_norm(
            x,
            gamma,
            beta,
            (rm.data(), rv.data()),
            self.mode == Mode::Train,
            self.cfg.bn_eps,
        )?;
        if let Some(s) = stats {
            self.bn_stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    /// `max_k relu(bn(center_i + proj_j))` over each neighbourhood.
    fn neighbor_max(
        &mut self,
        tape: &mut Tape<T>,
        prefix: &str,
        center: Var,
        proj: Var,
        nbr: &BatchNeighbors,
    ) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let (rm, rv) = self.running(prefix)?;
        let (y, stats) = tape.neighbor_bn_relu_max(
            center,
            proj,
            nbr.rows(),
            nbr.k,
            gamma,
            beta,
            (rm.data(), rv.data()),
            self.mode == Mode::Train,
            self.cfg.bn_eps,
        )?;
        if let Some(s) = stats {
            self.bn_stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    fn running(&self, prefix: &str) -> Result<(&'a Tensor<T>, &'a Tensor<T>)> {
        let params = self.params;
        let stat = |field: &str| {
            params
                .get(&format!("{prefix}.{field}"))
                .ok_or_else(|| Error::Argument(format!("missing {prefix}.{field}")))
        };
        Ok((stat("running_mean")?, stat("running_var")?))
    }

    fn linear(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{prefix}.W"))?;
        let b = self.var(&format!("{prefix}.b"))?;
        tape.linear(x, w, Some(b))
    }

    fn layer_norm(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let g = self.var(&format!("{prefix}.gamma"))?;
        let b = self.var(&format!("{prefix}.beta"))?;
        tape.layer_norm(x, g, b, self.cfg.ln_eps)
    }
}

/// `x [B, N, C]` → `max_k relu(bn(concat[x_i ; x_j − x_i] · W + b))`, shape `[B, N, h]`.
///
/// The linear map is split as `x_i·(W_top − W_bot) + x_j·W_bot + b`, so the
/// projection runs once per point instead of once per edge.
fn edge_mlp<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    x: Var,
    nbr: &BatchNeighbors,
) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap();
    let w = ctx.var(&format!("{prefix}.W"))?;
    let b = ctx.var(&format!("{prefix}.b"))?;
    if tape.shape(w)[0] != 2 * c {
        return Err(Error::shape(
            "positional fusion",
            tape.shape(x),
            tape.shape(w),
        ));
    }
    let w_top = tape.slice_rows(w, 0, c)?;
    let w_bot = tape.slice_rows(w, c, c)?;
    let own = tape.linear(x, w_top, Some(b))?;
    let nbr_proj = tape.linear(x, w_bot, None)?;
    let center = tape.sub(own, nbr_proj)?;
    ctx.neighbor_max(tape, &format!("{prefix}.bn"), center, nbr_proj, nbr)
}

/// Positional fusion: local geometric context `[P ; P_j − P]` and local
/// feature context `[F ; F_j − F]`, each through linear + BN + ReLU to `C′/2`
/// channels, concatenated and max-pooled over the neighbourhood.
pub fn positional_fusion<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    points: Var,
    features: Var,
    nbr: &BatchNeighbors,
) -> Result<Var> {
    let ps = tape.shape(points).to_vec();
    let fs = tape.shape(features).to_vec();
    if ps.len() != 3 || fs.len() != 3 || ps[..2] != fs[..2] || ps[..2] != [nbr.batch, nbr.n] {
        return Err(Error::shape("positional fusion", &ps, &fs));
    }
    let geo = edge_mlp(tape, ctx, &format!("{prefix}.phi"), points, nbr)?;
    let feat = edge_mlp(tape, ctx, &format!("{prefix}.theta"), features, nbr)?;
    // max over k commutes with the channel concatenation
    tape.concat(&[geo, feat])
}

/// `ΔP[i, j] = P[nbr(i, j)] − P[i]`, shape `N×k×3`.
pub fn relative_positions(cloud: &PointCloud, nbr: &NeighborIndex) -> Vec<[f64; 3]> {
    let pts = cloud.points();
    let mut out = Vec::with_capacity(nbr.n() * nbr.k());
    for i in 0..nbr.n() {
        for &j in nbr.row(i) {
            out.push([
                pts[j][0] - pts[i][0],
                pts[j][1] - pts[i][1],
                pts[j][2] - pts[i][2],
            ]);
        }
    }
    out
}

/// Shifted-channel multi-head self-attention on `x [B, N, C′]`.
///
/// Query, key and value are linear maps of `x`; head `m` attends over the
/// channel window `[m·d, m·d + w)` of each, and the concatenated head outputs
/// are mapped back to `C′` channels.
pub fn sc_msa<T: Real>(
    tape: &mut Tape<T>,
    vars: &BoundParams,
    prefix: &str,
    x: Var,
    sc: &ScMsaConfig,
    scale_logits: bool,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() < 2 || xs[xs.len() - 1] != sc.c_prime {
        return Err(Error::shape("sc_msa", &xs, &[sc.c_prime]));
    }
    if xs[xs.len() - 2] == 0 {
        return Err(Error::EmptySet("sc_msa"));
    }
    let lin = |tape: &mut Tape<T>, name: &str, input: Var| -> Result<Var> {
        let w = vars.var(&format!("{prefix}.{name}.W"))?;
        let b = vars.var(&format!("{prefix}.{name}.b"))?;
        tape.linear(input, w, Some(b))
    };
    let q = lin(tape, "q", x)?;
    let k = lin(tape, "k", x)?;
    let v = lin(tape, "v", x)?;
    let mut heads = Vec::with_capacity(sc.heads);
    for m in 0..sc.heads {
        let from = sc.window(m).start;
        let qm = tape.slice(q, from, sc.w)?;
        let km = tape.slice(k, from, sc.w)?;
        let vm = tape.slice(v, from, sc.w)?;
        let mut logits = tape.matmul_bt(qm, km)?;
        if scale_logits {
            logits = tape.scale(logits, T::from_f64_lossy(1.0 / (sc.w as f64).sqrt()))?;
        }
        let attn = tape.softmax(logits)?;
        heads.push(tape.matmul(attn, vm)?);
    }
    let joined = tape.concat(&heads)?;
    lin(tape, "o", joined)
}

/// One encoder: `G = PosFus(P, F)`, `G′ = SC-MSA(LN(G)) + G`,
/// `F′ = ReLU(Linear(LN(G′))) + G′`.
pub fn transformer_encoder<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    points: Var,
    features: Var,
    nbr: &BatchNeighbors,
) -> Result<Var> {
    let prefix = format!("enc{layer}");
    let c = ctx.cfg.channels[layer];
    let sc = ScMsaConfig::from_psi(c, ctx.cfg.psi)?;
    let g = positional_fusion(tape, ctx, &format!("{prefix}.posfus"), points, features, nbr)?;
    let n1 = ctx.layer_norm(tape, &format!("{prefix}.ln1"), g)?;
    let attn = sc_msa(tape, ctx.vars, &format!("{prefix}.attn"), n1, &sc, ctx.cfg.attn_scale)?;
    let g2 = tape.add(attn, g)?;
    let n2 = ctx.layer_norm(tape, &format!("{prefix}.ln2"), g2)?;
    let hidden = ctx.linear(tape, &format!("{prefix}.mlp"), n2)?;
    let hidden = tape.relu(hidden)?;
    tape.add(hidden, g2)
}

/// Periodic shuffle `[…, N, C]` → `[…, rN, C/r]`: output row `i·r + s`,
/// channel `c` is input row `i`, channel `s·(C/r) + c`. In row-major layout
/// this is a pure reshape.
pub fn shuffle<T: Real>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() < 2 || r == 0 || !s[s.len() - 1].is_multiple_of(r) {
        return Err(Error::shape("shuffle", &s, &[r]));
    }
    let mut out = s.clone();
    let rank = s.len();
    out[rank - 2] *= r;
    out[rank - 1] /= r;
    tape.reshape(x, &out)
}

/// Inverse of [`shuffle`].
pub fn unshuffle<T: Real>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() < 2 || r == 0 || !s[s.len() - 2].is_multiple_of(r) {
        return Err(Error::shape("unshuffle", &s, &[r]));
    }
    let mut out = s.clone();
    let rank = s.len();
    out[rank - 2] /= r;
    out[rank - 1] *= r;
    tape.reshape(x, &out)
}

/// Full network on `points [B, N, 3]`: head, `L` encoders sharing one kNN
/// graph, shuffle and a bare linear map to coordinates. Returns `[B, rN, 3]`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    points: Var,
    nbr: &BatchNeighbors,
) -> Result<Var> {
    if nbr.n < ctx.cfg.k || nbr.k != ctx.cfg.k {
        return Err(Error::Argument(format!(
            "need at least k = {} points per cloud, got {} (neighbour rows of width {})",
            ctx.cfg.k, nbr.n, nbr.k
        )));
    }
    let head = ctx.linear(tape, "head", points)?;
    let head = ctx.batch_norm(tape, "head.bn", head)?;
    let mut features = tape.relu(head)?;
    for l in 0..ctx.cfg.layers() {
        features = transformer_encoder(tape, ctx, l, points, features, nbr)?;
    }
    let dense = shuffle(tape, features, ctx.cfg.ratio)?;
    ctx.linear(tape, "tail", dense)
}
