//! Independent reference implementations for the integration tests. Every
//! routine here works on plain `f64` rows with explicit loops and shares no
//! code with the library kernels.
#![allow(dead_code)]

use std::collections::BTreeMap;

use putr::model::{ModelParams, ParamKind};
use putr::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Row = Vec<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

pub fn rand_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Row> {
    (0..n).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn flatten(rows: &[Row]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn tensor(shape: &[usize], rows: &[Row]) -> Tensor<f64> {
    Tensor::from_f64(shape, &flatten(rows)).unwrap()
}

pub fn rows_of(data: &[f64], c: usize) -> Vec<Row> {
    data.chunks(c).map(|r| r.to_vec()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `k` nearest points of every point, itself included, by full sort.
pub fn brute_knn(pts: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    pts.iter()
        .map(|p| {
            let mut order: Vec<(f64, usize)> = pts.iter().enumerate().map(|(j, q)| (dist(p, q), j)).collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            order.iter().take(k).map(|&(_, j)| j).collect()
        })
        .collect()
}

/// `x · W + b` with `W` stored row-major as `fan_in × fan_out`.
pub fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>) -> Row {
    let fan_out = w.len() / x.len();
    (0..fan_out)
        .map(|o| {
            let mut s = b.map_or(0.0, |b| b[o]);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w[i * fan_out + o];
            }
            s
        })
        .collect()
}

pub fn relu(x: &[f64]) -> Row {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn bn_eval(x: &[f64], gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Row {
    (0..x.len())
        .map(|c| gamma[c] * (x[c] - mean[c]) / (var[c] + eps).sqrt() + beta[c])
        .collect()
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Row {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(c, v)| gamma[c] * (v - mu) / (var + eps).sqrt() + beta[c])
        .collect()
}

pub fn softmax(x: &[f64]) -> Row {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Row {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Parameter lookup by name.
pub struct P(pub BTreeMap<String, Vec<f64>>);

impl P {
    pub fn of(params: &ModelParams<f64>) -> P {
        P(params.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect())
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.0.get(name).unwrap_or_else(|| panic!("no tensor {name}"))
    }
}

/// Gives every non-weight tensor random values so no term vanishes: biases
/// and shifts in `[-0.5, 0.5)`, scales and running variances in `[0.5, 1.5)`,
/// running means in `[-0.5, 0.5)`.
pub fn randomize_non_weights(params: &mut ModelParams<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let kind = params.kind(&name).unwrap();
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v = match kind {
                ParamKind::Weight => *v,
                ParamKind::NormScale | ParamKind::RunningVar => rng.random_range(0.5..1.5),
                _ => rng.random_range(-0.5..0.5),
            };
        }
    }
}

/// One edge branch: `max_j relu(bn([x_i ; x_j − x_i]·W + b))`.
pub fn edge_branch(p: &P, prefix: &str, x: &[Row], nbr: &[Vec<usize>], eps: f64) -> Vec<Row> {
    let (w, b) = (p.get(&format!("{prefix}.W")), p.get(&format!("{prefix}.b")));
    let bn = |f: &str| p.get(&format!("{prefix}.bn.{f}"));
    x.iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut best: Option<Row> = None;
            for &j in &nbr[i] {
                let mut edge = xi.clone();
                edge.extend(x[j].iter().zip(xi).map(|(a, b)| a - b));
                let h = relu(&bn_eval(
                    &affine(&edge, w, Some(b)),
                    bn("gamma"),
                    bn("beta"),
                    bn("running_mean"),
                    bn("running_var"),
                    eps,
                ));
                best = Some(match best {
                    None => h,
                    Some(m) => m.iter().zip(&h).map(|(a, b)| a.max(*b)).collect(),
                });
            }
            best.unwrap()
        })
        .collect()
}

/// Positional fusion of one cloud in eval mode.
pub fn posfus(p: &P, prefix: &str, pts: &[[f64; 3]], feats: &[Row], nbr: &[Vec<usize>], eps: f64) -> Vec<Row> {
    let prow: Vec<Row> = pts.iter().map(|q| q.to_vec()).collect();
    let geo = edge_branch(p, &format!("{prefix}.phi"), &prow, nbr, eps);
    let feat = edge_branch(p, &format!("{prefix}.theta"), feats, nbr, eps);
    geo.into_iter()
        .zip(feat)
        .map(|(mut g, f)| {
            g.extend(f);
            g
        })
        .collect()
}

/// Windowed multi-head attention: head `m` uses channels
/// `[m·shift, m·shift + width)` of the query, key and value projections.
#[allow(clippy::too_many_arguments)]
pub fn windowed_attention(p: &P, prefix: &str, x: &[Row], width: usize, shift: usize, heads: usize, scale: bool) -> Vec<Row> {
    let proj = |name: &str| -> Vec<Row> {
        let (w, b) = (p.get(&format!("{prefix}.{name}.W")), p.get(&format!("{prefix}.{name}.b")));
        x.iter().map(|r| affine(r, w, Some(b))).collect()
    };
    let (q, k, v) = (proj("q"), proj("k"), proj("v"));
    let factor = if scale { 1.0 / (width as f64).sqrt() } else { 1.0 };
    let mut joined: Vec<Row> = vec![Vec::new(); x.len()];
    for m in 0..heads {
        let lo = m * shift;
        for (i, out) in joined.iter_mut().enumerate() {
            let logits: Row = (0..x.len())
                .map(|j| (lo..lo + width).map(|c| q[i][c] * k[j][c]).sum::<f64>() * factor)
                .collect();
            let a = softmax(&logits);
            for c in lo..lo + width {
                out.push((0..x.len()).map(|j| a[j] * v[j][c]).sum());
            }
        }
    }
    let (wo, bo) = (p.get(&format!("{prefix}.o.W")), p.get(&format!("{prefix}.o.b")));
    joined.iter().map(|r| affine(r, wo, Some(bo))).collect()
}

/// A full eval-mode encoder on one cloud.
pub fn encoder(p: &P, layer: usize, pts: &[[f64; 3]], feats: &[Row], nbr: &[Vec<usize>], psi: usize, bn_eps: f64, ln_eps: f64) -> Vec<Row> {
    let pre = format!("enc{layer}");
    let g = posfus(p, &format!("{pre}.posfus"), pts, feats, nbr, bn_eps);
    let c = g[0].len();
    let width = c / psi;
    let ln = |name: &str, x: &[Row]| -> Vec<Row> {
        let (ga, be) = (p.get(&format!("{pre}.{name}.gamma")), p.get(&format!("{pre}.{name}.beta")));
        x.iter().map(|r| layer_norm(r, ga, be, ln_eps)).collect()
    };
    let n1 = ln("ln1", &g);
    let attn = windowed_attention(p, &format!("{pre}.attn"), &n1, width, width / 2, 2 * psi - 1, false);
    let g2: Vec<Row> = attn.iter().zip(&g).map(|(a, b)| add(a, b)).collect();
    let n2 = ln("ln2", &g2);
    let (w, b) = (p.get(&format!("{pre}.mlp.W")), p.get(&format!("{pre}.mlp.b")));
    n2.iter()
        .zip(&g2)
        .map(|(r, res)| add(&relu(&affine(r, w, Some(b))), res))
        .collect()
}
