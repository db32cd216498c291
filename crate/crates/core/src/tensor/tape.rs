use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Matmul {
        a: Var,
        b: Var,
        transpose_b: bool,
        batch: usize,
        n: usize,
        m: usize,
        p: usize,
    },
    Softmax {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        x: Var,
        y: Var,
        y_sign: T,
    },
    Mul {
        x: Var,
        y: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        from: usize,
        width: usize,
    },
    SliceRows {
        x: Var,
        from: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum {
        x: Var,
        scale: T,
    },
    Reshape {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    NeighborMax {
        center: Var,
        proj: Var,
        gamma: Var,
        beta: Var,
        rows: Vec<usize>,
        k: usize,
        arg: Vec<u32>,
        /// Per-row sums of the gathered projections.
        nsum: Vec<T>,
        mean: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    Chamfer {
        s: Var,
        t: Var,
        batch: usize,
        ns: usize,
        nt: usize,
        s_to_t: Vec<usize>,
        t_to_s: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Eagerly evaluated reverse-mode tape.
///
/// Every op computes its value immediately and records what backward needs.
/// Backward visits nodes in reverse insertion order, which is a valid
/// topological order because inputs always precede their consumers.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Calls `f(out_offset, y_offset, run, y_step)` for each contiguous run of the
/// innermost axis when `y` is broadcast (numpy rules, right-aligned) to `out`.
fn for_each_broadcast_run(
    out: &[usize],
    y: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let rank = out.len();
    let pad = rank - y.len();
    let ydim = |a: usize| if a < pad { 1 } else { y[a - pad] };
    let mut ystride = vec![0usize; rank];
    let mut acc = 1;
    for a in (0..rank).rev() {
        ystride[a] = if ydim(a) == 1 { 0 } else { acc };
        acc *= ydim(a);
    }
    if rank == 0 {
        f(0, 0, 1, 0);
        return;
    }
    let inner = out[rank - 1];
    let y_step = ystride[rank - 1].min(1);
    let outer: usize = out[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank - 1];
    let mut y_off = 0;
    for o in 0..outer {
        f(o * inner, y_off, inner, y_step);
        for a in (0..rank - 1).rev() {
            counter[a] += 1;
            y_off += ystride[a];
            if counter[a] < out[a] {
                break;
            }
            y_off -= ystride[a] * out[a];
            counter[a] = 0;
        }
    }
}

fn broadcastable(out: &[usize], y: &[usize]) -> bool {
    y.len() <= out.len()
        && y
            .iter()
            .rev()
            .zip(out.iter().rev())
            .all(|(&a, &b)| a == b || a == 1)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    // ---------------------------------------------------------------- ops

    /// `y[..., j] = Σ_i x[..., i]·w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear bias", self.shape(b), &[cout]));
            }
        }
        let rows = self.value(x).numel() / cin.max(1);
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(
            rows,
            cin,
            cout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", Tensor::new(shape, out)?, Op::Linear { x, w, b }, &inputs)
    }

    /// Batched `a · b` over matching leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` over matching leading dims.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let bad = || Error::shape("matmul", &as_, &bs);
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(bad());
        }
        let r = as_.len();
        let (n, m) = (as_[r - 2], as_[r - 1]);
        let (bm, p) = if transpose_b {
            (bs[r - 1], bs[r - 2])
        } else {
            (bs[r - 2], bs[r - 1])
        };
        if bm != m {
            return Err(bad());
        }
        let batch: usize = as_[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * n * p];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    n,
                    m,
                    p,
                    &ad[i * n * m..(i + 1) * n * m],
                    false,
                    &bd[i * m * p..(i + 1) * m * p],
                    transpose_b,
                    &mut out[i * n * p..(i + 1) * n * p],
                    false,
                );
            }
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([n, p]);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::Matmul {
                a,
                b,
                transpose_b,
                batch,
                n,
                m,
                p,
            },
            &[a, b],
        )
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = T::one() / total;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let shape = xv.shape().to_vec();
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = xv.shape().to_vec();
        self.push("relu", Tensor::new(shape, out)?, Op::Relu { x }, &[x])
    }

    /// `x + y` with `y` broadcast to `x`'s shape (right-aligned, size-1 axes stretch).
    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.add_signed(x, y, T::one(), "add")
    }

    /// `x − y` with the same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        self.add_signed(x, y, -T::one(), "sub")
    }

    fn add_signed(&mut self, x: Var, y: Var, sign: T, name: &'static str) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        if !broadcastable(&xs, &ys) {
            return Err(Error::shape(name, &xs, &ys));
        }
        let mut out = self.value(x).data().to_vec();
        let yd = self.value(y).data();
        for_each_broadcast_run(&xs, &ys, |o, yo, len, step| {
            let dst = &mut out[o..o + len];
            if step == 1 {
                for (d, &v) in dst.iter_mut().zip(&yd[yo..yo + len]) {
                    *d += sign * v;
                }
            } else {
                let v = sign * yd[yo];
                dst.iter_mut().for_each(|d| *d += v);
            }
        });
        self.push(name, Tensor::new(xs, out)?, Op::Add { x, y, y_sign: sign }, &[x, y])
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return Err(Error::shape("mul", self.shape(x), self.shape(y)));
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul { x, y }, &[x, y])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { x, factor }, &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                widths,
            },
            xs,
        )
    }

    /// Channels `[from, from + width)` of the last axis.
    pub fn slice(&mut self, x: Var, from: usize, width: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::shape("slice", &xs, &[from, width]))?;
        if from + width > c || width == 0 {
            return Err(Error::shape("slice", &xs, &[from, width]));
        }
        let out = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[from..from + width].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = width;
        self.push("slice", Tensor::new(shape, out)?, Op::Slice { x, from, width }, &[x])
    }

    /// Rows `[from, from + count)` along the first axis.
    pub fn slice_rows(&mut self, x: Var, from: usize, count: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || from + count > xs[0] || count == 0 {
            return Err(Error::shape("slice_rows", &xs, &[from, count]));
        }
        let row: usize = xs[1..].iter().product();
        let out = self.value(x).data()[from * row..(from + count) * row].to_vec();
        let mut shape = xs;
        shape[0] = count;
        self.push("slice_rows", Tensor::new(shape, out)?, Op::SliceRows { x, from }, &[x])
    }

    /// Gathers last-axis rows of `x` (viewed as `R×C`) by flat row index.
    /// The result has shape `out_prefix ++ [C]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize], out_prefix: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.numel() / c.max(1);
        if out_prefix.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather_rows", out_prefix, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let src = xv.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let mut shape = out_prefix.to_vec();
        shape.push(c);
        self.push(
            "gather_rows",
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Max over one axis; gradient routes to the first maximal element.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(Error::shape("max_over_axis", &xs, &[axis]));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            let base = o * len * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            let arg = &mut argmax[o * inner..(o + 1) * inner];
            dst.copy_from_slice(&src[base..base + inner]);
            for (i, a) in arg.iter_mut().enumerate() {
                *a = base + i;
            }
            for j in 1..len {
                let off = base + j * inner;
                for i in 0..inner {
                    let v = src[off + i];
                    if v > dst[i] {
                        dst[i] = v;
                        arg[i] = off + i;
                    }
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        self.push("max_over_axis", Tensor::new(shape, out)?, Op::Max { x, argmax }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(
            "sum",
            Tensor::scalar(total),
            Op::Sum {
                x,
                scale: T::one(),
            },
            &[x],
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptySet("mean"));
        }
        let scale = T::one() / T::from_usize(n).unwrap();
        let total: T = self.value(x).data().iter().copied().sum();
        self.push("mean", Tensor::scalar(total * scale), Op::Sum { x, scale }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Per-position normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let rows = xd.len() / c;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let h = (row[i] - mean) * rs;
                xhat[r * c + i] = h;
                out[r * c + i] = h * g[i] + bta[i];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch normalization over every axis but the last.
    ///
    /// In train mode the batch statistics are used and returned so the caller
    /// can update its running averages; in eval mode `running` is applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        train: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(Error::shape("batch_norm running stats", &[c], &[running.0.len()]));
        }
        let eps = T::from_f64_lossy(eps);
        let xd = self.value(x).data();
        let rows = xd.len() / c;
        let (mean, var) = if train {
            if rows < 2 {
                return Err(Error::DegenerateVariance {
                    op: "batch_norm",
                    positions: rows,
                });
            }
            let inv = T::one() / T::from_usize(rows).unwrap();
            let mut mean = vec![T::zero(); c];
            for row in xd.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv);
            let mut var = vec![T::zero(); c];
            for row in xd.chunks_exact(c) {
                for i in 0..c {
                    let d = row[i] - mean[i];
                    var[i] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv);
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            for i in 0..c {
                let h = (xd[r * c + i] - mean[i]) * rstd[i];
                xhat[r * c + i] = h;
                out[r * c + i] = h * g[i] + bta[i];
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            "batch_norm",
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, train.then_some(BatchNormStats { mean, var })))
    }

    /// Fused neighbourhood block: `pre[i, j] = center[i] + proj[rows[i·k + j]]`,
    /// batch-normalised per channel over all `(i, j)` edges, ReLU, then max
    /// over `j`. Output has `center`'s shape.
    ///
    /// Same values and gradients as `gather_rows → add → batch_norm → relu →
    /// max_over_axis`, without storing the edge tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn neighbor_bn_relu_max(
        &mut self,
        center: Var,
        proj: Var,
        rows: &[usize],
        k: usize,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        train: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let h = self.value(center).last_dim();
        let n_center = self.value(center).numel() / h.max(1);
        let n_proj = self.value(proj).numel() / h.max(1);
        if self.value(proj).last_dim() != h || k == 0 || rows.len() != n_center * k {
            return Err(Error::shape("neighbor_bn_relu_max", self.shape(center), self.shape(proj)));
        }
        if self.shape(gamma) != [h] || self.shape(beta) != [h] || running.0.len() != h || running.1.len() != h {
            return Err(Error::shape("neighbor_bn_relu_max", self.shape(center), self.shape(gamma)));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_proj) {
            return Err(Error::Index {
                op: "neighbor_bn_relu_max",
                index: bad,
                len: n_proj,
            });
        }
        let cen = self.value(center).data();
        let prj = self.value(proj).data();
        let edges = rows.len();
        if train && edges < 2 {
            return Err(Error::DegenerateVariance {
                op: "neighbor_bn_relu_max",
                positions: edges,
            });
        }
        // Per row: sum, max and min of the gathered projections.
        let mut nsum = vec![T::zero(); n_center * h];
        let mut hi = vec![T::neg_infinity(); n_center * h];
        let mut lo = vec![T::infinity(); n_center * h];
        let mut hi_arg = vec![0u32; n_center * h];
        let mut lo_arg = vec![0u32; n_center * h];
        for i in 0..n_center {
            let range = i * h..(i + 1) * h;
            let (s_row, hi_row, lo_row) = (&mut nsum[range.clone()], &mut hi[range.clone()], &mut lo[range.clone()]);
            let (ha_row, la_row) = (&mut hi_arg[range.clone()], &mut lo_arg[range]);
            for j in 0..k {
                let p_row = &prj[rows[i * k + j] * h..][..h];
                let ju = j as u32;
                for (s, &p) in s_row.iter_mut().zip(p_row) {
                    *s += p;
                }
                for ((m, a), &p) in hi_row.iter_mut().zip(ha_row.iter_mut()).zip(p_row) {
                    let up = p > *m;
                    *m = if up { p } else { *m };
                    *a = if up { ju } else { *a };
                }
                for ((m, a), &p) in lo_row.iter_mut().zip(la_row.iter_mut()).zip(p_row) {
                    let down = p < *m;
                    *m = if down { p } else { *m };
                    *a = if down { ju } else { *a };
                }
            }
        }
        let (mean, var) = if train {
            let mut indeg = vec![0usize; n_proj];
            for &r in rows {
                indeg[r] += 1;
            }
            let kf = k as f64;
            let mut total = vec![0.0f64; h];
            for i in 0..n_center {
                for c in 0..h {
                    total[c] += kf * cen[i * h + c].to_f64_lossy() + nsum[i * h + c].to_f64_lossy();
                }
            }
            let inv = 1.0 / edges as f64;
            let mean: Vec<f64> = total.iter().map(|t| t * inv).collect();
            // Σ_e (u_i + p_r)² = k·Σu² + 2·Σ u·S + Σ_r indeg_r·p_r², with u = center − mean
            let mut sq = vec![0.0f64; h];
            for i in 0..n_center {
                for c in 0..h {
                    let u = cen[i * h + c].to_f64_lossy() - mean[c];
                    sq[c] += kf * u * u + 2.0 * u * nsum[i * h + c].to_f64_lossy();
                }
            }
            for (r, &d) in indeg.iter().enumerate() {
                if d > 0 {
                    for c in 0..h {
                        let p = prj[r * h + c].to_f64_lossy();
                        sq[c] += d as f64 * p * p;
                    }
                }
            }
            let var = sq.iter().map(|v| T::from_f64_lossy((v * inv).max(0.0))).collect();
            (mean.into_iter().map(T::from_f64_lossy).collect(), var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let eps = T::from_f64_lossy(eps);
        let rstd: Vec<T> = var.iter().map(|&v: &T| T::one() / (v + eps).sqrt()).collect();
        let gam = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut out = vec![T::zero(); n_center * h];
        let mut arg = vec![0u32; n_center * h];
        for i in 0..n_center {
            for c in 0..h {
                let at = i * h + c;
                let scale = gam[c] * rstd[c];
                // y = scale·(pre − mean) + β is monotone in the projection
                let (p, a) = if scale > T::zero() {
                    (hi[at], hi_arg[at])
                } else if scale < T::zero() {
                    (lo[at], lo_arg[at])
                } else {
                    (prj[rows[i * k] * h + c], 0)
                };
                out[at] = (scale * (cen[at] + p - mean[c]) + bta[c]).max(T::zero());
                arg[at] = a;
            }
        }
        let shape = self.shape(center).to_vec();
        let v = self.push(
            "neighbor_bn_relu_max",
            Tensor::new(shape, out)?,
            Op::NeighborMax {
                center,
                proj,
                gamma,
                beta,
                rows: rows.to_vec(),
                k,
                arg,
                nsum,
                mean: mean.clone(),
                rstd,
                train,
            },
            &[center, proj, gamma, beta],
        )?;
        Ok((v, train.then_some(BatchNormStats { mean, var })))
    }

    /// Symmetric squared Chamfer loss between `s: [B, M, 3]` and `t: [B, K, 3]`
    /// (rank-2 inputs are treated as `B = 1`), averaged over the batch.
    ///
    /// Nearest-neighbour pairings are fixed at forward time; ties go to the
    /// lowest index.
    pub fn chamfer_loss(&mut self, s: Var, t: Var) -> Result<Var> {
        let ss = self.shape(s).to_vec();
        let ts = self.shape(t).to_vec();
        let bad = || Error::shape("chamfer_loss", &ss, &ts);
        let (batch, ns, nt) = match (ss.as_slice(), ts.as_slice()) {
            ([m, 3], [k, 3]) => (1, *m, *k),
            ([b, m, 3], [b2, k, 3]) if b == b2 => (*b, *m, *k),
            _ => return Err(bad()),
        };
        if batch == 0 || ns == 0 || nt == 0 {
            return Err(Error::EmptySet("chamfer_loss"));
        }
        let sd = self.value(s).data();
        let td = self.value(t).data();
        let mut s_to_t = vec![0usize; batch * ns];
        let mut t_to_s = vec![0usize; batch * nt];
        let mut s_best = vec![T::infinity(); batch * ns];
        let mut t_best = vec![T::infinity(); batch * nt];
        for b in 0..batch {
            let sb = &sd[b * ns * 3..(b + 1) * ns * 3];
            let tb = &td[b * nt * 3..(b + 1) * nt * 3];
            for i in 0..ns {
                let p = &sb[i * 3..i * 3 + 3];
                for j in 0..nt {
                    let q = &tb[j * 3..j * 3 + 3];
                    let dx = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let dz = p[2] - q[2];
                    let d = dx * dx + dy * dy + dz * dz;
                    if d < s_best[b * ns + i] {
                        s_best[b * ns + i] = d;
                        s_to_t[b * ns + i] = j;
                    }
                    if d < t_best[b * nt + j] {
                        t_best[b * nt + j] = d;
                        t_to_s[b * nt + j] = i;
                    }
                }
            }
        }
        let inv_b = 1.0 / batch as f64;
        let mut total = 0.0f64;
        for b in 0..batch {
            let fs: f64 = s_best[b * ns..(b + 1) * ns].iter().map(|v| v.to_f64_lossy()).sum();
            let ft: f64 = t_best[b * nt..(b + 1) * nt].iter().map(|v| v.to_f64_lossy()).sum();
            total += fs / ns as f64 + ft / nt as f64;
        }
        self.push(
            "chamfer_loss",
            Tensor::scalar(T::from_f64_lossy(total * inv_b)),
            Op::Chamfer {
                s,
                t,
                batch,
                ns,
                nt,
                s_to_t,
                t_to_s,
            },
            &[s, t],
        )
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`. Gradients from earlier calls are
    /// cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = val(*w).shape();
                let (cin, cout) = (ws[0], ws[1]);
                let rows = g.len() / cout;
                if rg(*x) {
                    let n = val(*x).numel();
                    let dx = grad_slot(grads, *x, n);
                    T::gemm(rows, cout, cin, g, false, val(*w).data(), true, dx, true);
                }
                if rg(*w) {
                    let dw = grad_slot(grads, *w, cin * cout);
                    T::gemm(cin, rows, cout, val(*x).data(), true, g, false, dw, true);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let db = grad_slot(grads, *b, cout);
                        for row in g.chunks_exact(cout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Matmul {
                a,
                b,
                transpose_b,
                batch,
                n,
                m,
                p,
            } => {
                let (batch, n, m, p) = (*batch, *n, *m, *p);
                if rg(*a) {
                    let bd = val(*b).data();
                    let da = grad_slot(grads, *a, batch * n * m);
                    for i in 0..batch {
                        let gi = &g[i * n * p..(i + 1) * n * p];
                        let bi = &bd[i * m * p..(i + 1) * m * p];
                        let dai = &mut da[i * n * m..(i + 1) * n * m];
                        // c = a·b → da = g·bᵀ ; c = a·bᵀ → da = g·b
                        T::gemm(n, p, m, gi, false, bi, !*transpose_b, dai, true);
                    }
                }
                if rg(*b) {
                    let ad = val(*a).data();
                    let db = grad_slot(grads, *b, batch * m * p);
                    for i in 0..batch {
                        let gi = &g[i * n * p..(i + 1) * n * p];
                        let ai = &ad[i * n * m..(i + 1) * n * m];
                        let dbi = &mut db[i * m * p..(i + 1) * m * p];
                        if *transpose_b {
                            T::gemm(p, n, m, gi, true, ai, false, dbi, true);
                        } else {
                            T::gemm(m, n, p, ai, true, gi, false, dbi, true);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if rg(*x) {
                    let y = nodes[id].value.data();
                    let c = nodes[id].value.last_dim();
                    let dx = grad_slot(grads, *x, y.len());
                    for ((yr, gr), dr) in y
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..c {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if rg(*x) {
                    let xd = val(*x).data();
                    let dx = grad_slot(grads, *x, xd.len());
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xd).zip(g) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add { x, y, y_sign } => {
                if rg(*x) {
                    let dx = grad_slot(grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if rg(*y) {
                    let ys = val(*y).shape().to_vec();
                    let ny = val(*y).numel();
                    let out_shape = nodes[id].value.shape().to_vec();
                    let sign = *y_sign;
                    let dy = grad_slot(grads, *y, ny);
                    for_each_broadcast_run(&out_shape, &ys, |o, yo, len, step| {
                        let src = &g[o..o + len];
                        if step == 1 {
                            for (d, &gv) in dy[yo..yo + len].iter_mut().zip(src) {
                                *d += sign * gv;
                            }
                        } else {
                            let s: T = src.iter().copied().sum();
                            dy[yo] += sign * s;
                        }
                    });
                }
            }
            Op::Mul { x, y } => {
                if rg(*x) {
                    let yd = val(*y).data();
                    let dx = grad_slot(grads, *x, g.len());
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(yd) {
                        *d += gv * yv;
                    }
                }
                if rg(*y) {
                    let xd = val(*x).data();
                    let dy = grad_slot(grads, *y, g.len());
                    for ((d, &gv), &xv) in dy.iter_mut().zip(g).zip(xd) {
                        *d += gv * xv;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if rg(*x) {
                    let dx = grad_slot(grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *factor;
                    }
                }
            }
            Op::Concat { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    if rg(v) {
                        let dv = grad_slot(grads, v, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            for (d, &gv) in dv[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, from, width } => {
                if rg(*x) {
                    let c = val(*x).last_dim();
                    let n = val(*x).numel();
                    let dx = grad_slot(grads, *x, n);
                    for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(*width)) {
                        for (d, &gv) in dr[*from..*from + *width].iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SliceRows { x, from } => {
                if rg(*x) {
                    let xs = val(*x).shape();
                    let row: usize = xs[1..].iter().product();
                    let n = val(*x).numel();
                    let dx = grad_slot(grads, *x, n);
                    for (d, &gv) in dx[from * row..from * row + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Gather { x, idx } => {
                if rg(*x) {
                    let c = val(*x).last_dim();
                    let n = val(*x).numel();
                    let dx = grad_slot(grads, *x, n);
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, &gv) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Max { x, argmax } => {
                if rg(*x) {
                    let n = val(*x).numel();
                    let dx = grad_slot(grads, *x, n);
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dx[a] += gv;
                    }
                }
            }
            Op::Sum { x, scale } => {
                if rg(*x) {
                    let n = val(*x).numel();
                    let v = g[0] * *scale;
                    let dx = grad_slot(grads, *x, n);
                    dx.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::Reshape { x } => {
                if rg(*x) {
                    let dx = grad_slot(grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).numel();
                let gam = val(*gamma).data();
                if rg(*gamma) {
                    let dg = grad_slot(grads, *gamma, c);
                    for (hr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for i in 0..c {
                            dg[i] += gr[i] * hr[i];
                        }
                    }
                }
                if rg(*beta) {
                    let db = grad_slot(grads, *beta, c);
                    for gr in g.chunks_exact(c) {
                        for (d, &gv) in db.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
                if rg(*x) {
                    let inv_c = T::one() / T::from_usize(c).unwrap();
                    let dx = grad_slot(grads, *x, g.len());
                    let mut dh = vec![T::zero(); c];
                    for (r, ((hr, gr), dr)) in xhat
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for i in 0..c {
                            dh[i] = gr[i] * gam[i];
                            mean_dh += dh[i];
                            mean_dhh += dh[i] * hr[i];
                        }
                        mean_dh *= inv_c;
                        mean_dhh *= inv_c;
                        for i in 0..c {
                            dr[i] += rstd[r] * (dh[i] - mean_dh - hr[i] * mean_dhh);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let c = val(*gamma).numel();
                let gam = val(*gamma).data();
                let rows = g.len() / c;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gh = vec![T::zero(); c];
                for (hr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for i in 0..c {
                        sum_g[i] += gr[i];
                        sum_gh[i] += gr[i] * hr[i];
                    }
                }
                if rg(*gamma) {
                    let dg = grad_slot(grads, *gamma, c);
                    for (d, &v) in dg.iter_mut().zip(&sum_gh) {
                        *d += v;
                    }
                }
                if rg(*beta) {
                    let db = grad_slot(grads, *beta, c);
                    for (d, &v) in db.iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                }
                if rg(*x) {
                    let dx = grad_slot(grads, *x, g.len());
                    if *train {
                        let inv = T::one() / T::from_usize(rows).unwrap();
                        for ((hr, gr), dr) in xhat
                            .chunks_exact(c)
                            .zip(g.chunks_exact(c))
                            .zip(dx.chunks_exact_mut(c))
                        {
                            for i in 0..c {
                                let k = gam[i] * rstd[i];
                                dr[i] += k * (gr[i] - sum_g[i] * inv - hr[i] * sum_gh[i] * inv);
                            }
                        }
                    } else {
                        for (gr, dr) in g.chunks_exact(c).zip(dx.chunks_exact_mut(c)) {
                            for i in 0..c {
                                dr[i] += gr[i] * gam[i] * rstd[i];
                            }
                        }
                    }
                }
            }
            Op::NeighborMax {
                center,
                proj,
                gamma,
                beta,
                rows,
                k,
                arg,
                nsum,
                mean,
                rstd,
                train,
            } => {
                let k = *k;
                let h = mean.len();
                let n_center = g.len() / h;
                let out = nodes[id].value.data();
                let cen = val(*center).data();
                let prj = val(*proj).data();
                let gam = val(*gamma).data();
                // gradient at the selected edge, zero where the ReLU is off
                let gy: Vec<T> = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                let selected = |i: usize, c: usize| rows[i * k + arg[i * h + c] as usize];
                let mut sum_g = vec![T::zero(); h];
                let mut sum_gh = vec![T::zero(); h];
                for i in 0..n_center {
                    for c in 0..h {
                        let gv = gy[i * h + c];
                        if gv != T::zero() {
                            let xh = (cen[i * h + c] + prj[selected(i, c) * h + c] - mean[c]) * rstd[c];
                            sum_g[c] += gv;
                            sum_gh[c] += gv * xh;
                        }
                    }
                }
                if rg(*gamma) {
                    let dg = grad_slot(grads, *gamma, h);
                    for (d, &v) in dg.iter_mut().zip(&sum_gh) {
                        *d += v;
                    }
                }
                if rg(*beta) {
                    let db = grad_slot(grads, *beta, h);
                    for (d, &v) in db.iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                }
                let (need_c, need_p) = (rg(*center), rg(*proj));
                if !need_c && !need_p {
                    return;
                }
                let a: Vec<T> = (0..h).map(|c| gam[c] * rstd[c]).collect();
                let mut dcen = vec![T::zero(); cen.len()];
                let mut dprj = vec![T::zero(); prj.len()];
                for i in 0..n_center {
                    for c in 0..h {
                        let d = a[c] * gy[i * h + c];
                        dcen[i * h + c] += d;
                        dprj[selected(i, c) * h + c] += d;
                    }
                }
                if *train {
                    // Batch statistics spread −a·(mg + xhat·mgx) over every edge, with
                    // xhat = (u_i + p_r)·rstd and u = center − mean.
                    let inv = T::one() / T::from_usize(rows.len()).unwrap();
                    let kt = T::from_usize(k).unwrap();
                    let mg: Vec<T> = sum_g.iter().map(|&v| v * inv).collect();
                    let mgx: Vec<T> = (0..h).map(|c| sum_gh[c] * inv * rstd[c]).collect();
                    let mut indeg = vec![T::zero(); prj.len() / h.max(1)];
                    let mut usum = vec![T::zero(); prj.len()];
                    for i in 0..n_center {
                        let u_row: Vec<T> = (0..h).map(|c| cen[i * h + c] - mean[c]).collect();
                        for c in 0..h {
                            dcen[i * h + c] -= a[c] * (kt * mg[c] + mgx[c] * (kt * u_row[c] + nsum[i * h + c]));
                        }
                        for &r in &rows[i * k..(i + 1) * k] {
                            indeg[r] += T::one();
                            for (acc, &u) in usum[r * h..(r + 1) * h].iter_mut().zip(&u_row) {
                                *acc += u;
                            }
                        }
                    }
                    for (r, &d) in indeg.iter().enumerate() {
                        if d == T::zero() {
                            continue;
                        }
                        for c in 0..h {
                            let at = r * h + c;
                            dprj[at] -= a[c] * (d * mg[c] + mgx[c] * (usum[at] + d * prj[at]));
                        }
                    }
                }
                if need_c {
                    for (d, v) in grad_slot(grads, *center, cen.len()).iter_mut().zip(dcen) {
                        *d += v;
                    }
                }
                if need_p {
                    for (d, v) in grad_slot(grads, *proj, prj.len()).iter_mut().zip(dprj) {
                        *d += v;
                    }
                }
            }
            Op::Chamfer {
                s,
                t,
                batch,
                ns,
                nt,
                s_to_t,
                t_to_s,
            } => {
                let (batch, ns, nt) = (*batch, *ns, *nt);
                let sd = val(*s).data();
                let td = val(*t).data();
                let two = T::from_f64_lossy(2.0) * g[0] / T::from_usize(batch).unwrap();
                let ws = two / T::from_usize(ns).unwrap();
                let wt = two / T::from_usize(nt).unwrap();
                // diff(b, i, j) = s_bi - t_bj
                let pair_terms = |f: &mut dyn FnMut(usize, usize, [T; 3], T)| {
                    for b in 0..batch {
                        for i in 0..ns {
                            let j = s_to_t[b * ns + i];
                            let si = (b * ns + i) * 3;
                            let tj = (b * nt + j) * 3;
                            let d = [sd[si] - td[tj], sd[si + 1] - td[tj + 1], sd[si + 2] - td[tj + 2]];
                            f(si, tj, d, ws);
                        }
                        for j in 0..nt {
                            let i = t_to_s[b * nt + j];
                            let si = (b * ns + i) * 3;
                            let tj = (b * nt + j) * 3;
                            let d = [sd[si] - td[tj], sd[si + 1] - td[tj + 1], sd[si + 2] - td[tj + 2]];
                            f(si, tj, d, wt);
                        }
                    }
                };
                if rg(*s) {
                    let n = val(*s).numel();
                    let ds = grad_slot(grads, *s, n);
                    pair_terms(&mut |si, _, d, w| {
                        for a in 0..3 {
                            ds[si + a] += w * d[a];
                        }
                    });
                }
                if rg(*t) {
                    let n = val(*t).numel();
                    let dt = grad_slot(grads, *t, n);
                    pair_terms(&mut |_, tj, d, w| {
                        for a in 0..3 {
                            dt[tj + a] -= w * d[a];
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(t64(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, eye, Some(zb)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let zw = tape.constant(t64(&[2, 2], &[0.0; 4]));
        let b = tape.constant(t64(&[2], &[3.0, 4.0]));
        let y = tape.linear(x, zw, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 5]));
        let err = tape.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[4, 3]") && err.contains("[2, 5]"), "{err}");
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t64(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);

        let bad = tape.constant(t64(&[3, 1], &[0.0; 3]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[4], &[0.0; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let a = tape.constant(t64(&[3], &[0.3, -1.2, 2.5]));
        let b = tape.constant(t64(&[3], &[100.3, 98.8, 102.5]));
        let ya = tape.softmax(a).unwrap();
        let yb = tape.softmax(b).unwrap();
        for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_then_max_with_self_index_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(x, &[0, 1, 2], &[3, 1]).unwrap();
        let m = tape.max_over_axis(g, 1).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn gather_out_of_range_is_index_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 2], &[0.0; 4]));
        let err = tape.gather_rows(x, &[0, 2], &[2]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 2, len: 2, .. }));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.37).collect();
        let x = tape.constant(t64(&[3, 4], &data));
        let a = tape.slice(x, 0, 1).unwrap();
        let b = tape.slice(x, 1, 3).unwrap();
        let y = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn max_gradient_goes_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[1, 3, 2], &[1.0, 5.0, 3.0, 5.0, 3.0, 0.0]));
        let m = tape.max_over_axis(x, 1).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_over_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[2, 3, 2], &[0.0; 12]));
        let y = tape.param(t64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.add(x, y).unwrap();
        assert_eq!(
            tape.value(z).data(),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
        );
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[3.0; 4]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 4], &[3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_eval_identity_and_train_error() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let x = tape.constant(t64(&[3, 2], &data));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape
            .batch_norm(x, g, b, (&[0.0, 0.0], &[1.0, 1.0]), false, 0.0)
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(tape.value(y).data(), &data[..]);

        let one = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let err = tape
            .batch_norm(one, g, b, (&[0.0, 0.0], &[1.0, 1.0]), true, 1e-5)
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateVariance { positions: 1, .. }));
    }

    #[test]
    fn chamfer_single_pair() {
        let mut tape = Tape::new();
        let s = tape.constant(t64(&[1, 3], &[0.0, 0.0, 0.0]));
        let t = tape.constant(t64(&[1, 3], &[1.0, 0.0, 0.0]));
        let l = tape.chamfer_loss(s, t).unwrap();
        assert_eq!(tape.value(l).data(), &[2.0]);
        let l = tape.chamfer_loss(s, s).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1], &[f64::MAX]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn leaf_accumulates_from_all_consumers() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 7.0]);
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn fused_neighbor_block_matches_composition() {
        let (n, k, h) = (6, 3, 4);
        let mut seed = 9;
        let mut rnd = |len: usize| (0..len).map(|_| lcg(&mut seed)).collect::<Vec<_>>();
        let cen = rnd(n * h);
        let prj = rnd(n * h);
        let gam = rnd(h);
        let bet = rnd(h);
        let weights = rnd(n * h);
        let rm = rnd(h);
        let rv: Vec<f64> = rnd(h).iter().map(|v| v.abs() + 0.5).collect();
        let rows: Vec<usize> = (0..n * k).map(|e| (e * 7 + e / k) % n).collect();
        for train in [true, false] {
            let mut results = Vec::new();
            for fused in [true, false] {
                let mut tape = Tape::new();
                let c = tape.param(t64(&[1, n, h], &cen));
                let p = tape.param(t64(&[1, n, h], &prj));
                let g = tape.param(t64(&[h], &gam));
                let b = tape.param(t64(&[h], &bet));
                let (y, stats) = if fused {
                    tape.neighbor_bn_relu_max(c, p, &rows, k, g, b, (&rm, &rv), train, 1e-5).unwrap()
                } else {
                    let gathered = tape.gather_rows(p, &rows, &[1, n, k]).unwrap();
                    let c4 = tape.reshape(c, &[1, n, 1, h]).unwrap();
                    let pre = tape.add(gathered, c4).unwrap();
                    let (bn, stats) = tape.batch_norm(pre, g, b, (&rm, &rv), train, 1e-5).unwrap();
                    let act = tape.relu(bn).unwrap();
                    (tape.max_over_axis(act, 2).unwrap(), stats)
                };
                let w = tape.constant(t64(&[1, n, h], &weights));
                let prod = tape.mul(y, w).unwrap();
                let loss = tape.sum(prod).unwrap();
                tape.backward(loss).unwrap();
                let grads: Vec<Vec<f64>> = [c, p, g, b].iter().map(|&v| tape.grad_or_zeros(v).into_data()).collect();
                results.push((tape.value(y).data().to_vec(), grads, stats.map(|s| (s.mean, s.var))));
            }
            let (a, b) = (&results[0], &results[1]);
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-12, "train={train}");
            }
            for (ga, gb) in a.1.iter().zip(&b.1) {
                for (x, y) in ga.iter().zip(gb) {
                    assert!((x - y).abs() < 1e-12, "train={train}: {ga:?} vs {gb:?}");
                }
            }
            assert_eq!(a.2.is_some(), train);
            if let (Some(sa), Some(sb)) = (&a.2, &b.2) {
                for (x, y) in sa.0.iter().chain(&sa.1).zip(sb.0.iter().chain(&sb.1)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
