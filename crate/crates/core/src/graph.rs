//! Dynamic reverse-mode tape.
//!
//! Every forward call appends a node holding its value and the recipe needed to
//! push gradients back to its inputs. Nodes are never mutated after they are
//! recorded. [`Graph::backward`] walks the tape once in reverse; a second call
//! fails until [`Graph::reset_grads`] is used.

use std::collections::HashMap;

use crate::error::{shape_err, DanError, Result};
use crate::kernels::{
    batch_to_channel_major, channel_to_batch_major, conv_transpose_out_len, gemm, ConvGeom,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Guard added to spatial sums before channel normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Variance guard of [`Graph::batch_norm`].
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics recorded by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        col: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    ChannelNorm {
        x: Var,
        sums: Vec<f64>,
    },
    Context {
        feat: Var,
        attn: Var,
    },
    SelectStep {
        x: Var,
        t: usize,
    },
    QueryScore {
        q: Var,
        feat: Var,
    },
    AddRows {
        x: Var,
        rows: Var,
    },
    SwapLast(Var),
    SpatialSum(Var),
    Sum(Var),
    Scale(Var, f64),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    backward_done: bool,
    training: bool,
    stats: Vec<BatchStats>,
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(shape_err!("expected a matrix, got {s:?}")),
    }
}

/// Split `[n, c, rest..]` into `(n, c, product(rest))`.
fn split_ncp(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(shape_err!("expected at least [n, c, ..], got {s:?}"));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

fn add_into(dst: &mut Vec<f64>, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Batch norms use batch statistics while this is set, running ones otherwise.
    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Statistics of every training-mode batch norm, in recording order.
    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.stats
    }

    /// Move each running mean and variance toward the recorded batch statistics.
    pub fn update_running_stats(&self, store: &mut ParamStore, momentum: f64) {
        for st in &self.stats {
            for (id, batch) in [(st.mean_id, &st.mean), (st.var_id, &st.var)] {
                for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.data().iter().all(|v| !v.is_nan()));
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        let tracked = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf that receives a gradient.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(true);
        self.input(value)
    }

    /// Bind a stored parameter as a leaf; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.clear_grad();
        let v = self.leaf(t);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Whether each ReLU input is positive, over every ReLU in recording order.
    /// Two evaluations with equal patterns sit on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- convolutions -------------------------------------------------

    /// Cross-correlation of `[n, c, h, w]` with kernel `[k, c, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [n, c, h, wd] = xs[..] else {
            return Err(shape_err!("conv2d input must be [n,c,h,w], got {xs:?}"));
        };
        let [k, kc, kh, kw] = ws[..] else {
            return Err(shape_err!("conv2d kernel must be [k,c,kh,kw], got {ws:?}"));
        };
        if kc != c {
            return Err(DanError::Config(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(shape_err!("conv2d bias must be [{k}]"));
            }
        }
        let geom = ConvGeom::new(n, c, h, wd, k, kh, kw, stride, pad)?;
        let col = geom.im2col(self.value(x).data());
        let p = geom.out_positions();
        let wg = geom.gather_kernel(self.value(w).data());
        let mut out = vec![0.0; k * geom.cols()];
        gemm(k, geom.rows(), geom.cols(), &wg, false, &col, false, &mut out, 0.0);
        let mut out = channel_to_batch_major(&out, n, k, p);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let bk = bias[i % k];
                chunk.iter_mut().for_each(|v| *v += bk);
            }
        }
        let value = Tensor::new(&[n, k, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, col }, &inputs))
    }

    /// Adjoint of [`conv2d`](Self::conv2d): maps `[n, k, h, w]` through kernel
    /// `[k, c, kh, kw]` to `[n, c, h', w']` with
    /// `h' = (h-1)·stride - 2·pad + kh + out_pad`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        out_pad: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [n, k, h, wd] = xs[..] else {
            return Err(shape_err!("transposed conv input must be [n,k,h,w], got {xs:?}"));
        };
        let [kk, c, kh, kw] = ws[..] else {
            return Err(shape_err!("transposed conv kernel must be [k,c,kh,kw], got {ws:?}"));
        };
        if kk != k {
            return Err(DanError::Config(format!(
                "transposed conv kernel expects {kk} input channels, input has {k}"
            )));
        }
        let oh = conv_transpose_out_len(h, kh, stride.0, pad.0, out_pad.0)
            .ok_or_else(|| DanError::Config("transposed conv height incompatible".into()))?;
        let ow = conv_transpose_out_len(wd, kw, stride.1, pad.1, out_pad.1)
            .ok_or_else(|| DanError::Config("transposed conv width incompatible".into()))?;
        let geom = ConvGeom::new(n, c, oh, ow, k, kh, kw, stride, pad)?;
        if geom.oh != h || geom.ow != wd {
            return Err(DanError::Config(format!(
                "transposed conv geometry does not invert: {h}x{wd} -> {oh}x{ow}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(shape_err!("transposed conv bias must be [{c}]"));
            }
        }
        let xm = batch_to_channel_major(self.value(x).data(), n, k, h * wd);
        let wg = geom.gather_kernel(self.value(w).data());
        let mut col = vec![0.0; geom.rows() * geom.cols()];
        gemm(geom.rows(), k, geom.cols(), &wg, true, &xm, false, &mut col, 0.0);
        let mut out = vec![0.0; n * c * oh * ow];
        geom.col2im(&col, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bc = bias[i % c];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    // ---- dense ----------------------------------------------------------

    /// `x [m, i] · wᵀ [i, o] + b [o]` with `w` stored `[o, i]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, i) = dims2(self.value(x))?;
        let (o, wi) = dims2(self.value(w))?;
        if wi != i {
            return Err(shape_err!("linear: input width {i}, weight expects {wi}"));
        }
        let mut out = vec![0.0; m * o];
        gemm(m, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, 0.0);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err!("linear bias must be [{o}]"));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                add_into_slice(row, bias);
            }
        }
        let value = Tensor::new(&[m, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.unary(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.unary(x, f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.unary(x, |v| v.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.unary(x, |v| v * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let k = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape(), data).unwrap();
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Rows of `table [k, d]` selected by `idx`, giving `[idx.len(), d]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (k, d) = dims2(self.value(table))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(shape_err!("embedding index {bad} out of range for {k} rows"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| dims2(self.value(p)))
            .collect::<Result<Vec<_>>>()?;
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(shape_err!("concat row counts differ: {dims:?}"));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &(_, w)) in parts.iter().zip(&dims) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * total + off..][..w].copy_from_slice(&src[r * w..][..w]);
            }
            off += w;
        }
        let v = Tensor::new(&[m, total], data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, w) = dims2(self.value(x))?;
        if start + len > w || len == 0 {
            return Err(shape_err!("slice {start}..{} of width {w}", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * w + start..][..len]);
        }
        let v = Tensor::new(&[m, len], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Divide each `[n, t]` slice of `[n, t, ..]` by its sum (plus [`NORM_EPS`]).
    pub fn channel_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, _, p) = split_ncp(t)?;
        let mut data = t.data().to_vec();
        let mut sums = Vec::with_capacity(data.len() / p);
        for chunk in data.chunks_mut(p) {
            let s = chunk.iter().sum::<f64>() + NORM_EPS;
            chunk.iter_mut().for_each(|v| *v /= s);
            sums.push(s);
        }
        let v = Tensor::new(t.shape(), data)?;
        Ok(self.push(v, Op::ChannelNorm { x, sums }, &[x]))
    }

    /// Per-channel normalization of `[n, c, ..]` followed by `gamma · x̂ + beta`.
    ///
    /// With `running = None` the statistics are the biased mean and variance
    /// over batch and space, recorded under the given ids for
    /// [`update_running_stats`](Self::update_running_stats). Otherwise the
    /// given `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        ids: (ParamId, ParamId),
    ) -> Result<Var> {
        let (n, c, p) = split_ncp(self.value(x))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!(
                "batch norm over {c} channels with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xs = self.value(x).data();
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err!("running statistics for {} channels, input has {c}", m.len()));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let m = (n * p).max(1) as f64;
                let mut mean = vec![0.0; c];
                for (i, chunk) in xs.chunks(p).enumerate() {
                    mean[i % c] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![0.0; c];
                for (i, chunk) in xs.chunks(p).enumerate() {
                    let mu = mean[i % c];
                    var[i % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for (i, (chunk, (h, o))) in xs.chunks(p).zip(xhat.chunks_mut(p).zip(out.chunks_mut(p))).enumerate() {
            let ch = i % c;
            for ((v, h), o) in chunk.iter().zip(h).zip(o) {
                *h = (v - mean[ch]) * inv_std[ch];
                *o = gv[ch] * *h + bv[ch];
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        let batch_stats = running.is_none();
        if batch_stats {
            self.stats.push(BatchStats {
                mean_id: ids.0,
                var_id: ids.1,
                mean,
                var,
            });
        }
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Attention pooling: `out[n, t, c] = Σ_p attn[n, t, p] · feat[n, c, p]`.
    pub fn context(&mut self, feat: Var, attn: Var) -> Result<Var> {
        let (n, c, p) = split_ncp(self.value(feat))?;
        let (na, t, pa) = split_ncp(self.value(attn))?;
        if na != n || pa != p {
            return Err(shape_err!(
                "context: features {:?} vs attention {:?}",
                self.shape(feat),
                self.shape(attn)
            ));
        }
        let mut out = vec![0.0; n * t * c];
        let (f, a) = (self.value(feat).data(), self.value(attn).data());
        for b in 0..n {
            gemm(
                t,
                p,
                c,
                &a[b * t * p..],
                false,
                &f[b * c * p..],
                true,
                &mut out[b * t * c..],
                0.0,
            );
        }
        let v = Tensor::new(&[n, t, c], out)?;
        Ok(self.push(v, Op::Context { feat, attn }, &[feat, attn]))
    }

    /// Row `t` of every batch item of `[n, t, c]`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, steps, c] = s[..] else {
            return Err(shape_err!("select_step needs [n,t,c], got {s:?}"));
        };
        if t >= steps {
            return Err(shape_err!("step {t} out of {steps}"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c);
        for b in 0..n {
            data.extend_from_slice(&src[(b * steps + t) * c..][..c]);
        }
        let v = Tensor::new(&[n, c], data)?;
        Ok(self.push(v, Op::SelectStep { x, t }, &[x]))
    }

    /// `out[n, p] = Σ_c q[n, c] · feat[n, c, p]`.
    pub fn query_score(&mut self, q: Var, feat: Var) -> Result<Var> {
        let (n, c) = dims2(self.value(q))?;
        let (nf, cf, p) = split_ncp(self.value(feat))?;
        if (n, c) != (nf, cf) {
            return Err(shape_err!("query [{n},{c}] vs features [{nf},{cf},..]"));
        }
        let mut out = vec![0.0; n * p];
        let (qd, fd) = (self.value(q).data(), self.value(feat).data());
        for b in 0..n {
            gemm(1, c, p, &qd[b * c..], false, &fd[b * c * p..], false, &mut out[b * p..], 0.0);
        }
        let v = Tensor::new(&[n, p], out)?;
        Ok(self.push(v, Op::QueryScore { q, feat }, &[q, feat]))
    }

    /// `x [n, p, a] + rows [n, a]` broadcast over `p`.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, p, a] = s[..] else {
            return Err(shape_err!("add_rows needs [n,p,a], got {s:?}"));
        };
        if self.shape(rows) != [n, a] {
            return Err(shape_err!("add_rows: rows {:?} vs [{n},{a}]", self.shape(rows)));
        }
        let mut data = self.value(x).data().to_vec();
        let r = self.value(rows).data();
        for b in 0..n {
            for i in 0..p {
                add_into_slice(&mut data[(b * p + i) * a..][..a], &r[b * a..][..a]);
            }
        }
        let v = Tensor::new(&s, data)?;
        Ok(self.push(v, Op::AddRows { x, rows }, &[x, rows]))
    }

    /// `[n, a, b]` → `[n, b, a]`.
    pub fn swap_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, a, b] = s[..] else {
            return Err(shape_err!("swap_last needs rank 3, got {s:?}"));
        };
        let v = Tensor::new(&[n, b, a], transpose_batched(self.value(x).data(), n, a, b))?;
        Ok(self.push(v, Op::SwapLast(x), &[x]))
    }

    /// `[n, c, ..]` → `[n, c]` summing trailing axes.
    pub fn spatial_sum(&mut self, x: Var) -> Result<Var> {
        let (n, c, p) = split_ncp(self.value(x))?;
        let data = self.value(x).data().chunks(p).map(|ch| ch.iter().sum()).collect();
        let v = Tensor::new(&[n, c], data)?;
        Ok(self.push(v, Op::SpatialSum(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ_rows -log softmax(logits)[target]` over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, k) = dims2(self.value(logits))?;
        if targets.len() != m {
            return Err(shape_err!("{} targets for {m} rows", targets.len()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(DanError::Data(format!("target class {bad} outside {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, t) in probs.chunks_mut(k).zip(targets) {
            let lse = log_sum_exp(row);
            if let Some(t) = *t {
                loss += lse - row[t];
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagate d(loss)/d(node) to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(DanError::Graph(
                "backward already ran on this graph; reset gradients first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(DanError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.push_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Clear gradients so that [`backward`](Self::backward) may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Add gradients of every bound parameter into the store's grad buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(DanError::Graph("no gradients: backward has not run".into()));
        }
        for (&id, &v) in &self.bound {
            if let Some(g) = self.grad(v) {
                add_into(store.get_mut(id).grad_mut(), g);
            }
        }
        Ok(())
    }

    fn push_back(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut acc = |v: Var, d: Vec<f64>| {
            match &mut grads[v.0] {
                Some(e) => add_into(e, &d),
                slot @ None => *slot = Some(d),
            }
        };
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, col } => {
                let p = geom.out_positions();
                let gm = batch_to_channel_major(g, geom.n, geom.c_out, p);
                if tracked(*w) {
                    let mut dwg = vec![0.0; geom.c_out * geom.rows()];
                    gemm(geom.c_out, geom.cols(), geom.rows(), &gm, false, col, true, &mut dwg, 0.0);
                    let mut dw = vec![0.0; self.value(*w).numel()];
                    geom.scatter_kernel(&dwg, &mut dw);
                    acc(*w, dw);
                }
                if tracked(*x) {
                    let wg = geom.gather_kernel(self.value(*w).data());
                    let mut dcol = vec![0.0; geom.rows() * geom.cols()];
                    gemm(geom.rows(), geom.c_out, geom.cols(), &wg, true, &gm, false, &mut dcol, 0.0);
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    geom.col2im(&dcol, &mut dx);
                    acc(*x, dx);
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    acc(b, channel_sums(g, geom.c_out, p));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                // the conv geometry runs from this op's output back to its input
                let p_in = geom.out_positions();
                let col = geom.im2col(g);
                if tracked(*x) {
                    let wg = geom.gather_kernel(self.value(*w).data());
                    let mut dxm = vec![0.0; geom.c_out * geom.cols()];
                    gemm(geom.c_out, geom.rows(), geom.cols(), &wg, false, &col, false, &mut dxm, 0.0);
                    acc(*x, channel_to_batch_major(&dxm, geom.n, geom.c_out, p_in));
                }
                if tracked(*w) {
                    let xm = batch_to_channel_major(self.value(*x).data(), geom.n, geom.c_out, p_in);
                    let mut dwg = vec![0.0; geom.c_out * geom.rows()];
                    gemm(geom.c_out, geom.cols(), geom.rows(), &xm, false, &col, true, &mut dwg, 0.0);
                    let mut dw = vec![0.0; self.value(*w).numel()];
                    geom.scatter_kernel(&dwg, &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    acc(b, channel_sums(g, geom.c_in, geom.h * geom.w));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, i) = dims2(self.value(*x)).unwrap();
                let o = out.shape()[1];
                if tracked(*x) {
                    let mut dx = vec![0.0; m * i];
                    gemm(m, o, i, g, false, self.value(*w).data(), false, &mut dx, 0.0);
                    acc(*x, dx);
                }
                if tracked(*w) {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, m, i, g, true, self.value(*x).data(), false, &mut dw, 0.0);
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        add_into_slice(&mut db, row);
                    }
                    acc(b, db);
                }
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    acc(*a, g.to_vec());
                }
                if tracked(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    acc(*a, g.to_vec());
                }
                if tracked(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if tracked(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if tracked(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Sigmoid(x) => {
                acc(*x, g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Tanh(x) => {
                acc(*x, g.iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t)).collect());
            }
            Op::Relu(x) => {
                acc(
                    *x,
                    g.iter()
                        .zip(out.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Softmax(x) => {
                let k = *out.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), sr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                    let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dr[j] = sr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Embedding { table, idx } => {
                let d = out.shape()[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &row) in idx.iter().enumerate() {
                    add_into_slice(&mut dt[row * d..][..d], &g[r * d..][..d]);
                }
                acc(*table, dt);
            }
            Op::Concat(parts) => {
                let (m, total) = (out.shape()[0], out.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if tracked(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + off..][..w]);
                        }
                        acc(p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = dims2(self.value(*x)).unwrap();
                let len = out.shape()[1];
                let mut dx = vec![0.0; m * w];
                for r in 0..m {
                    dx[r * w + start..][..len].copy_from_slice(&g[r * len..][..len]);
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let p = self.value(*x).shape()[2..].iter().product::<usize>();
                let m = (g.len() / c) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (gc, hc)) in g.chunks(p).zip(xhat.chunks(p)).enumerate() {
                    dgamma[i % c] += gc.iter().zip(hc).map(|(a, b)| a * b).sum::<f64>();
                    dbeta[i % c] += gc.iter().sum::<f64>();
                }
                if tracked(*x) {
                    let gv = self.value(*gamma).data();
                    let mut dx = vec![0.0; g.len()];
                    for (i, (d, (gc, hc))) in dx.chunks_mut(p).zip(g.chunks(p).zip(xhat.chunks(p))).enumerate() {
                        let ch = i % c;
                        let k = gv[ch] * inv_std[ch];
                        if *batch_stats {
                            // dbeta and dgamma are Σ dy and Σ dy·x̂ per channel
                            let (sg, sgh) = (dbeta[ch] / m, dgamma[ch] / m);
                            for ((d, a), h) in d.iter_mut().zip(gc).zip(hc) {
                                *d = k * (a - sg - h * sgh);
                            }
                        } else {
                            for (d, a) in d.iter_mut().zip(gc) {
                                *d = k * a;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if tracked(*gamma) {
                    acc(*gamma, dgamma);
                }
                if tracked(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::ChannelNorm { x, sums } => {
                let p = g.len() / sums.len();
                let xs = self.value(*x).data();
                let mut dx = vec![0.0; g.len()];
                for (j, s) in sums.iter().enumerate() {
                    let gr = &g[j * p..][..p];
                    let xr = &xs[j * p..][..p];
                    let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for q in 0..p {
                        dx[j * p + q] = gr[q] / s - dot / (s * s);
                    }
                }
                acc(*x, dx);
            }
            Op::Context { feat, attn } => {
                let (n, c, p) = split_ncp(self.value(*feat)).unwrap();
                let t = out.shape()[1];
                let (f, a) = (self.value(*feat).data(), self.value(*attn).data());
                if tracked(*attn) {
                    let mut da = vec![0.0; n * t * p];
                    for b in 0..n {
                        gemm(t, c, p, &g[b * t * c..], false, &f[b * c * p..], false, &mut da[b * t * p..], 0.0);
                    }
                    acc(*attn, da);
                }
                if tracked(*feat) {
                    let mut df = vec![0.0; n * c * p];
                    for b in 0..n {
                        gemm(c, t, p, &g[b * t * c..], true, &a[b * t * p..], false, &mut df[b * c * p..], 0.0);
                    }
                    acc(*feat, df);
                }
            }
            Op::SelectStep { x, t } => {
                let s = self.shape(*x);
                let (n, steps, c) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; n * steps * c];
                for b in 0..n {
                    dx[(b * steps + t) * c..][..c].copy_from_slice(&g[b * c..][..c]);
                }
                acc(*x, dx);
            }
            Op::QueryScore { q, feat } => {
                let (n, c, p) = split_ncp(self.value(*feat)).unwrap();
                let (qd, fd) = (self.value(*q).data(), self.value(*feat).data());
                if tracked(*q) {
                    let mut dq = vec![0.0; n * c];
                    for b in 0..n {
                        gemm(c, p, 1, &fd[b * c * p..], false, &g[b * p..], false, &mut dq[b * c..], 0.0);
                    }
                    acc(*q, dq);
                }
                if tracked(*feat) {
                    let mut df = vec![0.0; n * c * p];
                    for b in 0..n {
                        gemm(c, 1, p, &qd[b * c..], false, &g[b * p..], false, &mut df[b * c * p..], 0.0);
                    }
                    acc(*feat, df);
                }
            }
            Op::AddRows { x, rows } => {
                if tracked(*x) {
                    acc(*x, g.to_vec());
                }
                if tracked(*rows) {
                    let s = out.shape();
                    let (n, p, a) = (s[0], s[1], s[2]);
                    let mut dr = vec![0.0; n * a];
                    for b in 0..n {
                        for i in 0..p {
                            add_into_slice(&mut dr[b * a..][..a], &g[(b * p + i) * a..][..a]);
                        }
                    }
                    acc(*rows, dr);
                }
            }
            Op::SwapLast(x) => {
                let s = out.shape();
                acc(*x, transpose_batched(g, s[0], s[1], s[2]));
            }
            Op::SpatialSum(x) => {
                let (_, _, p) = split_ncp(self.value(*x)).unwrap();
                let mut dx = Vec::with_capacity(g.len() * p);
                for &v in g {
                    dx.extend(std::iter::repeat(v).take(p));
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let mut dl = probs.clone();
                for (row, t) in dl.chunks_mut(k).zip(targets) {
                    match t {
                        Some(t) => {
                            row[*t] -= 1.0;
                            row.iter_mut().for_each(|v| *v *= g[0]);
                        }
                        None => row.iter_mut().for_each(|v| *v = 0.0),
                    }
                }
                acc(*logits, dl);
            }
        }
    }
}

fn add_into_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn channel_sums(g: &[f64], ch: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; ch];
    for (i, chunk) in g.chunks(p).enumerate() {
        out[i % ch] += chunk.iter().sum::<f64>();
    }
    out
}

fn transpose_batched(x: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..n {
        for i in 0..a {
            for j in 0..b {
                out[bi * a * b + j * a + i] = x[bi * a * b + i * b + j];
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
