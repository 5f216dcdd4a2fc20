//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every primitive as it executes; [`Graph::backward`]
//! replays the record in exact reverse order, which fixes the floating-point
//! reduction order and makes gradients bit-reproducible. Tensors are
//! immutable once created; parameters live outside the graph and are
//! re-inserted as leaves each step.

mod lbs;


pub use lbs::LbsData;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Forward-pass mode for stochastic / statistics-bearing ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Reduction kind for [`Graph::reduce`]. `Var` is the population variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Var,
}

/// Dense tensor participating in the differentiation graph.
#[derive(Debug, Clone)]
pub struct DiffTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone)]
struct BnCache {
    invstd: Vec<f64>,
    xhat: Vec<f64>,
    eval: bool,
    channels: usize,
    inner: usize,
}

#[derive(Debug)]
enum Op {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, factor: f64, out: TensorId },
    AddScalar { a: TensorId, out: TensorId },
    Linear { x: TensorId, w: TensorId, b: TensorId, out: TensorId },
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    Conv1d { x: TensorId, w: TensorId, dilation: usize, out: TensorId },
    ChannelBias { x: TensorId, bias: TensorId, out: TensorId },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, out: TensorId, cache: BnCache },
    Relu { x: TensorId, out: TensorId },
    Dropout { x: TensorId, out: TensorId, mask: Vec<f64> },
    Softplus { x: TensorId, out: TensorId },
    Sqrt { x: TensorId, out: TensorId },
    SoftmaxRows { x: TensorId, out: TensorId },
    ReduceOp { x: TensorId, out: TensorId, kind: Reduce, axis: Option<usize> },
    Reshape { x: TensorId, out: TensorId },
    SwapAxes12 { x: TensorId, out: TensorId },
    Select0 { x: TensorId, out: TensorId, index: usize },
    Slice0 { x: TensorId, out: TensorId, start: usize },
    IndexSelect { x: TensorId, out: TensorId, axis: usize, indices: Vec<usize> },
    Stack0 { items: Vec<TensorId>, out: TensorId },
    PackWindows { items: Vec<TensorId>, out: TensorId },
    ClampMin { x: TensorId, out: TensorId, floor: f64 },
    Lift { x2d: TensorId, off: TensorId, out: TensorId, c: f64, floor: f64 },
    RotatePlace { x: TensorId, out: TensorId, q: [f64; 9], lh: usize, rh: usize },
    Project { y: TensorId, out: TensorId },
    OrthoBlocks { x: TensorId, out: TensorId },
    Lbs { betas: TensorId, rots: TensorId, verts: TensorId, joints: TensorId, data: Arc<LbsData> },
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffTensor>,
    ops: Vec<Op>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    // ── tensor creation ─────────────────────────────────────────────

    pub fn tensor(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> TensorId {
        assert_eq!(
            numel(shape),
            values.len(),
            "tensor shape {:?} does not match {} values",
            shape,
            values.len()
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(DiffTensor { shape: shape.to_vec(), values, requires_grad, grad: None });
        id
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> TensorId {
        self.tensor(shape, values, false)
    }

    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> TensorId {
        self.tensor(shape, values, true)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(&[], vec![v])
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(numel(&self.nodes[id.0].shape), 1);
        self.nodes[id.0].values[0]
    }

    pub fn node(&self, id: TensorId) -> &DiffTensor {
        &self.nodes[id.0]
    }

    fn out(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(DiffTensor { shape, values, requires_grad, grad: None });
        id
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    // ── elementwise and scalar ops ──────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let values: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.out(self.shape(a).to_vec(), values, rg);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let values: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x - y).collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.out(self.shape(a).to_vec(), values, rg);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let values: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.out(self.shape(a).to_vec(), values, rg);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let values: Vec<f64> = self.values(a).iter().map(|x| x * factor).collect();
        let rg = self.nodes[a.0].requires_grad;
        let out = self.out(self.shape(a).to_vec(), values, rg);
        self.ops.push(Op::Scale { a, factor, out });
        out
    }

    pub fn add_scalar(&mut self, a: TensorId, v: f64) -> TensorId {
        let values: Vec<f64> = self.values(a).iter().map(|x| x + v).collect();
        let rg = self.nodes[a.0].requires_grad;
        let out = self.out(self.shape(a).to_vec(), values, rg);
        self.ops.push(Op::AddScalar { a, out });
        out
    }

    // ── dense layers ────────────────────────────────────────────────

    /// `out[b,o] = sum_i x[b,i] * weight[o,i] + bias[o]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("ranks x{:?} w{:?} b{:?}, expected 2/2/1", xs, ws, bs),
            });
        }
        let (batch, f_in) = (xs[0], xs[1]);
        let (f_out, w_in) = (ws[0], ws[1]);
        if w_in != f_in {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("x feature axis {} vs weight input axis {}", f_in, w_in),
            });
        }
        if bs[0] != f_out {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("bias axis {} vs weight output axis {}", bs[0], f_out),
            });
        }
        let mut values = vec![0.0; batch * f_out];
        {
            let xv = self.values(x);
            let wv = self.values(w);
            let bv = self.values(b);
            for bi in 0..batch {
                let xrow = &xv[bi * f_in..(bi + 1) * f_in];
                for o in 0..f_out {
                    let wrow = &wv[o * f_in..(o + 1) * f_in];
                    let mut acc = bv[o];
                    for i in 0..f_in {
                        acc += xrow[i] * wrow[i];
                    }
                    values[bi * f_out + o] = acc;
                }
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        let out = self.out(vec![batch, f_out], values, rg);
        self.ops.push(Op::Linear { x, w, b, out });
        Ok(out)
    }

    /// Plain matrix product `[M,K] x [K,N] -> [M,N]`, differentiable in both.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut values = vec![0.0; m * n];
        {
            let av = self.values(a);
            let bv = self.values(b);
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut values[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        let out = self.out(vec![m, n], values, rg);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    /// Dilated same-padded 1-d cross-correlation.
    /// `x: [B,C_in,L]`, `kernel: [C_out,C_in,ks]` with odd `ks`.
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, dilation: usize) -> Result<TensorId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("ranks x{:?} w{:?}, expected 3/3", xs, ws),
            });
        }
        let (bsz, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, wc_in, ks) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("x channel axis {} vs kernel input axis {}", c_in, wc_in),
            });
        }
        if ks % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size {ks} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::Config("conv1d dilation must be positive".into()));
        }
        let pad = dilation * (ks - 1) / 2;
        let mut values = vec![0.0; bsz * c_out * len];
        {
            let xv = self.values(x);
            let wv = self.values(w);
            for b in 0..bsz {
                for co in 0..c_out {
                    let orow = &mut values[(b * c_out + co) * len..(b * c_out + co + 1) * len];
                    for ci in 0..c_in {
                        let xrow = &xv[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                        for k in 0..ks {
                            let wk = wv[(co * c_in + ci) * ks + k];
                            if wk == 0.0 {
                                continue;
                            }
                            let shift = (k * dilation) as isize - pad as isize;
                            let t0 = (-shift).max(0) as usize;
                            let t1 = ((len as isize - shift).min(len as isize)).max(0) as usize;
                            for t in t0..t1 {
                                orow[t] += wk * xrow[(t as isize + shift) as usize];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w]);
        let out = self.out(vec![bsz, c_out, len], values, rg);
        self.ops.push(Op::Conv1d { x, w, dilation, out });
        Ok(out)
    }

    /// Broadcast a per-channel bias over `[B,C,L]`.
    pub fn channel_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 3 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Shape {
                op: "channel_bias",
                detail: format!("x{:?} bias{:?}", xs, bs),
            });
        }
        let (bsz, c, len) = (xs[0], xs[1], xs[2]);
        let mut values = self.values(x).to_vec();
        {
            let bv = self.values(bias);
            for b in 0..bsz {
                for ch in 0..c {
                    let row = &mut values[(b * c + ch) * len..(b * c + ch + 1) * len];
                    for v in row {
                        *v += bv[ch];
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, bias]);
        let out = self.out(xs.to_vec(), values, rg);
        self.ops.push(Op::ChannelBias { x, bias, out });
        Ok(out)
    }

    /// Batch normalization over `[B,F]` or `[B,C,L]` (channel axis 1).
    ///
    /// Train mode standardizes with the biased batch variance and returns the
    /// updated running stats (mean, unbiased variance); eval mode uses the
    /// supplied running stats and returns `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<(TensorId, Option<(Vec<f64>, Vec<f64>)>)> {
        let xs = self.shape(x).to_vec();
        let (channels, inner) = match xs.len() {
            2 => (xs[1], 1usize),
            3 => (xs[1], xs[2]),
            _ => {
                return Err(Error::Shape {
                    op: "batchnorm",
                    detail: format!("rank {} input, expected 2 or 3", xs.len()),
                })
            }
        };
        let batch = xs[0];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::Shape {
                op: "batchnorm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs {} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    channels
                ),
            });
        }
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::Shape {
                op: "batchnorm",
                detail: format!("running stats length vs {channels} channels"),
            });
        }
        let n = batch * inner;
        let xv = self.values(x).to_vec();
        let gv = self.values(gamma).to_vec();
        let bv = self.values(beta).to_vec();

        let per_channel = |c: usize, f: &mut dyn FnMut(usize)| {
            for b in 0..batch {
                let base = (b * channels + c) * inner;
                for j in 0..inner {
                    f(base + j);
                }
            }
        };

        let (mean, var, update) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    per_channel(c, &mut |i| s += xv[i]);
                    mean[c] = s / n as f64;
                    let mut s2 = 0.0;
                    per_channel(c, &mut |i| {
                        let d = xv[i] - mean[c];
                        s2 += d * d;
                    });
                    var[c] = s2 / n as f64;
                }
                let mut new_rm = vec![0.0; channels];
                let mut new_rv = vec![0.0; channels];
                for c in 0..channels {
                    new_rm[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
                    let unbiased = var[c] * n as f64 / (n as f64 - 1.0);
                    new_rv[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
                }
                (mean, var, Some((new_rm, new_rv)))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };

        let mut invstd = vec![0.0; channels];
        for c in 0..channels {
            invstd[c] = 1.0 / (var[c] + eps).sqrt();
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut values = vec![0.0; xv.len()];
        for c in 0..channels {
            per_channel(c, &mut |i| {
                let h = (xv[i] - mean[c]) * invstd[c];
                xhat[i] = h;
                values[i] = gv[c] * h + bv[c];
            });
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = self.out(xs, values, rg);
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            cache: BnCache { invstd, xhat, eval: mode == Mode::Eval, channels, inner },
        });
        Ok((out, update))
    }

    // ── activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(self.shape(x).to_vec(), values, rg);
        self.ops.push(Op::Relu { x, out });
        out
    }

    /// Inverted-scaling dropout; identity in eval mode. The mask is sampled
    /// once per forward pass and reused by backward.
    pub fn dropout(&mut self, x: TensorId, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.values(x).len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let values: Vec<f64> = self.values(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(self.shape(x).to_vec(), values, rg);
        self.ops.push(Op::Dropout { x, out, mask });
        Ok(out)
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> =
            self.values(x).iter().map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p()).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(self.shape(x).to_vec(), values, rg);
        self.ops.push(Op::Softplus { x, out });
        out
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.values(x).iter().map(|&v| v.sqrt()).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(self.shape(x).to_vec(), values, rg);
        self.ops.push(Op::Sqrt { x, out });
        out
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::Shape {
                op: "softmax_rows",
                detail: format!("rank {} input, expected 2", xs.len()),
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let mut values = vec![0.0; rows * cols];
        {
            let xv = self.values(x);
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    values[r * cols + j] = e;
                    z += e;
                }
                for j in 0..cols {
                    values[r * cols + j] /= z;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(vec![rows, cols], values, rg);
        self.ops.push(Op::SoftmaxRows { x, out });
        Ok(out)
    }

    /// Reduce over one axis, or over all axes when `axis` is `None`
    /// (producing a rank-0 scalar).
    pub fn reduce(&mut self, x: TensorId, kind: Reduce, axis: Option<usize>) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let (out_shape, outer, n, inner) = match axis {
            None => (vec![], 1usize, numel(&xs), 1usize),
            Some(a) => {
                if a >= xs.len() {
                    return Err(Error::Shape {
                        op: "reduce",
                        detail: format!("axis {a} out of range for shape {:?}", xs),
                    });
                }
                let outer: usize = xs[..a].iter().product();
                let inner: usize = xs[a + 1..].iter().product();
                let mut os = xs.clone();
                os.remove(a);
                (os, outer, xs[a], inner)
            }
        };
        if n == 0 {
            return Err(Error::Shape { op: "reduce", detail: "empty reduction axis".into() });
        }
        let xv = self.values(x);
        let mut values = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut s = 0.0;
                for i in 0..n {
                    s += xv[(o * n + i) * inner + j];
                }
                match kind {
                    Reduce::Sum => values[o * inner + j] = s,
                    Reduce::Mean => values[o * inner + j] = s / n as f64,
                    Reduce::Var => {
                        let mu = s / n as f64;
                        let mut s2 = 0.0;
                        for i in 0..n {
                            let d = xv[(o * n + i) * inner + j] - mu;
                            s2 += d * d;
                        }
                        values[o * inner + j] = s2 / n as f64;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(out_shape, values, rg);
        self.ops.push(Op::ReduceOp { x, out, kind, axis });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        self.reduce(x, Reduce::Sum, None).expect("sum_all cannot fail")
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        self.reduce(x, Reduce::Mean, None).expect("mean_all cannot fail")
    }

    /// Convenience: `sum(x ⊙ x)`.
    pub fn sum_squares(&mut self, x: TensorId) -> TensorId {
        let sq = self.mul(x, x).expect("same tensor");
        self.sum_all(sq)
    }

    // ── data movement ───────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        if numel(new_shape) != numel(self.shape(x)) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), new_shape),
            });
        }
        let values = self.values(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(new_shape.to_vec(), values, rg);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    /// `[A,B,C] -> [A,C,B]`.
    pub fn swap_axes_1_2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape {
                op: "swap_axes_1_2",
                detail: format!("rank {} input, expected 3", xs.len()),
            });
        }
        let (a, b, c) = (xs[0], xs[1], xs[2]);
        let xv = self.values(x);
        let mut values = vec![0.0; xv.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    values[(i * c + k) * b + j] = xv[(i * b + j) * c + k];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(vec![a, c, b], values, rg);
        self.ops.push(Op::SwapAxes12 { x, out });
        Ok(out)
    }

    /// Select one index along axis 0; output drops that axis.
    pub fn select0(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || index >= xs[0] {
            return Err(Error::Shape {
                op: "select0",
                detail: format!("index {index} for shape {:?}", xs),
            });
        }
        let inner: usize = xs[1..].iter().product();
        let values = self.values(x)[index * inner..(index + 1) * inner].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(xs[1..].to_vec(), values, rg);
        self.ops.push(Op::Select0 { x, out, index });
        Ok(out)
    }

    /// Contiguous slice `[start, start+len)` along axis 0.
    pub fn slice0(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start + len > xs[0] {
            return Err(Error::Shape {
                op: "slice0",
                detail: format!("[{start}, {}) for shape {:?}", start + len, xs),
            });
        }
        let inner: usize = xs[1..].iter().product();
        let values = self.values(x)[start * inner..(start + len) * inner].to_vec();
        let mut os = xs.clone();
        os[0] = len;
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(os, values, rg);
        self.ops.push(Op::Slice0 { x, out, start });
        Ok(out)
    }

    /// Gather along `axis` (0 or 1) with an explicit index list.
    pub fn index_select(&mut self, x: TensorId, axis: usize, indices: &[usize]) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || axis > 1 {
            return Err(Error::Shape {
                op: "index_select",
                detail: format!("axis {axis} for shape {:?}", xs),
            });
        }
        let n = xs[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "index_select",
                detail: format!("index {bad} out of range {n}"),
            });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xv = self.values(x);
        let mut values = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (s, &i) in indices.iter().enumerate() {
                let src = (o * n + i) * inner;
                let dst = (o * indices.len() + s) * inner;
                values[dst..dst + inner].copy_from_slice(&xv[src..src + inner]);
            }
        }
        let mut os = xs.clone();
        os[axis] = indices.len();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(os, values, rg);
        self.ops.push(Op::IndexSelect { x, out, axis, indices: indices.to_vec() });
        Ok(out)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack0(&mut self, items: &[TensorId]) -> Result<TensorId> {
        if items.is_empty() {
            return Err(Error::Shape { op: "stack0", detail: "no items".into() });
        }
        let s0 = self.shape(items[0]).to_vec();
        for &it in items {
            if self.shape(it) != s0 {
                return Err(Error::Shape {
                    op: "stack0",
                    detail: format!("{:?} vs {:?}", self.shape(it), s0),
                });
            }
        }
        let inner = numel(&s0);
        let mut values = Vec::with_capacity(items.len() * inner);
        for &it in items {
            values.extend_from_slice(self.values(it));
        }
        let mut os = vec![items.len()];
        os.extend_from_slice(&s0);
        let rg = self.any_grad(items);
        let out = self.out(os, values, rg);
        self.ops.push(Op::Stack0 { items: items.to_vec(), out });
        Ok(out)
    }

    /// Pack B windows of `[T,N,2]` joints into the network input layout
    /// `[B, 2N, T]` with channel `2n+d` holding coordinate `d` of joint `n`.
    pub fn pack_windows(&mut self, items: &[TensorId]) -> Result<TensorId> {
        if items.is_empty() {
            return Err(Error::Shape { op: "pack_windows", detail: "no items".into() });
        }
        let s0 = self.shape(items[0]).to_vec();
        if s0.len() != 3 || s0[2] != 2 {
            return Err(Error::Shape {
                op: "pack_windows",
                detail: format!("item shape {:?}, expected [T,N,2]", s0),
            });
        }
        let (t_len, n_j) = (s0[0], s0[1]);
        for &it in items {
            if self.shape(it) != s0 {
                return Err(Error::Shape {
                    op: "pack_windows",
                    detail: format!("{:?} vs {:?}", self.shape(it), s0),
                });
            }
        }
        let c = 2 * n_j;
        let mut values = vec![0.0; items.len() * c * t_len];
        for (b, &it) in items.iter().enumerate() {
            let xv = self.values(it);
            for t in 0..t_len {
                for n in 0..n_j {
                    for d in 0..2 {
                        values[(b * c + 2 * n + d) * t_len + t] = xv[(t * n_j + n) * 2 + d];
                    }
                }
            }
        }
        let rg = self.any_grad(items);
        let out = self.out(vec![items.len(), c, t_len], values, rg);
        self.ops.push(Op::PackWindows { items: items.to_vec(), out });
        Ok(out)
    }

    /// `max(floor, x)` with subgradient 0 on the flat branch.
    pub fn clamp_min(&mut self, x: TensorId, floor: f64) -> TensorId {
        let values: Vec<f64> = self.values(x).iter().map(|&v| v.max(floor)).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(self.shape(x).to_vec(), values, rg);
        self.ops.push(Op::ClampMin { x, out, floor });
        out
    }

    // ── geometry primitives ─────────────────────────────────────────

    /// Depth-offset lifting: `z = max(floor, c + off)`, `out = (x·z, y·z, z)`.
    /// `x2d: [T,N,2]`, `off: [T,N]` → `[T,N,3]`.
    pub fn lift(&mut self, x2d: TensorId, off: TensorId, c: f64, floor: f64) -> Result<TensorId> {
        let (xs, os) = (self.shape(x2d).to_vec(), self.shape(off).to_vec());
        if xs.len() != 3 || xs[2] != 2 {
            return Err(Error::Shape { op: "lift", detail: format!("x2d shape {:?}", xs) });
        }
        if os != xs[..2] {
            return Err(Error::Shape {
                op: "lift",
                detail: format!("offsets {:?} vs joints {:?}", os, &xs[..2]),
            });
        }
        let (t_len, n_j) = (xs[0], xs[1]);
        let xv = self.values(x2d);
        let ov = self.values(off);
        let mut values = vec![0.0; t_len * n_j * 3];
        for i in 0..t_len * n_j {
            let z = (c + ov[i]).max(floor);
            values[i * 3] = xv[i * 2] * z;
            values[i * 3 + 1] = xv[i * 2 + 1] * z;
            values[i * 3 + 2] = z;
        }
        let rg = self.any_grad(&[x2d, off]);
        let out = self.out(vec![t_len, n_j, 3], values, rg);
        self.ops.push(Op::Lift { x2d, off, out, c, floor });
        Ok(out)
    }

    /// Per frame: `y_i = Q (x_i − root) + place` with the root taken as the
    /// midpoint of joints `lh` and `rh`. `x: [T,N,3]`.
    pub fn rotate_place(
        &mut self,
        x: TensorId,
        q: &[f64; 9],
        lh: usize,
        rh: usize,
        place: [f64; 3],
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != 3 {
            return Err(Error::Shape { op: "rotate_place", detail: format!("shape {:?}", xs) });
        }
        let (t_len, n_j) = (xs[0], xs[1]);
        if lh >= n_j || rh >= n_j {
            return Err(Error::Shape {
                op: "rotate_place",
                detail: format!("hip indices {lh},{rh} vs {n_j} joints"),
            });
        }
        let xv = self.values(x);
        let mut values = vec![0.0; xv.len()];
        for t in 0..t_len {
            let base = t * n_j * 3;
            let mut root = [0.0; 3];
            for d in 0..3 {
                root[d] = 0.5 * (xv[base + lh * 3 + d] + xv[base + rh * 3 + d]);
            }
            for n in 0..n_j {
                let p = base + n * 3;
                let v = [xv[p] - root[0], xv[p + 1] - root[1], xv[p + 2] - root[2]];
                for r in 0..3 {
                    values[p + r] =
                        q[r * 3] * v[0] + q[r * 3 + 1] * v[1] + q[r * 3 + 2] * v[2] + place[r];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(xs, values, rg);
        self.ops.push(Op::RotatePlace { x, out, q: *q, lh, rh });
        Ok(out)
    }

    /// Perspective projection `(X/Z, Y/Z)`; errors on nonpositive depth.
    pub fn project(&mut self, y: TensorId) -> Result<TensorId> {
        let ys = self.shape(y).to_vec();
        if ys.len() != 3 || ys[2] != 3 {
            return Err(Error::Shape { op: "project", detail: format!("shape {:?}", ys) });
        }
        let (t_len, n_j) = (ys[0], ys[1]);
        let yv = self.values(y);
        let mut values = vec![0.0; t_len * n_j * 2];
        for t in 0..t_len {
            for n in 0..n_j {
                let p = (t * n_j + n) * 3;
                let z = yv[p + 2];
                if z <= 0.0 {
                    return Err(Error::ProjectionDomain { frame: t, joint: n, depth: z });
                }
                values[(t * n_j + n) * 2] = yv[p] / z;
                values[(t * n_j + n) * 2 + 1] = yv[p + 1] / z;
            }
        }
        let rg = self.nodes[y.0].requires_grad;
        let out = self.out(vec![t_len, n_j, 2], values, rg);
        self.ops.push(Op::Project { y, out });
        Ok(out)
    }

    /// Gram-Schmidt orthonormalization of every trailing 3x3 block
    /// (columns), with the third column replaced by the cross product so
    /// `det = +1` always.
    pub fn orthonormalize_blocks(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        if r < 2 || xs[r - 1] != 3 || xs[r - 2] != 3 {
            return Err(Error::Shape {
                op: "orthonormalize",
                detail: format!("shape {:?}, expected trailing [3,3]", xs),
            });
        }
        let blocks = numel(&xs) / 9;
        let xv = self.values(x);
        let mut values = vec![0.0; xv.len()];
        for b in 0..blocks {
            let m = &xv[b * 9..(b + 1) * 9];
            let (u1, u2, u3) = gram_schmidt_columns(m)?;
            let o = &mut values[b * 9..(b + 1) * 9];
            for r in 0..3 {
                o[r * 3] = u1[r];
                o[r * 3 + 1] = u2[r];
                o[r * 3 + 2] = u3[r];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.out(xs, values, rg);
        self.ops.push(Op::OrthoBlocks { x, out });
        Ok(out)
    }

    /// Linear-blend-skinning forward for one frame: betas `[10]` and
    /// rotations `[K,3,3]` against a fixed body, producing posed vertices
    /// `[V,3]` and joints `[K,3]` (translation parts of the world
    /// transforms).
    pub fn lbs(&mut self, betas: TensorId, rots: TensorId, data: Arc<LbsData>) -> Result<(TensorId, TensorId)> {
        let bs = self.shape(betas).to_vec();
        let rs = self.shape(rots).to_vec();
        if bs != [data.num_shapes()] {
            return Err(Error::Shape {
                op: "lbs",
                detail: format!("betas {:?}, expected [{}]", bs, data.num_shapes()),
            });
        }
        if rs != [data.k, 3, 3] {
            return Err(Error::Shape {
                op: "lbs",
                detail: format!("rotations {:?}, expected [{},3,3]", rs, data.k),
            });
        }
        let fw = lbs::forward(&data, self.values(betas), self.values(rots));
        let rg = self.any_grad(&[betas, rots]);
        let verts = self.out(vec![data.v, 3], fw.verts, rg);
        let joints = self.out(vec![data.k, 3], fw.joints, rg);
        self.ops.push(Op::Lbs { betas, rots, verts, joints, data });
        Ok((verts, joints))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients land in the nodes'
    /// `grad` fields; a second call without [`Graph::reset_gradients`] is an
    /// error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; call reset_gradients first".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        // Walk ops newest-first. Ops are indexed so we can borrow node data
        // immutably while mutating the grad table.
        for oi in (0..self.ops.len()).rev() {
            self.backward_op(oi, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    pub fn reset_gradients(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn backward_op(&self, oi: usize, grads: &mut [Option<Vec<f64>>]) {
        macro_rules! out_grad {
            ($out:expr) => {
                match &grads[$out.0] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        let acc = |grads: &mut [Option<Vec<f64>>], nodes: &[DiffTensor], id: TensorId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].values.len()]);
            f(slot);
        };

        match &self.ops[oi] {
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                acc(grads, &self.nodes, *a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y;
                    }
                });
                acc(grads, &self.nodes, *b, &mut |gb| {
                    for (x, y) in gb.iter_mut().zip(&g) {
                        *x += y;
                    }
                });
            }
            Op::Sub { a, b, out } => {
                let g = out_grad!(out);
                acc(grads, &self.nodes, *a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y;
                    }
                });
                acc(grads, &self.nodes, *b, &mut |gb| {
                    for (x, y) in gb.iter_mut().zip(&g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul { a, b, out } => {
                let g = out_grad!(out);
                let av = self.values(*a);
                let bv = self.values(*b);
                acc(grads, &self.nodes, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(grads, &self.nodes, *b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, factor, out } => {
                let g = out_grad!(out);
                acc(grads, &self.nodes, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * factor;
                    }
                });
            }
            Op::AddScalar { a, out } => {
                let g = out_grad!(out);
                acc(grads, &self.nodes, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                });
            }
            Op::Linear { x, w, b, out } => {
                let g = out_grad!(out);
                let (batch, f_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let f_out = self.shape(*w)[0];
                let xv = self.values(*x);
                let wv = self.values(*w);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for bi in 0..batch {
                        for o in 0..f_out {
                            let go = g[bi * f_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wrow = &wv[o * f_in..(o + 1) * f_in];
                            let gxr = &mut gx[bi * f_in..(bi + 1) * f_in];
                            for i in 0..f_in {
                                gxr[i] += go * wrow[i];
                            }
                        }
                    }
                });
                acc(grads, &self.nodes, *w, &mut |gw| {
                    for bi in 0..batch {
                        let xrow = &xv[bi * f_in..(bi + 1) * f_in];
                        for o in 0..f_out {
                            let go = g[bi * f_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let gwr = &mut gw[o * f_in..(o + 1) * f_in];
                            for i in 0..f_in {
                                gwr[i] += go * xrow[i];
                            }
                        }
                    }
                });
                acc(grads, &self.nodes, *b, &mut |gb| {
                    for bi in 0..batch {
                        for o in 0..f_out {
                            gb[o] += g[bi * f_out + o];
                        }
                    }
                });
            }
            Op::MatMul { a, b, out } => {
                let g = out_grad!(out);
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.values(*a);
                let bv = self.values(*b);
                acc(grads, &self.nodes, *a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(grads, &self.nodes, *b, &mut |gb| {
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, dilation, out } => {
                let g = out_grad!(out);
                let (bsz, c_in, len) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let (c_out, ks) = {
                    let s = self.shape(*w);
                    (s[0], s[2])
                };
                let pad = dilation * (ks - 1) / 2;
                let xv = self.values(*x);
                let wv = self.values(*w);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for b in 0..bsz {
                        for co in 0..c_out {
                            let grow = &g[(b * c_out + co) * len..(b * c_out + co + 1) * len];
                            for ci in 0..c_in {
                                let gxr = &mut gx[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                                for k in 0..ks {
                                    let wk = wv[(co * c_in + ci) * ks + k];
                                    if wk == 0.0 {
                                        continue;
                                    }
                                    let shift = (k * dilation) as isize - pad as isize;
                                    let t0 = (-shift).max(0) as usize;
                                    let t1 = ((len as isize - shift).min(len as isize)).max(0) as usize;
                                    for t in t0..t1 {
                                        gxr[(t as isize + shift) as usize] += wk * grow[t];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(grads, &self.nodes, *w, &mut |gw| {
                    for b in 0..bsz {
                        for co in 0..c_out {
                            let grow = &g[(b * c_out + co) * len..(b * c_out + co + 1) * len];
                            for ci in 0..c_in {
                                let xrow = &xv[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                                for k in 0..ks {
                                    let shift = (k * dilation) as isize - pad as isize;
                                    let t0 = (-shift).max(0) as usize;
                                    let t1 = ((len as isize - shift).min(len as isize)).max(0) as usize;
                                    let mut s = 0.0;
                                    for t in t0..t1 {
                                        s += grow[t] * xrow[(t as isize + shift) as usize];
                                    }
                                    gw[(co * c_in + ci) * ks + k] += s;
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelBias { x, bias, out } => {
                let g = out_grad!(out);
                let (bsz, c, len) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i];
                    }
                });
                acc(grads, &self.nodes, *bias, &mut |gb| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let row = &g[(b * c + ch) * len..(b * c + ch + 1) * len];
                            gb[ch] += row.iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, out, cache } => {
                let g = out_grad!(out);
                let gv = self.values(*gamma);
                let channels = cache.channels;
                let inner = cache.inner;
                let batch = self.shape(*x)[0];
                let n = (batch * inner) as f64;
                let per_channel = |c: usize, f: &mut dyn FnMut(usize)| {
                    for b in 0..batch {
                        let base = (b * channels + c) * inner;
                        for j in 0..inner {
                            f(base + j);
                        }
                    }
                };
                acc(grads, &self.nodes, *gamma, &mut |gg| {
                    for c in 0..channels {
                        let mut s = 0.0;
                        per_channel(c, &mut |i| s += g[i] * cache.xhat[i]);
                        gg[c] += s;
                    }
                });
                acc(grads, &self.nodes, *beta, &mut |gb| {
                    for c in 0..channels {
                        let mut s = 0.0;
                        per_channel(c, &mut |i| s += g[i]);
                        gb[c] += s;
                    }
                });
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for c in 0..channels {
                        let scale = gv[c] * cache.invstd[c];
                        if cache.eval {
                            per_channel(c, &mut |i| gx[i] += g[i] * scale);
                        } else {
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            per_channel(c, &mut |i| {
                                sum_g += g[i];
                                sum_gx += g[i] * cache.xhat[i];
                            });
                            let mean_g = sum_g / n;
                            let mean_gx = sum_gx / n;
                            per_channel(c, &mut |i| {
                                gx[i] += scale * (g[i] - mean_g - cache.xhat[i] * mean_gx);
                            });
                        }
                    }
                });
            }
            Op::Relu { x, out } => {
                let g = out_grad!(out);
                let xv = self.values(*x);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Dropout { x, out, mask } => {
                let g = out_grad!(out);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Softplus { x, out } => {
                let g = out_grad!(out);
                let xv = self.values(*x);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..g.len() {
                        let s = 1.0 / (1.0 + (-xv[i]).exp());
                        gx[i] += g[i] * s;
                    }
                });
            }
            Op::Sqrt { x, out } => {
                let g = out_grad!(out);
                let ov = self.values(*out);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * 0.5 / ov[i];
                    }
                });
            }
            Op::SoftmaxRows { x, out } => {
                let g = out_grad!(out);
                let ov = self.values(*out);
                let cols = self.shape(*out)[1];
                let rows = self.shape(*out)[0];
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for r in 0..rows {
                        let y = &ov[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let gxr = &mut gx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            gxr[j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::ReduceOp { x, out, kind, axis } => {
                let g = out_grad!(out);
                let xs = self.shape(*x);
                let (outer, n, inner) = match axis {
                    None => (1usize, numel(xs), 1usize),
                    Some(a) => (
                        xs[..*a].iter().product(),
                        xs[*a],
                        xs[*a + 1..].iter().product(),
                    ),
                };
                let xv = self.values(*x);
                acc(grads, &self.nodes, *x, &mut |gx| match kind {
                    Reduce::Sum => {
                        for o in 0..outer {
                            for j in 0..inner {
                                let go = g[o * inner + j];
                                for i in 0..n {
                                    gx[(o * n + i) * inner + j] += go;
                                }
                            }
                        }
                    }
                    Reduce::Mean => {
                        let inv = 1.0 / n as f64;
                        for o in 0..outer {
                            for j in 0..inner {
                                let go = g[o * inner + j] * inv;
                                for i in 0..n {
                                    gx[(o * n + i) * inner + j] += go;
                                }
                            }
                        }
                    }
                    Reduce::Var => {
                        let inv = 1.0 / n as f64;
                        for o in 0..outer {
                            for j in 0..inner {
                                let mut mu = 0.0;
                                for i in 0..n {
                                    mu += xv[(o * n + i) * inner + j];
                                }
                                mu *= inv;
                                let go = g[o * inner + j];
                                for i in 0..n {
                                    let d = xv[(o * n + i) * inner + j] - mu;
                                    gx[(o * n + i) * inner + j] += go * 2.0 * d * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape { x, out } => {
                let g = out_grad!(out);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i];
                    }
                });
            }
            Op::SwapAxes12 { x, out } => {
                let g = out_grad!(out);
                let xs = self.shape(*x);
                let (a, b, c) = (xs[0], xs[1], xs[2]);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..a {
                        for j in 0..b {
                            for k in 0..c {
                                gx[(i * b + j) * c + k] += g[(i * c + k) * b + j];
                            }
                        }
                    }
                });
            }
            Op::Select0 { x, out, index } => {
                let g = out_grad!(out);
                let inner = g.len();
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..inner {
                        gx[index * inner + i] += g[i];
                    }
                });
            }
            Op::Slice0 { x, out, start } => {
                let g = out_grad!(out);
                let inner: usize = self.shape(*out)[1..].iter().product();
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[start * inner + i] += g[i];
                    }
                });
            }
            Op::IndexSelect { x, out, axis, indices } => {
                let g = out_grad!(out);
                let xs = self.shape(*x);
                let n = xs[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for o in 0..outer {
                        for (s, &i) in indices.iter().enumerate() {
                            let src = (o * indices.len() + s) * inner;
                            let dst = (o * n + i) * inner;
                            for j in 0..inner {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                });
            }
            Op::Stack0 { items, out } => {
                let g = out_grad!(out);
                let inner = g.len() / items.len();
                for (s, &it) in items.iter().enumerate() {
                    acc(grads, &self.nodes, it, &mut |gi| {
                        for j in 0..inner {
                            gi[j] += g[s * inner + j];
                        }
                    });
                }
            }
            Op::PackWindows { items, out } => {
                let g = out_grad!(out);
                let os = self.shape(*out);
                let (c, t_len) = (os[1], os[2]);
                let n_j = c / 2;
                for (b, &it) in items.iter().enumerate() {
                    acc(grads, &self.nodes, it, &mut |gi| {
                        for t in 0..t_len {
                            for n in 0..n_j {
                                for d in 0..2 {
                                    gi[(t * n_j + n) * 2 + d] += g[(b * c + 2 * n + d) * t_len + t];
                                }
                            }
                        }
                    });
                }
            }
            Op::ClampMin { x, out, floor } => {
                let g = out_grad!(out);
                let xv = self.values(*x);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for i in 0..g.len() {
                        if xv[i] > *floor {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Lift { x2d, off, out, c, floor } => {
                let g = out_grad!(out);
                let xv = self.values(*x2d);
                let ov = self.values(*off);
                let count = ov.len();
                acc(grads, &self.nodes, *x2d, &mut |gx| {
                    for i in 0..count {
                        let z = (c + ov[i]).max(*floor);
                        gx[i * 2] += g[i * 3] * z;
                        gx[i * 2 + 1] += g[i * 3 + 1] * z;
                    }
                });
                acc(grads, &self.nodes, *off, &mut |go| {
                    for i in 0..count {
                        let z = c + ov[i];
                        if z > *floor {
                            go[i] += g[i * 3] * xv[i * 2] + g[i * 3 + 1] * xv[i * 2 + 1] + g[i * 3 + 2];
                        }
                    }
                });
            }
            Op::RotatePlace { x, out, q, lh, rh } => {
                let g = out_grad!(out);
                let xs = self.shape(*x);
                let (t_len, n_j) = (xs[0], xs[1]);
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for t in 0..t_len {
                        let base = t * n_j * 3;
                        let mut sum_v = [0.0; 3];
                        for n in 0..n_j {
                            let p = base + n * 3;
                            // v = Q^T g
                            let mut v = [0.0; 3];
                            for r in 0..3 {
                                v[r] = q[r] * g[p] + q[3 + r] * g[p + 1] + q[6 + r] * g[p + 2];
                            }
                            for d in 0..3 {
                                gx[p + d] += v[d];
                                sum_v[d] += v[d];
                            }
                        }
                        for d in 0..3 {
                            gx[base + lh * 3 + d] -= 0.5 * sum_v[d];
                            gx[base + rh * 3 + d] -= 0.5 * sum_v[d];
                        }
                    }
                });
            }
            Op::Project { y, out } => {
                let g = out_grad!(out);
                let yv = self.values(*y);
                let count = g.len() / 2;
                acc(grads, &self.nodes, *y, &mut |gy| {
                    for i in 0..count {
                        let z = yv[i * 3 + 2];
                        let gx0 = g[i * 2];
                        let gy0 = g[i * 2 + 1];
                        gy[i * 3] += gx0 / z;
                        gy[i * 3 + 1] += gy0 / z;
                        gy[i * 3 + 2] -= (gx0 * yv[i * 3] + gy0 * yv[i * 3 + 1]) / (z * z);
                    }
                });
            }
            Op::OrthoBlocks { x, out } => {
                let g = out_grad!(out);
                let xv = self.values(*x);
                let blocks = g.len() / 9;
                acc(grads, &self.nodes, *x, &mut |gx| {
                    for b in 0..blocks {
                        let m = &xv[b * 9..(b + 1) * 9];
                        let gb = &g[b * 9..(b + 1) * 9];
                        let gm = gram_schmidt_backward(m, gb);
                        for i in 0..9 {
                            gx[b * 9 + i] += gm[i];
                        }
                    }
                });
            }
            Op::Lbs { betas, rots, verts, joints, data } => {
                let zero_v = vec![0.0; data.v * 3];
                let zero_j = vec![0.0; data.k * 3];
                let gv = grads[verts.0].as_deref().unwrap_or(&zero_v).to_vec();
                let gj = grads[joints.0].as_deref().unwrap_or(&zero_j).to_vec();
                if grads[verts.0].is_none() && grads[joints.0].is_none() {
                    return;
                }
                let (gb, gr) = lbs::backward(data, self.values(*betas), self.values(*rots), &gv, &gj);
                acc(grads, &self.nodes, *betas, &mut |acc_b| {
                    for i in 0..acc_b.len() {
                        acc_b[i] += gb[i];
                    }
                });
                acc(grads, &self.nodes, *rots, &mut |acc_r| {
                    for i in 0..acc_r.len() {
                        acc_r[i] += gr[i];
                    }
                });
            }
        }
    }
}

/// Gram-Schmidt on the first two columns of a row-major 3x3; third output
/// column is the cross product. Errors when the column pair is too close to
/// dependent (condition estimate above 1e6).
fn gram_schmidt_columns(m: &[f64]) -> Result<([f64; 3], [f64; 3], [f64; 3])> {
    let a1 = [m[0], m[3], m[6]];
    let a2 = [m[1], m[4], m[7]];
    let r1 = norm3(&a1);
    let scale = r1.max(norm3(&a2));
    if scale == 0.0 || r1 <= scale * 1e-6 {
        return Err(Error::IllConditioned(if r1 > 0.0 { scale / r1 } else { f64::INFINITY }));
    }
    let u1 = [a1[0] / r1, a1[1] / r1, a1[2] / r1];
    let d = dot3(&u1, &a2);
    let w2 = [a2[0] - d * u1[0], a2[1] - d * u1[1], a2[2] - d * u1[2]];
    let r2 = norm3(&w2);
    if r2 <= scale * 1e-6 {
        return Err(Error::IllConditioned(scale / r2.max(f64::MIN_POSITIVE)));
    }
    let u2 = [w2[0] / r2, w2[1] / r2, w2[2] / r2];
    let u3 = cross3(&u1, &u2);
    Ok((u1, u2, u3))
}

/// Reverse-mode derivative of [`gram_schmidt_columns`]; the third input
/// column does not influence the output so its gradient is zero.
fn gram_schmidt_backward(m: &[f64], g: &[f64]) -> [f64; 9] {
    let a1 = [m[0], m[3], m[6]];
    let a2 = [m[1], m[4], m[7]];
    let r1 = norm3(&a1);
    let u1 = [a1[0] / r1, a1[1] / r1, a1[2] / r1];
    let d = dot3(&u1, &a2);
    let w2 = [a2[0] - d * u1[0], a2[1] - d * u1[1], a2[2] - d * u1[2]];
    let r2 = norm3(&w2);
    let u2 = [w2[0] / r2, w2[1] / r2, w2[2] / r2];

    let g1 = [g[0], g[3], g[6]];
    let g2 = [g[1], g[4], g[7]];
    let g3 = [g[2], g[5], g[8]];

    // u3 = u1 x u2
    let mut big_g1 = add3(&g1, &cross3(&u2, &g3));
    let big_g2 = add3(&g2, &cross3(&g3, &u1));

    // u2 = w2 / r2
    let t = dot3(&big_g2, &u2);
    let g_w2 = [
        (big_g2[0] - t * u2[0]) / r2,
        (big_g2[1] - t * u2[1]) / r2,
        (big_g2[2] - t * u2[2]) / r2,
    ];

    // w2 = a2 - (u1.a2) u1
    let s = dot3(&g_w2, &u1);
    let g_a2 = [g_w2[0] - s * u1[0], g_w2[1] - s * u1[1], g_w2[2] - s * u1[2]];
    for i in 0..3 {
        big_g1[i] += -s * a2[i] - d * g_w2[i];
    }

    // u1 = a1 / r1
    let t1 = dot3(&big_g1, &u1);
    let g_a1 = [
        (big_g1[0] - t1 * u1[0]) / r1,
        (big_g1[1] - t1 * u1[1]) / r1,
        (big_g1[2] - t1 * u1[2]) / r1,
    ];

    [g_a1[0], g_a2[0], 0.0, g_a1[1], g_a2[1], 0.0, g_a1[2], g_a2[2], 0.0]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn add3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Non-graph orthonormalization of one row-major 3x3 (same math as
/// [`Graph::orthonormalize_blocks`]).
pub fn orthonormalize3(m: &[f64]) -> Result<[f64; 9]> {
    let (u1, u2, u3) = gram_schmidt_columns(m)?;
    Ok([u1[0], u2[0], u3[0], u1[1], u2[1], u3[1], u1[2], u2[2], u3[2]])
}

/// Non-graph LBS forward: posed `(vertices [V,3], joints [K,3])`.
pub fn lbs_forward_kernel(data: &LbsData, betas: &[f64], rots: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let fw = lbs::forward(data, betas, rots);
    (fw.verts, fw.joints)
}

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central finite differences with step `eps`. `f` must build a scalar loss
/// from the leaf it is handed, and must be deterministic across calls.
pub fn check_gradients<F>(f: F, shape: &[usize], x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    let mut g = Graph::new();
    let id = g.param(shape, x.to_vec());
    let loss = f(&mut g, id)?;
    g.backward(loss)?;
    let analytic = g
        .grad(id)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |vals: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.param(shape, vals.to_vec());
        let loss = f(&mut g, id)?;
        Ok(g.value_scalar(loss))
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = eval(&probe)?;
        probe[i] = x[i] - eps;
        let lo = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
