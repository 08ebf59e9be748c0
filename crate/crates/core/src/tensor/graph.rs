//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] is a Wengert tape: forward ops append nodes in topological
//! order, each carrying its value and a backward closure. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients for every node
//! that requires them. Graphs are single-use: one forward build, one backward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::array::Array;
use super::kernels;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

/// Forward-pass mode: training uses batch statistics and active dropout,
/// evaluation uses running statistics and identity dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance state for a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Read-only view of node values during the backward sweep.
pub(crate) struct NodeValues<'a>(&'a [Array]);

impl NodeValues<'_> {
    pub(crate) fn get(&self, t: Tensor) -> &Array {
        &self.0[t.id]
    }
}

/// Gradient accumulator for the backward sweep. Contributions to nodes that
/// do not require gradients are dropped.
pub(crate) struct GradSink<'a> {
    requires: &'a [bool],
    numels: &'a [usize],
    slots: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub(crate) fn accumulate(&mut self, t: Tensor, contribution: &[f64]) {
        if !self.requires[t.id] {
            return;
        }
        let slot = self.slots[t.id].get_or_insert_with(|| vec![0.0; self.numels[t.id]]);
        debug_assert_eq!(slot.len(), contribution.len());
        for (g, &c) in slot.iter_mut().zip(contribution.iter()) {
            *g += c;
        }
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &NodeValues, &mut GradSink)>;

struct Node {
    value: Array,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Single-owner computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.id].value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Gradient of the last backward pass. `None` for nodes that do not
    /// require gradients or were unreachable from the loss.
    pub fn grad(&self, t: Tensor) -> Option<&Array> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    /// Register an input node. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Result<Tensor> {
        self.push(value, requires_grad, None, "leaf")
    }

    fn push(
        &mut self,
        value: Array,
        requires_grad: bool,
        backward: Option<BackwardFn>,
        op: &'static str,
    ) -> Result<Tensor> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !value.all_finite() {
            let bad = value.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::NonFinite {
                op,
                detail: format!(" ({bad} of {} elements)", value.numel()),
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Ok(Tensor { id })
    }

    pub(crate) fn push_op(
        &mut self,
        value: Array,
        requires_grad: bool,
        backward: BackwardFn,
        op: &'static str,
    ) -> Result<Tensor> {
        let backward = if requires_grad { Some(backward) } else { None };
        self.push(value, requires_grad, backward, op)
    }

    fn check_same_shape(&self, a: Tensor, b: Tensor, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context,
                expected: format!("{:?}", self.shape(a)),
                actual: format!("{:?}", self.shape(b)),
            });
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Array::from_vec(self.shape(a), data)?;
        let req = self.requires_grad(a) || self.requires_grad(b);
        self.push_op(
            value,
            req,
            Box::new(move |g, _vals, sink| {
                sink.accumulate(a, g);
                sink.accumulate(b, g);
            }),
            "add",
        )
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Array::from_vec(self.shape(a), data)?;
        let req = self.requires_grad(a) || self.requires_grad(b);
        self.push_op(
            value,
            req,
            Box::new(move |g, _vals, sink| {
                sink.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                sink.accumulate(b, &neg);
            }),
            "sub",
        )
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Array::from_vec(self.shape(a), data)?;
        let req = self.requires_grad(a) || self.requires_grad(b);
        self.push_op(
            value,
            req,
            Box::new(move |g, vals, sink| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(vals.get(b).data())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                sink.accumulate(a, &da);
                let db: Vec<f64> = g
                    .iter()
                    .zip(vals.get(a).data())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                sink.accumulate(b, &db);
            }),
            "mul",
        )
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Array::from_vec(self.shape(a), data)?;
        let req = self.requires_grad(a);
        self.push_op(
            value,
            req,
            Box::new(move |g, _vals, sink| {
                let da: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                sink.accumulate(a, &da);
            }),
            "scale",
        )
    }

    pub fn sum_all(&mut self, a: Tensor) -> Result<Tensor> {
        let total: f64 = self.value(a).data().iter().sum();
        let n = self.value(a).numel();
        let req = self.requires_grad(a);
        self.push_op(
            Array::scalar(total),
            req,
            Box::new(move |g, _vals, sink| {
                let da = vec![g[0]; n];
                sink.accumulate(a, &da);
            }),
            "sum",
        )
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let mask: Vec<bool> = self.value(a).data().iter().map(|&x| x > 0.0).collect();
        let value = Array::from_vec(self.shape(a), data)?;
        let req = self.requires_grad(a);
        self.push_op(
            value,
            req,
            Box::new(move |g, _vals, sink| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &m)| if m { gv } else { 0.0 })
                    .collect();
                sink.accumulate(a, &da);
            }),
            "relu",
        )
    }

    /// Inverted dropout: zero each element with probability `rate` and scale
    /// survivors by 1/(1-rate). Identity in eval mode.
    pub fn dropout(
        &mut self,
        a: Tensor,
        rate: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            let value = self.value(a).clone();
            let req = self.requires_grad(a);
            return self.push_op(
                value,
                req,
                Box::new(move |g, _vals, sink| sink.accumulate(a, g)),
                "dropout",
            );
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Array::from_vec(self.shape(a), data)?;
        let req = self.requires_grad(a);
        self.push_op(
            value,
            req,
            Box::new(move |g, _vals, sink| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &m)| gv * m)
                    .collect();
                sink.accumulate(a, &da);
            }),
            "dropout",
        )
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Affine map over the last axis: input [..., d_in] -> [..., d_out]
    /// with weight [d_out, d_in] and bias [d_out].
    pub fn linear(&mut self, x: Tensor, weight: Tensor, bias: Tensor) -> Result<Tensor> {
        let x_shape = self.shape(x).to_vec();
        let w_shape = self.shape(weight).to_vec();
        if x_shape.is_empty() || w_shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "linear",
                expected: "input [..., d_in] and weight [d_out, d_in]".into(),
                actual: format!("input {x_shape:?}, weight {w_shape:?}"),
            });
        }
        let d_in = *x_shape.last().unwrap();
        let (d_out, w_in) = (w_shape[0], w_shape[1]);
        if w_in != d_in || self.shape(bias) != [d_out] {
            return Err(Error::ShapeMismatch {
                context: "linear",
                expected: format!("weight [d_out, {d_in}], bias [d_out]"),
                actual: format!("weight {w_shape:?}, bias {:?}", self.shape(bias)),
            });
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        kernels::matmul_bt(self.value(x).data(), self.value(weight).data(), rows, d_in, d_out, &mut out);
        let bias_data = self.value(bias).data();
        out.par_chunks_mut(d_out).for_each(|row| {
            for (o, &b) in row.iter_mut().zip(bias_data.iter()) {
                *o += b;
            }
        });
        let mut out_shape = x_shape.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let value = Array::from_vec(&out_shape, out)?;
        let req = self.requires_grad(x) || self.requires_grad(weight) || self.requires_grad(bias);
        self.push_op(
            value,
            req,
            Box::new(move |g, vals, sink| {
                let x_data = vals.get(x).data();
                let w_data = vals.get(weight).data();
                let mut dx = vec![0.0; rows * d_in];
                kernels::matmul(g, w_data, rows, d_out, d_in, &mut dx);
                sink.accumulate(x, &dx);
                let mut dw = vec![0.0; d_out * d_in];
                kernels::matmul_at(g, x_data, rows, d_out, d_in, &mut dw);
                sink.accumulate(weight, &dw);
                let mut db = vec![0.0; d_out];
                for r in 0..rows {
                    for (dbv, &gv) in db.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                        *dbv += gv;
                    }
                }
                sink.accumulate(bias, &db);
            }),
            "linear",
        )
    }

    /// 3x3 convolution, stride 1, padding 1 (spatial dims preserved).
    /// Input [b, c_in, h, w], weight [c_out, c_in, 3, 3], bias [c_out].
    pub fn conv2d(&mut self, x: Tensor, weight: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                expected: format!("input [b, c_in, h, w], weight [c_out, {}, 3, 3]", xs.get(1).copied().unwrap_or(0)),
                actual: format!("input {xs:?}, weight {ws:?}"),
            });
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        if self.shape(bias) != [cout] {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                expected: format!("bias [{cout}]"),
                actual: format!("{:?}", self.shape(bias)),
            });
        }
        let plane = h * w;
        let mut out = vec![0.0; b * cout * plane];
        {
            let x_data = self.value(x).data();
            let w_data = self.value(weight).data();
            let b_data = self.value(bias).data();
            out.par_chunks_mut(cout * plane)
                .enumerate()
                .for_each(|(bi, sample_out)| {
                    kernels::conv3x3_same_single(
                        &x_data[bi * cin * plane..(bi + 1) * cin * plane],
                        w_data,
                        b_data,
                        cin,
                        h,
                        w,
                        cout,
                        sample_out,
                    );
                });
        }
        let value = Array::from_vec(&[b, cout, h, w], out)?;
        let req = self.requires_grad(x) || self.requires_grad(weight) || self.requires_grad(bias);
        self.push_op(
            value,
            req,
            Box::new(move |g, vals, sink| {
                let x_data = vals.get(x).data();
                let w_data = vals.get(weight).data();
                let mut dx = vec![0.0; b * cin * plane];
                dx.par_chunks_mut(cin * plane).enumerate().for_each(|(bi, d)| {
                    kernels::conv3x3_same_backward_input(
                        &g[bi * cout * plane..(bi + 1) * cout * plane],
                        w_data,
                        cin,
                        h,
                        w,
                        cout,
                        d,
                    );
                });
                sink.accumulate(x, &dx);
                let mut dw = vec![0.0; cout * cin * 9];
                for bi in 0..b {
                    kernels::conv3x3_same_backward_weight(
                        &x_data[bi * cin * plane..(bi + 1) * cin * plane],
                        &g[bi * cout * plane..(bi + 1) * cout * plane],
                        cin,
                        h,
                        w,
                        cout,
                        &mut dw,
                    );
                }
                sink.accumulate(weight, &dw);
                let mut db = vec![0.0; cout];
                for bi in 0..b {
                    for co in 0..cout {
                        let s: f64 = g[(bi * cout + co) * plane..(bi * cout + co + 1) * plane]
                            .iter()
                            .sum();
                        db[co] += s;
                    }
                }
                sink.accumulate(bias, &db);
            }),
            "conv2d",
        )
    }

    /// 2x2 max pooling with stride 2. Gradient routes to the argmax element,
    /// first occurrence in row-major window order on ties.
    pub fn maxpool2d(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "maxpool2d",
                expected: "[b, c, h, w]".into(),
                actual: format!("{xs:?}"),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "maxpool2d requires even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let n_out = b * c * oh * ow;
        let mut out = vec![0.0; n_out];
        let mut argmax = vec![0u32; n_out];
        {
            let x_data = self.value(x).data();
            out.par_chunks_mut(ow)
                .zip(argmax.par_chunks_mut(ow))
                .enumerate()
                .for_each(|(row_idx, (orow, arow))| {
                    let oy = row_idx % oh;
                    let plane_idx = row_idx / oh; // b*c + c index combined
                    let base = plane_idx * h * w;
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for wy in 0..2 {
                            for wx in 0..2 {
                                let idx = base + (oy * 2 + wy) * w + ox * 2 + wx;
                                let v = x_data[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        orow[ox] = best;
                        arow[ox] = best_idx;
                    }
                });
        }
        let value = Array::from_vec(&[b, c, oh, ow], out)?;
        let n_in = b * c * h * w;
        let req = self.requires_grad(x);
        self.push_op(
            value,
            req,
            Box::new(move |g, _vals, sink| {
                let mut dx = vec![0.0; n_in];
                for (&gv, &idx) in g.iter().zip(argmax.iter()) {
                    dx[idx as usize] += gv;
                }
                sink.accumulate(x, &dx);
            }),
            "maxpool2d",
        )
    }

    /// Elementwise sum of temporal max-pool and temporal mean-pool:
    /// [b, t, d] -> [b, d].
    pub fn temporal_pool(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(Error::ShapeMismatch {
                context: "temporal_pool",
                expected: "[b, t >= 1, d]".into(),
                actual: format!("{xs:?}"),
            });
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; b * d];
        let mut argmax = vec![0u32; b * d];
        {
            let x_data = self.value(x).data();
            out.par_chunks_mut(d)
                .zip(argmax.par_chunks_mut(d))
                .enumerate()
                .for_each(|(bi, (orow, arow))| {
                    for j in 0..d {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_t = 0u32;
                        let mut sum = 0.0;
                        for ti in 0..t {
                            let v = x_data[(bi * t + ti) * d + j];
                            sum += v;
                            if v > best {
                                best = v;
                                best_t = ti as u32;
                            }
                        }
                        orow[j] = best + sum / t as f64;
                        arow[j] = best_t;
                    }
                });
        }
        let value = Array::from_vec(&[b, d], out)?;
        let req = self.requires_grad(x);
        self.push_op(
            value,
            req,
            Box::new(move |g, _vals, sink| {
                let mut dx = vec![0.0; b * t * d];
                let inv_t = 1.0 / t as f64;
                for bi in 0..b {
                    for j in 0..d {
                        let gv = g[bi * d + j];
                        let mean_part = gv * inv_t;
                        for ti in 0..t {
                            dx[(bi * t + ti) * d + j] += mean_part;
                        }
                        let best_t = argmax[bi * d + j] as usize;
                        dx[(bi * t + best_t) * d + j] += gv;
                    }
                }
                sink.accumulate(x, &dx);
            }),
            "temporal_pool",
        )
    }

    /// Rearrange a conv feature map [b, c, f, t] into a time-major sequence
    /// [b, t, c*f], flattening channel-major then frequency. The inverse
    /// permutation defines the backward pass, so the layout is fixed and
    /// checkpoint-compatible.
    pub fn to_sequence(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "to_sequence",
                expected: "[b, c, f, t]".into(),
                actual: format!("{xs:?}"),
            });
        }
        let (b, c, f, t) = (xs[0], xs[1], xs[2], xs[3]);
        let feat = c * f;
        let mut out = vec![0.0; b * t * feat];
        {
            let x_data = self.value(x).data();
            out.par_chunks_mut(t * feat).enumerate().for_each(|(bi, sample)| {
                for ci in 0..c {
                    for fi in 0..f {
                        let src = &x_data[((bi * c + ci) * f + fi) * t..((bi * c + ci) * f + fi + 1) * t];
                        let col = ci * f + fi;
                        for (ti, &v) in src.iter().enumerate() {
                            sample[ti * feat + col] = v;
                        }
                    }
                }
            });
        }
        let value = Array::from_vec(&[b, t, feat], out)?;
        let req = self.requires_grad(x);
        self.push_op(
            value,
            req,
            Box::new(move |g, _vals, sink| {
                let mut dx = vec![0.0; b * c * f * t];
                for bi in 0..b {
                    for ci in 0..c {
                        for fi in 0..f {
                            let col = ci * f + fi;
                            for ti in 0..t {
                                dx[((bi * c + ci) * f + fi) * t + ti] =
                                    g[(bi * t + ti) * feat + col];
                            }
                        }
                    }
                }
                sink.accumulate(x, &dx);
            }),
            "to_sequence",
        )
    }

    // ── normalization ───────────────────────────────────────────────

    /// Batch norm over [b, c, h, w] with per-channel statistics across
    /// (b, h, w). `affine` carries (scale, shift) parameter tensors.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Tensor,
        affine: Option<(Tensor, Tensor)>,
        running: &mut BnRunning,
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "batchnorm2d",
                expected: "[b, c, h, w]".into(),
                actual: format!("{xs:?}"),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        self.batchnorm_impl(x, affine, running, mode, eps, momentum, b, c, h * w)
    }

    /// Batch norm over [b, d] with per-feature statistics across the batch.
    pub fn batchnorm1d(
        &mut self,
        x: Tensor,
        affine: Option<(Tensor, Tensor)>,
        running: &mut BnRunning,
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "batchnorm1d",
                expected: "[b, d]".into(),
                actual: format!("{xs:?}"),
            });
        }
        let (b, d) = (xs[0], xs[1]);
        self.batchnorm_impl(x, affine, running, mode, eps, momentum, b, d, 1)
    }

    /// Shared batch-norm kernel. Layout: index = (o*c + ch)*inner + i, with
    /// statistics per channel over the `outer * inner` group.
    #[allow(clippy::too_many_arguments)]
    fn batchnorm_impl(
        &mut self,
        x: Tensor,
        affine: Option<(Tensor, Tensor)>,
        running: &mut BnRunning,
        mode: Mode,
        eps: f64,
        momentum: f64,
        outer: usize,
        channels: usize,
        inner: usize,
    ) -> Result<Tensor> {
        if running.mean.len() != channels || running.var.len() != channels {
            return Err(Error::ShapeMismatch {
                context: "batchnorm",
                expected: format!("running stats of length {channels}"),
                actual: format!("{}", running.mean.len()),
            });
        }
        if let Some((scale, shift)) = affine {
            if self.shape(scale) != [channels] || self.shape(shift) != [channels] {
                return Err(Error::ShapeMismatch {
                    context: "batchnorm",
                    expected: format!("scale/shift [{channels}]"),
                    actual: format!(
                        "scale {:?}, shift {:?}",
                        self.shape(scale),
                        self.shape(shift)
                    ),
                });
            }
        }
        if mode == Mode::Train && outer < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm in training mode requires batch size >= 2".into(),
            ));
        }
        let m = outer * inner;
        let n = self.value(x).numel();
        let x_data = self.value(x).data();

        // Per-channel mean/inv-std used for normalization.
        let mut mean = vec![0.0; channels];
        let mut inv_std = vec![0.0; channels];
        if mode == Mode::Train {
            for ch in 0..channels {
                let mut s = 0.0;
                for o in 0..outer {
                    let base = (o * channels + ch) * inner;
                    for i in 0..inner {
                        s += x_data[base + i];
                    }
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for o in 0..outer {
                    let base = (o * channels + ch) * inner;
                    for i in 0..inner {
                        let d = x_data[base + i] - mu;
                        v += d * d;
                    }
                }
                let var = v / m as f64;
                mean[ch] = mu;
                inv_std[ch] = 1.0 / (var + eps).sqrt();
                // Running stats track the unbiased variance.
                let var_unbiased = if m > 1 { v / (m as f64 - 1.0) } else { var };
                running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * mu;
                running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * var_unbiased;
            }
        } else {
            for ch in 0..channels {
                mean[ch] = running.mean[ch];
                inv_std[ch] = 1.0 / (running.var[ch] + eps).sqrt();
            }
        }

        let mut normalized = vec![0.0; n];
        for o in 0..outer {
            for ch in 0..channels {
                let base = (o * channels + ch) * inner;
                let mu = mean[ch];
                let is = inv_std[ch];
                for i in 0..inner {
                    normalized[base + i] = (x_data[base + i] - mu) * is;
                }
            }
        }

        let out: Vec<f64> = if let Some((scale, shift)) = affine {
            let s_data = self.value(scale).data();
            let t_data = self.value(shift).data();
            let mut out = vec![0.0; n];
            for o in 0..outer {
                for ch in 0..channels {
                    let base = (o * channels + ch) * inner;
                    for i in 0..inner {
                        out[base + i] = normalized[base + i] * s_data[ch] + t_data[ch];
                    }
                }
            }
            out
        } else {
            normalized.clone()
        };

        let value = Array::from_vec(self.shape(x), out)?;
        let req = self.requires_grad(x)
            || affine.map_or(false, |(s, t)| self.requires_grad(s) || self.requires_grad(t));
        let train = mode == Mode::Train;
        self.push_op(
            value,
            req,
            Box::new(move |g, vals, sink| {
                // dxhat = g * scale (or g when not affine)
                let mut dxhat = vec![0.0; n];
                if let Some((scale, _)) = affine {
                    let s_data = vals.get(scale).data();
                    for o in 0..outer {
                        for ch in 0..channels {
                            let base = (o * channels + ch) * inner;
                            for i in 0..inner {
                                dxhat[base + i] = g[base + i] * s_data[ch];
                            }
                        }
                    }
                } else {
                    dxhat.copy_from_slice(g);
                }

                let mut dx = vec![0.0; n];
                if train {
                    // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    for ch in 0..channels {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for o in 0..outer {
                            let base = (o * channels + ch) * inner;
                            for i in 0..inner {
                                s1 += dxhat[base + i];
                                s2 += dxhat[base + i] * normalized[base + i];
                            }
                        }
                        let m1 = s1 / m as f64;
                        let m2 = s2 / m as f64;
                        let is = inv_std[ch];
                        for o in 0..outer {
                            let base = (o * channels + ch) * inner;
                            for i in 0..inner {
                                dx[base + i] =
                                    is * (dxhat[base + i] - m1 - normalized[base + i] * m2);
                            }
                        }
                    }
                } else {
                    for o in 0..outer {
                        for ch in 0..channels {
                            let base = (o * channels + ch) * inner;
                            let is = inv_std[ch];
                            for i in 0..inner {
                                dx[base + i] = dxhat[base + i] * is;
                            }
                        }
                    }
                }
                sink.accumulate(x, &dx);

                if let Some((scale, shift)) = affine {
                    let mut dscale = vec![0.0; channels];
                    let mut dshift = vec![0.0; channels];
                    for o in 0..outer {
                        for ch in 0..channels {
                            let base = (o * channels + ch) * inner;
                            for i in 0..inner {
                                dscale[ch] += g[base + i] * normalized[base + i];
                                dshift[ch] += g[base + i];
                            }
                        }
                    }
                    sink.accumulate(scale, &dscale);
                    sink.accumulate(shift, &dshift);
                }
            }),
            "batchnorm",
        )
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean softmax cross-entropy over the batch: logits [b, k], one label
    /// index per row.
    pub fn softmax_cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "softmax_cross_entropy",
                expected: "[b, k]".into(),
                actual: format!("{ls:?}"),
            });
        }
        let (b, k) = (ls[0], ls[1]);
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                context: "softmax_cross_entropy",
                expected: format!("{b} labels"),
                actual: format!("{}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &data[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row.iter()) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in probs[r * k..(r + 1) * k].iter_mut() {
                *p /= denom;
            }
            loss -= (probs[r * k + labels[r]]).ln();
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        let req = self.requires_grad(logits);
        self.push_op(
            Array::scalar(loss),
            req,
            Box::new(move |g, _vals, sink| {
                let scale = g[0] / b as f64;
                let mut dl = probs.clone();
                for r in 0..b {
                    dl[r * k + labels[r]] -= 1.0;
                }
                for v in dl.iter_mut() {
                    *v *= scale;
                }
                sink.accumulate(logits, &dl);
            }),
            "softmax_cross_entropy",
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// with `requires_grad` reachable from the loss; the graph is consumed.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; n];
        slots[loss.id] = Some(vec![1.0]);

        // Split node storage so closures can read values while grads mutate.
        let nodes = std::mem::take(&mut self.nodes);
        let mut values: Vec<Array> = Vec::with_capacity(n);
        let mut backs: Vec<Option<BackwardFn>> = Vec::with_capacity(n);
        let mut requires: Vec<bool> = Vec::with_capacity(n);
        for node in nodes {
            values.push(node.value);
            backs.push(node.backward);
            requires.push(node.requires_grad);
        }
        let numels: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        for id in (0..n).rev() {
            let Some(back) = backs[id].as_ref() else {
                continue;
            };
            let Some(out_grad) = slots[id].take() else {
                continue;
            };
            {
                let vals = NodeValues(&values);
                let mut sink = GradSink {
                    requires: &requires,
                    numels: &numels,
                    slots: &mut slots,
                };
                back(&out_grad, &vals, &mut sink);
            }
            if requires[id] {
                slots[id] = Some(out_grad);
            }
        }
        self.grads = slots
            .iter_mut()
            .enumerate()
            .map(|(id, s)| {
                s.take()
                    .map(|v| Array::from_vec(values[id].shape(), v).unwrap())
            })
            .collect();
        self.nodes = values
            .into_iter()
            .zip(backs)
            .zip(requires)
            .map(|((value, backward), requires_grad)| Node {
                value,
                requires_grad,
                backward,
            })
            .collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[3], vec![1.0, -2.0, 5.0]).unwrap(), true)
            .unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_fails() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(2.0), true).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_on_non_scalar_fails() {
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(1e200), true).unwrap();
        let err = g.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul", .. }));
    }

    #[test]
    fn relu_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true)
            .unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_in_linear_region() {
        let mut g = Graph::new();
        let x = g.leaf(Array::from_vec(&[1], vec![3.0]).unwrap(), true).unwrap();
        let y = g.relu(x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn relu_all_negative_dead_region() {
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[3], vec![-1.0, -5.0, -0.5]).unwrap(), true)
            .unwrap();
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_hand_case_with_gradient_routing() {
        let mut g = Graph::new();
        let x = g
            .leaf(
                Array::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                true,
            )
            .unwrap();
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_break_first_in_row_major_order() {
        let mut g = Graph::new();
        let x = g
            .leaf(
                Array::from_vec(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap(),
                true,
            )
            .unwrap();
        let y = g.maxpool2d(x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_constant_field() {
        let mut g = Graph::new();
        let x = g
            .leaf(Array::full(&[2, 3, 4, 6], 2.5), false)
            .unwrap();
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[1, 1, 3, 4]), false).unwrap();
        assert!(g.maxpool2d(x).is_err());
    }

    #[test]
    fn linear_identity_weight() {
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[1, 2], vec![3.0, -4.0]).unwrap(), false)
            .unwrap();
        let w = g
            .leaf(
                Array::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                false,
            )
            .unwrap();
        let b = g.leaf(Array::zeros(&[2]), false).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -4.0]);
    }

    #[test]
    fn linear_hand_case() {
        // input [1,2], weight [[1,1],[0,1]], bias [0,1] -> [3,3]
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap(), false)
            .unwrap();
        let w = g
            .leaf(
                Array::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap(),
                false,
            )
            .unwrap();
        let b = g
            .leaf(Array::from_vec(&[2], vec![0.0, 1.0]).unwrap(), false)
            .unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_broadcasts_leading_dims() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[3, 12, 512]), false).unwrap();
        let w = g.leaf(Array::zeros(&[2048, 512]), false).unwrap();
        let b = g.leaf(Array::zeros(&[2048]), false).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[3, 12, 2048]);
    }

    #[test]
    fn linear_rejects_dim_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[2, 8]), false).unwrap();
        let w = g.leaf(Array::zeros(&[4, 9]), false).unwrap();
        let b = g.leaf(Array::zeros(&[4]), false).unwrap();
        assert!(matches!(
            g.linear(x, w, b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[2, 3, 4, 4]), false).unwrap();
        let w = g.leaf(Array::zeros(&[5, 3, 3, 3]), false).unwrap();
        let b = g
            .leaf(
                Array::from_vec(&[5], vec![0.5, -1.0, 2.0, 0.0, 3.0]).unwrap(),
                false,
            )
            .unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        for co in 0..5 {
            let expect = [0.5, -1.0, 2.0, 0.0, 3.0][co];
            for bi in 0..2 {
                let plane = &g.value(y).data()[(bi * 5 + co) * 16..(bi * 5 + co + 1) * 16];
                assert!(plane.iter().all(|&v| v == expect));
            }
        }
    }

    #[test]
    fn conv_ones_kernel_counts_window_coverage() {
        // 3x3 input of ones, 3x3 kernel of ones, padding 1:
        // center sees all 9 taps, corners see 4.
        let mut g = Graph::new();
        let x = g.leaf(Array::full(&[1, 1, 3, 3], 1.0), false).unwrap();
        let w = g.leaf(Array::full(&[1, 1, 3, 3], 1.0), false).unwrap();
        let b = g.leaf(Array::zeros(&[1]), false).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(out[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(out[edge], 6.0);
        }
    }

    #[test]
    fn conv_table_shape() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[2, 1, 64, 96]), false).unwrap();
        let w = g.leaf(Array::zeros(&[64, 1, 3, 3]), false).unwrap();
        let b = g.leaf(Array::zeros(&[64]), false).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[2, 64, 64, 96]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[1, 2, 4, 4]), false).unwrap();
        let w = g.leaf(Array::zeros(&[3, 5, 3, 3]), false).unwrap();
        let b = g.leaf(Array::zeros(&[3]), false).unwrap();
        let err = g.conv2d(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[3, 5, 3, 3]"), "{msg}");
    }

    #[test]
    fn temporal_pool_cases() {
        let mut g = Graph::new();
        // constant over time: max + mean = 2c
        let x = g.leaf(Array::full(&[2, 5, 3], 1.5), false).unwrap();
        let y = g.temporal_pool(x).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));
        // single step: 2v
        let x1 = g.leaf(Array::full(&[1, 1, 4], -0.25), false).unwrap();
        let y1 = g.temporal_pool(x1).unwrap();
        assert!(g.value(y1).data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn temporal_pool_table_shape() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[3, 12, 2048]), false).unwrap();
        let y = g.temporal_pool(x).unwrap();
        assert_eq!(g.shape(y), &[3, 2048]);
    }

    #[test]
    fn dropout_eval_is_bit_identical() {
        let mut g = Graph::new();
        let mut r = rng();
        let data: Vec<f64> = (0..64).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let x = g
            .leaf(Array::from_vec(&[64], data.clone()).unwrap(), false)
            .unwrap();
        let y = g.dropout(x, 0.3, Mode::Eval, &mut r).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut g = Graph::new();
        let mut r = rng();
        let x = g.leaf(Array::full(&[10], 2.0), false).unwrap();
        let y = g.dropout(x, 0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(g.value(y).data(), &[2.0; 10]);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut g = Graph::new();
        let mut r = rng();
        let x = g.leaf(Array::full(&[4], 1.0), false).unwrap();
        assert!(g.dropout(x, 1.0, Mode::Train, &mut r).is_err());
    }

    #[test]
    fn dropout_preserves_mean_with_inverted_scaling() {
        let n = 100_000;
        let mut g = Graph::new();
        let mut r = rng();
        let x = g.leaf(Array::full(&[n], 1.0), false).unwrap();
        let y = g.dropout(x, 0.3, Mode::Train, &mut r).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / n as f64;
        // 3 sigma bound for the mean of inverted-dropout samples
        let sigma = (0.3 / 0.7 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn batchnorm1d_hand_case() {
        // batch [[1],[3]] -> [[-1],[+1]] up to eps correction
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap(), false)
            .unwrap();
        let mut run = BnRunning::new(1);
        let y = g
            .batchnorm1d(x, None, &mut run, Mode::Train, 1e-5, 0.1)
            .unwrap();
        let out = g.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-5, "{out:?}");
        assert!((out[1] - 1.0).abs() < 1e-5, "{out:?}");
    }

    #[test]
    fn batchnorm_train_normalizes_groups() {
        let mut g = Graph::new();
        let mut r = rng();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| r.random::<f64>() * 5.0 - 1.0).collect();
        let x = g
            .leaf(Array::from_vec(&[2, 3, 4, 4], data).unwrap(), false)
            .unwrap();
        let mut run = BnRunning::new(3);
        let y = g
            .batchnorm2d(x, None, &mut run, Mode::Train, 1e-5, 0.1)
            .unwrap();
        let out = g.value(y).data();
        let m = 2 * 16;
        for ch in 0..3 {
            let mut s = 0.0;
            let mut ss = 0.0;
            for b in 0..2 {
                for i in 0..16 {
                    let v = out[(b * 3 + ch) * 16 + i];
                    s += v;
                    ss += v * v;
                }
            }
            let mean = s / m as f64;
            let var = ss / m as f64 - mean * mean;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_is_near_identity_on_normalized_input() {
        // zero-mean unit-variance data passes through almost unchanged
        let data = vec![-1.0, 1.0, 1.0, -1.0];
        let mut g = Graph::new();
        let x = g
            .leaf(Array::from_vec(&[4, 1], data.clone()).unwrap(), false)
            .unwrap();
        let mut run = BnRunning::new(1);
        let y = g
            .batchnorm1d(x, None, &mut run, Mode::Train, 1e-5, 0.1)
            .unwrap();
        for (o, i) in g.value(y).data().iter().zip(data.iter()) {
            assert!((o - i).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_train_rejects_batch_of_one() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[1, 4]), false).unwrap();
        let mut run = BnRunning::new(4);
        assert!(g
            .batchnorm1d(x, None, &mut run, Mode::Train, 1e-5, 0.1)
            .is_err());
        // eval mode is fine with a single sample
        assert!(g
            .batchnorm1d(x, None, &mut run, Mode::Eval, 1e-5, 0.1)
            .is_ok());
    }

    #[test]
    fn to_sequence_layout() {
        // [1, 2, 2, 3]: out[t, c*2+f] = in[c, f, t]
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = g
            .leaf(Array::from_vec(&[1, 2, 2, 3], data).unwrap(), false)
            .unwrap();
        let y = g.to_sequence(x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 4]);
        // in[c, f, t] = c*6 + f*3 + t
        for t in 0..3 {
            for c in 0..2 {
                for f in 0..2 {
                    let got = g.value(y).data()[t * 4 + c * 2 + f];
                    assert_eq!(got, (c * 6 + f * 3 + t) as f64);
                }
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_uniform_case() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[2, 4]), true).unwrap();
        let loss = g.softmax_cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(loss).scalar_value() - (4.0f64).ln()).abs() < 1e-12);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap().data();
        // each row: (p - onehot) / b with p = 1/4
        assert!((grad[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad[1] - 0.25 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_accumulate_across_shared_use() {
        // y = x + x => dy/dx = 2
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(3.0), true).unwrap();
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }
}
