//! The recording tape and its primitives.
//!
//! Every primitive evaluates eagerly, appends a node holding its value, and
//! remembers enough of its inputs to run the adjoint later. Nodes are pushed
//! in evaluation order, so reverse index order is a valid reverse
//! topological order for [`Tape::backward`].

use std::collections::BTreeMap;
use std::ops::Range;

use super::kernels::{self, ConvGeom};
use crate::array::Array;
use crate::error::{Error, Result};

/// Probability floor applied before taking logarithms in the KL divergence.
pub const KL_PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Input { requires_grad: bool },
    Constant,
    Param { name: String, full_shape: Vec<usize>, ranges: Vec<Range<usize>> },
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Affine { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Add(Var, Var),
    ChannelAdd { h: Var, x: Var },
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    LogSoftmax { x: Var, probs: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDiv { p: Var, q: Var, pp: Vec<f64>, qq: Vec<f64>, g: Vec<f64> },
    Mse { pred: Var, diff: Vec<f64> },
}

impl Op {
    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input { .. } | Op::Constant | Op::Param { .. })
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Affine { .. } => "batch_norm_fixed",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::ChannelAdd { .. } => "channel_add",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_divergence",
            Op::Mse { .. } => "mse",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct GradientSet {
    params: BTreeMap<String, Array>,
    masks: BTreeMap<String, Vec<bool>>,
    inputs: BTreeMap<Var, Array>,
}

impl GradientSet {
    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.params.iter()
    }

    /// Elements of a parameter that some recorded slice actually read.
    pub fn active_mask(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn input(&self, var: Var) -> Option<&Array> {
        self.inputs.get(&var)
    }

    /// Accumulates another gradient set into this one (sums values, unions masks).
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (name, g) in &other.params {
            match self.params.get_mut(name) {
                Some(acc) => acc.axpy(1.0, g),
                None => {
                    self.params.insert(name.clone(), g.clone());
                }
            }
        }
        for (name, m) in &other.masks {
            match self.masks.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(m).for_each(|(a, b)| *a |= *b),
                None => {
                    self.masks.insert(name.clone(), m.clone());
                }
            }
        }
        for (v, g) in &other.inputs {
            match self.inputs.get_mut(v) {
                Some(acc) => acc.axpy(1.0, g),
                None => {
                    self.inputs.insert(*v, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut().chain(self.inputs.values_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// A single-use record of primitive evaluations.
pub struct Tape {
    nodes: Vec<Node>,
    track_params: bool,
    consumed: bool,
    moments: Vec<Moments>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track_params: true, consumed: false, moments: Vec::new() }
    }

    /// A tape whose parameters are recorded as constants; backward then only
    /// reaches inputs. Used for attack generation.
    pub fn without_param_grads() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    /// Number of recorded primitive operations (leaves excluded).
    pub fn len(&self) -> usize {
        self.nodes.iter().filter(|n| !n.op.is_leaf()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Names of the recorded primitives, in evaluation order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().filter(|n| !n.op.is_leaf()).map(|n| n.op.name()).collect()
    }

    pub fn record_moments(&mut self, m: Moments) {
        self.moments.push(m);
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    pub fn take_moments(&mut self) -> Vec<Moments> {
        std::mem::take(&mut self.moments)
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Array, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Input { requires_grad }, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    /// Records a whole named parameter.
    pub fn param(&mut self, name: &str, value: &Array) -> Result<Var> {
        let ranges: Vec<Range<usize>> = value.shape().iter().map(|&d| 0..d).collect();
        self.param_slice(name, value, &ranges)
    }

    /// Records the sub-block `ranges` of a named parameter. Backward scatters
    /// the slice gradient into a zero array of the full parameter shape.
    pub fn param_slice(&mut self, name: &str, full: &Array, ranges: &[Range<usize>]) -> Result<Var> {
        let value = if ranges.iter().zip(full.shape()).all(|(r, &d)| r.start == 0 && r.end == d)
            && ranges.len() == full.ndim()
        {
            full.clone()
        } else {
            full.slice(ranges)?
        };
        if !self.track_params {
            return self.constant(value);
        }
        let op = Op::Param {
            name: name.to_string(),
            full_shape: full.shape().to_vec(),
            ranges: ranges.to_vec(),
        };
        self.push(value, op, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Array::new(vec![m, n], out)?, Op::MatMul { a, b }, ng)
    }

    /// `x · wᵀ` for `x: [batch, in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape(format!("linear {sx:?} with weight {sw:?}")));
        }
        let (b, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; b * o];
        kernels::matmul_bt_acc(self.value(x).data(), self.value(w).data(), &mut out, b, i, o);
        let ng = self.needs(x) || self.needs(w);
        self.push(Array::new(vec![b, o], out)?, Op::Linear { x, w }, ng)
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(b).shape();
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(Error::Shape(format!("bias {sb:?} for {sx:?}")));
        }
        let (c, s) = (sx[1], sx[2..].iter().product::<usize>());
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[(i / s) % c];
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Array::new(sx, out)?, Op::AddBias { x, b }, ng)
    }

    /// Bias-free 2-D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::Shape(format!("conv2d {sx:?} with kernel {sw:?}")));
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d kernel {sw:?} too large for {sx:?}")))?;
        let (b, cout) = (sx[0], sw[0]);
        let (in_len, p) = (geom.cin * geom.h * geom.w, geom.positions());
        let mut out = vec![0.0; b * cout * p];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        if p == 1 && geom.is_pointwise() {
            // one spatial position: the whole batch is a single product
            kernels::matmul_bt_acc(xd, wd, &mut out, b, geom.patch_len(), cout);
            let ng = self.needs(x) || self.needs(w);
            return self.push(Array::new(vec![b, cout, 1, 1], out)?, Op::Conv2d { x, w, geom }, ng);
        }
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { geom.patch_len() * p }];
        for bi in 0..b {
            let img = &xd[bi * in_len..(bi + 1) * in_len];
            let dst = &mut out[bi * cout * p..(bi + 1) * cout * p];
            if geom.is_pointwise() {
                kernels::matmul_acc(wd, img, dst, cout, geom.patch_len(), p);
            } else {
                kernels::im2col(img, &geom, &mut col);
                kernels::matmul_acc(wd, &col, dst, cout, geom.patch_len(), p);
            }
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(Array::new(vec![b, cout, geom.ho, geom.wo], out)?, Op::Conv2d { x, w, geom }, ng)
    }

    /// Batch normalization using the statistics of the current batch.
    ///
    /// Returns the output and the observed per-channel mean and (biased)
    /// variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (c, s, n) = self.norm_geometry(x, gamma, beta)?;
        let xd = self.value(x).data();
        let batch = xd.len() / (c * s);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                mean[ci] += xd[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                var[ci] += xd[base..base + s].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std, c, s);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.value(x).shape().to_vec();
        let v = self.push(Array::new(shape, out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, ng)?;
        Ok((v, mean, var))
    }

    /// Normalization with fixed (running or recalibrated) statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (c, s, _) = self.norm_geometry(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("{} statistics for {c} channels", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, mean, &inv_std, c, s);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.value(x).shape().to_vec();
        self.push(Array::new(shape, out)?, Op::Affine { x, gamma, beta, xhat, inv_std }, ng)
    }

    fn norm_geometry(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.value(x).shape();
        if sx.len() < 2 {
            return Err(Error::Shape(format!("normalization needs [B, C, ...], got {sx:?}")));
        }
        let c = sx[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("normalization affine params for {c} channels")));
        }
        let s: usize = sx[2..].iter().product();
        Ok((c, s, sx[0] * s))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        c: usize,
        s: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (&v, (h, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ci = (i / s) % c;
            *h = (v - mean[ci]) * inv_std[ci];
            *o = g[ci] * *h + b[ci];
        }
        (xhat, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.axpy(1.0, self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Residual add aligned on the channel axis: `x`'s leading
    /// `min(C_h, C_x)` channels are added onto `h`; the output has `h`'s shape.
    pub fn channel_add(&mut self, h: Var, x: Var) -> Result<Var> {
        let (sh, sx) = (self.value(h).shape().to_vec(), self.value(x).shape().to_vec());
        if sh.len() < 2 || sh.len() != sx.len() || sh[0] != sx[0] || sh[2..] != sx[2..] {
            return Err(Error::Shape(format!("channel_add {sh:?} + {sx:?}")));
        }
        let s: usize = sh[2..].iter().product();
        let m = sh[1].min(sx[1]);
        let mut out = self.value(h).data().to_vec();
        let xd = self.value(x).data();
        for bi in 0..sh[0] {
            let dst = &mut out[bi * sh[1] * s..bi * sh[1] * s + m * s];
            let src = &xd[bi * sx[1] * s..bi * sx[1] * s + m * s];
            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
        }
        let ng = self.needs(h) || self.needs(x);
        self.push(Array::new(sh, out)?, Op::ChannelAdd { h, x }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Array::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        self.push(Array::scalar(s), Op::Mean(x), ng)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool needs 4-d input, got {sx:?}")));
        }
        let s = sx[2] * sx[3];
        let out: Vec<f64> =
            self.value(x).data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
        let ng = self.needs(x);
        self.push(Array::new(vec![sx[0], sx[1]], out)?, Op::GlobalAvgPool(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x)?;
        let out = kernels::log_softmax_rows(self.value(x).data(), rows, cols);
        let probs = out.iter().map(|v| v.exp()).collect();
        let ng = self.needs(x);
        self.push(Array::new(vec![rows, cols], out)?, Op::LogSoftmax { x, probs }, ng)
    }

    /// Mean negative log-likelihood (nats) of integer labels under softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(logits)?;
        if labels.len() != rows {
            return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelRange { label: bad, classes: cols });
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), rows, cols);
        let loss = -labels.iter().enumerate().map(|(r, &l)| logp[r * cols + l]).sum::<f64>() / rows as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let ng = self.needs(logits);
        self.push(Array::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng)
    }

    /// `KL(softmax(p) ‖ softmax(q))` in nats, averaged over rows.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(p)?;
        if self.value(q).shape() != [rows, cols] {
            return Err(Error::Shape(format!(
                "kl_div {:?} vs {:?}",
                self.value(p).shape(),
                self.value(q).shape()
            )));
        }
        if cols < 2 {
            return Err(Error::Invalid("KL divergence needs at least 2 classes".into()));
        }
        let lp = kernels::log_softmax_rows(self.value(p).data(), rows, cols);
        let lq = kernels::log_softmax_rows(self.value(q).data(), rows, cols);
        let floor_ln = KL_PROB_FLOOR.ln();
        let pp: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let qq: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
        let mut total = 0.0;
        // g = ∂KL_row/∂P_k for the floored objective
        let mut g = vec![0.0; rows * cols];
        for i in 0..rows * cols {
            let lpf = if pp[i] >= KL_PROB_FLOOR { lp[i] } else { floor_ln };
            let lqf = if qq[i] >= KL_PROB_FLOOR { lq[i] } else { floor_ln };
            total += pp[i] * (lpf - lqf);
            g[i] = lpf - lqf + if pp[i] >= KL_PROB_FLOOR { 1.0 } else { 0.0 };
        }
        let ng = self.needs(p) || self.needs(q);
        self.push(Array::scalar(total / rows as f64), Op::KlDiv { p, q, pp, qq, g }, ng)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Array) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse {:?} vs {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let diff: Vec<f64> = self.value(pred).data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        let ng = self.needs(pred);
        self.push(Array::scalar(loss), Op::Mse { pred, diff }, ng)
    }

    fn rows_cols(&self, x: Var) -> Result<(usize, usize)> {
        match self.value(x).shape() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("expected [batch, classes], got {s:?}"))),
        }
    }

    /// Backward pass from a scalar output with seed 1.
    pub fn backward_scalar(&mut self, out: Var) -> Result<GradientSet> {
        self.backward(out, &Array::scalar(1.0))
    }

    /// Reverse-mode pass computing gradients of `seed · out` for every
    /// tracked parameter and every input recorded with `requires_grad`.
    pub fn backward(&mut self, out: Var, seed: &Array) -> Result<GradientSet> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(out).shape() != seed.shape() {
            return Err(Error::Shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.clone());
        let mut result = GradientSet::default();

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input { requires_grad } => {
                    if *requires_grad {
                        result.inputs.insert(Var(i), g);
                    }
                }
                Op::Constant => {}
                Op::Param { name, full_shape, ranges } => {
                    let entry = result.params.entry(name.clone()).or_insert_with(|| Array::zeros(full_shape));
                    entry.scatter_add(ranges, &g)?;
                    let mask = result.masks.entry(name.clone()).or_insert_with(|| vec![false; entry.len()]);
                    Array::mark_region(full_shape, ranges, mask);
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if self.needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        kernels::matmul_bt_acc(g.data(), vb.data(), &mut ga, m, n, k);
                        acc(&mut grads, *a, Array::new(vec![m, k], ga)?);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; k * n];
                        kernels::matmul_at_acc(va.data(), g.data(), &mut gb, k, m, n);
                        acc(&mut grads, *b, Array::new(vec![k, n], gb)?);
                    }
                }
                Op::Linear { x, w } => {
                    let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (bsz, inn, o) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                    if self.needs(*x) {
                        let mut gx = vec![0.0; bsz * inn];
                        kernels::matmul_acc(g.data(), vw.data(), &mut gx, bsz, o, inn);
                        acc(&mut grads, *x, Array::new(vec![bsz, inn], gx)?);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0; o * inn];
                        kernels::matmul_at_acc(g.data(), vx.data(), &mut gw, o, bsz, inn);
                        acc(&mut grads, *w, Array::new(vec![o, inn], gw)?);
                    }
                }
                Op::AddBias { x, b } => {
                    let sx = node.value.shape();
                    let (c, s) = (sx[1], sx[2..].iter().product::<usize>());
                    if self.needs(*b) {
                        let mut gb = vec![0.0; c];
                        for (i, v) in g.data().iter().enumerate() {
                            gb[(i / s) % c] += v;
                        }
                        acc(&mut grads, *b, Array::new(vec![c], gb)?);
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Conv2d { x, w, geom } => {
                    let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (bsz, cout) = (vx.shape()[0], vw.shape()[0]);
                    let (in_len, p, pl) = (geom.cin * geom.h * geom.w, geom.positions(), geom.patch_len());
                    let (need_x, need_w) = (self.needs(*x), self.needs(*w));
                    let mut gx = if need_x { vec![0.0; vx.len()] } else { Vec::new() };
                    let mut gw = if need_w { vec![0.0; vw.len()] } else { Vec::new() };
                    if p == 1 && geom.is_pointwise() {
                        if need_w {
                            kernels::matmul_at_acc(g.data(), vx.data(), &mut gw, cout, bsz, pl);
                        }
                        if need_x {
                            kernels::matmul_acc(g.data(), vw.data(), &mut gx, bsz, cout, pl);
                        }
                        if need_x {
                            acc(&mut grads, *x, Array::new(vx.shape().to_vec(), gx)?);
                        }
                        if need_w {
                            acc(&mut grads, *w, Array::new(vw.shape().to_vec(), gw)?);
                        }
                        continue;
                    }
                    let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { pl * p }];
                    let mut dcol = vec![0.0; if geom.is_pointwise() || !need_x { 0 } else { pl * p }];
                    for bi in 0..bsz {
                        let img = &vx.data()[bi * in_len..(bi + 1) * in_len];
                        let gy = &g.data()[bi * cout * p..(bi + 1) * cout * p];
                        if geom.is_pointwise() {
                            if need_w {
                                kernels::matmul_bt_acc(gy, img, &mut gw, cout, p, pl);
                            }
                            if need_x {
                                let dst = &mut gx[bi * in_len..(bi + 1) * in_len];
                                kernels::matmul_at_acc(vw.data(), gy, dst, pl, cout, p);
                            }
                        } else {
                            if need_w {
                                kernels::im2col(img, geom, &mut col);
                                kernels::matmul_bt_acc(gy, &col, &mut gw, cout, p, pl);
                            }
                            if need_x {
                                dcol.iter_mut().for_each(|v| *v = 0.0);
                                kernels::matmul_at_acc(vw.data(), gy, &mut dcol, pl, cout, p);
                                kernels::col2im_acc(&dcol, geom, &mut gx[bi * in_len..(bi + 1) * in_len]);
                            }
                        }
                    }
                    if need_x {
                        acc(&mut grads, *x, Array::new(vx.shape().to_vec(), gx)?);
                    }
                    if need_w {
                        acc(&mut grads, *w, Array::new(vw.shape().to_vec(), gw)?);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let sx = node.value.shape();
                    let (c, s) = (sx[1], sx[2..].iter().product::<usize>());
                    let n = (sx[0] * s) as f64;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (i, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                        let ci = (i / s) % c;
                        sum_g[ci] += gv;
                        sum_gx[ci] += gv * h;
                    }
                    if self.needs(*x) {
                        let gam = self.nodes[gamma.0].value.data();
                        let gx: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(i, (&gv, &h))| {
                                let ci = (i / s) % c;
                                gam[ci] * inv_std[ci] / n * (n * gv - sum_g[ci] - h * sum_gx[ci])
                            })
                            .collect();
                        acc(&mut grads, *x, Array::new(sx.to_vec(), gx)?);
                    }
                    if self.needs(*gamma) {
                        acc(&mut grads, *gamma, Array::new(vec![c], sum_gx)?);
                    }
                    if self.needs(*beta) {
                        acc(&mut grads, *beta, Array::new(vec![c], sum_g)?);
                    }
                }
                Op::Affine { x, gamma, beta, xhat, inv_std } => {
                    let sx = node.value.shape();
                    let (c, s) = (sx[1], sx[2..].iter().product::<usize>());
                    if self.needs(*x) {
                        let gam = self.nodes[gamma.0].value.data();
                        let gx: Vec<f64> = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| {
                                let ci = (i / s) % c;
                                gv * gam[ci] * inv_std[ci]
                            })
                            .collect();
                        acc(&mut grads, *x, Array::new(sx.to_vec(), gx)?);
                    }
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (i, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                        let ci = (i / s) % c;
                        sum_g[ci] += gv;
                        sum_gx[ci] += gv * h;
                    }
                    if self.needs(*gamma) {
                        acc(&mut grads, *gamma, Array::new(vec![c], sum_gx)?);
                    }
                    if self.needs(*beta) {
                        acc(&mut grads, *beta, Array::new(vec![c], sum_g)?);
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::ChannelAdd { h, x } => {
                    if self.needs(*x) {
                        let (sh, sx) = (node.value.shape(), self.nodes[x.0].value.shape());
                        let s: usize = sh[2..].iter().product();
                        let m = sh[1].min(sx[1]);
                        let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                        for bi in 0..sh[0] {
                            let src = &g.data()[bi * sh[1] * s..bi * sh[1] * s + m * s];
                            gx[bi * sx[1] * s..bi * sx[1] * s + m * s].copy_from_slice(src);
                        }
                        acc(&mut grads, *x, Array::new(sx.to_vec(), gx)?);
                    }
                    if self.needs(*h) {
                        acc(&mut grads, *h, g);
                    }
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    acc(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Sum(x) => {
                    let shape = self.nodes[x.0].value.shape();
                    acc(&mut grads, *x, Array::full(shape, g.item()));
                }
                Op::Mean(x) => {
                    let v = &self.nodes[x.0].value;
                    acc(&mut grads, *x, Array::full(v.shape(), g.item() / v.len() as f64));
                }
                Op::GlobalAvgPool(x) => {
                    let sx = self.nodes[x.0].value.shape();
                    let s = sx[2] * sx[3];
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    for (chunk, &gv) in gx.chunks_mut(s).zip(g.data()) {
                        chunk.iter_mut().for_each(|v| *v = gv / s as f64);
                    }
                    acc(&mut grads, *x, Array::new(sx.to_vec(), gx)?);
                }
                Op::LogSoftmax { x, probs } => {
                    let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut gx = g.data().to_vec();
                    for r in 0..rows {
                        let row = &mut gx[r * cols..(r + 1) * cols];
                        let total: f64 = g.data()[r * cols..(r + 1) * cols].iter().sum();
                        for (j, v) in row.iter_mut().enumerate() {
                            *v -= probs[r * cols + j] * total;
                        }
                    }
                    acc(&mut grads, *x, Array::new(vec![rows, cols], gx)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let shape = self.nodes[logits.0].value.shape().to_vec();
                    let (rows, cols) = (shape[0], shape[1]);
                    let scale = g.item() / rows as f64;
                    let mut gx = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        gx[r * cols + l] -= 1.0;
                    }
                    gx.iter_mut().for_each(|v| *v *= scale);
                    acc(&mut grads, *logits, Array::new(shape, gx)?);
                }
                Op::KlDiv { p, q, pp, qq, g: dk } => {
                    let shape = self.nodes[p.0].value.shape().to_vec();
                    let (rows, cols) = (shape[0], shape[1]);
                    let scale = g.item() / rows as f64;
                    if self.needs(*p) {
                        let mut gp = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let o = r * cols;
                            let dot: f64 = (0..cols).map(|k| dk[o + k] * pp[o + k]).sum();
                            for j in 0..cols {
                                gp[o + j] = scale * pp[o + j] * (dk[o + j] - dot);
                            }
                        }
                        acc(&mut grads, *p, Array::new(shape.clone(), gp)?);
                    }
                    if self.needs(*q) {
                        let mut gq = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let o = r * cols;
                            let live: f64 =
                                (0..cols).filter(|&k| qq[o + k] >= KL_PROB_FLOOR).map(|k| pp[o + k]).sum();
                            for j in 0..cols {
                                let own = if qq[o + j] >= KL_PROB_FLOOR { pp[o + j] } else { 0.0 };
                                gq[o + j] = scale * (qq[o + j] * live - own);
                            }
                        }
                        acc(&mut grads, *q, Array::new(shape, gq)?);
                    }
                }
                Op::Mse { pred, diff } => {
                    let shape = self.nodes[pred.0].value.shape().to_vec();
                    let scale = 2.0 * g.item() / diff.len() as f64;
                    let gx = diff.iter().map(|d| d * scale).collect();
                    acc(&mut grads, *pred, Array::new(shape, gx)?);
                }
            }
        }
        Ok(result)
    }
}

fn acc(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}
