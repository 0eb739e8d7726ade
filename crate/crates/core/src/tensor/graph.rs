//! Reverse-mode tape.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in execution order.
//! [`Graph::backward`] walks the tape in reverse and leaves the gradient of
//! every `requires_grad` leaf retrievable with [`Graph::grad`].

use super::conv::{self, Geom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    graph: u64,
}

/// Per-channel statistics of one training-mode batch-norm call. `var` is the
/// unbiased estimate, which is what running statistics track.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Exponential moving averages used by batch norm at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + momentum * b;
        }
    }
}

/// Which statistics batch norm normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T: Scalar> {
    Train,
    Infer { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: Geom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: Geom,
    },
    Depthwise {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: Geom,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Silu {
        x: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    ScaleChannels {
        x: usize,
        gate: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Bce {
        pred: usize,
        target: usize,
        eps: T,
    },
    L2 {
        params: Vec<usize>,
        lambda: T,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    released: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &Tensor<impl Scalar>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
}

fn dims2(t: &Tensor<impl Scalar>, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, f] => Ok([n, f]),
        ref s => Err(Error::shape(op, format!("expected 2-d input, got {s:?}"))),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            released: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            idx: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn parameter(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "Var used with a different graph");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        assert_eq!(v.graph, self.id, "Var used with a different graph");
        let g = self.grads[v.idx].as_ref()?;
        Some(Tensor::from_parts(
            self.nodes[v.idx].value.shape().to_vec(),
            g.clone(),
        ))
    }

    /// Copies the gradient of `v` into `target.grad`.
    pub fn write_grad(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.grads.get(v.idx).and_then(|g| g.as_ref()) {
            Some(g) => target.set_grad(g.clone()),
            None => {
                target.set_grad(vec![T::zero(); target.numel()])?;
                Ok(())
            }
        }
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        if self.released {
            return Err(Error::GraphReleased);
        }
        for v in vars {
            if v.graph != self.id || v.idx >= self.nodes.len() {
                return Err(Error::NotAttached);
            }
        }
        Ok(())
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var {
            idx: self.nodes.len() - 1,
            graph: self.id,
        })
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.idx].value
    }

    fn bias_check(&self, b: Option<Var>, len: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            if self.val(b).numel() != len {
                return Err(Error::shape(
                    op,
                    format!("bias has {} entries, expected {len}", self.val(b).numel()),
                ));
            }
        }
        Ok(())
    }

    /// 2-d convolution. `w` is `[out_c, in_c, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(&[x, w])?;
        if let Some(b) = b {
            self.check(&[b])?;
        }
        let [n, c, h, wd] = dims4(self.val(x), "conv2d")?;
        let [o, ci, kh, kw] = dims4(self.val(w), "conv2d")?;
        if c != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {ci}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        self.bias_check(b, o, "conv2d")?;
        let (Some(out_h), Some(out_w)) = (
            Geom::out_extent(h, kh, stride, pad),
            Geom::out_extent(wd, kw, stride, pad),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        };
        let geom = Geom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let xd = self.val(x).data();
        let wdat = self.val(w).data();
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        for i in 0..n {
            let xi = &xd[i * c * h * wd..(i + 1) * c * h * wd];
            let src: &[T] = if geom.is_pointwise() {
                xi
            } else {
                conv::im2col(xi, &geom, &mut cols);
                &cols
            };
            T::gemm(
                o,
                k,
                p,
                wdat,
                false,
                src,
                false,
                T::zero(),
                &mut out[i * o * p..(i + 1) * o * p],
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.val(b).data(), n, o, p);
        }
        let mut inputs = vec![x.idx, w.idx];
        inputs.extend(b.map(|b| b.idx));
        let value = Tensor::from_parts(vec![n, o, out_h, out_w], out);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: x.idx,
                w: w.idx,
                b: b.map(|b| b.idx),
                geom,
            },
            &inputs,
        )
    }

    /// Transposed convolution without padding: the adjoint of
    /// [`conv2d`](Self::conv2d) with the same kernel. `w` is
    /// `[in_c, out_c, kh, kw]` and the output extent is `(H - 1) * stride + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        self.check(&[x, w])?;
        if let Some(b) = b {
            self.check(&[b])?;
        }
        let [n, a, h, wd] = dims4(self.val(x), "conv_transpose2d")?;
        let [wa, o, kh, kw] = dims4(self.val(w), "conv_transpose2d")?;
        if wa != a {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {a} channels, kernel expects {wa}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv_transpose2d stride must be >= 1".into(),
            ));
        }
        self.bias_check(b, o, "conv_transpose2d")?;
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        // Geometry of the forward conv this op is the adjoint of.
        let geom = Geom {
            channels: o,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            pad: 0,
            out_h: h,
            out_w: wd,
        };
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let xd = self.val(x).data();
        let wdat = self.val(w).data();
        let mut out = vec![T::zero(); n * o * oh * ow];
        let mut cols = vec![T::zero(); k * p];
        for i in 0..n {
            let xi = &xd[i * a * p..(i + 1) * a * p];
            T::gemm(k, a, p, wdat, true, xi, false, T::zero(), &mut cols);
            conv::col2im(
                &cols,
                &geom,
                &mut out[i * o * oh * ow..(i + 1) * o * oh * ow],
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.val(b).data(), n, o, oh * ow);
        }
        let mut inputs = vec![x.idx, w.idx];
        inputs.extend(b.map(|b| b.idx));
        let value = Tensor::from_parts(vec![n, o, oh, ow], out);
        let op = Op::ConvTranspose2d {
            x: x.idx,
            w: w.idx,
            b: b.map(|b| b.idx),
            geom,
        };
        self.push("conv_transpose2d", value, op, &inputs)
    }

    /// Per-channel convolution. `w` is `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(&[x, w])?;
        if let Some(b) = b {
            self.check(&[b])?;
        }
        let [n, c, h, wd] = dims4(self.val(x), "depthwise_conv2d")?;
        let [wc, one, kh, kw] = dims4(self.val(w), "depthwise_conv2d")?;
        if wc != c || one != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel {:?} for {c} channels", self.val(w).shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "depthwise_conv2d stride must be >= 1".into(),
            ));
        }
        self.bias_check(b, c, "depthwise_conv2d")?;
        let (Some(out_h), Some(out_w)) = (
            Geom::out_extent(h, kh, stride, pad),
            Geom::out_extent(wd, kw, stride, pad),
        ) else {
            return Err(Error::shape(
                "depthwise_conv2d",
                "kernel larger than padded input",
            ));
        };
        let geom = Geom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let xd = self.val(x).data();
        let wdat = self.val(w).data();
        let (isz, osz) = (c * h * wd, c * out_h * out_w);
        let mut out = vec![T::zero(); n * osz];
        for i in 0..n {
            conv::depthwise_forward(
                &xd[i * isz..(i + 1) * isz],
                wdat,
                &geom,
                &mut out[i * osz..(i + 1) * osz],
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.val(b).data(), n, c, out_h * out_w);
        }
        let mut inputs = vec![x.idx, w.idx];
        inputs.extend(b.map(|b| b.idx));
        let value = Tensor::from_parts(vec![n, c, out_h, out_w], out);
        self.push(
            "depthwise_conv2d",
            value,
            Op::Depthwise {
                x: x.idx,
                w: w.idx,
                b: b.map(|b| b.idx),
                geom,
            },
            &inputs,
        )
    }

    /// Max pooling with floor semantics. Ties resolve to the first cell in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.check(&[x])?;
        let [n, c, h, w] = dims4(self.val(x), "max_pool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "max_pool2d window and stride must be >= 1".into(),
            ));
        }
        if window > h || window > w {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {window} exceeds spatial extent {h}x{w}"),
            ));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * stride * w + oj * stride;
                    for di in 0..window {
                        for dj in 0..window {
                            let idx = base + (oi * stride + di) * w + oj * stride + dj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.push(
            "max_pool2d",
            value,
            Op::MaxPool { x: x.idx, argmax },
            &[x.idx],
        )
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let [n, c, h, w] = dims4(self.val(x), "global_avg_pool")?;
        let count = T::from_f64((h * w) as f64);
        let out = self
            .val(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / count)
            .collect();
        let value = Tensor::from_parts(vec![n, c], out);
        self.push(
            "global_avg_pool",
            value,
            Op::GlobalAvgPool { x: x.idx },
            &[x.idx],
        )
    }

    /// Batch normalization over `[N, C, H, W]`. In training mode the batch
    /// statistics are returned so the caller can fold them into its running
    /// averages.
    pub fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check(&[x, gamma, beta])?;
        let [n, c, h, w] = dims4(self.val(x), "batch_norm")?;
        if self.val(gamma).numel() != c || self.val(beta).numel() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must have {c} entries"),
            ));
        }
        if !(eps > T::zero()) {
            return Err(Error::InvalidArgument("batch_norm eps must be > 0".into()));
        }
        let hw = h * w;
        let count = n * hw;
        let xd = self.val(x).data();
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                    *m = s / T::from_f64(count as f64);
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &val in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            let d = val - *m;
                            sq += d * d;
                        }
                    }
                    *v = sq / T::from_f64(count as f64);
                }
                let unbiased = if count > 1 {
                    let f = T::from_f64(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        "running statistics length differs from channel count",
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let gd = self.val(gamma).data();
        let bd = self.val(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let z = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = z;
                    out[j] = gd[ch] * z + bd[ch];
                }
            }
        }
        let train = matches!(mode, BnMode::Train);
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let op = Op::BatchNorm {
            x: x.idx,
            gamma: gamma.idx,
            beta: beta.idx,
            xhat,
            inv_std,
            train,
        };
        let v = self.push("batch_norm", value, op, &[x.idx, gamma.idx, beta.idx])?;
        Ok((v, stats))
    }

    /// Batch normalization that also maintains `running` (training mode
    /// updates it with `momentum`; inference mode reads it).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        train: bool,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        if train {
            let (v, stats) = self.batch_norm_with(x, gamma, beta, BnMode::Train, eps)?;
            if let Some(stats) = stats {
                running.update(&stats, momentum);
            }
            Ok(v)
        } else {
            let mode = BnMode::Infer {
                mean: &running.mean,
                var: &running.var,
            };
            Ok(self.batch_norm_with(x, gamma, beta, mode, eps)?.0)
        }
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(&[x])?;
        let t = self.val(x);
        let value =
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(name, value, op, &[x.idx])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu { x: x.idx },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x: x.idx })
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu { x: x.idx })
    }

    /// `[N, F] x [F, K] + [K]`
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(&[x, w, b])?;
        let [n, f] = dims2(self.val(x), "dense")?;
        let [wf, k] = dims2(self.val(w), "dense")?;
        if wf != f {
            return Err(Error::shape(
                "dense",
                format!("input has {f} features, weight expects {wf}"),
            ));
        }
        if self.val(b).numel() != k {
            return Err(Error::shape("dense", format!("bias must have {k} entries")));
        }
        let mut out = vec![T::zero(); n * k];
        T::gemm(
            n,
            f,
            k,
            self.val(x).data(),
            false,
            self.val(w).data(),
            false,
            T::zero(),
            &mut out,
        );
        let bd = self.val(b).data();
        for row in out.chunks_mut(k) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(vec![n, k], out);
        self.push(
            "dense",
            value,
            Op::Dense {
                x: x.idx,
                w: w.idx,
                b: b.idx,
            },
            &[x.idx, w.idx, b.idx],
        )
    }

    /// Inverted dropout. Identity when `!train` or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        self.check(&[x])?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let t = self.val(x);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("dropout", value, Op::Dropout { x: x.idx, mask }, &[x.idx])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.same_shape(a, b, "add")?;
        let out = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.val(a).shape().to_vec(), out);
        self.push(
            "add",
            value,
            Op::Add { a: a.idx, b: b.idx },
            &[a.idx, b.idx],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.same_shape(a, b, "mul")?;
        let out = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.val(a).shape().to_vec(), out);
        self.push(
            "mul",
            value,
            Op::Mul { a: a.idx, b: b.idx },
            &[a.idx, b.idx],
        )
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let [n, ca, h, w] = dims4(self.val(a), "concat_channels")?;
        let [nb, cb, hb, wb] = dims4(self.val(b), "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&ad[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&bd[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::from_parts(vec![n, ca + cb, h, w], out);
        self.push(
            "concat_channels",
            value,
            Op::ConcatChannels { a: a.idx, b: b.idx },
            &[a.idx, b.idx],
        )
    }

    /// Multiplies every `[H, W]` plane of `x` by the matching entry of the
    /// `[N, C]` gate.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        self.check(&[x, gate])?;
        let [n, c, h, w] = dims4(self.val(x), "scale_channels")?;
        if self.val(gate).shape() != [n, c] {
            return Err(Error::shape(
                "scale_channels",
                format!(
                    "gate {:?} for input {:?}",
                    self.val(gate).shape(),
                    [n, c, h, w]
                ),
            ));
        }
        let gd = self.val(gate).data();
        let out = self
            .val(x)
            .data()
            .chunks(h * w)
            .zip(gd)
            .flat_map(|(plane, &g)| plane.iter().map(move |&v| v * g))
            .collect();
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(
            "scale_channels",
            value,
            Op::ScaleChannels {
                x: x.idx,
                gate: gate.idx,
            },
            &[x.idx, gate.idx],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let s = self.val(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x: x.idx }, &[x.idx])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.val(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { x: x.idx }, &[x.idx])
    }

    /// Mean binary cross-entropy. Predictions are clamped to
    /// `[eps, 1 - eps]`; the clamp passes no gradient.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.bce_loss_eps(pred, target, T::from_f64(1e-7))
    }

    pub fn bce_loss_eps(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        self.check(&[pred, target])?;
        self.same_shape(pred, target, "bce_loss")?;
        let (pd, td) = (self.val(pred).data(), self.val(target).data());
        let hi = T::one() - eps;
        let total: T = pd
            .iter()
            .zip(td)
            .map(|(&p, &t)| {
                let p = p.max(eps).min(hi);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        let loss = total / T::from_f64(pd.len() as f64);
        self.push(
            "bce_loss",
            Tensor::scalar(loss),
            Op::Bce {
                pred: pred.idx,
                target: target.idx,
                eps,
            },
            &[pred.idx],
        )
    }

    /// `lambda * sum(w^2)` over all given tensors.
    pub fn l2_penalty(&mut self, params: &[Var], lambda: T) -> Result<Var> {
        self.check(params)?;
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument("l2 lambda must be >= 0".into()));
        }
        let s: T = params
            .iter()
            .flat_map(|p| self.val(*p).data().iter().map(|&v| v * v))
            .sum();
        let idx: Vec<usize> = params.iter().map(|p| p.idx).collect();
        self.push(
            "l2_penalty",
            Tensor::scalar(lambda * s),
            Op::L2 {
                params: idx.clone(),
                lambda,
            },
            &idx,
        )
    }

    /// Back-propagates from a scalar and releases the tape's saved buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, false)
    }

    /// Back-propagates from a scalar, keeping the tape usable for further
    /// passes. Each pass replaces (does not accumulate) leaf gradients.
    pub fn backward_retain(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, true)
    }

    fn run_backward(&mut self, loss: Var, retain: bool) -> Result<()> {
        if loss.graph != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::NotAttached);
        }
        if self.released {
            return Err(Error::GraphReleased);
        }
        if self.nodes[loss.idx].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got {:?}",
                    self.nodes[loss.idx].value.shape()
                ),
            ));
        }
        if !self.nodes[loss.idx].requires_grad {
            return Err(Error::NotAttached);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![T::one()]);
        for slot in self.grads.iter_mut() {
            *slot = None;
        }
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            } else {
                self.backprop_node(i, &g, &mut grads);
            }
        }
        if !retain {
            for node in &mut self.nodes {
                match &mut node.op {
                    Op::MaxPool { argmax, .. } => *argmax = Vec::new(),
                    Op::BatchNorm { xhat, .. } => *xhat = Vec::new(),
                    Op::Dropout { mask, .. } => *mask = Vec::new(),
                    _ => {}
                }
            }
            self.released = true;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = Acc { grads, nodes };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let [n, c, h, wd] = dims4(&nodes[*x].value, "").unwrap();
                let o = nodes[*w].value.shape()[0];
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let (xd, wdat) = (val(*x), val(*w));
                let mut cols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); k * p]
                };
                let mut dcols = vec![T::zero(); k * p];
                let isz = c * h * wd;
                for s in 0..n {
                    let gs = &g[s * o * p..(s + 1) * o * p];
                    if want(*w) {
                        let xi = &xd[s * isz..(s + 1) * isz];
                        let src: &[T] = if geom.is_pointwise() {
                            xi
                        } else {
                            conv::im2col(xi, geom, &mut cols);
                            &cols
                        };
                        acc.with(*w, |dw| {
                            T::gemm(o, p, k, gs, false, src, true, T::one(), dw)
                        });
                    }
                    if want(*x) {
                        if geom.is_pointwise() {
                            acc.with(*x, |dx| {
                                T::gemm(
                                    k,
                                    o,
                                    p,
                                    wdat,
                                    true,
                                    gs,
                                    false,
                                    T::one(),
                                    &mut dx[s * isz..(s + 1) * isz],
                                )
                            });
                        } else {
                            T::gemm(k, o, p, wdat, true, gs, false, T::zero(), &mut dcols);
                            acc.with(*x, |dx| {
                                conv::col2im(&dcols, geom, &mut dx[s * isz..(s + 1) * isz])
                            });
                        }
                    }
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    acc.with(b, |db| channel_bias_grad(g, db, n, o, p));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let [n, a, h, wd] = dims4(&nodes[*x].value, "").unwrap();
                let o = geom.channels;
                let (k, p) = (geom.col_rows(), geom.col_cols());
                debug_assert_eq!(p, h * wd);
                let (xd, wdat) = (val(*x), val(*w));
                let osz = o * geom.height * geom.width;
                let mut dcols = vec![T::zero(); k * p];
                for s in 0..n {
                    conv::im2col(&g[s * osz..(s + 1) * osz], geom, &mut dcols);
                    if want(*x) {
                        acc.with(*x, |dx| {
                            T::gemm(
                                a,
                                k,
                                p,
                                wdat,
                                false,
                                &dcols,
                                false,
                                T::one(),
                                &mut dx[s * a * p..(s + 1) * a * p],
                            )
                        });
                    }
                    if want(*w) {
                        let xs = &xd[s * a * p..(s + 1) * a * p];
                        acc.with(*w, |dw| {
                            T::gemm(a, p, k, xs, false, &dcols, true, T::one(), dw)
                        });
                    }
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    acc.with(b, |db| {
                        channel_bias_grad(g, db, n, o, geom.height * geom.width)
                    });
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let n = nodes[*x].value.shape()[0];
                let c = geom.channels;
                let (isz, osz) = (c * geom.height * geom.width, c * geom.out_h * geom.out_w);
                let (xd, wdat) = (val(*x), val(*w));
                let mut dx = want(*x).then(|| vec![T::zero(); xd.len()]);
                let mut dw = want(*w).then(|| vec![T::zero(); wdat.len()]);
                for s in 0..n {
                    conv::depthwise_backward(
                        &xd[s * isz..(s + 1) * isz],
                        wdat,
                        &g[s * osz..(s + 1) * osz],
                        geom,
                        dx.as_mut().map(|d| &mut d[s * isz..(s + 1) * isz]),
                        dw.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    acc.add(*x, &dx);
                }
                if let Some(dw) = dw {
                    acc.add(*w, &dw);
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    acc.with(b, |db| {
                        channel_bias_grad(g, db, n, c, geom.out_h * geom.out_w)
                    });
                }
            }
            Op::MaxPool { x, argmax } => acc.with(*x, |dx| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
            }),
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = dims4(&nodes[*x].value, "").unwrap();
                let inv = T::one() / T::from_f64((h * w) as f64);
                acc.with(*x, |dx| {
                    for (plane, &gv) in dx.chunks_mut(h * w).zip(g) {
                        for d in plane {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = dims4(&nodes[*x].value, "").unwrap();
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let gd = val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for j in off..off + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if want(*gamma) {
                    acc.add(*gamma, &sum_gx);
                }
                if want(*beta) {
                    acc.add(*beta, &sum_g);
                }
                if want(*x) {
                    acc.with(*x, |dx| {
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * hw;
                                let k = gd[ch] * inv_std[ch];
                                for j in off..off + hw {
                                    dx[j] += if *train {
                                        k / m * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch])
                                    } else {
                                        k * g[j]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            Op::Relu { x } => acc.with(*x, |dx| {
                for ((d, &xv), &gv) in dx.iter_mut().zip(val(*x)).zip(g) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }),
            Op::Sigmoid { x } => acc.with(*x, |dx| {
                for ((d, &y), &gv) in dx.iter_mut().zip(nodes[i].value.data()).zip(g) {
                    *d += gv * y * (T::one() - y);
                }
            }),
            Op::Silu { x } => acc.with(*x, |dx| {
                for ((d, &xv), &gv) in dx.iter_mut().zip(val(*x)).zip(g) {
                    let s = sigmoid(xv);
                    *d += gv * s * (T::one() + xv * (T::one() - s));
                }
            }),
            Op::Dense { x, w, b } => {
                let [n, f] = dims2(&nodes[*x].value, "").unwrap();
                let k = nodes[*w].value.shape()[1];
                if want(*x) {
                    acc.with(*x, |dx| {
                        T::gemm(n, k, f, g, false, val(*w), true, T::one(), dx)
                    });
                }
                if want(*w) {
                    acc.with(*w, |dw| {
                        T::gemm(f, n, k, val(*x), true, g, false, T::one(), dw)
                    });
                }
                if want(*b) {
                    acc.with(*b, |db| {
                        for row in g.chunks(k) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => acc.with(*x, |dx| {
                for ((d, &m), &gv) in dx.iter_mut().zip(mask).zip(g) {
                    *d += gv * m;
                }
            }),
            Op::Add { a, b } => {
                acc.add(*a, g);
                acc.add(*b, g);
            }
            Op::Mul { a, b } => {
                for (j, other) in [(*a, *b), (*b, *a)] {
                    acc.with(j, |dj| {
                        for ((d, &o), &gv) in dj.iter_mut().zip(val(other)).zip(g) {
                            *d += gv * o;
                        }
                    });
                }
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = dims4(&nodes[*a].value, "").unwrap();
                let cb = nodes[*b].value.shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                acc.with(*a, |da| {
                    for s in 0..n {
                        let gs = &g[s * (sa + sb)..s * (sa + sb) + sa];
                        for (d, &gv) in da[s * sa..(s + 1) * sa].iter_mut().zip(gs) {
                            *d += gv;
                        }
                    }
                });
                acc.with(*b, |db| {
                    for s in 0..n {
                        let gs = &g[s * (sa + sb) + sa..(s + 1) * (sa + sb)];
                        for (d, &gv) in db[s * sb..(s + 1) * sb].iter_mut().zip(gs) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::ScaleChannels { x, gate } => {
                let [_, _, h, w] = dims4(&nodes[*x].value, "").unwrap();
                let hw = h * w;
                let (xd, gd) = (val(*x), val(*gate));
                acc.with(*x, |dx| {
                    for ((dplane, gplane), &gv) in dx.chunks_mut(hw).zip(g.chunks(hw)).zip(gd) {
                        for (d, &u) in dplane.iter_mut().zip(gplane) {
                            *d += u * gv;
                        }
                    }
                });
                acc.with(*gate, |dgate| {
                    for ((d, xplane), gplane) in
                        dgate.iter_mut().zip(xd.chunks(hw)).zip(g.chunks(hw))
                    {
                        *d += xplane.iter().zip(gplane).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::Sum { x } => acc.with(*x, |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean { x } => {
                let scale = g[0] / T::from_f64(nodes[*x].value.numel() as f64);
                acc.with(*x, |dx| {
                    for d in dx.iter_mut() {
                        *d += scale;
                    }
                });
            }
            Op::Bce { pred, target, eps } => {
                let (pd, td) = (val(*pred), val(*target));
                let scale = g[0] / T::from_f64(pd.len() as f64);
                let hi = T::one() - *eps;
                acc.with(*pred, |dp| {
                    for ((d, &p), &t) in dp.iter_mut().zip(pd).zip(td) {
                        if p > *eps && p < hi {
                            *d += scale * (p - t) / (p * (T::one() - p));
                        }
                    }
                });
            }
            Op::L2 { params, lambda } => {
                let two = T::from_f64(2.0) * *lambda * g[0];
                for &j in params {
                    acc.with(j, |dj| {
                        for (d, &v) in dj.iter_mut().zip(val(j)) {
                            *d += two * v;
                        }
                    });
                }
            }
        }
    }
}

/// Lazily allocated gradient accumulators for one backward sweep. Updates
/// to nodes that do not require gradients are skipped.
struct Acc<'a, T: Scalar> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Scalar> Acc<'_, T> {
    fn with(&mut self, j: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[j].requires_grad {
            return;
        }
        let len = self.nodes[j].value.numel();
        f(self.grads[j].get_or_insert_with(|| vec![T::zero(); len]));
    }

    fn add(&mut self, j: usize, delta: &[T]) {
        self.with(j, |d| {
            for (a, &b) in d.iter_mut().zip(delta) {
                *a += b;
            }
        });
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for s in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            let off = (s * c + ch) * plane;
            for v in &mut out[off..off + plane] {
                *v += bv;
            }
        }
    }
}

fn channel_bias_grad<T: Scalar>(g: &[T], db: &mut [T], n: usize, c: usize, plane: usize) {
    for s in 0..n {
        for (ch, d) in db.iter_mut().enumerate().take(c) {
            let off = (s * c + ch) * plane;
            *d += g[off..off + plane].iter().copied().sum::<T>();
        }
    }
}
