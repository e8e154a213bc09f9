use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ChannelBias(Var, Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Square(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Upsample2x(Var),
    BroadcastBatch(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ModConv {
        x: Var,
        w: Var,
        style: Var,
        demod: bool,
        eps: f64,
    },
    CosineGram(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ChannelBias(a, b) | MatMul(a, b) => vec![a, b],
            Scale(a, _) | AddScalar(a) | LeakyRelu(a, _) | Abs(a) | Square(a) | Softplus(a)
            | Sum(a) | Mean(a) | Transpose(a) | Reshape(a) | Upsample2x(a) | CosineGram(a)
            | BroadcastBatch(a, _) => {
                vec![a]
            }
            Conv2d { x, w, .. } => vec![x, w],
            ModConv { x, w, style, .. } => vec![x, w, style],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so every operation's inputs precede
/// it and a reverse sweep is a valid topological order for backpropagation.
/// A graph is meant to be confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss w.r.t. every leaf registered with
/// `requires_grad`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient out; panics if `v` is not a `requires_grad` leaf.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Incompatible {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn dim_eq(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(TensorError::DimMismatch {
            op,
            dim,
            expected,
            actual,
        });
    }
    Ok(())
}

fn leaky_slope(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            assert!(value.is_finite(), "non-finite output from {op:?} on finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Mul(a, b), "mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::Scale(a, k), a, |x| x * k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::AddScalar(a), a, |x| x + k)
    }

    /// Adds `bias[c]` to every element of channel `c` of `x`, where the
    /// channel axis is axis 1 of `x` (`[B, C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() < 2 {
            return Err(TensorError::Rank {
                op: "add_channel_bias",
                expected: 2,
                shape: tx.shape().to_vec(),
            });
        }
        expect_rank("add_channel_bias", tb, 1)?;
        let c = tx.shape()[1];
        dim_eq("add_channel_bias", "channels", c, tb.shape()[0])?;
        let inner: usize = tx.shape()[2..].iter().product();
        let mut out = tx.clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[(idx / inner) % c];
        }
        Ok(self.push(out, Op::ChannelBias(x, bias)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Op::LeakyRelu(x, slope), x, |v| v * leaky_slope(v, slope))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Op::Abs(x), x, f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Op::Square(x), x, |v| v * v)
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Op::Softplus(x), x, softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        dim_eq("matmul", "inner", k, tb.shape()[0])?;
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        expect_rank("transpose", ta, 2)?;
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// `x [B, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Stacks `batch` copies of `x` along a new leading axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let tx = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(tx.shape());
        let data = tx.data().repeat(batch);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::BroadcastBatch(x, batch)))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("upsample2x", tx, 4)?;
        let &[b, c, h, w] = tx.shape() else { unreachable!() };
        let mut out = vec![0.0; b * c * h * w * 4];
        let src = tx.data();
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h * w * 4..(plane + 1) * h * w * 4];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(out, Op::Upsample2x(x)))
    }

    /// Cross-correlation with zero padding. `x` is `[B, C_in, H, W]` or a
    /// single image `[C_in, H, W]`; `w` is `[C_out, C_in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let single = self.value(x).rank() == 3;
        let x4 = if single { self.unsqueeze0(x)? } else { x };
        let (geom, b, c_out) = self.conv_geom("conv2d", x4, w, stride, pad)?;
        let (tx, tw) = (self.value(x4), self.value(w));
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let in_len = geom.c_in * geom.h * geom.w;
        let out_len = c_out * oh * ow;
        let mut out = vec![0.0; b * out_len];
        let mut scratch = Vec::new();
        for s in 0..b {
            kernels::conv_forward(
                &tx.data()[s * in_len..(s + 1) * in_len],
                tw.data(),
                c_out,
                &geom,
                &mut out[s * out_len..(s + 1) * out_len],
                &mut scratch,
            );
        }
        let out = Tensor::new(vec![b, c_out, oh, ow], out)?;
        let y = self.push(out, Op::Conv2d { x: x4, w, stride, pad });
        if single {
            self.squeeze0(y)
        } else {
            Ok(y)
        }
    }

    /// Style-modulated convolution with `'same'` padding.
    ///
    /// The kernel for sample `b` is `w[o,i,..] · style[b,i]`; with `demod`
    /// each output filter is then divided by `sqrt(Σ kernel² + eps)`.
    /// `style` is `[B, C_in]` (or `[C_in]` for a single `[C_in, H, W]` image).
    pub fn modulated_conv2d(&mut self, x: Var, w: Var, style: Var, demod: bool, eps: f64) -> Result<Var> {
        let single = self.value(x).rank() == 3;
        let (x4, s2) = if single {
            let x4 = self.unsqueeze0(x)?;
            let n = self.value(style).numel();
            let s2 = self.reshape(style, &[1, n])?;
            (x4, s2)
        } else {
            (x, style)
        };
        let k = self.value(w).shape().get(2).copied().unwrap_or(1);
        let (geom, b, c_out) = self.conv_geom("modulated_conv2d", x4, w, 1, k / 2)?;
        let ts = self.value(s2);
        expect_rank("modulated_conv2d", ts, 2)?;
        dim_eq("modulated_conv2d", "style batch", b, ts.shape()[0])?;
        dim_eq("modulated_conv2d", "style length", geom.c_in, ts.shape()[1])?;
        if !ts.is_finite() {
            return Err(TensorError::Invalid {
                op: "modulated_conv2d",
                reason: "style contains non-finite values".into(),
            });
        }
        let (tx, tw) = (self.value(x4), self.value(w));
        let kk = geom.k * geom.k;
        let in_len = geom.c_in * geom.h * geom.w;
        let out_len = c_out * geom.out_pixels();
        let mut out = vec![0.0; b * out_len];
        let mut scratch = Vec::new();
        for s in 0..b {
            let style = &ts.data()[s * geom.c_in..(s + 1) * geom.c_in];
            let (wm, _) = kernels::modulate(tw.data(), style, c_out, geom.c_in, kk, demod, eps);
            kernels::conv_forward(
                &tx.data()[s * in_len..(s + 1) * in_len],
                &wm,
                c_out,
                &geom,
                &mut out[s * out_len..(s + 1) * out_len],
                &mut scratch,
            );
        }
        let out = Tensor::new(vec![b, c_out, geom.out_h(), geom.out_w()], out)?;
        let y = self.push(
            out,
            Op::ModConv {
                x: x4,
                w,
                style: s2,
                demod,
                eps,
            },
        );
        if single {
            self.squeeze0(y)
        } else {
            Ok(y)
        }
    }

    /// `[B, F] → [B, B]` matrix of cosine similarities between rows.
    pub fn cosine_gram(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("cosine_gram", tx, 2)?;
        let (b, f) = (tx.shape()[0], tx.shape()[1]);
        let units = unit_rows(tx.data(), b, f)?.0;
        let mut out = vec![0.0; b * b];
        kernels::gemm(b, f, b, &units, false, &units, true, &mut out, false);
        let out = Tensor::new(vec![b, b], out)?;
        Ok(self.push(out, Op::CosineGram(x)))
    }

    fn unsqueeze0(&mut self, x: Var) -> Result<Var> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.value(x).shape());
        self.reshape(x, &shape)
    }

    fn squeeze0(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape()[1..].to_vec();
        self.reshape(x, &shape)
    }

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, stride: usize, pad: usize) -> Result<(ConvGeom, usize, usize)> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank(op, tx, 4)?;
        expect_rank(op, tw, 4)?;
        let &[b, c_in, h, wd] = tx.shape() else { unreachable!() };
        let &[c_out, wc_in, kh, kw] = tw.shape() else { unreachable!() };
        dim_eq(op, "c_in", wc_in, c_in)?;
        dim_eq(op, "kernel width", kh, kw)?;
        if kh % 2 == 0 {
            return Err(TensorError::Invalid {
                op,
                reason: format!("kernel size {kh} must be odd"),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kh {
            return Err(TensorError::Invalid {
                op,
                reason: format!("stride {stride}, pad {pad} invalid for {h}x{wd} input and {kh}x{kh} kernel"),
            });
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k: kh,
            stride,
            pad,
        };
        Ok((geom, b, c_out))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// The derivative of `|x|` at `0` is taken as `0`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v).data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, a, || g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                self.accumulate(grads, b, || g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, k) => self.accumulate(grads, a, || g.iter().map(|v| v * k).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, a, || g.to_vec()),
            Op::ChannelBias(x, b) => {
                self.accumulate(grads, x, || g.to_vec());
                self.accumulate(grads, b, || {
                    let tx = self.value(x);
                    let c = tx.shape()[1];
                    let inner: usize = tx.shape()[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (idx, v) in g.iter().enumerate() {
                        gb[(idx / inner) % c] += v;
                    }
                    gb
                });
            }
            Op::LeakyRelu(x, slope) => self.accumulate(grads, x, || {
                g.iter().zip(val(x)).map(|(g, &v)| g * leaky_slope(v, slope)).collect()
            }),
            Op::Abs(x) => self.accumulate(grads, x, || g.iter().zip(val(x)).map(|(g, &v)| g * sign0(v)).collect()),
            Op::Square(x) => self.accumulate(grads, x, || g.iter().zip(val(x)).map(|(g, &v)| 2.0 * g * v).collect()),
            Op::Softplus(x) => self.accumulate(grads, x, || g.iter().zip(val(x)).map(|(g, &v)| g * sigmoid(v)).collect()),
            Op::Sum(x) => self.accumulate(grads, x, || vec![g[0]; self.value(x).numel()]),
            Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, || vec![g[0] / n as f64; n])
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accumulate(grads, a, || {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, tb.data(), true, &mut ga, false);
                    ga
                });
                self.accumulate(grads, b, || {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g, false, &mut gb, false);
                    gb
                });
            }
            Op::Transpose(a) => self.accumulate(grads, a, || {
                let ta = self.value(a);
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                ga
            }),
            Op::BroadcastBatch(x, batch) => self.accumulate(grads, x, || {
                let n = self.value(x).numel();
                let mut gx = vec![0.0; n];
                for b in 0..batch {
                    gx.iter_mut().zip(&g[b * n..(b + 1) * n]).for_each(|(a, v)| *a += v);
                }
                gx
            }),
            Op::Upsample2x(x) => self.accumulate(grads, x, || {
                let &[b, c, h, w] = self.value(x).shape() else { unreachable!() };
                let mut gx = vec![0.0; b * c * h * w];
                for plane in 0..b * c {
                    let src = &g[plane * h * w * 4..(plane + 1) * h * w * 4];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                gx
            }),
            Op::Conv2d { x, w, stride, pad } => {
                let (geom, b, c_out) = self.conv_geom("conv2d", x, w, stride, pad).expect("validated in forward");
                let (tx, tw) = (self.value(x), self.value(w));
                let in_len = geom.c_in * geom.h * geom.w;
                let out_len = c_out * geom.out_pixels();
                let mut gw = self.wants(w).then(|| vec![0.0; tw.numel()]);
                let mut gx = self.wants(x).then(|| vec![0.0; tx.numel()]);
                let mut scratch = Vec::new();
                for s in 0..b {
                    kernels::conv_backward(
                        &tx.data()[s * in_len..(s + 1) * in_len],
                        tw.data(),
                        c_out,
                        &geom,
                        &g[s * out_len..(s + 1) * out_len],
                        gw.as_deref_mut(),
                        gx.as_mut().map(|gx| &mut gx[s * in_len..(s + 1) * in_len]),
                        &mut scratch,
                    );
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, w, || gw);
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, x, || gx);
                }
            }
            Op::ModConv { x, w, style, demod, eps } => {
                let k = self.value(w).shape()[2];
                let (geom, b, c_out) = self.conv_geom("modulated_conv2d", x, w, 1, k / 2).expect("validated in forward");
                let (tx, tw, ts) = (self.value(x), self.value(w), self.value(style));
                let kk = geom.k * geom.k;
                let in_len = geom.c_in * geom.h * geom.w;
                let out_len = c_out * geom.out_pixels();
                let want_w = self.wants(w);
                let want_s = self.wants(style);
                let mut gw = want_w.then(|| vec![0.0; tw.numel()]);
                let mut gs = want_s.then(|| vec![0.0; ts.numel()]);
                let mut gx = self.wants(x).then(|| vec![0.0; tx.numel()]);
                let mut scratch = Vec::new();
                let mut d_eff = vec![0.0; tw.numel()];
                for s in 0..b {
                    let st = &ts.data()[s * geom.c_in..(s + 1) * geom.c_in];
                    let (wm, sigma) = kernels::modulate(tw.data(), st, c_out, geom.c_in, kk, demod, eps);
                    d_eff.iter_mut().for_each(|v| *v = 0.0);
                    kernels::conv_backward(
                        &tx.data()[s * in_len..(s + 1) * in_len],
                        &wm,
                        c_out,
                        &geom,
                        &g[s * out_len..(s + 1) * out_len],
                        (want_w || want_s).then_some(&mut d_eff[..]),
                        gx.as_mut().map(|gx| &mut gx[s * in_len..(s + 1) * in_len]),
                        &mut scratch,
                    );
                    if want_w || want_s {
                        kernels::modulate_backward(
                            tw.data(),
                            st,
                            &sigma,
                            &d_eff,
                            c_out,
                            geom.c_in,
                            kk,
                            demod,
                            gw.as_deref_mut(),
                            gs.as_mut().map(|gs| &mut gs[s * geom.c_in..(s + 1) * geom.c_in]),
                        );
                    }
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, w, || gw);
                }
                if let Some(gs) = gs {
                    self.accumulate(grads, style, || gs);
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, x, || gx);
                }
            }
            Op::CosineGram(x) => self.accumulate(grads, x, || {
                let tx = self.value(x);
                let (b, f) = (tx.shape()[0], tx.shape()[1]);
                let (units, norms) = unit_rows(tx.data(), b, f).expect("validated in forward");
                // dL/dU = (G + Gᵀ) U
                let sym: Vec<f64> = (0..b * b).map(|idx| g[idx] + g[(idx % b) * b + idx / b]).collect();
                let mut gu = vec![0.0; b * f];
                kernels::gemm(b, b, f, &sym, false, &units, false, &mut gu, false);
                for r in 0..b {
                    let u = &units[r * f..(r + 1) * f];
                    let row = &mut gu[r * f..(r + 1) * f];
                    let proj: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (gv, uv) in row.iter_mut().zip(u) {
                        *gv = (*gv - proj * uv) / norms[r];
                    }
                }
                gu
            }),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: impl FnOnce() -> Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        let g = g();
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

fn unit_rows(data: &[f64], b: usize, f: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut units = data.to_vec();
    let mut norms = Vec::with_capacity(b);
    for r in 0..b {
        let row = &mut units[r * f..(r + 1) * f];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= 1e-12) {
            return Err(TensorError::DegenerateRow { row: r, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((units, norms))
}
