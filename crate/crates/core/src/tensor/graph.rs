//! The reverse-mode tape.
//!
//! Every operation appends one node holding the forward value and an op
//! record naming its input indices. [`Graph::backward`] walks the tape once
//! in reverse, accumulating adjoints additively into every node that
//! requires gradients. Records reference only earlier indices, so tape order
//! is already topological.

use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{Shape, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Operation that produced a node, for introspection and error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Sigmoid,
    UpsampleNearest,
    UpsampleBilinear,
    DownsampleAvg,
    GlobalAvgPool,
    ConcatChannels,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MulChannelGate,
    AddChannelBias,
    MulBroadcastMono,
    GaussianBlur,
    L1Mean,
    L2MeanHalf,
    MaskedL1Mean,
}

#[derive(Clone)]
enum Record<T> {
    Leaf,
    Conv2d { input: usize, weight: usize, bias: Option<usize>, stride: usize, pad: usize },
    Relu { input: usize },
    Sigmoid { input: usize },
    UpsampleNearest { input: usize, factor: usize },
    UpsampleBilinear { input: usize, factor: usize },
    DownsampleAvg { input: usize, factor: usize },
    GlobalAvgPool { input: usize },
    ConcatChannels { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { input: usize, factor: T },
    AddScalar { input: usize },
    MulChannelGate { features: usize, gate: usize },
    AddChannelBias { features: usize, bias: usize },
    MulBroadcastMono { mono: usize, image: usize },
    GaussianBlur { input: usize, size: usize, kernel: Vec<T> },
    L1Mean { a: usize, b: usize },
    L2MeanHalf { a: usize, b: usize },
    MaskedL1Mean { a: usize, b: usize, mask: usize, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    rec: Record<T>,
}

/// A single forward pass worth of computation. Build, run [`backward`]
/// once, read values and gradients, then drop; graphs are not reused.
///
/// [`backward`]: Graph::backward
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    ran_backward: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), ran_backward: false }
    }

    /// Inserts an input tensor. Gradients accumulate into it during
    /// backward when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Record::Leaf, requires_grad)
    }

    /// Inserts a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated adjoint, populated by [`Graph::backward`]. `None` for
    /// nodes that do not require gradients or were never reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        match &self.nodes[v.0].rec {
            Record::Leaf => OpKind::Leaf,
            Record::Conv2d { .. } => OpKind::Conv2d,
            Record::Relu { .. } => OpKind::Relu,
            Record::Sigmoid { .. } => OpKind::Sigmoid,
            Record::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            Record::UpsampleBilinear { .. } => OpKind::UpsampleBilinear,
            Record::DownsampleAvg { .. } => OpKind::DownsampleAvg,
            Record::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Record::ConcatChannels { .. } => OpKind::ConcatChannels,
            Record::Add { .. } => OpKind::Add,
            Record::Sub { .. } => OpKind::Sub,
            Record::Mul { .. } => OpKind::Mul,
            Record::Scale { .. } => OpKind::Scale,
            Record::AddScalar { .. } => OpKind::AddScalar,
            Record::MulChannelGate { .. } => OpKind::MulChannelGate,
            Record::AddChannelBias { .. } => OpKind::AddChannelBias,
            Record::MulBroadcastMono { .. } => OpKind::MulBroadcastMono,
            Record::GaussianBlur { .. } => OpKind::GaussianBlur,
            Record::L1Mean { .. } => OpKind::L1Mean,
            Record::L2MeanHalf { .. } => OpKind::L2MeanHalf,
            Record::MaskedL1Mean { .. } => OpKind::MaskedL1Mean,
        }
    }

    fn push(&mut self, value: Tensor<T>, rec: Record<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, rec });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].requires_grad)
    }

    // ---- forward ops ----

    /// Direct 2-d convolution with zero padding. `weight` is
    /// `(out_ch, in_ch, kh, kw)`, `bias` is `(1, out_ch, 1, 1)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let is = self.shape(input);
        let ws = self.shape(weight);
        if ws.c != is.c {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: is, rhs: ws });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument { op: "conv2d", msg: "stride must be at least 1".into() });
        }
        if ws.h == 0 || ws.w == 0 || ws.h > is.h + 2 * pad || ws.w > is.w + 2 * pad {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {}x{} does not fit input {} with padding {}", ws.h, ws.w, is, pad),
            });
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::new(1, ws.n, 1, 1) {
                return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: bs, rhs: Shape::new(1, ws.n, 1, 1) });
            }
        }
        let oh = kernels::conv_out_len(is.h, ws.h, stride, pad);
        let ow = kernels::conv_out_len(is.w, ws.w, stride, pad);
        let out_shape = Shape::new(is.n, ws.n, oh, ow);
        let mut out = Tensor::zeros(out_shape);
        kernels::conv2d_forward(
            self.nodes[input.0].value.data(),
            (is.n, is.c, is.h, is.w),
            self.nodes[weight.0].value.data(),
            (ws.n, ws.h, ws.w),
            bias.map(|b| self.nodes[b.0].value.data()),
            stride,
            pad,
            out.data_mut(),
            (oh, ow),
        );
        let mut deps = vec![input.0, weight.0];
        if let Some(b) = bias {
            deps.push(b.0);
        }
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Record::Conv2d { input: input.0, weight: weight.0, bias: bias.map(|b| b.0), stride, pad },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, Record::Relu { input: input.0 }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, Record::Sigmoid { input: input.0 }, rg)
    }

    /// Integer-factor nearest-neighbour upsampling.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        check_factor("upsample_nearest", factor)?;
        let is = self.shape(input);
        let os = Shape::new(is.n, is.c, is.h * factor, is.w * factor);
        let src = &self.nodes[input.0].value;
        let out = Tensor::from_fn(os, |n, c, y, x| src.at(n, c, y / factor, x / factor));
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(out, Record::UpsampleNearest { input: input.0, factor }, rg))
    }

    /// Integer-factor bilinear upsampling with half-pixel centres and
    /// clamped edges.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        check_factor("upsample_bilinear", factor)?;
        let is = self.shape(input);
        let os = Shape::new(is.n, is.c, is.h * factor, is.w * factor);
        let ys = kernels::bilinear_axis::<T>(is.h, factor);
        let xs = kernels::bilinear_axis::<T>(is.w, factor);
        let src = &self.nodes[input.0].value;
        let mut out = Tensor::zeros(os);
        for n in 0..is.n {
            for c in 0..is.c {
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let top = (T::one() - fx) * src.at(n, c, y0, x0) + fx * src.at(n, c, y0, x1);
                        let bot = (T::one() - fx) * src.at(n, c, y1, x0) + fx * src.at(n, c, y1, x1);
                        out.set(n, c, oy, ox, (T::one() - fy) * top + fy * bot);
                    }
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(out, Record::UpsampleBilinear { input: input.0, factor }, rg))
    }

    /// Non-overlapping box average over `factor`-sized blocks. Both spatial
    /// dims must be divisible by the factor.
    pub fn downsample_avg(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        check_factor("downsample_avg", factor)?;
        let is = self.shape(input);
        for (what, size) in [("height", is.h), ("width", is.w)] {
            if size % factor != 0 {
                return Err(TensorError::NotDivisible { op: "downsample_avg", what, size, divisor: factor });
            }
        }
        let os = Shape::new(is.n, is.c, is.h / factor, is.w / factor);
        let src = &self.nodes[input.0].value;
        let inv = T::one() / T::of_f64((factor * factor) as f64);
        let out = Tensor::from_fn(os, |n, c, oy, ox| {
            let mut acc = T::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += src.at(n, c, oy * factor + dy, ox * factor + dx);
                }
            }
            acc * inv
        });
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(out, Record::DownsampleAvg { input: input.0, factor }, rg))
    }

    /// Mean over the spatial dims, yielding `(n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let is = self.shape(input);
        let src = &self.nodes[input.0].value;
        let inv = T::one() / T::of_f64((is.h * is.w) as f64);
        let out = Tensor::from_fn(Shape::new(is.n, is.c, 1, 1), |n, c, _, _| {
            let base = (n * is.c + c) * is.h * is.w;
            let mut acc = T::zero();
            for &v in &src.data()[base..base + is.h * is.w] {
                acc += v;
            }
            acc * inv
        });
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, Record::GlobalAvgPool { input: input.0 }, rg)
    }

    /// Stacks `a`'s channels before `b`'s. Batch and spatial dims must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", lhs: sa, rhs: sb });
        }
        let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut out = Tensor::zeros(os);
        let plane = sa.h * sa.w;
        for n in 0..sa.n {
            let dst_base = n * os.c * plane;
            let a_base = n * sa.c * plane;
            let b_base = n * sb.c * plane;
            out.data_mut()[dst_base..dst_base + sa.c * plane]
                .copy_from_slice(&self.nodes[a.0].value.data()[a_base..a_base + sa.c * plane]);
            out.data_mut()[dst_base + sa.c * plane..dst_base + os.c * plane]
                .copy_from_slice(&self.nodes[b.0].value.data()[b_base..b_base + sb.c * plane]);
        }
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(out, Record::ConcatChannels { a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op("add", a, b, |x, y| x + y, Record::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op("sub", a, b, |x, y| x - y, Record::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise product (Hadamard).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op("mul", a, b, |x, y| x * y, Record::Mul { a: a.0, b: b.0 })
    }

    fn zip_op(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        rec: Record<T>,
    ) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(sa, data).expect("zip preserves length");
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(out, rec, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.nodes[input.0].value.map(|v| v * factor);
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, Record::Scale { input: input.0, factor }, rg)
    }

    pub fn add_scalar(&mut self, input: Var, value: T) -> Var {
        let out = self.nodes[input.0].value.map(|v| v + value);
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, Record::AddScalar { input: input.0 }, rg)
    }

    /// `1 - x`, used for the background side of compositing.
    pub fn one_minus(&mut self, input: Var) -> Var {
        let neg = self.scale(input, -T::one());
        self.add_scalar(neg, T::one())
    }

    /// Multiplies `(n|1, c, 1, 1)` per-channel gains over `(n, c, h, w)`
    /// features. A gate batch of 1 broadcasts across the feature batch.
    pub fn mul_channel_gate(&mut self, features: Var, gate: Var) -> Result<Var, TensorError> {
        let fs = self.shape(features);
        let gs = self.shape(gate);
        if gs.c != fs.c || gs.h != 1 || gs.w != 1 || (gs.n != fs.n && gs.n != 1) {
            return Err(TensorError::ShapeMismatch { op: "mul_channel_gate", lhs: fs, rhs: gs });
        }
        let g = &self.nodes[gate.0].value;
        let src = &self.nodes[features.0].value;
        let out = Tensor::from_fn(fs, |n, c, y, x| {
            src.at(n, c, y, x) * g.at(if gs.n == 1 { 0 } else { n }, c, 0, 0)
        });
        let rg = self.any_grad(&[features.0, gate.0]);
        Ok(self.push(out, Record::MulChannelGate { features: features.0, gate: gate.0 }, rg))
    }

    /// Adds `(n|1, c, 1, 1)` per-channel offsets to `(n, c, h, w)` features.
    pub fn add_channel_bias(&mut self, features: Var, bias: Var) -> Result<Var, TensorError> {
        let fs = self.shape(features);
        let bs = self.shape(bias);
        if bs.c != fs.c || bs.h != 1 || bs.w != 1 || (bs.n != fs.n && bs.n != 1) {
            return Err(TensorError::ShapeMismatch { op: "add_channel_bias", lhs: fs, rhs: bs });
        }
        let b = &self.nodes[bias.0].value;
        let src = &self.nodes[features.0].value;
        let out = Tensor::from_fn(fs, |n, c, y, x| {
            src.at(n, c, y, x) + b.at(if bs.n == 1 { 0 } else { n }, c, 0, 0)
        });
        let rg = self.any_grad(&[features.0, bias.0]);
        Ok(self.push(out, Record::AddChannelBias { features: features.0, bias: bias.0 }, rg))
    }

    /// Multiplies a single-channel map over every channel of `image`:
    /// `out[n, c] = mono[n, 0] * image[n, c]`. This is how a matte scales an
    /// RGB foreground.
    pub fn mul_broadcast_mono(&mut self, mono: Var, image: Var) -> Result<Var, TensorError> {
        let ms = self.shape(mono);
        let is = self.shape(image);
        if ms.c != 1 || ms.n != is.n || ms.h != is.h || ms.w != is.w {
            return Err(TensorError::ShapeMismatch { op: "mul_broadcast_mono", lhs: ms, rhs: is });
        }
        let m = &self.nodes[mono.0].value;
        let src = &self.nodes[image.0].value;
        let out = Tensor::from_fn(is, |n, c, y, x| src.at(n, c, y, x) * m.at(n, 0, y, x));
        let rg = self.any_grad(&[mono.0, image.0]);
        Ok(self.push(out, Record::MulBroadcastMono { mono: mono.0, image: image.0 }, rg))
    }

    /// Depthwise convolution with a fixed square kernel and reflect padding
    /// (`-1 -> 0`, `h -> h-1`). The kernel is data, not a parameter.
    pub fn gaussian_blur(&mut self, input: Var, size: usize, kernel: &[T]) -> Result<Var, TensorError> {
        if size % 2 == 0 || size == 0 {
            return Err(TensorError::InvalidArgument {
                op: "gaussian_blur",
                msg: format!("kernel size must be odd, got {size}"),
            });
        }
        if kernel.len() != size * size {
            return Err(TensorError::InvalidArgument {
                op: "gaussian_blur",
                msg: format!("kernel data has {} entries, expected {}", kernel.len(), size * size),
            });
        }
        let is = self.shape(input);
        let r = size / 2;
        if r > is.h.min(is.w) {
            return Err(TensorError::InvalidArgument {
                op: "gaussian_blur",
                msg: format!("kernel radius {r} exceeds smallest spatial dim of {is}"),
            });
        }
        let src = &self.nodes[input.0].value;
        let out = Tensor::from_fn(is, |n, c, y, x| {
            let mut acc = T::zero();
            for dy in 0..size {
                let sy = kernels::reflect(y as isize + dy as isize - r as isize, is.h);
                for dx in 0..size {
                    let sx = kernels::reflect(x as isize + dx as isize - r as isize, is.w);
                    acc += kernel[dy * size + dx] * src.at(n, c, sy, sx);
                }
            }
            acc
        });
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            out,
            Record::GaussianBlur { input: input.0, size, kernel: kernel.to_vec() },
            rg,
        ))
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "l1_mean", lhs: sa, rhs: sb });
        }
        // Scalar reductions accumulate in f64 regardless of T; at single
        // precision a long f32 sum would drown the per-pixel signal.
        let mut acc = 0.0f64;
        for (&x, &y) in self.nodes[a.0].value.data().iter().zip(self.nodes[b.0].value.data()) {
            acc += (x - y).abs().into_f64();
        }
        let value = T::of_f64(acc / sa.len() as f64);
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(value), Record::L1Mean { a: a.0, b: b.0 }, rg))
    }

    /// Half mean squared difference, reduced to a scalar.
    pub fn l2_mean_half(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "l2_mean_half", lhs: sa, rhs: sb });
        }
        let mut acc = 0.0f64;
        for (&x, &y) in self.nodes[a.0].value.data().iter().zip(self.nodes[b.0].value.data()) {
            let d = (x - y).into_f64();
            acc += d * d;
        }
        Ok(self.push(
            Tensor::scalar(T::of_f64(0.5 * acc / sa.len() as f64)),
            Record::L2MeanHalf { a: a.0, b: b.0 },
            self.any_grad(&[a.0, b.0]),
        ))
    }

    /// Mean absolute difference over pixels where the binary mask is 1,
    /// normalized by the masked count. An all-zero mask yields exactly zero
    /// with zero gradients.
    pub fn masked_l1_mean(&mut self, a: Var, b: Var, mask: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let sm = self.shape(mask);
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "masked_l1_mean", lhs: sa, rhs: sb });
        }
        if sa != sm {
            return Err(TensorError::ShapeMismatch { op: "masked_l1_mean", lhs: sa, rhs: sm });
        }
        let mut count = 0usize;
        for &m in self.nodes[mask.0].value.data() {
            if m == T::one() {
                count += 1;
            } else if m != T::zero() {
                return Err(TensorError::InvalidArgument {
                    op: "masked_l1_mean",
                    msg: format!("mask entries must be 0 or 1, found {m}"),
                });
            }
        }
        let value = if count == 0 {
            T::zero()
        } else {
            let mut acc = 0.0f64;
            let mv = self.nodes[mask.0].value.data();
            for (i, (&x, &y)) in self.nodes[a.0].value.data().iter().zip(self.nodes[b.0].value.data()).enumerate() {
                if mv[i] == T::one() {
                    acc += (x - y).abs().into_f64();
                }
            }
            T::of_f64(acc / count as f64)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Record::MaskedL1Mean { a: a.0, b: b.0, mask: mask.0, count },
            self.any_grad(&[a.0, b.0]),
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Accumulates adjoints into every
    /// node with `requires_grad`; contributions from multiple uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape });
        }
        if self.ran_backward {
            return Err(TensorError::BackwardAlreadyRan);
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        self.ran_backward = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let rec = self.nodes[i].rec.clone();
            let g = self.nodes[i].grad.clone().expect("checked above");
            self.propagate(i, &rec, &g);
        }
        Ok(())
    }

    fn wants(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn accum(&mut self, v: usize, contribution: Tensor<T>) {
        debug_assert_eq!(self.nodes[v].value.shape(), contribution.shape());
        match &mut self.nodes[v].grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, node: usize, rec: &Record<T>, g: &Tensor<T>) {
        match *rec {
            Record::Leaf => {}
            Record::Conv2d { input, weight, bias, stride, pad } => {
                let is = self.nodes[input].value.shape();
                let ws = self.nodes[weight].value.shape();
                let os = self.nodes[node].value.shape();
                if self.wants(input) {
                    let mut gi = Tensor::zeros(is);
                    kernels::conv2d_backward_input(
                        g.data(),
                        (is.n, is.c, is.h, is.w),
                        self.nodes[weight].value.data(),
                        (ws.n, ws.h, ws.w),
                        stride,
                        pad,
                        gi.data_mut(),
                        (os.h, os.w),
                    );
                    self.accum(input, gi);
                }
                if self.wants(weight) {
                    let mut gw = Tensor::zeros(ws);
                    kernels::conv2d_backward_weight(
                        g.data(),
                        self.nodes[input].value.data(),
                        (is.n, is.c, is.h, is.w),
                        (ws.n, ws.h, ws.w),
                        stride,
                        pad,
                        gw.data_mut(),
                        (os.h, os.w),
                    );
                    self.accum(weight, gw);
                }
                if let Some(b) = bias {
                    if self.wants(b) {
                        let mut gb = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
                        kernels::conv2d_backward_bias(g.data(), (os.n, os.c, os.h, os.w), gb.data_mut());
                        self.accum(b, gb);
                    }
                }
            }
            Record::Relu { input } => {
                if self.wants(input) {
                    let x = &self.nodes[input].value;
                    let gi = Tensor::from_vec(
                        x.shape(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                            .collect(),
                    )
                    .expect("same length");
                    self.accum(input, gi);
                }
            }
            Record::Sigmoid { input } => {
                if self.wants(input) {
                    let y = &self.nodes[node].value;
                    let gi = Tensor::from_vec(
                        y.shape(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                            .collect(),
                    )
                    .expect("same length");
                    self.accum(input, gi);
                }
            }
            Record::UpsampleNearest { input, factor } => {
                if self.wants(input) {
                    let is = self.nodes[input].value.shape();
                    let mut gi = Tensor::zeros(is);
                    let os = self.nodes[node].value.shape();
                    for n in 0..os.n {
                        for c in 0..os.c {
                            for y in 0..os.h {
                                for x in 0..os.w {
                                    let i = is.index(n, c, y / factor, x / factor);
                                    gi.data_mut()[i] += g.at(n, c, y, x);
                                }
                            }
                        }
                    }
                    self.accum(input, gi);
                }
            }
            Record::UpsampleBilinear { input, factor } => {
                if self.wants(input) {
                    let is = self.nodes[input].value.shape();
                    let os = self.nodes[node].value.shape();
                    let ys = kernels::bilinear_axis::<T>(is.h, factor);
                    let xs = kernels::bilinear_axis::<T>(is.w, factor);
                    let mut gi = Tensor::zeros(is);
                    for n in 0..os.n {
                        for c in 0..os.c {
                            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                    let gv = g.at(n, c, oy, ox);
                                    let d = gi.data_mut();
                                    d[is.index(n, c, y0, x0)] += gv * (T::one() - fy) * (T::one() - fx);
                                    d[is.index(n, c, y0, x1)] += gv * (T::one() - fy) * fx;
                                    d[is.index(n, c, y1, x0)] += gv * fy * (T::one() - fx);
                                    d[is.index(n, c, y1, x1)] += gv * fy * fx;
                                }
                            }
                        }
                    }
                    self.accum(input, gi);
                }
            }
            Record::DownsampleAvg { input, factor } => {
                if self.wants(input) {
                    let is = self.nodes[input].value.shape();
                    let inv = T::one() / T::of_f64((factor * factor) as f64);
                    let gi = Tensor::from_fn(is, |n, c, y, x| g.at(n, c, y / factor, x / factor) * inv);
                    self.accum(input, gi);
                }
            }
            Record::GlobalAvgPool { input } => {
                if self.wants(input) {
                    let is = self.nodes[input].value.shape();
                    let inv = T::one() / T::of_f64((is.h * is.w) as f64);
                    let gi = Tensor::from_fn(is, |n, c, _, _| g.at(n, c, 0, 0) * inv);
                    self.accum(input, gi);
                }
            }
            Record::ConcatChannels { a, b } => {
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let plane = sa.h * sa.w;
                if self.wants(a) {
                    let mut ga = Tensor::zeros(sa);
                    for n in 0..sa.n {
                        let src = n * (sa.c + sb.c) * plane;
                        let dst = n * sa.c * plane;
                        ga.data_mut()[dst..dst + sa.c * plane]
                            .copy_from_slice(&g.data()[src..src + sa.c * plane]);
                    }
                    self.accum(a, ga);
                }
                if self.wants(b) {
                    let mut gb = Tensor::zeros(sb);
                    for n in 0..sb.n {
                        let src = n * (sa.c + sb.c) * plane + sa.c * plane;
                        let dst = n * sb.c * plane;
                        gb.data_mut()[dst..dst + sb.c * plane]
                            .copy_from_slice(&g.data()[src..src + sb.c * plane]);
                    }
                    self.accum(b, gb);
                }
            }
            Record::Add { a, b } => {
                if self.wants(a) {
                    self.accum(a, g.clone());
                }
                if self.wants(b) {
                    self.accum(b, g.clone());
                }
            }
            Record::Sub { a, b } => {
                if self.wants(a) {
                    self.accum(a, g.clone());
                }
                if self.wants(b) {
                    self.accum(b, g.map(|v| -v));
                }
            }
            Record::Mul { a, b } => {
                if self.wants(a) {
                    let other = &self.nodes[b].value;
                    let ga = Tensor::from_vec(
                        other.shape(),
                        g.data().iter().zip(other.data()).map(|(&gv, &ov)| gv * ov).collect(),
                    )
                    .expect("same length");
                    self.accum(a, ga);
                }
                if self.wants(b) {
                    let other = &self.nodes[a].value;
                    let gb = Tensor::from_vec(
                        other.shape(),
                        g.data().iter().zip(other.data()).map(|(&gv, &ov)| gv * ov).collect(),
                    )
                    .expect("same length");
                    self.accum(b, gb);
                }
            }
            Record::Scale { input, factor } => {
                if self.wants(input) {
                    self.accum(input, g.map(|v| v * factor));
                }
            }
            Record::AddScalar { input } => {
                if self.wants(input) {
                    self.accum(input, g.clone());
                }
            }
            Record::MulChannelGate { features, gate } => {
                let fs = self.nodes[features].value.shape();
                let gs = self.nodes[gate].value.shape();
                if self.wants(features) {
                    let gt = &self.nodes[gate].value;
                    let gf = Tensor::from_fn(fs, |n, c, y, x| {
                        g.at(n, c, y, x) * gt.at(if gs.n == 1 { 0 } else { n }, c, 0, 0)
                    });
                    self.accum(features, gf);
                }
                if self.wants(gate) {
                    let f = &self.nodes[features].value;
                    let mut gg = Tensor::zeros(gs);
                    for n in 0..fs.n {
                        let gn = if gs.n == 1 { 0 } else { n };
                        for c in 0..fs.c {
                            let mut acc = T::zero();
                            for y in 0..fs.h {
                                for x in 0..fs.w {
                                    acc += g.at(n, c, y, x) * f.at(n, c, y, x);
                                }
                            }
                            let i = gs.index(gn, c, 0, 0);
                            gg.data_mut()[i] += acc;
                        }
                    }
                    self.accum(gate, gg);
                }
            }
            Record::AddChannelBias { features, bias } => {
                let fs = self.nodes[features].value.shape();
                let bs = self.nodes[bias].value.shape();
                if self.wants(features) {
                    self.accum(features, g.clone());
                }
                if self.wants(bias) {
                    let mut gb = Tensor::zeros(bs);
                    for n in 0..fs.n {
                        let bn = if bs.n == 1 { 0 } else { n };
                        for c in 0..fs.c {
                            let mut acc = T::zero();
                            for y in 0..fs.h {
                                for x in 0..fs.w {
                                    acc += g.at(n, c, y, x);
                                }
                            }
                            let i = bs.index(bn, c, 0, 0);
                            gb.data_mut()[i] += acc;
                        }
                    }
                    self.accum(bias, gb);
                }
            }
            Record::MulBroadcastMono { mono, image } => {
                let ms = self.nodes[mono].value.shape();
                let is = self.nodes[image].value.shape();
                if self.wants(image) {
                    let m = &self.nodes[mono].value;
                    let gi = Tensor::from_fn(is, |n, c, y, x| g.at(n, c, y, x) * m.at(n, 0, y, x));
                    self.accum(image, gi);
                }
                if self.wants(mono) {
                    let img = &self.nodes[image].value;
                    let mut gm = Tensor::zeros(ms);
                    for n in 0..is.n {
                        for c in 0..is.c {
                            for y in 0..is.h {
                                for x in 0..is.w {
                                    let i = ms.index(n, 0, y, x);
                                    gm.data_mut()[i] += g.at(n, c, y, x) * img.at(n, c, y, x);
                                }
                            }
                        }
                    }
                    self.accum(mono, gm);
                }
            }
            Record::GaussianBlur { input, size, ref kernel } => {
                if self.wants(input) {
                    let is = self.nodes[input].value.shape();
                    let r = size / 2;
                    let mut gi = Tensor::zeros(is);
                    for n in 0..is.n {
                        for c in 0..is.c {
                            for y in 0..is.h {
                                for x in 0..is.w {
                                    let gv = g.at(n, c, y, x);
                                    for dy in 0..size {
                                        let sy = kernels::reflect(y as isize + dy as isize - r as isize, is.h);
                                        for dx in 0..size {
                                            let sx = kernels::reflect(x as isize + dx as isize - r as isize, is.w);
                                            let i = is.index(n, c, sy, sx);
                                            gi.data_mut()[i] += kernel[dy * size + dx] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accum(input, gi);
                }
            }
            Record::L1Mean { a, b } => {
                let gv = g.item();
                let n = T::of_f64(self.nodes[a].value.shape().len() as f64);
                let scale = gv / n;
                self.l1_pair_grads(a, b, None, scale);
            }
            Record::L2MeanHalf { a, b } => {
                let gv = g.item();
                let n = T::of_f64(self.nodes[a].value.shape().len() as f64);
                let scale = gv / n;
                if self.wants(a) || self.wants(b) {
                    let shape = self.nodes[a].value.shape();
                    let diff: Vec<T> = self.nodes[a]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(&x, &y)| (x - y) * scale)
                        .collect();
                    if self.wants(a) {
                        self.accum(a, Tensor::from_vec(shape, diff.clone()).expect("same length"));
                    }
                    if self.wants(b) {
                        self.accum(
                            b,
                            Tensor::from_vec(shape, diff.iter().map(|&d| -d).collect()).expect("same length"),
                        );
                    }
                }
            }
            Record::MaskedL1Mean { a, b, mask, count } => {
                if count > 0 {
                    let gv = g.item();
                    let scale = gv / T::of_f64(count as f64);
                    self.l1_pair_grads(a, b, Some(mask), scale);
                }
            }
        }
    }

    /// Signed L1 adjoint `scale * sign(a - b)` into `a` and its negation
    /// into `b`, optionally gated by a binary mask node.
    fn l1_pair_grads(&mut self, a: usize, b: usize, mask: Option<usize>, scale: T) {
        if !self.wants(a) && !self.wants(b) {
            return;
        }
        let shape = self.nodes[a].value.shape();
        let signs: Vec<T> = {
            let av = self.nodes[a].value.data();
            let bv = self.nodes[b].value.data();
            let mv = mask.map(|m| self.nodes[m].value.data());
            (0..av.len())
                .map(|i| {
                    if let Some(m) = mv {
                        if m[i] != T::one() {
                            return T::zero();
                        }
                    }
                    let d = av[i] - bv[i];
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })
                .collect()
        };
        if self.wants(a) {
            self.accum(a, Tensor::from_vec(shape, signs.clone()).expect("same length"));
        }
        if self.wants(b) {
            self.accum(
                b,
                Tensor::from_vec(shape, signs.iter().map(|&s| -s).collect()).expect("same length"),
            );
        }
    }
}

fn check_factor(op: &'static str, factor: usize) -> Result<(), TensorError> {
    if factor == 0 {
        return Err(TensorError::InvalidArgument { op, msg: "factor must be at least 1".into() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_matches_hand_computed_case() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 3, 3), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]), false);
        let w = g.leaf(t((1, 1, 2, 2), &[1.0, 0.0, 0.0, -1.0]), false);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        // 2x2 valid conv of the ramp with the diagonal difference kernel:
        // every window is v[0,0] - v[1,1] = -4.
        assert_eq!(g.shape(y), Shape::new(1, 1, 2, 2));
        assert_eq!(g.value(y).data(), &[-4.0, -4.0, -4.0, -4.0]);
    }

    #[test]
    fn conv2d_stride_and_padding_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(Shape::new(2, 3, 16, 16)), false);
        let w = g.leaf(Tensor::<f64>::zeros(Shape::new(8, 3, 3, 3)), false);
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 8, 8, 8));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(Shape::new(1, 3, 8, 8)), false);
        let w = g.leaf(Tensor::<f64>::zeros(Shape::new(4, 2, 3, 3)), false);
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn backward_accumulates_over_repeated_use() {
        // loss = mean((x + x) - 0)^2 / 2 has d/dx = 2 * (2x) / n, i.e. the
        // two uses of x must both contribute.
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 2), &[1.0, -3.0]), true);
        let zero = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        let s = g.add(x, x).unwrap();
        let loss = g.l2_mean_half(s, zero).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad.data(), &[4.0 * 1.0 / 2.0, 4.0 * -3.0 / 2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::scalar(2.0), true);
        let y = g.sigmoid(x);
        let target = g.constant(Tensor::scalar(0.0));
        let loss = g.l2_mean_half(y, target).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).unwrap_err(), TensorError::BackwardAlreadyRan);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)), true);
        let y = g.relu(x);
        let err = g.backward(y).unwrap_err();
        assert_eq!(err, TensorError::NonScalarLoss { shape: Shape::new(1, 1, 2, 2) });
    }

    #[test]
    fn backward_on_detached_loss_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::scalar(1.0), false);
        let y = g.sigmoid(x);
        let target = g.constant(Tensor::scalar(0.5));
        let loss = g.l2_mean_half(y, target).unwrap();
        assert_eq!(g.backward(loss).unwrap_err(), TensorError::DetachedGraph);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 3), &[0.3, -0.2, 0.9]), true);
        let c = g.constant(t((1, 1, 1, 3), &[1.0, 1.0, 1.0]));
        let p = g.mul(x, c).unwrap();
        let target = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 3)));
        let loss = g.l1_mean(p, target).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn masked_l1_mean_empty_mask_is_zero_with_zero_grads() {
        let mut g = Graph::new();
        let a = g.leaf(t((1, 1, 2, 2), &[0.9, 0.1, 0.4, 0.7]), true);
        let b = g.constant(t((1, 1, 2, 2), &[0.0, 0.0, 0.0, 0.0]));
        let m = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let loss = g.masked_l1_mean(a, b, m).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        g.backward(loss).unwrap();
        // The loss constant-folds to zero: `a` receives an all-zero adjoint
        // or none at all, and either way the update is a no-op.
        if let Some(grad) = g.grad(a) {
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masked_l1_mean_rejects_fractional_mask() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let m = g.constant(Tensor::full(Shape::new(1, 1, 2, 2), 0.5));
        let err = g.masked_l1_mean(a, b, m).unwrap_err();
        assert!(matches!(err, TensorError::InvalidArgument { op: "masked_l1_mean", .. }), "{err}");
    }

    #[test]
    fn masked_l1_mean_normalizes_by_masked_count() {
        let mut g = Graph::new();
        let a = g.constant(t((1, 1, 2, 2), &[1.0, 1.0, 1.0, 1.0]));
        let b = g.constant(t((1, 1, 2, 2), &[0.0, 0.5, 0.0, 0.0]));
        let m = g.constant(t((1, 1, 2, 2), &[1.0, 1.0, 0.0, 0.0]));
        let loss = g.masked_l1_mean(a, b, m).unwrap();
        // |1-0| and |1-0.5| over 2 masked pixels, the other two ignored.
        assert_eq!(g.value(loss).item(), 0.75);
    }

    #[test]
    fn downsample_avg_requires_divisible_dims() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(Shape::new(1, 1, 5, 4)), false);
        let err = g.downsample_avg(x, 2).unwrap_err();
        assert_eq!(
            err,
            TensorError::NotDivisible { op: "downsample_avg", what: "height", size: 5, divisor: 2 }
        );
    }

    #[test]
    fn downsample_then_upsample_nearest_preserves_block_constant_input() {
        let mut g = Graph::new();
        let src = Tensor::<f64>::from_fn(Shape::new(1, 2, 4, 4), |_, c, y, x| {
            (c * 16 + (y / 2) * 2 + x / 2) as f64
        });
        let x = g.leaf(src.clone(), false);
        let d = g.downsample_avg(x, 2).unwrap();
        let u = g.upsample_nearest(d, 2).unwrap();
        assert_eq!(g.value(u), &src);
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 2, 2, 2), &[1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 30.0, 30.0]), false);
        let y = g.global_avg_pool(x);
        assert_eq!(g.shape(y), Shape::new(1, 2, 1, 1));
        assert_eq!(g.value(y).data(), &[2.5, 20.0]);
    }

    #[test]
    fn concat_channels_stacks_in_order() {
        let mut g = Graph::new();
        let a = g.leaf(t((1, 1, 1, 2), &[1.0, 2.0]), false);
        let b = g.leaf(t((1, 2, 1, 2), &[3.0, 4.0, 5.0, 6.0]), false);
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 3, 1, 2));
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn one_minus_composes_scale_and_shift() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 3), &[0.0, 0.25, 1.0]), false);
        let y = g.one_minus(x);
        assert_eq!(g.value(y).data(), &[1.0, 0.75, 0.0]);
    }

    #[test]
    fn upsample_bilinear_is_constant_on_constant_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 0.7), false);
        let y = g.upsample_bilinear(x, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn gaussian_blur_preserves_constant_field() {
        // A normalized kernel with reflect padding maps a constant field
        // to itself.
        let kernel = [0.075, 0.124, 0.075, 0.124, 0.204, 0.124, 0.075, 0.124, 0.075];
        let sum: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / sum).collect();

        let mut g = Graph::new();
        let flat = g.leaf(Tensor::full(Shape::new(1, 1, 4, 4), 0.3), false);
        let y = g.gaussian_blur(flat, 3, &kernel).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }
}
