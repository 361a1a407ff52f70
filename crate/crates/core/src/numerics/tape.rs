//! Reverse-mode gradient tape.
//!
//! Every operation recorded through [`Tape`] stores its output value and the
//! handles of its inputs; [`Tape::backward`] walks the record in reverse and
//! accumulates input gradients. Nodes that do not depend on a trainable leaf
//! are marked `requires_grad = false` at record time and skipped entirely.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, mismatch, Error, Result};

use super::ops::{self, ConvGeom};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded operation; used for fault injection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    XCorr,
    Softmax,
    Resize,
    AvgPool,
    Linear,
    AddBias,
    Add,
    Mul,
    Scale,
    ScaleBy,
    Relu,
    Sigmoid,
    Concat,
    Crop,
    Select,
    SpatialPool,
    LayerNorm,
    Reshape,
    Sum,
    Custom(&'static str),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::XCorr => "xcorr_depthwise",
            OpKind::Softmax => "softmax",
            OpKind::Resize => "resize_bilinear",
            OpKind::AvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::ScaleBy => "scale_by",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Concat => "concat",
            OpKind::Crop => "crop",
            OpKind::Select => "select",
            OpKind::SpatialPool => "spatial_pool",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Custom(name) => name,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An operation whose forward is computed by the caller and whose backward
/// is supplied here. Used by the loss terms.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// One gradient per input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    XCorr { detection: Var, template: Var },
    Softmax { input: Var, axis: usize },
    Resize { input: Var },
    AvgPool { input: Var },
    Linear { v: Var, weight: Var, bias: Var },
    AddBias { input: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    ScaleBy { input: Var, scalar: Var },
    Relu { input: Var },
    Sigmoid { input: Var },
    Concat { inputs: Vec<Var> },
    Crop { input: Var, top: usize, left: usize },
    Select { input: Var, index: usize },
    SpatialPool { x: Var, weights: Var },
    LayerNorm { input: Var, eps: f64 },
    Reshape { input: Var },
    Sum { input: Var },
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<Var> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::XCorr { .. } => OpKind::XCorr,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Resize { .. } => OpKind::Resize,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Concat { .. } => OpKind::Concat,
            Op::Crop { .. } => OpKind::Crop,
            Op::Select { .. } => OpKind::Select,
            Op::SpatialPool { .. } => OpKind::SpatialPool,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
            Op::Custom { op, .. } => OpKind::Custom(op.name()),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::XCorr {
                detection,
                template,
            } => vec![*detection, *template],
            Op::Linear { v, weight, bias } => vec![*v, *weight, *bias],
            Op::AddBias { input, bias } => vec![*input, *bias],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ScaleBy { input, scalar } => vec![*input, *scalar],
            Op::SpatialPool { x, weights } => vec![*x, *weights],
            Op::Concat { inputs } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Softmax { input, .. }
            | Op::Resize { input }
            | Op::AvgPool { input }
            | Op::Scale { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Crop { input, .. }
            | Op::Select { input, .. }
            | Op::LayerNorm { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Whether op outputs are validated for finiteness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Checked,
    Fast,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// Negate every input gradient produced by operations of `kind` during
    /// backward. Only used to prove that the gradient suite catches errors.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.mode == Mode::Checked {
            value.check_finite(op.kind().name())?;
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: ConvGeom) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), geom)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
        )
    }

    pub fn xcorr_depthwise(&mut self, detection: Var, template: Var) -> Result<Var> {
        let out = ops::xcorr_depthwise(self.value(detection), self.value(template))?;
        self.push(
            out,
            Op::XCorr {
                detection,
                template,
            },
        )
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(input), axis)?;
        self.push(out, Op::Softmax { input, axis })
    }

    pub fn resize_bilinear(&mut self, input: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(input), new_h, new_w)?;
        self.push(out, Op::Resize { input })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        self.push(out, Op::AvgPool { input })
    }

    pub fn linear(&mut self, v: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(v), self.value(weight), self.value(bias))?;
        self.push(out, Op::Linear { v, weight, bias })
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        if b.rank() != 1 || b.dim(0) != x.dim(0) {
            return Err(mismatch(
                "add_bias",
                format!("bias {:?} for input {:?}", b.shape(), x.shape()),
            ));
        }
        let plane = x.numel() / x.dim(0);
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i / plane];
        }
        self.push(out, Op::AddBias { input, bias })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let out = Tensor::from_fn(av.shape().to_vec(), |i| av.data()[i] * bv[i]);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale { input, factor })
    }

    /// Multiplies every element of `input` by the single value held in `scalar`.
    pub fn scale_by(&mut self, input: Var, scalar: Var) -> Result<Var> {
        if self.value(scalar).numel() != 1 {
            return Err(mismatch(
                "scale_by",
                format!("scalar has shape {:?}", self.shape(scalar)),
            ));
        }
        let s = self.value(scalar).item();
        let out = self.value(input).map(|v| v * s);
        self.push(out, Op::ScaleBy { input, scalar })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(out, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { input })
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in inputs {
            let t = self.value(*v);
            if t.shape()[1..] != tail[..] {
                return Err(mismatch(
                    "concat",
                    format!("{:?} vs trailing {:?}", t.shape(), tail),
                ));
            }
            lead += t.dim(0);
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Spatial window `[top..top+h, left..left+w]` of a `[C,H,W]` tensor.
    pub fn crop(&mut self, input: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 3 || top + h > x.dim(1) || left + w > x.dim(2) || h == 0 || w == 0 {
            return Err(invalid(
                "crop",
                format!("window {h}x{w} at ({top},{left}) outside {:?}", x.shape()),
            ));
        }
        let (c, iw) = (x.dim(0), x.dim(2));
        let ih = x.dim(1);
        let out = Tensor::from_fn([c, h, w], |i| {
            let ch = i / (h * w);
            let y = (i / w) % h;
            let xx = i % w;
            x.data()[ch * ih * iw + (top + y) * iw + left + xx]
        });
        self.push(out, Op::Crop { input, top, left })
    }

    /// Centered crop to `h x w`.
    pub fn crop_center(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let (ih, iw) = (self.shape(input)[1], self.shape(input)[2]);
        if h > ih || w > iw {
            return Err(invalid("crop", format!("{h}x{w} larger than {ih}x{iw}")));
        }
        self.crop(input, (ih - h) / 2, (iw - w) / 2, h, w)
    }

    /// Element `index` of a vector, as a one-element tensor.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        if index >= x.numel() {
            return Err(invalid(
                "select",
                format!("index {index} out of range for {:?}", x.shape()),
            ));
        }
        let out = Tensor::scalar(x.data()[index]);
        self.push(out, Op::Select { input, index })
    }

    /// `out[c] = sum_p x[c, p] * weights[p]` over spatial positions `p`.
    pub fn spatial_pool(&mut self, x: Var, weights: Var) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(weights);
        if xt.rank() != 3 || wt.numel() != xt.dim(1) * xt.dim(2) {
            return Err(mismatch(
                "spatial_pool",
                format!("weights {:?} for input {:?}", wt.shape(), xt.shape()),
            ));
        }
        let c = xt.dim(0);
        let out = Tensor::from_fn([c], |ch| {
            xt.channel(ch)
                .iter()
                .zip(wt.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        self.push(out, Op::SpatialPool { x, weights })
    }

    /// Normalizes a vector to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 1 {
            return Err(mismatch("layer_norm", format!("expected a vector, got {:?}", x.shape())));
        }
        let n = x.numel() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let out = x.map(|v| (v - mean) * inv);
        self.push(out, Op::LayerNorm { input, eps })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { input })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input })
    }

    /// Records an externally computed value with a caller-supplied backward.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if self.value(output).numel() != 1 {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out_shape.to_vec(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut contribs = self.node_backward(node, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, t) in contribs.iter_mut() {
                    for v in t.data_mut() {
                        *v = -*v;
                    }
                }
            }
            for (v, t) in contribs {
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => grads[v.0] = Some(t),
                }
            }
            // leaves keep their gradient; intermediates are dropped once consumed
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (gi, gk) =
                    ops::conv2d_backward(val(*input), val(*kernel), g, *geom, rg(*input), rg(*kernel));
                out.extend(gi.map(|t| (*input, t)));
                out.extend(gk.map(|t| (*kernel, t)));
            }
            Op::XCorr {
                detection,
                template,
            } => {
                let (gd, gt) = ops::xcorr_depthwise_backward(
                    val(*detection),
                    val(*template),
                    g,
                    rg(*detection),
                    rg(*template),
                );
                out.extend(gd.map(|t| (*detection, t)));
                out.extend(gt.map(|t| (*template, t)));
            }
            Op::Softmax { input, axis } => {
                out.push((*input, ops::softmax_backward(&node.value, g, *axis)));
            }
            Op::Resize { input } => {
                out.push((*input, ops::resize_bilinear_backward(val(*input).shape(), g)));
            }
            Op::AvgPool { input } => {
                out.push((*input, ops::global_avg_pool_backward(val(*input).shape(), g)));
            }
            Op::Linear { v, weight, bias } => {
                let (gv, gw, gb) = ops::linear_backward(val(*v), val(*weight), g);
                if rg(*v) {
                    out.push((*v, gv));
                }
                if rg(*weight) {
                    out.push((*weight, gw));
                }
                if rg(*bias) {
                    out.push((*bias, gb));
                }
            }
            Op::AddBias { input, bias } => {
                if rg(*input) {
                    out.push((*input, g.clone()));
                }
                if rg(*bias) {
                    let c = g.dim(0);
                    let plane = g.numel() / c;
                    out.push((
                        *bias,
                        Tensor::from_fn([c], |ch| g.data()[ch * plane..(ch + 1) * plane].iter().sum()),
                    ));
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    out.push((*a, g.clone()));
                }
                if rg(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if rg(*a) {
                    out.push((*a, Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * bv.data()[i])));
                }
                if rg(*b) {
                    out.push((*b, Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * av.data()[i])));
                }
            }
            Op::Scale { input, factor } => out.push((*input, g.map(|v| v * factor))),
            Op::ScaleBy { input, scalar } => {
                let s = val(*scalar).item();
                if rg(*input) {
                    out.push((*input, g.map(|v| v * s)));
                }
                if rg(*scalar) {
                    let dot: f64 = g.data().iter().zip(val(*input).data()).map(|(a, b)| a * b).sum();
                    out.push((*scalar, Tensor::full(val(*scalar).shape().to_vec(), dot)));
                }
            }
            Op::Relu { input } => {
                let x = val(*input);
                out.push((
                    *input,
                    Tensor::from_fn(g.shape().to_vec(), |i| if x.data()[i] > 0.0 { g.data()[i] } else { 0.0 }),
                ));
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                out.push((
                    *input,
                    Tensor::from_fn(g.shape().to_vec(), |i| {
                        let s = y.data()[i];
                        g.data()[i] * s * (1.0 - s)
                    }),
                ));
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for v in inputs {
                    let n = val(*v).numel();
                    if rg(*v) {
                        let t = Tensor::new(val(*v).shape().to_vec(), g.data()[offset..offset + n].to_vec())
                            .expect("concat slice");
                        out.push((*v, t));
                    }
                    offset += n;
                }
            }
            Op::Crop { input, top, left } => {
                let x = val(*input);
                let (c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2));
                let (h, w) = (g.dim(1), g.dim(2));
                let mut gi = Tensor::zeros([c, ih, iw]);
                for ch in 0..c {
                    for y in 0..h {
                        let src = &g.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                        let start = ch * ih * iw + (top + y) * iw + left;
                        gi.data_mut()[start..start + w].copy_from_slice(src);
                    }
                }
                out.push((*input, gi));
            }
            Op::Select { input, index } => {
                let mut gi = Tensor::zeros(val(*input).shape().to_vec());
                gi.data_mut()[*index] = g.item();
                out.push((*input, gi));
            }
            Op::SpatialPool { x, weights } => {
                let (xt, wt) = (val(*x), val(*weights));
                let plane = wt.numel();
                if rg(*x) {
                    out.push((
                        *x,
                        Tensor::from_fn(xt.shape().to_vec(), |i| g.data()[i / plane] * wt.data()[i % plane]),
                    ));
                }
                if rg(*weights) {
                    let c = xt.dim(0);
                    out.push((
                        *weights,
                        Tensor::from_fn(wt.shape().to_vec(), |p| {
                            (0..c).map(|ch| g.data()[ch] * xt.data()[ch * plane + p]).sum()
                        }),
                    ));
                }
            }
            Op::LayerNorm { input, eps } => {
                let x = val(*input);
                let y = &node.value;
                let n = x.numel() as f64;
                let mean = x.sum() / n;
                let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let g_mean = g.sum() / n;
                let gy_mean = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>() / n;
                out.push((
                    *input,
                    Tensor::from_fn(x.shape().to_vec(), |i| inv * (g.data()[i] - g_mean - y.data()[i] * gy_mean)),
                ));
            }
            Op::Reshape { input } => {
                let t = g.clone().reshape(val(*input).shape().to_vec()).expect("reshape grad");
                out.push((*input, t));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(val(*input).shape().to_vec(), g.item())));
            }
            Op::Custom { op, inputs } => {
                let refs: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&refs, &node.value, g);
                for (v, t) in inputs.iter().zip(gs) {
                    if rg(*v) {
                        out.push((*v, t));
                    }
                }
            }
        }
        out
    }
}
