//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output value, its inputs and
//! whatever the backward pass needs. Nodes are appended in execution order,
//! so walking the tape backwards visits each node once in reverse
//! topological order.

use crate::detect::losses::{self, LossOutput, SmoothL1Params};
use crate::detect::roi::{self, Roi};
use crate::error::{check_shape, Error, Result};
use crate::irnn::scan::{self, Direction};
use crate::kernels;
use crate::tensor::{Scalar, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { stride: usize },
    Relu,
    Sigmoid,
    Softmax,
    Add,
    Concat { widths: Vec<usize> },
    Slice { start: usize },
    Upsample,
    MaxPool { argmax: Vec<usize> },
    AvgPool,
    L2Norm,
    Fc,
    Scan { dir: Direction },
    RoiAlign { rois: Vec<Roi>, strides: Vec<f64>, res: usize },
    ConcatFlat,
    /// Scalar loss whose gradient with respect to its single input was
    /// computed in the forward pass.
    Loss { name: &'static str },
    Sum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax_channels",
            Op::Add => "add",
            Op::Concat { .. } => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Upsample => "upsample2x_nearest",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::AvgPool => "avgpool2x2",
            Op::L2Norm => "channel_l2norm_scale",
            Op::Fc => "fully_connected",
            Op::Scan { .. } => "scan",
            Op::RoiAlign { .. } => "roi_align",
            Op::ConcatFlat => "concat_flat",
            Op::Loss { name } => name,
            Op::Sum => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
    /// Saved input gradient for loss nodes.
    saved_grad: Option<Tensor4<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor4<T>>>,
    checked: bool,
    negate_conv_backward: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Checked mode (non-finite scan after every op) follows
    /// `debug_assertions` by default.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: cfg!(debug_assertions),
            negate_conv_backward: false,
        }
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn checked(&self) -> bool {
        self.checked
    }

    /// Fault injection: flip the sign of the convolution backward pass.
    /// Exists only so tests can prove the gradient checker notices.
    pub fn inject_conv_backward_fault(&mut self, on: bool) {
        self.negate_conv_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor4<T>,
        op: Op,
        inputs: Vec<usize>,
        saved_grad: Option<Tensor4<T>>,
    ) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            saved_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: true,
            saved_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: false,
            saved_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims()
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    // ---- ops -------------------------------------------------------------

    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = kernels::conv_forward(self.value(x), self.value(w), self.value(b), stride)?;
        self.push(y, Op::Conv { stride }, vec![x.0, w.0, b.0], None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu, vec![x.0], None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid, vec![x.0], None)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_channels(self.value(x));
        self.push(y, Op::Softmax, vec![x.0], None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        self.push(y, Op::Add, vec![a.0, b.0], None)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor4<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat_channels(&vals)?;
        let widths = vals.iter().map(|v| v.c()).collect();
        self.push(
            y,
            Op::Concat { widths },
            parts.iter().map(|p| p.0).collect(),
            None,
        )
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        self.push(y, Op::Slice { start }, vec![x.0], None)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample2x_nearest(self.value(x));
        self.push(y, Op::Upsample, vec![x.0], None)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2x2(self.value(x))?;
        self.push(y, Op::MaxPool { argmax }, vec![x.0], None)
    }

    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avgpool2x2(self.value(x))?;
        self.push(y, Op::AvgPool, vec![x.0], None)
    }

    pub fn l2norm_scale(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let y = kernels::channel_l2norm_scale(self.value(x), self.value(gamma))?;
        self.push(y, Op::L2Norm, vec![x.0, gamma.0], None)
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::fully_connected(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Fc, vec![x.0, w.0, b.0], None)
    }

    pub fn scan(&mut self, x: Var, w_hh: Var, dir: Direction) -> Result<Var> {
        let y = scan::scan_forward(self.value(x), self.value(w_hh), dir)?;
        self.push(y, Op::Scan { dir }, vec![x.0, w_hh.0], None)
    }

    /// Pools every ROI from `levels[roi.level]`; output `(R, c, res, res)`.
    pub fn roi_align(
        &mut self,
        levels: &[Var],
        strides: &[f64],
        rois: &[Roi],
        res: usize,
    ) -> Result<Var> {
        let vals: Vec<&Tensor4<T>> = levels.iter().map(|&l| self.value(l)).collect();
        let y = roi::roi_align_forward(&vals, strides, rois, res)?;
        self.push(
            y,
            Op::RoiAlign {
                rois: rois.to_vec(),
                strides: strides.to_vec(),
                res,
            },
            levels.iter().map(|l| l.0).collect(),
            None,
        )
    }

    /// Flattens and concatenates inputs into `(1, total, 1, 1)`.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        let y = Tensor4::from_vec([1, n, 1, 1], data)?;
        self.push(y, Op::ConcatFlat, parts.iter().map(|p| p.0).collect(), None)
    }

    fn loss_node(&mut self, name: &'static str, input: Var, out: LossOutput<T>) -> Result<Var> {
        self.push(
            Tensor4::scalar(T::of(out.loss)),
            Op::Loss { name },
            vec![input.0],
            Some(out.grad),
        )
    }

    pub fn objectness_loss(&mut self, logits: Var, targets: &[(usize, f64)]) -> Result<Var> {
        let out = losses::objectness_loss(self.value(logits), targets)?;
        self.loss_node("objectness_loss", logits, out)
    }

    pub fn smooth_l1_loss(
        &mut self,
        pred: Var,
        targets: &[(usize, f64)],
        params: SmoothL1Params,
    ) -> Result<Var> {
        let out = losses::smooth_l1_loss(self.value(pred), targets, params)?;
        self.loss_node("smooth_l1_loss", pred, out)
    }

    pub fn classification_loss(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let out = losses::classification_loss(self.value(logits), classes)?;
        self.loss_node("classification_loss", logits, out)
    }

    pub fn mask_loss(&mut self, logits: Var, classes: &[usize], truth: &[Vec<f64>]) -> Result<Var> {
        let out = losses::mask_loss(self.value(logits), classes, truth)?;
        self.loss_node("mask_loss", logits, out)
    }

    /// Sum of scalar nodes, accumulated in argument order.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut s = T::zero();
        for &t in terms {
            let v = self.value(t);
            check_shape("sum", v.dims(), [1, 1, 1, 1])?;
            s += v.data()[0];
        }
        self.push(
            Tensor4::scalar(s),
            Op::Sum,
            terms.iter().map(|t| t.0).collect(),
            None,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagates from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        check_shape("backward", self.dims(out), [1, 1, 1, 1])?;
        self.backward_with(out, Tensor4::scalar(T::one()))
    }

    /// Backpropagates an explicit output cotangent `seed`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor4<T>) -> Result<()> {
        check_shape("backward", self.dims(out), seed.dims())?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let input_grads = self.node_backward(i, &dy)?;
            let inputs = self.nodes[i].inputs.clone();
            for (inp, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                match &mut self.grads[inp] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dy: &Tensor4<T>) -> Result<Vec<Option<Tensor4<T>>>> {
        let node = &self.nodes[i];
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { stride } => {
                let (mut dx, mut dw, db) =
                    kernels::conv_backward(input(0), input(1), dy, *stride)?;
                if self.negate_conv_backward {
                    dx = dx.scale(-T::one());
                    dw = dw.scale(-T::one());
                }
                vec![Some(dx), Some(dw), Some(db.reshape(input(2).dims())?)]
            }
            Op::Relu => vec![Some(kernels::relu_backward(input(0), dy))],
            Op::Sigmoid => vec![Some(kernels::sigmoid_backward(&node.value, dy))],
            Op::Softmax => vec![Some(kernels::softmax_channels_backward(&node.value, dy))],
            Op::Add => vec![Some(dy.clone()), Some(dy.clone())],
            Op::Concat { widths } => kernels::split_channels(dy, widths)
                .into_iter()
                .map(Some)
                .collect(),
            Op::Slice { start } => {
                let x = input(0);
                let mut dx = Tensor4::zeros(x.dims());
                let [n, c, h, w] = x.dims();
                let len = dy.c();
                let hw = h * w;
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    dx.data_mut()[dst..dst + len * hw].copy_from_slice(dy.item(b));
                }
                vec![Some(dx)]
            }
            Op::Upsample => vec![Some(kernels::upsample2x_nearest_backward(dy))],
            Op::MaxPool { argmax } => vec![Some(kernels::maxpool2x2_backward(
                input(0).dims(),
                argmax,
                dy,
            ))],
            Op::AvgPool => vec![Some(kernels::avgpool2x2_backward(input(0).dims(), dy))],
            Op::L2Norm => {
                let (dx, dg) = kernels::channel_l2norm_scale_backward(input(0), input(1), dy);
                vec![Some(dx), Some(dg)]
            }
            Op::Fc => {
                let (dx, dw, db) = kernels::fully_connected_backward(input(0), input(1), dy);
                vec![Some(dx), Some(dw), Some(db.reshape(input(2).dims())?)]
            }
            Op::Scan { dir } => {
                let (dx, dw) = scan::scan_backward(dy, &node.value, input(1), *dir)?;
                vec![Some(dx), Some(dw)]
            }
            Op::RoiAlign {
                rois,
                strides,
                res,
            } => {
                let dims: Vec<[usize; 4]> = (0..node.inputs.len()).map(|k| input(k).dims()).collect();
                roi::roi_align_backward(&dims, strides, rois, *res, dy)
                    .into_iter()
                    .map(Some)
                    .collect()
            }
            Op::ConcatFlat => {
                let mut off = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let d = input(k).dims();
                    let len: usize = d.iter().product();
                    out.push(Some(Tensor4::from_vec(
                        d,
                        dy.data()[off..off + len].to_vec(),
                    )?));
                    off += len;
                }
                out
            }
            Op::Loss { .. } => {
                let g = node.saved_grad.as_ref().expect("loss nodes save their gradient");
                vec![Some(g.scale(dy.data()[0]))]
            }
            Op::Sum => (0..node.inputs.len()).map(|_| Some(dy.clone())).collect(),
        };
        if self.checked {
            for g in grads.iter().flatten() {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: node.op.name(),
                    });
                }
            }
        }
        Ok(grads)
    }
}
