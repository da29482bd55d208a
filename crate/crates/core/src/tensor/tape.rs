use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    BlockSum {
        input: Var,
        factor: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    SumSquaredError {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a reverse sweep visits each node after all of its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned vector; zeros for unreachable values.
    pub fn get_or_zero(&self, var: Var) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens[var.0]],
        }
    }

    /// Stores the gradient of `var` into `param.grad`.
    pub fn install(&self, var: Var, param: &mut Tensor) -> Result<()> {
        param.set_grad(self.get_or_zero(var))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and its saved state.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Records a differentiable leaf (a trainable parameter or an input we
    /// want gradients for). The tape keeps its own copy of the data.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut value = tensor.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.clear_grad();
        self.push(tensor, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::MaxPool2 { input, .. }
            | Op::Relu { input }
            | Op::Upsample { input, .. }
            | Op::BlockSum { input, .. }
            | Op::Scale { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::Concat { parts } => parts.clone(),
            Op::Add { lhs, rhs } => vec![*lhs, *rhs],
            Op::SumSquaredError { pred, target } => vec![*pred, *target],
        }
    }

    /// Same-padded stride-one convolution. `weight` is `[Cout, Cin, k, k]`
    /// with odd `k`, `bias` has length `Cout`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = self.value(input).chw()?;
        let ws = self.value(weight).shape().to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(Error::shape(format!(
                "conv weight must be [Cout, Cin, k, k], got {ws:?}"
            )));
        };
        if kh != kw {
            return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::config(format!(
                "even kernel size {kh} has no same-padding"
            )));
        }
        if wcin != cin {
            return Err(Error::shape(format!(
                "input has {cin} channels but weight expects {wcin}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {cout} output channels",
                self.value(bias).shape()
            )));
        }
        let geometry = ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel: kh,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geometry,
        );
        let value = Tensor::new(vec![cout, h, w], out)?;
        self.push_checked(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            "conv2d",
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("max pooling needs at least 2x2, got {h}x{w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), c, h, w);
        let value = Tensor::new(vec![c, h / 2, w / 2], out)?;
        self.push_checked(value, Op::MaxPool2 { input, argmax }, "maxpool2")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        self.push_checked(value, Op::Relu { input }, "relu")
    }

    /// Half-pixel bilinear upsampling by 2.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        self.upsample(input, 2)
    }

    /// Half-pixel bilinear upsampling by an integer factor.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::config("upsampling factor must be positive"));
        }
        if factor == 1 {
            return Ok(input);
        }
        let (c, h, w) = self.value(input).chw()?;
        let out = kernels::upsample_bilinear_forward(self.value(input).data(), c, h, w, factor);
        let value = Tensor::new(vec![c, h * factor, w * factor], out)?;
        self.push_checked(value, Op::Upsample { input, factor }, "upsample")
    }

    /// Sums disjoint `factor x factor` blocks.
    pub fn block_sum(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::config("block-sum factor must be positive"));
        }
        if factor == 1 {
            return Ok(input);
        }
        let (c, h, w) = self.value(input).chw()?;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} is not divisible by block size {factor}"
            )));
        }
        let out = kernels::block_sum_forward(self.value(input).data(), c, h, w, factor);
        let value = Tensor::new(vec![c, h / factor, w / factor], out)?;
        self.push_checked(value, Op::BlockSum { input, factor }, "block_sum")
    }

    /// Stacks `[Ci, H, W]` values along the channel axis in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concatenation of zero tensors"));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let (_, h, w) = self.value(first).chw()?;
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "cannot concatenate {ph}x{pw} with {h}x{w}"
                )));
            }
            channels += c;
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![channels, h, w], data)?;
        self.push_checked(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            "concat",
        )
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * factor).collect(),
        )?;
        self.push_checked(value, Op::Scale { input, factor }, "scale")
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let value = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )?;
        self.push_checked(value, Op::Add { lhs, rhs }, "add")
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::new(vec![1], vec![self.value(input).sum()])?;
        self.push_checked(value, Op::Sum { input }, "sum")
    }

    /// `sum((pred - target)^2)` as a one-element tensor.
    pub fn sum_squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} and target {:?} differ in shape",
                p.shape(),
                t.shape()
            )));
        }
        let sse = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::new(vec![1], vec![sse])?;
        self.push_checked(value, Op::SumSquaredError { pred, target }, "sum_squared_error")
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape: recorded
    /// saved state stays allocated until [`Tape::clear`], but neither a
    /// second backward nor further recording is allowed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward called on a consumed tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let lens = self.nodes.iter().map(|n| n.value.numel()).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads, lens });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            for (var, contrib) in self.local_backward(&node.op, &node.value, &g) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // only leaf gradients are reported
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, lens })
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn local_backward(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geometry,
                    (self.needs(*input), self.needs(*weight), self.needs(*bias)),
                );
                let mut res = Vec::with_capacity(3);
                if let Some(gi) = grads.input {
                    res.push((*input, gi));
                }
                if let Some(gw) = grads.weight {
                    res.push((*weight, gw));
                }
                if let Some(gb) = grads.bias {
                    res.push((*bias, gb));
                }
                res
            }
            Op::MaxPool2 { input, argmax } => {
                let len = self.value(*input).numel();
                vec![(*input, kernels::maxpool2_backward(g, argmax, len))]
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gi = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*input, gi)]
            }
            Op::Upsample { input, factor } => {
                let (c, h, w) = self.value(*input).chw().expect("validated at record time");
                vec![(
                    *input,
                    kernels::upsample_bilinear_backward(g, c, h, w, *factor),
                )]
            }
            Op::BlockSum { input, factor } => {
                let (c, h, w) = self.value(*input).chw().expect("validated at record time");
                vec![(*input, kernels::block_sum_backward(g, c, h, w, *factor))]
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.value(p).numel();
                    res.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
                debug_assert_eq!(offset, out.numel());
                res
            }
            Op::Scale { input, factor } => {
                vec![(*input, g.iter().map(|v| v * factor).collect())]
            }
            Op::Add { lhs, rhs } => vec![(*lhs, g.to_vec()), (*rhs, g.to_vec())],
            Op::Sum { input } => {
                vec![(*input, vec![g[0]; self.value(*input).numel()])]
            }
            Op::SumSquaredError { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = 2.0 * g[0];
                let gp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                let gt = gp.iter().map(|v| -v).collect();
                vec![(*pred, gp), (*target, gt)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::full(&[2], 1.0));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn disjoint_subgraph_gets_zero() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::full(&[3], 2.0));
        let b = tape.param(&Tensor::full(&[3], 5.0));
        let sa = tape.sum(a).unwrap();
        let _sb = tape.sum(b).unwrap();
        let grads = tape.backward(sa).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zero(b), vec![0.0; 3]);
    }

    #[test]
    fn relu_subgradient_zero_at_origin() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sse_value_and_grad() {
        let mut tape = Tape::new();
        let p = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let t = tape.constant(Tensor::zeros(&[2]));
        let loss = tape.sum_squared_error(p, t).unwrap();
        assert_eq!(tape.value(loss).data(), &[5.0]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[2.0, 4.0]);
        assert!(grads.get(t).is_none());
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b), Err(Error::Shape(_))));
        let w_even = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(tape.conv2d(x, w_even, b), Err(Error::Config(_))));
    }

    #[test]
    fn maxpool_rejects_small_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4]));
        assert!(matches!(tape.maxpool2(x), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn concat_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 3]));
        assert!(matches!(tape.concat_channels(&[a, b]), Err(Error::Shape(_))));
    }
}
