//! Reverse-mode automatic differentiation over a closed op set.
//!
//! A [`Graph`] is an append-only arena of nodes; edges always point to
//! earlier nodes, so arena order is already topological. Shapes are
//! inferred and validated when a node is added, never at run time.
//! `forward` fills every node's value cache, `backward` seeds the loss
//! gradient with ones and walks the arena in reverse.
//!
//! The op set is exactly what the encoder, decoder, transform predictor,
//! and losses need: conv2d (stride 1, "same" zero padding), relu, 2x2 max
//! pooling, 2x nearest upsampling, linear, matmul, add, scale, reshape,
//! channel-mean subtraction, covariance, Gram, squared Frobenius
//! difference, and weighted sum. Keeping the set closed keeps every
//! backward rule small enough to audit by hand.

pub mod checks;
pub mod kernels;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;

/// Handle into a [`Graph`]'s node arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Parameter,
    Conv2d,
    Relu,
    MaxPool2,
    Upsample2Nearest,
    Linear,
    MatMul,
    Add,
    Scale(f64),
    Reshape,
    SubtractChannelMean,
    Covariance,
    Gram,
    FrobeniusSqDiff,
    WeightedSum(Vec<f64>),
}

/// Forward-pass byproducts some backward rules need.
#[derive(Debug, Clone)]
enum Aux {
    None,
    /// maxpool2: flat input index of each window's winner.
    ArgMax(Vec<usize>),
    /// covariance: the centered input.
    Centered(Tensor),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    aux: Aux,
    no_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    forward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value: None,
            grad: None,
            aux: Aux::None,
            no_grad: false,
        });
        self.forward_done = false;
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(CoreError::InvalidArgument(format!(
                "node id {} out of range",
                id.0
            )));
        }
        Ok(())
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Placeholder bound per evaluation via [`Graph::bind`].
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Input, vec![], shape.to_vec())
    }

    /// Trainable leaf holding a persistent value.
    pub fn parameter(&mut self, init: Tensor) -> NodeId {
        let shape = init.shape().to_vec();
        let id = self.push(Op::Parameter, vec![], shape);
        self.nodes[id.0].value = Some(init);
        id
    }

    /// Binds a value to an input node. Invalidates cached activations.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        self.check(id)?;
        if !matches!(self.node(id).op, Op::Input) {
            return Err(CoreError::InvalidArgument("bind target is not an input node".into()));
        }
        if value.shape() != self.node(id).shape {
            return Err(CoreError::ShapeMismatch(format!(
                "bind: value {:?} vs input {:?}",
                value.shape(),
                self.node(id).shape
            )));
        }
        self.nodes[id.0].value = Some(value);
        self.forward_done = false;
        Ok(())
    }

    /// Overwrites a parameter's value (optimizer step).
    pub fn set_param(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        self.check(id)?;
        if !matches!(self.node(id).op, Op::Parameter) {
            return Err(CoreError::InvalidArgument("set_param target is not a parameter".into()));
        }
        if value.shape() != self.node(id).shape {
            return Err(CoreError::ShapeMismatch(format!(
                "set_param: value {:?} vs parameter {:?}",
                value.shape(),
                self.node(id).shape
            )));
        }
        self.nodes[id.0].value = Some(value);
        self.forward_done = false;
        Ok(())
    }

    /// Marks a leaf as a constant: backward neither computes nor stores a
    /// gradient for it, and subtrees that reach only constant leaves are
    /// skipped entirely. Frozen weights and data inputs go through here.
    pub fn set_no_grad(&mut self, id: NodeId) -> Result<()> {
        self.check(id)?;
        if !matches!(self.node(id).op, Op::Input | Op::Parameter) {
            return Err(CoreError::InvalidArgument(
                "set_no_grad applies to input or parameter leaves only".into(),
            ));
        }
        self.nodes[id.0].no_grad = true;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.node(id).value.as_ref()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.node(id).grad.as_ref()
    }

    /// Scalar convenience: value of a [1]-shaped node.
    pub fn scalar_value(&self, id: NodeId) -> Option<f64> {
        self.value(id).map(|t| t.data()[0])
    }

    // ---- node constructors (shape inference happens here) ----

    /// conv2d(x: [Cin,H,W], w: [Cout,Cin,KH,KW], b: [Cout]) -> [Cout,H,W].
    /// Stride 1, zero padding preserves H and W; kernel sides must be odd.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xs = self.node(x).shape.clone();
        let ws = self.node(w).shape.clone();
        let bs = self.node(b).shape.clone();
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d ranks: x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin || bs[0] != cout {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d channels: x has {cin}, w expects {wcin}, bias {} for {cout} outputs",
                bs[0]
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "conv2d kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        Ok(self.push(Op::Conv2d, vec![x, w, b], vec![cout, h, wd]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::Relu, vec![x], shape))
    }

    /// 2x2 max pooling, stride 2; spatial dims must be even.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.node(x).shape.clone();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "maxpool2 needs [C, even H, even W], got {s:?}"
            )));
        }
        Ok(self.push(Op::MaxPool2, vec![x], vec![s[0], s[1] / 2, s[2] / 2]))
    }

    pub fn upsample2_nearest(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.node(x).shape.clone();
        if s.len() != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "upsample2_nearest needs [C,H,W], got {s:?}"
            )));
        }
        Ok(self.push(Op::Upsample2Nearest, vec![x], vec![s[0], s[1] * 2, s[2] * 2]))
    }

    /// linear(x: [in], w: [out,in], b: [out]) -> [out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xs = self.node(x).shape.clone();
        let ws = self.node(w).shape.clone();
        let bs = self.node(b).shape.clone();
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(CoreError::ShapeMismatch(format!(
                "linear shapes: x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        Ok(self.push(Op::Linear, vec![x, w, b], vec![ws[0]]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.node(a).shape.clone();
        let sb = self.node(b).shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch(format!("matmul shapes: {sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![sa[0], sb[1]]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.node(a).shape.clone();
        if sa != self.node(b).shape {
            return Err(CoreError::ShapeMismatch(format!(
                "add shapes: {sa:?} vs {:?}",
                self.node(b).shape
            )));
        }
        Ok(self.push(Op::Add, vec![a, b], sa))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.check(x)?;
        if !s.is_finite() {
            return Err(CoreError::InvalidArgument(format!("scale factor {s} not finite")));
        }
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::Scale(s), vec![x], shape))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let n: usize = self.node(x).shape.iter().product();
        let m: usize = shape.iter().product();
        if n != m {
            return Err(CoreError::ShapeMismatch(format!(
                "reshape {:?} ({n} elems) -> {shape:?} ({m} elems)",
                self.node(x).shape
            )));
        }
        Ok(self.push(Op::Reshape, vec![x], shape.to_vec()))
    }

    /// x - rowmean(x) per channel; x is [C, N].
    pub fn subtract_channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.node(x).shape.clone();
        if s.len() != 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "subtract_channel_mean needs [C,N], got {s:?}"
            )));
        }
        Ok(self.push(Op::SubtractChannelMean, vec![x], s))
    }

    /// (1/N) * centered(x) * centered(x)_t for x [C,N] -> [C,C].
    pub fn covariance(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.node(x).shape.clone();
        if s.len() != 2 {
            return Err(CoreError::ShapeMismatch(format!("covariance needs [C,N], got {s:?}")));
        }
        Ok(self.push(Op::Covariance, vec![x], vec![s[0], s[0]]))
    }

    /// (1/N) * x * x_t for x [C,N] -> [C,C], uncentered.
    pub fn gram(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.node(x).shape.clone();
        if s.len() != 2 {
            return Err(CoreError::ShapeMismatch(format!("gram needs [C,N], got {s:?}")));
        }
        Ok(self.push(Op::Gram, vec![x], vec![s[0], s[0]]))
    }

    /// Sum of squared elementwise differences -> scalar [1].
    pub fn frobenius_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.node(a).shape != self.node(b).shape {
            return Err(CoreError::ShapeMismatch(format!(
                "frobenius_sq_diff shapes: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(self.push(Op::FrobeniusSqDiff, vec![a, b], vec![1]))
    }

    /// sum_i weights[i] * terms[i], all terms the same shape.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(CoreError::InvalidArgument("weighted_sum needs at least one term".into()));
        }
        for &(id, w) in terms {
            self.check(id)?;
            if !w.is_finite() {
                return Err(CoreError::InvalidArgument(format!("weight {w} not finite")));
            }
        }
        let shape = self.node(terms[0].0).shape.clone();
        for &(id, _) in &terms[1..] {
            if self.node(id).shape != shape {
                return Err(CoreError::ShapeMismatch(format!(
                    "weighted_sum shapes: {shape:?} vs {:?}",
                    self.node(id).shape
                )));
            }
        }
        let (ids, ws): (Vec<NodeId>, Vec<f64>) = terms.iter().copied().unzip();
        Ok(self.push(Op::WeightedSum(ws), ids, shape))
    }

    // ---- execution ----

    /// Computes every node's value in arena order. Fails on unbound inputs.
    pub fn forward(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            let (op, inputs) = (self.nodes[idx].op.clone(), self.nodes[idx].inputs.clone());
            match op {
                Op::Input => {
                    if self.nodes[idx].value.is_none() {
                        return Err(CoreError::InvalidArgument(format!(
                            "unbound input node {idx}"
                        )));
                    }
                }
                Op::Parameter => {
                    debug_assert!(self.nodes[idx].value.is_some());
                }
                _ => {
                    let (value, aux) = self.eval(&op, &inputs, idx)?;
                    self.nodes[idx].value = Some(value);
                    self.nodes[idx].aux = aux;
                }
            }
        }
        self.forward_done = true;
        Ok(())
    }

    fn in_val(&self, inputs: &[NodeId], k: usize) -> &Tensor {
        self.nodes[inputs[k].0].value.as_ref().expect("value computed in arena order")
    }

    fn eval(&self, op: &Op, inputs: &[NodeId], idx: usize) -> Result<(Tensor, Aux)> {
        let out_shape = self.nodes[idx].shape.clone();
        let t = |data: Vec<f64>| Tensor::from_raw(out_shape.clone(), data);
        Ok(match op {
            Op::Input | Op::Parameter => unreachable!("leaves are not evaluated"),
            Op::Conv2d => {
                let x = self.in_val(inputs, 0);
                let w = self.in_val(inputs, 1);
                let b = self.in_val(inputs, 2);
                let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let out = kernels::conv2d_forward(
                    x.data(), w.data(), b.data(), cin, cout, h, wd, kh, kw,
                );
                (t(out), Aux::None)
            }
            Op::Relu => {
                let x = self.in_val(inputs, 0);
                (t(x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()), Aux::None)
            }
            Op::MaxPool2 => {
                let x = self.in_val(inputs, 0);
                let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (out, arg) = kernels::maxpool2_forward(x.data(), c, h, wd);
                (t(out), Aux::ArgMax(arg))
            }
            Op::Upsample2Nearest => {
                let x = self.in_val(inputs, 0);
                let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                (t(kernels::upsample2_forward(x.data(), c, h, wd)), Aux::None)
            }
            Op::Linear => {
                let x = self.in_val(inputs, 0);
                let w = self.in_val(inputs, 1);
                let b = self.in_val(inputs, 2);
                let (out_n, in_n) = (w.shape()[0], w.shape()[1]);
                let mut out = Vec::with_capacity(out_n);
                for o in 0..out_n {
                    let row = &w.data()[o * in_n..(o + 1) * in_n];
                    let mut acc = b.data()[o];
                    for (wi, xi) in row.iter().zip(x.data()) {
                        acc += wi * xi;
                    }
                    out.push(acc);
                }
                (t(out), Aux::None)
            }
            Op::MatMul => {
                let a = self.in_val(inputs, 0);
                let b = self.in_val(inputs, 1);
                (a.matmul(b)?, Aux::None)
            }
            Op::Add => {
                let a = self.in_val(inputs, 0);
                let b = self.in_val(inputs, 1);
                (a.add(b)?, Aux::None)
            }
            Op::Scale(s) => {
                let x = self.in_val(inputs, 0);
                (x.scale(*s), Aux::None)
            }
            Op::Reshape => {
                let x = self.in_val(inputs, 0);
                (Tensor::from_raw(out_shape.clone(), x.data().to_vec()), Aux::None)
            }
            Op::SubtractChannelMean => {
                let x = self.in_val(inputs, 0);
                let (c, n) = (x.shape()[0], x.shape()[1]);
                let inv_n = 1.0 / n as f64;
                let mut out = Vec::with_capacity(c * n);
                for ch in 0..c {
                    let row = &x.data()[ch * n..(ch + 1) * n];
                    let mean = row.iter().sum::<f64>() * inv_n;
                    out.extend(row.iter().map(|v| v - mean));
                }
                (t(out), Aux::None)
            }
            Op::Covariance => {
                let x = self.in_val(inputs, 0);
                let (c, n) = (x.shape()[0], x.shape()[1]);
                let inv_n = 1.0 / n as f64;
                let mut centered = Vec::with_capacity(c * n);
                for ch in 0..c {
                    let row = &x.data()[ch * n..(ch + 1) * n];
                    let mean = row.iter().sum::<f64>() * inv_n;
                    centered.extend(row.iter().map(|v| v - mean));
                }
                let cov = second_moment(&centered, c, n);
                (t(cov), Aux::Centered(Tensor::from_raw(vec![c, n], centered)))
            }
            Op::Gram => {
                let x = self.in_val(inputs, 0);
                let (c, n) = (x.shape()[0], x.shape()[1]);
                (t(second_moment(x.data(), c, n)), Aux::None)
            }
            Op::FrobeniusSqDiff => {
                let a = self.in_val(inputs, 0);
                let b = self.in_val(inputs, 1);
                let mut acc = 0.0;
                for (x, y) in a.data().iter().zip(b.data()) {
                    let d = x - y;
                    acc += d * d;
                }
                (t(vec![acc]), Aux::None)
            }
            Op::WeightedSum(ws) => {
                let len: usize = out_shape.iter().product();
                let mut out = vec![0.0; len];
                for (k, &w) in ws.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(self.in_val(inputs, k).data()) {
                        *o += w * v;
                    }
                }
                (t(out), Aux::None)
            }
        })
    }

    /// Reverse pass from `loss`, which must be scalar-shaped [1]. Gradients
    /// of earlier runs are cleared first; the loss's own gradient is 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if !self.forward_done {
            return Err(CoreError::InvalidArgument("backward called before forward".into()));
        }
        if self.nodes[loss.0].shape != [1] {
            return Err(CoreError::ShapeMismatch(format!(
                "backward needs a scalar loss node, got {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::from_raw(vec![1], vec![1.0]));

        // A node needs a gradient when it is a live leaf or any path below it
        // reaches one; everything else (frozen weights, constants, and ops
        // feeding only them) is skipped.
        let needs = self.needs_grad();
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !needs[idx] {
                continue;
            }
            let (op, inputs) = (self.nodes[idx].op.clone(), self.nodes[idx].inputs.clone());
            self.propagate(&op, &inputs, idx, &needs)?;
        }
        Ok(())
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            needs[i] = match n.op {
                Op::Input | Op::Parameter => !n.no_grad,
                _ => n.inputs.iter().any(|id| needs[id.0]),
            };
        }
        needs
    }

    fn accumulate(&mut self, target: NodeId, contrib_data: Vec<f64>) {
        let node = &mut self.nodes[target.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.data_mut().iter_mut().zip(&contrib_data) {
                    *gv += cv;
                }
            }
            None => {
                node.grad = Some(Tensor::from_raw(node.shape.clone(), contrib_data));
            }
        }
    }

    fn propagate(&mut self, op: &Op, inputs: &[NodeId], idx: usize, needs: &[bool]) -> Result<()> {
        let g = self.nodes[idx].grad.as_ref().expect("checked by caller").clone();
        match op {
            Op::Input | Op::Parameter => {}
            Op::Conv2d => {
                let x = self.in_val(inputs, 0).clone();
                let w = self.in_val(inputs, 1).clone();
                let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                if needs[inputs[0].index()] {
                    let dx = kernels::conv2d_backward_input(
                        g.data(), w.data(), cin, cout, h, wd, kh, kw,
                    );
                    self.accumulate(inputs[0], dx);
                }
                if needs[inputs[1].index()] || needs[inputs[2].index()] {
                    let (dw, db) = kernels::conv2d_backward_params(
                        g.data(), x.data(), cin, cout, h, wd, kh, kw,
                    );
                    if needs[inputs[1].index()] {
                        self.accumulate(inputs[1], dw);
                    }
                    if needs[inputs[2].index()] {
                        self.accumulate(inputs[2], db);
                    }
                }
            }
            Op::Relu => {
                let x = self.in_val(inputs, 0);
                let dx = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(inputs[0], dx);
            }
            Op::MaxPool2 => {
                let arg = match &self.nodes[idx].aux {
                    Aux::ArgMax(a) => a.clone(),
                    _ => unreachable!("maxpool cached argmax in forward"),
                };
                let len = self.in_val(inputs, 0).len();
                self.accumulate(inputs[0], kernels::maxpool2_backward(g.data(), &arg, len));
            }
            Op::Upsample2Nearest => {
                let x = self.in_val(inputs, 0);
                let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                self.accumulate(inputs[0], kernels::upsample2_backward(g.data(), c, h, wd));
            }
            Op::Linear => {
                let x = self.in_val(inputs, 0).clone();
                let w = self.in_val(inputs, 1).clone();
                let (out_n, in_n) = (w.shape()[0], w.shape()[1]);
                if needs[inputs[0].index()] {
                    let mut dx = vec![0.0; in_n];
                    for o in 0..out_n {
                        let gv = g.data()[o];
                        let row = &w.data()[o * in_n..(o + 1) * in_n];
                        for (d, wv) in dx.iter_mut().zip(row) {
                            *d += gv * wv;
                        }
                    }
                    self.accumulate(inputs[0], dx);
                }
                if needs[inputs[1].index()] {
                    let mut dw = vec![0.0; out_n * in_n];
                    for o in 0..out_n {
                        let gv = g.data()[o];
                        for (i, xv) in x.data().iter().enumerate() {
                            dw[o * in_n + i] = gv * xv;
                        }
                    }
                    self.accumulate(inputs[1], dw);
                }
                if needs[inputs[2].index()] {
                    self.accumulate(inputs[2], g.data().to_vec());
                }
            }
            Op::MatMul => {
                let a = self.in_val(inputs, 0).clone();
                let b = self.in_val(inputs, 1).clone();
                if needs[inputs[0].index()] {
                    let da = g.matmul(&b.transpose())?;
                    self.accumulate(inputs[0], da.into_data());
                }
                if needs[inputs[1].index()] {
                    let db = a.transpose().matmul(&g)?;
                    self.accumulate(inputs[1], db.into_data());
                }
            }
            Op::Add => {
                for k in 0..2 {
                    if needs[inputs[k].index()] {
                        self.accumulate(inputs[k], g.data().to_vec());
                    }
                }
            }
            Op::Scale(s) => {
                self.accumulate(inputs[0], g.data().iter().map(|v| v * s).collect());
            }
            Op::Reshape => {
                self.accumulate(inputs[0], g.data().to_vec());
            }
            Op::SubtractChannelMean => {
                // d/dx of (x - rowmean(x)) applied to g is g - rowmean(g):
                // the centering projector is its own adjoint.
                let (c, n) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                let inv_n = 1.0 / n as f64;
                let mut dx = Vec::with_capacity(c * n);
                for ch in 0..c {
                    let row = &g.data()[ch * n..(ch + 1) * n];
                    let mean = row.iter().sum::<f64>() * inv_n;
                    dx.extend(row.iter().map(|v| v - mean));
                }
                self.accumulate(inputs[0], dx);
            }
            Op::Covariance => {
                // cov = (1/N) Xc Xc_t with Xc = centered(X). Upstream G gives
                // dX = (1/N) (G + G_t) Xc; right-multiplying by the centering
                // projector is a no-op because Xc's rows are already centered.
                let centered = match &self.nodes[idx].aux {
                    Aux::Centered(c) => c.clone(),
                    _ => unreachable!("covariance cached centered input in forward"),
                };
                let n = centered.shape()[1] as f64;
                let gsym = g.add(&g.transpose())?;
                let dx = gsym.matmul(&centered)?.scale(1.0 / n);
                self.accumulate(inputs[0], dx.into_data());
            }
            Op::Gram => {
                let x = self.in_val(inputs, 0).clone();
                let n = x.shape()[1] as f64;
                let gsym = g.add(&g.transpose())?;
                let dx = gsym.matmul(&x)?.scale(1.0 / n);
                self.accumulate(inputs[0], dx.into_data());
            }
            Op::FrobeniusSqDiff => {
                let a = self.in_val(inputs, 0).clone();
                let b = self.in_val(inputs, 1).clone();
                let gv = g.data()[0];
                let da: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| 2.0 * gv * (x - y))
                    .collect();
                if needs[inputs[1].index()] {
                    self.accumulate(inputs[1], da.iter().map(|v| -v).collect());
                }
                if needs[inputs[0].index()] {
                    self.accumulate(inputs[0], da);
                }
            }
            Op::WeightedSum(ws) => {
                for (k, &w) in ws.iter().enumerate() {
                    if needs[inputs[k].index()] {
                        self.accumulate(inputs[k], g.data().iter().map(|v| w * v).collect());
                    }
                }
            }
        }
        Ok(())
    }

    /// Smallest distance to a non-differentiable point in the current
    /// forward state: min over relu inputs of |x| and over pooling windows
    /// of (max - runner-up). Infinite when no such op exists. Test-point
    /// generators reject states where this is below ~10x the FD step.
    pub fn differentiability_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu => {
                    let x = self.nodes[node.inputs[0].0].value.as_ref();
                    if let Some(x) = x {
                        for &v in x.data() {
                            margin = margin.min(v.abs());
                        }
                    }
                }
                Op::MaxPool2 => {
                    let x = self.nodes[node.inputs[0].0].value.as_ref();
                    if let Some(x) = x {
                        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                        for ch in 0..c {
                            let plane = &x.data()[ch * h * wd..(ch + 1) * h * wd];
                            for i in 0..h / 2 {
                                for j in 0..wd / 2 {
                                    let vals = [
                                        plane[(2 * i) * wd + 2 * j],
                                        plane[(2 * i) * wd + 2 * j + 1],
                                        plane[(2 * i + 1) * wd + 2 * j],
                                        plane[(2 * i + 1) * wd + 2 * j + 1],
                                    ];
                                    let mut sorted = vals;
                                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                    margin = margin.min(sorted[0] - sorted[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// List of parameter node ids in creation order.
    pub fn parameters(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Parameter))
            .map(|(i, _)| NodeId(i))
            .collect()
    }
}

/// Upper-triangle-then-mirror (1/N) M M_t; shared by gram and covariance
/// forwards so both produce exactly symmetric matrices the same way the
/// stats module does.
fn second_moment(m: &[f64], c: usize, n: usize) -> Vec<f64> {
    let inv_n = 1.0 / n as f64;
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        let ri = &m[i * n..(i + 1) * n];
        for j in i..c {
            let rj = &m[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for p in 0..n {
                acc += ri[p] * rj[p];
            }
            let v = acc * inv_n;
            out[i * c + j] = v;
            out[j * c + i] = v;
        }
    }
    out
}

/// Central finite-difference check of d(loss)/d(param).
///
/// Samples up to `samples` coordinates of `param` (all of them when the
/// parameter is small), nudges each by +-h, and compares (L+ - L-)/(2h)
/// against the analytic gradient. Returns the max over sampled coordinates
/// of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). The graph is
/// left with the original parameter values and a fresh forward state.
pub fn grad_check(
    graph: &mut Graph,
    loss: NodeId,
    param: NodeId,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    graph.check(param)?;
    if !matches!(graph.node(param).op, Op::Parameter) {
        return Err(CoreError::InvalidArgument("grad_check target is not a parameter".into()));
    }
    graph.forward()?;
    graph.backward(loss)?;
    let analytic = graph
        .grad(param)
        .ok_or_else(|| {
            CoreError::InvalidArgument("parameter unreachable from the loss".into())
        })?
        .clone();
    let original = graph.value(param).expect("parameters always hold values").clone();
    let len = original.len();

    let coords: Vec<usize> = if len <= samples {
        (0..len).collect()
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, len, samples).into_vec()
    };

    let mut max_rel: f64 = 0.0;
    for &k in &coords {
        let mut plus = original.clone();
        plus.data_mut()[k] += h;
        graph.set_param(param, plus)?;
        graph.forward()?;
        let lp = graph.scalar_value(loss).expect("loss value");

        let mut minus = original.clone();
        minus.data_mut()[k] -= h;
        graph.set_param(param, minus)?;
        graph.forward()?;
        let lm = graph.scalar_value(loss).expect("loss value");

        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    graph.set_param(param, original)?;
    graph.forward()?;
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn relu_forward_example() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let y = g.relu(x).unwrap();
        g.bind(x, Tensor::new(&[2], vec![-1.0, 2.0]).unwrap()).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel_is_noop() {
        // 1x1 conv, w[co][ci] = identity, zero bias: output == input.
        let mut g = Graph::new();
        let x = g.input(&[2, 3, 3]);
        let w = g.parameter(
            Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let b = g.parameter(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = rand_vec(18, &mut rng);
        g.bind(x, Tensor::new(&[2, 3, 3], data.clone()).unwrap()).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(y).unwrap().data(), &data[..]);
    }

    #[test]
    fn no_grad_leaves_skip_gradients_without_changing_live_ones() {
        let build = |freeze: bool| {
            let mut g = Graph::new();
            let x = g.parameter(Tensor::new(&[1, 2, 2], vec![0.5, -0.25, 1.0, 2.0]).unwrap());
            let w = g.input(&[1, 1, 3, 3]);
            let b = g.input(&[1]);
            if freeze {
                g.set_no_grad(w).unwrap();
                g.set_no_grad(b).unwrap();
            }
            let c = g.conv2d(x, w, b).unwrap();
            let t = g.input(&[1, 2, 2]);
            if freeze {
                g.set_no_grad(t).unwrap();
            }
            let loss = g.frobenius_sq_diff(c, t).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            g.bind(w, Tensor::new(&[1, 1, 3, 3], rand_vec(9, &mut rng)).unwrap()).unwrap();
            g.bind(b, Tensor::new(&[1], vec![0.125]).unwrap()).unwrap();
            g.bind(t, Tensor::new(&[1, 2, 2], vec![1.0, 0.0, -1.0, 0.5]).unwrap()).unwrap();
            g.forward().unwrap();
            g.backward(loss).unwrap();
            (g.grad(x).unwrap().data().to_vec(), g.grad(w).cloned(), g.grad(b).cloned())
        };
        let (dx_live, dw_live, db_live) = build(false);
        let (dx_frozen, dw_frozen, db_frozen) = build(true);
        assert!(dw_live.is_some() && db_live.is_some());
        assert!(dw_frozen.is_none() && db_frozen.is_none());
        assert_eq!(dx_live, dx_frozen);
    }

    #[test]
    fn set_no_grad_rejects_interior_nodes() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let r = g.relu(x).unwrap();
        assert!(matches!(g.set_no_grad(r), Err(CoreError::InvalidArgument(_))));
    }

    #[test]
    fn toy_net_matches_straight_line_oracle() {
        // conv3x3(1->2) + relu + maxpool + reshape + linear(8->3) vs an
        // independent naive reimplementation.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xdata = rand_vec(16, &mut rng);
        let wdata = rand_vec(2 * 1 * 9, &mut rng);
        let bdata = rand_vec(2, &mut rng);
        let lw = rand_vec(3 * 8, &mut rng);
        let lb = rand_vec(3, &mut rng);

        let mut g = Graph::new();
        let x = g.input(&[1, 4, 4]);
        let w = g.parameter(Tensor::new(&[2, 1, 3, 3], wdata.clone()).unwrap());
        let b = g.parameter(Tensor::new(&[2], bdata.clone()).unwrap());
        let c = g.conv2d(x, w, b).unwrap();
        let r = g.relu(c).unwrap();
        let p = g.maxpool2(r).unwrap();
        let flat = g.reshape(p, &[8]).unwrap();
        let lwn = g.parameter(Tensor::new(&[3, 8], lw.clone()).unwrap());
        let lbn = g.parameter(Tensor::new(&[3], lb.clone()).unwrap());
        let y = g.linear(flat, lwn, lbn).unwrap();
        g.bind(x, Tensor::new(&[1, 4, 4], xdata.clone()).unwrap()).unwrap();
        g.forward().unwrap();
        let got = g.value(y).unwrap().data().to_vec();

        // Oracle: direct nested loops, bounds-checked padding.
        let mut conv = vec![0.0; 2 * 16];
        for co in 0..2 {
            for i in 0..4i64 {
                for j in 0..4i64 {
                    let mut acc = bdata[co];
                    for u in 0..3i64 {
                        for v in 0..3i64 {
                            let (si, sj) = (i + u - 1, j + v - 1);
                            if (0..4).contains(&si) && (0..4).contains(&sj) {
                                acc += wdata[co * 9 + (u * 3 + v) as usize]
                                    * xdata[(si * 4 + sj) as usize];
                            }
                        }
                    }
                    conv[co * 16 + (i * 4 + j) as usize] = acc.max(0.0);
                }
            }
        }
        let mut pooled = vec![0.0; 2 * 4];
        for co in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for du in 0..2 {
                        for dv in 0..2 {
                            m = m.max(conv[co * 16 + (2 * i + du) * 4 + 2 * j + dv]);
                        }
                    }
                    pooled[co * 4 + i * 2 + j] = m;
                }
            }
        }
        for o in 0..3 {
            let mut acc = lb[o];
            for i in 0..8 {
                acc += lw[o * 8 + i] * pooled[i];
            }
            assert!((got[o] - acc).abs() < 1e-12, "output {o}");
        }
    }

    #[test]
    fn frobenius_backward_hand_value() {
        // loss = (x - 0)^2 at x = 3: dloss/dx = 6.
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(&[1], vec![3.0]).unwrap());
        let zero = g.input(&[1]);
        let loss = g.frobenius_sq_diff(x, zero).unwrap();
        g.bind(zero, Tensor::zeros(&[1])).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        assert_eq!(g.grad(loss).unwrap().data(), &[1.0]);
    }

    #[test]
    fn covariance_of_constant_input_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(&[2, 4], vec![5.0; 8]).unwrap());
        let cov = g.covariance(x).unwrap();
        let target = g.input(&[2, 2]);
        let loss = g.frobenius_sq_diff(cov, target).unwrap();
        g.bind(target, Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_row_major_max() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(&[1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]).unwrap());
        let p = g.maxpool2(x).unwrap();
        let flat = g.reshape(p, &[1]).unwrap();
        let zero = g.input(&[1]);
        let loss = g.frobenius_sq_diff(flat, zero).unwrap();
        g.bind(zero, Tensor::zeros(&[1])).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[14.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_and_unbound_input_fail() {
        let mut g = Graph::new();
        let x = g.input(&[1]);
        let y = g.relu(x).unwrap();
        let zero = g.input(&[1]);
        let loss = g.frobenius_sq_diff(y, zero).unwrap();
        assert!(g.backward(loss).is_err());
        g.bind(zero, Tensor::zeros(&[1])).unwrap();
        assert!(g.forward().is_err()); // x still unbound
    }

    #[test]
    fn shape_inference_rejects_bad_graphs() {
        let mut g = Graph::new();
        let x = g.input(&[2, 4, 4]);
        let w = g.parameter(Tensor::zeros(&[3, 2, 3, 3]));
        let bad_bias = g.parameter(Tensor::zeros(&[4]));
        assert!(g.conv2d(x, w, bad_bias).is_err());

        let even = g.parameter(Tensor::zeros(&[1, 2, 2]));
        assert!(g.conv2d(even, w, bad_bias).is_err()); // channel mismatch

        let a = g.input(&[2, 3]);
        let b = g.input(&[3, 3]);
        assert!(g.add(a, b).is_err());
        assert!(g.reshape(a, &[7]).is_err());
        assert!(g.matmul(a, a).is_err());

        let odd = g.input(&[1, 3, 4]);
        assert!(g.maxpool2(odd).is_err());
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input(&[2, 4, 4]);
        let w = g.parameter(Tensor::new(&[2, 2, 3, 3], rand_vec(36, &mut rng)).unwrap());
        let b = g.parameter(Tensor::new(&[2], rand_vec(2, &mut rng)).unwrap());
        let c = g.conv2d(x, w, b).unwrap();
        let r = g.relu(c).unwrap();
        let flat = g.reshape(r, &[2, 16]).unwrap();
        let cov = g.covariance(flat).unwrap();
        let target = g.input(&[2, 2]);
        let loss = g.frobenius_sq_diff(cov, target).unwrap();

        g.bind(x, Tensor::new(&[2, 4, 4], rand_vec(32, &mut rng)).unwrap()).unwrap();
        g.bind(target, Tensor::identity(2)).unwrap();

        g.forward().unwrap();
        g.backward(loss).unwrap();
        let g1w = g.grad(w).unwrap().data().to_vec();
        let g1b = g.grad(b).unwrap().data().to_vec();
        let l1 = g.scalar_value(loss).unwrap();

        g.forward().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &g1w[..]);
        assert_eq!(g.grad(b).unwrap().data(), &g1b[..]);
        assert_eq!(g.scalar_value(loss).unwrap(), l1);
    }

    #[test]
    fn weighted_sum_combines_and_backpropagates() {
        let mut g = Graph::new();
        let a = g.parameter(Tensor::new(&[1], vec![2.0]).unwrap());
        let b = g.parameter(Tensor::new(&[1], vec![5.0]).unwrap());
        let s = g.weighted_sum(&[(a, 3.0), (b, 0.5)]).unwrap();
        let zero = g.input(&[1]);
        let loss = g.frobenius_sq_diff(s, zero).unwrap();
        g.bind(zero, Tensor::zeros(&[1])).unwrap();
        g.forward().unwrap();
        assert_eq!(g.scalar_value(s).unwrap(), 8.5);
        g.backward(loss).unwrap();
        // dL/da = 2 * 8.5 * 3.0, dL/db = 2 * 8.5 * 0.5.
        assert_eq!(g.grad(a).unwrap().data(), &[51.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[8.5]);
    }

    #[test]
    fn grad_check_linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(&[4], rand_vec(4, &mut rng)).unwrap());
        let w = g.parameter(Tensor::new(&[3, 4], rand_vec(12, &mut rng)).unwrap());
        let b = g.parameter(Tensor::new(&[3], rand_vec(3, &mut rng)).unwrap());
        let y = g.linear(x, w, b).unwrap();
        let target = g.input(&[3]);
        let loss = g.frobenius_sq_diff(y, target).unwrap();
        g.bind(target, Tensor::new(&[3], rand_vec(3, &mut rng)).unwrap()).unwrap();
        for p in [x, w, b] {
            let err = grad_check(&mut g, loss, p, 1e-5, 32, 99).unwrap();
            assert!(err < 1e-6, "err={err}");
        }
    }

    #[test]
    fn grad_check_conv_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(&[2, 4, 4], rand_vec(32, &mut rng)).unwrap());
        let w = g.parameter(Tensor::new(&[3, 2, 3, 3], rand_vec(54, &mut rng)).unwrap());
        let b = g.parameter(Tensor::new(&[3], rand_vec(3, &mut rng)).unwrap());
        let y = g.conv2d(x, w, b).unwrap();
        let target = g.input(&[3, 4, 4]);
        let loss = g.frobenius_sq_diff(y, target).unwrap();
        g.bind(target, Tensor::new(&[3, 4, 4], rand_vec(48, &mut rng)).unwrap()).unwrap();
        for p in [x, w, b] {
            let err = grad_check(&mut g, loss, p, 1e-5, 32, 100).unwrap();
            assert!(err < 1e-6, "err={err}");
        }
    }

    #[test]
    fn grad_check_covariance_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(&[3, 10], rand_vec(30, &mut rng)).unwrap());
        let cov = g.covariance(x).unwrap();
        let target = g.input(&[3, 3]);
        let loss = g.frobenius_sq_diff(cov, target).unwrap();
        g.bind(target, Tensor::identity(3)).unwrap();
        let err = grad_check(&mut g, loss, x, 1e-5, 32, 101).unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn differentiability_margin_reports_relu_proximity() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let _ = g.relu(x).unwrap();
        g.bind(x, Tensor::new(&[2], vec![0.25, -3.0]).unwrap()).unwrap();
        g.forward().unwrap();
        assert_eq!(g.differentiability_margin(), 0.25);
    }
}
