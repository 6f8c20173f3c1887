//! Wengert-list autodiff.
//!
//! Every operation appends a node holding its output value and whatever it
//! saved for the backward pass. `backward` walks the list once in reverse.
//! Nodes whose inputs do not require gradients save nothing, so inference
//! through a tape with no gradient leaves costs no extra memory.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Shift(Var),
    Sum(Var),
    Relu(Var),
    ChannelScale {
        input: Var,
        scale: Vec<f32>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err<T>(op: &str, msg: String) -> Result<T> {
    Err(Error::Config(format!("{op}: {msg}")))
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

    /// Drops every node and everything saved with it.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Bytes held by saved intermediates (not counting node values).
    pub fn saved_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::MaxPool2 { argmax, .. } => argmax.len() * 4,
                Op::SoftmaxCrossEntropy { probs, labels, .. } => probs.len() * 4 + labels.len() * 8,
                Op::ChannelScale { scale, .. } => scale.len() * 4,
                _ => 0,
            })
            .sum()
    }

    /// Places a tensor on the tape. Its `requires_grad` flag decides whether
    /// it participates in differentiation.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a node by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Zeros the gradients of every node.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Removes a leaf's tensor, leaving an empty placeholder; used to hand
    /// parameter gradients back to their owner.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn output(&self, shape: Vec<usize>, data: Vec<f32>, inputs: &[Var]) -> Tensor {
        let mut t = Tensor::new(shape, data).expect("kernel produced consistent shape");
        t.set_requires_grad(inputs.iter().any(|&v| self.requires_grad(v)));
        t
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = self.output(self.shape(a).to_vec(), data, &[a, b]);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let out = self.output(self.shape(a).to_vec(), data, &[a]);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, a: Var, c: f32) -> Var {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let out = self.output(self.shape(a).to_vec(), data, &[a]);
        self.push(out, Op::Shift(a))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        let out = self.output(vec![1], vec![s], &[a]);
        self.push(out, Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let out = self.output(self.shape(a).to_vec(), data, &[a]);
        self.push(out, Op::Relu(a))
    }

    /// Multiplies channel `c` of an `[N, C, ...]` tensor by `scale[c]`.
    /// A zero entry ablates that channel.
    pub fn channel_scale(&mut self, a: Var, scale: &[f32]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[1] != scale.len() {
            return shape_err("channel_scale", format!("{} scales for input {shape:?}", scale.len()));
        }
        let plane: usize = shape[2..].iter().product();
        let mut data = self.value(a).data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let s = scale[i % scale.len()];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let out = self.output(shape, data, &[a]);
        Ok(self.push(out, Op::ChannelScale { input: a, scale: scale.to_vec() }))
    }

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kH,kW]` plus a
    /// per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 4 {
            return shape_err("conv2d", format!("input must be [N,Cin,H,W], got {is:?}"));
        }
        if ws.len() != 4 {
            return shape_err("conv2d", format!("weight must be [Cout,Cin,kH,kW], got {ws:?}"));
        }
        if is[1] != ws[1] {
            return shape_err("conv2d", format!("input Cin={} but weight Cin={}", is[1], ws[1]));
        }
        if bs != [ws[0]] {
            return shape_err("conv2d", format!("bias shape {bs:?} does not match Cout={}", ws[0]));
        }
        let ho = super::conv_output_extent(is[2], ws[2], stride, padding);
        let wo = super::conv_output_extent(is[3], ws[3], stride, padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return shape_err(
                "conv2d",
                format!(
                    "H={} W={} kH={} kW={} stride={stride} padding={padding} give a non-integral or empty output",
                    is[2], is[3], ws[2], ws[3]
                ),
            );
        };
        let geom = ConvGeom {
            n: is[0],
            cin: is[1],
            h: is[2],
            w: is[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = self.output(vec![geom.n, geom.cout, ho, wo], data, &[input, weight, bias]);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }))
    }

    /// 2×2 max pooling with stride 2 over the trailing two axes.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return shape_err("maxpool2", format!("input must be [N,C,H>=2,W>=2], got {s:?}"));
        }
        let (data, argmax) = kernels::maxpool2_forward(s[0] * s[1], s[2], s[3], self.value(input).data());
        let out = self.output(vec![s[0], s[1], s[2] / 2, s[3] / 2], data, &[input]);
        let argmax = if out.requires_grad() { argmax } else { Vec::new() };
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return shape_err("global_avg_pool", format!("input must be [N,C,H,W], got {s:?}"));
        }
        let plane = s[2] * s[3];
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f32>() / plane as f32)
            .collect();
        let out = self.output(vec![s[0], s[1]], data, &[input]);
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    /// `[N,in] · [out,in]^T + [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] || bs != [ws[0]] {
            return shape_err(
                "linear",
                format!("incompatible input {is:?}, weight {ws:?}, bias {bs:?}"),
            );
        }
        let (n, fin, fout) = (is[0], is[1], ws[0]);
        let data = kernels::linear_forward(
            n,
            fin,
            fout,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = self.output(vec![n, fout], data, &[input, weight, bias]);
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    /// Mean cross-entropy of `[N, classes]` logits against integer labels,
    /// computed through a max-shifted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return shape_err("softmax_cross_entropy", format!("logits must be [N,classes], got {s:?}"));
        }
        if labels.len() != s[0] {
            return shape_err(
                "softmax_cross_entropy",
                format!("{} labels for batch of {}", labels.len(), s[0]),
            );
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= s[1]) {
            return Err(Error::Input(format!(
                "label {l} at batch index {i} is outside 0..{}",
                s[1]
            )));
        }
        let (loss, probs) = kernels::softmax_ce_forward(s[0], s[1], self.value(logits).data(), labels);
        let out = self.output(vec![1], vec![loss], &[logits]);
        let probs = if out.requires_grad() { probs } else { Vec::new() };
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a scalar node, adding into the `grad` of every
    /// node that requires one. Calling it twice without `zero_grad` doubles
    /// the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Usage("loss does not depend on any gradient-requiring tensor".into()));
        }
        let mut pending: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            if !self.nodes[id].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            for (target, contrib) in self.local_grads(id, &g) {
                if !self.requires_grad(target) {
                    continue;
                }
                match &mut pending[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Shift(a) => vec![(*a, g.to_vec())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Relu(a) => {
                let x = self.value(*a).data();
                vec![(*a, g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect())]
            }
            Op::ChannelScale { input, scale } => {
                let plane: usize = node.value.shape()[2..].iter().product();
                let mut d = g.to_vec();
                for (i, chunk) in d.chunks_mut(plane).enumerate() {
                    let s = scale[i % scale.len()];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                vec![(*input, d)]
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let need_params = self.requires_grad(*weight) || self.requires_grad(*bias);
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    self.requires_grad(*input),
                    need_params,
                );
                let mut out = Vec::new();
                if let Some(d) = grads.input {
                    out.push((*input, d));
                }
                if let Some(d) = grads.weight {
                    out.push((*weight, d));
                }
                if let Some(d) = grads.bias {
                    out.push((*bias, d));
                }
                out
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0f32; self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src as usize] += gv;
                }
                vec![(*input, d)]
            }
            Op::GlobalAvgPool(input) => {
                let s = self.shape(*input);
                let plane = s[2] * s[3];
                let mut d = Vec::with_capacity(self.value(*input).numel());
                for &gv in g {
                    d.extend(std::iter::repeat(gv / plane as f32).take(plane));
                }
                vec![(*input, d)]
            }
            Op::Linear { input, weight, bias } => {
                let (n, fin) = (self.shape(*input)[0], self.shape(*input)[1]);
                let fout = self.shape(*weight)[0];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let mut out = Vec::new();
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0f32; n * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let gv = g[i * fout + o];
                            if gv != 0.0 {
                                let row = &w[o * fin..(o + 1) * fin];
                                dx[i * fin..(i + 1) * fin].iter_mut().zip(row).for_each(|(d, wv)| *d += gv * wv);
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0f32; fout * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let gv = g[i * fout + o];
                            let xr = &x[i * fin..(i + 1) * fin];
                            dw[o * fin..(o + 1) * fin].iter_mut().zip(xr).for_each(|(d, xv)| *d += gv * xv);
                        }
                    }
                    out.push((*weight, dw));
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0f32; fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                    out.push((*bias, db));
                }
                out
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                vec![(*logits, d)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..25).map(|i| i as f32 * 0.1).collect();
        let x = tape.leaf(t(&[1, 1, 5, 5], &data));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.leaf(t(&[1, 1, 3, 3], &k));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_shape_errors_name_dims() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
        assert!(err.contains("Cin=2") && err.contains("Cin=3"), "{err}");

        let w = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        let err = tape.conv2d(x, w, b, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[2, 8]));
        let l = tape.softmax_cross_entropy(z, &[3, 5]).unwrap();
        assert!((tape.value(l).data()[0] - (8f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1, 2], &[10.0, -10.0]).with_grad());
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        // ln(1 + e^-20)
        let expected = (1.0f64 + (-20.0f64).exp()).ln();
        assert!((tape.value(l).data()[0] as f64 - expected).abs() < 1e-9);
        tape.backward(l).unwrap();
        assert!(tape.grad(z).unwrap().iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.softmax_cross_entropy(z, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        // Second pass without zeroing doubles.
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn constant_leaf_receives_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let c = tape.leaf(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn clear_frees_saved_state() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = tape.leaf(Tensor::full(&[2, 1, 3, 3], 1.0).with_grad());
        let b = tape.leaf(Tensor::zeros(&[2]).with_grad());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        tape.maxpool2(y).unwrap();
        assert!(tape.saved_bytes() > 0);
        tape.clear();
        assert!(tape.is_empty());
        assert_eq!(tape.saved_bytes(), 0);
    }

    #[test]
    fn inference_saves_nothing() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 1, 4, 4], 1.0));
        let w = tape.leaf(Tensor::full(&[2, 1, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let p = tape.maxpool2(y).unwrap();
        let g = tape.global_avg_pool(p).unwrap();
        assert_eq!(tape.shape(g), &[2, 2]);
        assert_eq!(tape.saved_bytes(), 0);
    }
}
