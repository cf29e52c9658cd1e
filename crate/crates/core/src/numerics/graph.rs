//! Tape-based reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Parameters are bound by reference, so building a graph per mini-batch does
//! not copy weight matrices. [`Graph::backward`] walks the tape once in
//! reverse and returns a gradient for every node that influences the loss.

use std::borrow::Cow;

use super::tensor::{dot, matvec_bias, matvec_t_acc, outer_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a bound parameter: which store it came from and its slot there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub store: u32,
    pub index: u32,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamRef),
    Linear { x: Var, w: Var, b: Var },
    Prelu { x: Var, alpha: Var },
    Add(Var, Var),
    Sum(Vec<Var>),
    Max(Vec<Var>),
    Concat(Vec<Var>),
    Dot(Var, Var),
    Softmax(Var),
    WeightedSum { weights: Var, items: Vec<Var> },
    Stack(Vec<Var>),
    Scale(Var, f64),
    ReduceSum(Var),
    SigmoidXent { logit: Var, label: f64 },
}

struct Node<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn width(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// A leaf whose gradient is reported after backward.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamRef, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Cow::Borrowed(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(w).dims2()?;
        if self.width(x) != cols || self.width(b) != rows {
            return Err(Error::Dimension {
                op: "linear",
                left: self.shape(w).to_vec(),
                right: vec![self.width(x), self.width(b)],
            });
        }
        let mut out = vec![0.0; rows];
        matvec_bias(
            self.value(w).data(),
            rows,
            cols,
            self.value(x).data(),
            self.value(b).data(),
            &mut out,
        );
        Ok(self.push(Op::Linear { x, w, b }, Tensor::vector(out)))
    }

    /// Parametric ReLU; `alpha` is either a single shared slope or one per channel.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let n = self.width(x);
        let a = self.value(alpha).data();
        if a.len() != 1 && a.len() != n {
            return Err(Error::Dimension {
                op: "prelu",
                left: self.shape(x).to_vec(),
                right: self.shape(alpha).to_vec(),
            });
        }
        let out = prelu_forward(self.value(x).data(), a);
        Ok(self.push(Op::Prelu { x, alpha }, Tensor::vector(out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.width(a) != self.width(b) {
            return Err(Error::Dimension {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), Tensor::vector(out)))
    }

    /// Elementwise sum of equal-width vectors, accumulated left to right.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let width = self.common_width("sum", items)?;
        let mut out = vec![0.0; width];
        for &v in items {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        Ok(self.push(Op::Sum(items.to_vec()), Tensor::vector(out)))
    }

    /// Elementwise max; ties route the gradient to the earliest item.
    pub fn max(&mut self, items: &[Var]) -> Result<Var> {
        let width = self.common_width("max", items)?;
        let mut out = vec![f64::NEG_INFINITY; width];
        for &v in items {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                if *x > *o {
                    *o = *x;
                }
            }
        }
        Ok(self.push(Op::Max(items.to_vec()), Tensor::vector(out)))
    }

    pub fn concat(&mut self, items: &[Var]) -> Var {
        let mut out = Vec::new();
        for &v in items {
            out.extend_from_slice(self.value(v).data());
        }
        self.push(Op::Concat(items.to_vec()), Tensor::vector(out))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.width(a) != self.width(b) {
            return Err(Error::Dimension {
                op: "dot",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let s = dot(self.value(a).data(), self.value(b).data());
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s)))
    }

    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        if self.width(v) == 0 {
            return Err(Error::Contract("softmax of an empty vector".into()));
        }
        let out = softmax(self.value(v).data());
        Ok(self.push(Op::Softmax(v), Tensor::vector(out)))
    }

    /// `Σ_i weights[i] · items[i]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        if self.width(weights) != items.len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                left: self.shape(weights).to_vec(),
                right: vec![items.len()],
            });
        }
        let width = self.common_width("weighted_sum", items)?;
        let mut out = vec![0.0; width];
        for (&w, &v) in self.value(weights).data().iter().zip(items) {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        Ok(self.push(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            Tensor::vector(out),
        ))
    }

    /// Collects single-element nodes into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if t.len() != 1 {
                return Err(Error::Dimension {
                    op: "stack",
                    left: t.shape().to_vec(),
                    right: vec![1],
                });
            }
            out.push(t.data()[0]);
        }
        Ok(self.push(Op::Stack(scalars.to_vec()), Tensor::vector(out)))
    }

    pub fn scale(&mut self, v: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(v).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(v).to_vec();
        self.push(
            Op::Scale(v, factor),
            Tensor::new(shape, out).expect("same shape"),
        )
    }

    pub fn reduce_sum(&mut self, v: Var) -> Var {
        let s: f64 = self.value(v).data().iter().sum();
        self.push(Op::ReduceSum(v), Tensor::scalar(s))
    }

    /// Numerically stable sigmoid cross-entropy of a single logit.
    pub fn sigmoid_xent(&mut self, logit: Var, label: f64) -> Result<Var> {
        if self.width(logit) != 1 {
            return Err(Error::Dimension {
                op: "sigmoid_xent",
                left: self.shape(logit).to_vec(),
                right: vec![1],
            });
        }
        let loss = sigmoid_cross_entropy(self.value(logit).data()[0], label);
        Ok(self.push(Op::SigmoidXent { logit, label }, Tensor::scalar(loss)))
    }

    fn common_width(&self, op: &'static str, items: &[Var]) -> Result<usize> {
        let Some(&first) = items.first() else {
            return Err(Error::Contract(format!("{op} of an empty list")));
        };
        let width = self.width(first);
        for &v in &items[1..] {
            if self.width(v) != width {
                return Err(Error::Dimension {
                    op,
                    left: self.shape(first).to_vec(),
                    right: self.shape(v).to_vec(),
                });
            }
        }
        Ok(width)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let leaf = matches!(node.op, Op::Constant | Op::Input | Op::Param(_));
            if leaf {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Constant | Op::Input | Op::Param(_) => unreachable!(),
                Op::Linear { x, w, b } => {
                    let wt = self.value(*w);
                    let (rows, cols) = wt.dims2()?;
                    if !self.is_constant(*x) {
                        let gx = self.slot(&mut grads, *x);
                        matvec_t_acc(wt.data(), rows, cols, &dy, gx);
                    }
                    if !self.is_constant(*w) {
                        let xv = self.value(*x).data();
                        let gw = self.slot(&mut grads, *w);
                        outer_acc(gw, cols, &dy, xv);
                    }
                    if !self.is_constant(*b) {
                        let gb = self.slot(&mut grads, *b);
                        for (g, d) in gb.iter_mut().zip(&dy) {
                            *g += d;
                        }
                    }
                }
                Op::Prelu { x, alpha } => {
                    let xv = self.value(*x).data();
                    let av = self.value(*alpha).data();
                    let shared = av.len() == 1;
                    if !self.is_constant(*x) {
                        let gx = self.slot(&mut grads, *x);
                        for (k, (g, d)) in gx.iter_mut().zip(&dy).enumerate() {
                            let slope = if xv[k] > 0.0 {
                                1.0
                            } else if shared {
                                av[0]
                            } else {
                                av[k]
                            };
                            *g += d * slope;
                        }
                    }
                    if !self.is_constant(*alpha) {
                        let ga = self.slot(&mut grads, *alpha);
                        for (k, d) in dy.iter().enumerate() {
                            if xv[k] < 0.0 {
                                let slot = if shared { 0 } else { k };
                                ga[slot] += d * xv[k];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if !self.is_constant(v) {
                            add_into(self.slot(&mut grads, v), &dy);
                        }
                    }
                }
                Op::Sum(items) => {
                    for &v in items {
                        if !self.is_constant(v) {
                            add_into(self.slot(&mut grads, v), &dy);
                        }
                    }
                }
                Op::Max(items) => {
                    let out = node.value.data();
                    let mut taken = vec![false; out.len()];
                    for &v in items {
                        let xv = self.value(v).data();
                        let constant = self.is_constant(v);
                        for k in 0..out.len() {
                            if !taken[k] && xv[k] == out[k] {
                                taken[k] = true;
                                if !constant {
                                    self.slot(&mut grads, v)[k] += dy[k];
                                }
                            }
                        }
                    }
                }
                Op::Concat(items) => {
                    let mut offset = 0;
                    for &v in items {
                        let w = self.width(v);
                        if !self.is_constant(v) {
                            add_into(self.slot(&mut grads, v), &dy[offset..offset + w]);
                        }
                        offset += w;
                    }
                }
                Op::Dot(a, b) => {
                    let d = dy[0];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if !self.is_constant(*a) {
                        let g = self.slot(&mut grads, *a);
                        for (gi, bi) in g.iter_mut().zip(bv) {
                            *gi += d * bi;
                        }
                    }
                    if !self.is_constant(*b) {
                        let g = self.slot(&mut grads, *b);
                        for (gi, ai) in g.iter_mut().zip(av) {
                            *gi += d * ai;
                        }
                    }
                }
                Op::Softmax(v) => {
                    if !self.is_constant(*v) {
                        let y = node.value.data();
                        let inner = dot(&dy, y);
                        let g = self.slot(&mut grads, *v);
                        for k in 0..y.len() {
                            g[k] += y[k] * (dy[k] - inner);
                        }
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let wv = self.value(*weights).data();
                    if !self.is_constant(*weights) {
                        let gw: Vec<f64> = items
                            .iter()
                            .map(|&v| dot(&dy, self.value(v).data()))
                            .collect();
                        add_into(self.slot(&mut grads, *weights), &gw);
                    }
                    for (&v, &w) in items.iter().zip(wv) {
                        if !self.is_constant(v) {
                            let g = self.slot(&mut grads, v);
                            for (gi, d) in g.iter_mut().zip(&dy) {
                                *gi += w * d;
                            }
                        }
                    }
                }
                Op::Stack(items) => {
                    for (&v, d) in items.iter().zip(&dy) {
                        if !self.is_constant(v) {
                            self.slot(&mut grads, v)[0] += d;
                        }
                    }
                }
                Op::Scale(v, factor) => {
                    if !self.is_constant(*v) {
                        let g = self.slot(&mut grads, *v);
                        for (gi, d) in g.iter_mut().zip(&dy) {
                            *gi += d * factor;
                        }
                    }
                }
                Op::ReduceSum(v) => {
                    if !self.is_constant(*v) {
                        let g = self.slot(&mut grads, *v);
                        for gi in g.iter_mut() {
                            *gi += dy[0];
                        }
                    }
                }
                Op::SigmoidXent { logit, label } => {
                    if !self.is_constant(*logit) {
                        let z = self.value(*logit).data()[0];
                        self.slot(&mut grads, *logit)[0] += dy[0] * (sigmoid(z) - label);
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient matches node shape")
                })
            })
            .collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn is_constant(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Constant)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let width = self.width(v);
        grads[v.0].get_or_insert_with(|| vec![0.0; width])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Graph::backward`]: leaf gradients by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamRef, Var)>,
}

impl Gradients {
    /// Gradient of an input or parameter leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter the loss reaches.
    pub fn params(&self) -> impl Iterator<Item = (ParamRef, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `max(z,0) − z·y + log(1+exp(−|z|))`.
pub fn sigmoid_cross_entropy(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn prelu_forward(x: &[f64], alpha: &[f64]) -> Vec<f64> {
    let shared = alpha.len() == 1;
    x.iter()
        .enumerate()
        .map(|(k, &v)| {
            if v > 0.0 {
                v
            } else {
                v * if shared { alpha[0] } else { alpha[k] }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let w = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![5.0, -2.0, 7.0, 1.5]).unwrap());
        let b = g.constant(Tensor::vector(vec![3.0, -1.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 0.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        let err = g.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn prelu_examples() {
        assert_eq!(prelu_forward(&[2.0], &[0.25]), vec![2.0]);
        assert_eq!(prelu_forward(&[-2.0], &[0.25]), vec![-0.5]);
        assert_eq!(prelu_forward(&[0.0], &[0.9]), vec![0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((sigmoid_cross_entropy(0.0, 1.0) - ln2).abs() < 1e-15);
        assert!((sigmoid_cross_entropy(0.0, 0.0) - ln2).abs() < 1e-15);
        // log(1 + e^-5)
        assert!((sigmoid_cross_entropy(5.0, 1.0) - 0.006715348489117967).abs() < 1e-12);
        assert!(sigmoid_cross_entropy(800.0, 0.0).is_finite());
        assert!(sigmoid_cross_entropy(-800.0, 1.0).is_finite());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[-17.5]), vec![1.0]);
        let s = softmax(&[1.0, 2.0, 3.0]);
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_loss_has_zero_param_gradient() {
        let w = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
        let mut g = Graph::new();
        let pw = g.param(ParamRef { store: 0, index: 0 }, &w);
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.reduce_sum(c);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(pw).is_none());
        assert_eq!(grads.params().count(), 0);
    }

    #[test]
    fn sum_of_linear_gives_outer_of_ones() {
        let w = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let b = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let pw = g.param(ParamRef { store: 0, index: 0 }, &w);
        let pb = g.param(ParamRef { store: 0, index: 1 }, &b);
        let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = g.linear(x, pw, pb).unwrap();
        let loss = g.reduce_sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(pw).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.get(pb).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn max_ties_route_to_first() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 5.0]));
        let b = g.input(Tensor::vector(vec![1.0, 2.0]));
        let m = g.max(&[a, b]).unwrap();
        let loss = g.reduce_sum(m);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(b).is_none());
    }
}
