//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied during a forward pass; node
//! indices are assigned in execution order, so the node list is already a
//! topological order and [`Tape::backward`] walks it once in reverse.
//! Learnable tensors live in a [`ParamStore`]; the tape only holds copies and
//! reports their gradients back through [`Gradients`].

use crate::error::{invalid, Error, Result};
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::nn::norm::{bn_backward, bn_eval_forward, bn_train_forward};
use crate::nn::ops::{
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, relu, relu_backward,
    softmax_cross_entropy_backward, softmax_cross_entropy_parts,
};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with an optional gradient slot. Non-learnable entries
/// (batch-norm running statistics) live in the same store with
/// `requires_grad == false`.
#[derive(Clone, Debug)]
pub struct Variable<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    vars: Vec<Variable<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { vars: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> ParamId {
        self.vars.push(Variable {
            name: name.into(),
            value,
            grad: None,
            requires_grad,
        });
        ParamId(self.vars.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Variable<T> {
        &self.vars[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Variable<T> {
        &mut self.vars[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.vars[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.vars[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.vars[id.0].grad.as_ref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.vars.iter().position(|v| v.name == name).map(ParamId)
    }

    /// Entries in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Variable<T>)> {
        self.vars.iter().enumerate().map(|(i, v)| (ParamId(i), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Variable<T>> {
        self.vars.iter_mut()
    }

    pub fn learnable(&self) -> impl Iterator<Item = (ParamId, &Variable<T>)> {
        self.iter().filter(|(_, v)| v.requires_grad)
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.learnable().map(|(_, v)| v.value.numel()).sum()
    }

    /// Adds the tape's parameter gradients into the grad slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            let var = &mut self.vars[id.0];
            if !var.requires_grad {
                continue;
            }
            match var.grad.as_mut() {
                Some(slot) => slot.add_assign(g)?,
                None => var.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        zero_grads(self)
    }

    /// Tensor values in declaration order, cast to another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            vars: self
                .vars
                .iter()
                .map(|v| Variable {
                    name: v.name.clone(),
                    value: v.value.cast(),
                    grad: v.grad.as_ref().map(|g| g.cast()),
                    requires_grad: v.requires_grad,
                })
                .collect(),
        }
    }
}

pub fn zero_grads<T: Element>(params: &mut ParamStore<T>) {
    for v in params.iter_mut() {
        v.grad = None;
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    SumAll(Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Operand handle for ops whose backward needs only one input.
    input: Option<Var>,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, operands: &[Var]) -> Var {
        let requires_grad = operands.iter().any(|o| self.nodes[o.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            input: operands.first().copied(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            input: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let var = store.get(id);
        self.nodes.push(Node {
            value: var.value.clone(),
            op: Op::Param(id),
            input: None,
            requires_grad: var.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let parts = self.value(x).split_channels(sizes)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(parts.len());
        for (part, &size) in parts.into_iter().zip(sizes) {
            out.push(self.push(part, Op::SliceChannels { x, start }, &[x]));
            start += size;
        }
        Ok(out)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&values)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let b = bias.map(|b| self.value(b).data());
        if let Some(b) = b {
            if b.len() != geom.out_channels {
                return Err(invalid("convolution bias length"));
            }
        }
        let value = conv2d_forward(self.value(x), self.value(weight), b, &geom)?;
        let mut operands = vec![x, weight];
        operands.extend(bias);
        Ok(self.push(value, Op::Conv { x, weight, bias, geom }, &operands))
    }

    /// Train-mode batch norm; returns the output and the batch statistics
    /// so the caller can update its running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let f = bn_train_forward(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: f.xhat,
            inv_std: f.inv_std,
            train: true,
        };
        let out = self.push(f.y, op, &[x, gamma, beta]);
        Ok((
            out,
            BatchStats {
                mean: f.mean,
                var: f.var,
            },
        ))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let f = bn_eval_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        )?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: f.xhat,
            inv_std: f.inv_std,
            train: false,
        };
        Ok(self.push(f.y, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = relu(self.value(x));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = global_avg_pool(self.value(x))?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = linear(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(value, Op::Linear { x, weight, bias }, &[x, weight, bias]))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy_parts(self.value(logits), labels)?;
        let op = Op::SoftmaxCrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root_shape = self.value(root).shape();
        if root_shape.numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_shape));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: lower,
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    sink.add(*a, g.clone())?;
                    sink.add(*b, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if sink.wants(*a) {
                        sink.add(*a, g.mul(vb)?)?;
                    }
                    if sink.wants(*b) {
                        sink.add(*b, g.mul(va)?)?;
                    }
                }
                Op::SumAll(x) => {
                    let s = g.data()[0];
                    sink.add(*x, Tensor::full(self.value(*x).shape(), s))?;
                }
                Op::SliceChannels { x, start } => {
                    if sink.wants(*x) {
                        let xs = self.value(*x).shape();
                        let mut full = Tensor::zeros(xs);
                        let gs = g.shape();
                        let len = gs.c * gs.plane();
                        for n in 0..xs.n {
                            let dst = xs.offset(n, *start, 0, 0);
                            full.data_mut()[dst..dst + len].copy_from_slice(&g.data()[n * len..(n + 1) * len]);
                        }
                        sink.add(*x, full)?;
                    }
                }
                Op::Concat(parts) => {
                    let sizes: Vec<usize> = parts.iter().map(|p| self.value(*p).shape().c).collect();
                    for (p, part) in parts.iter().zip(g.split_channels(&sizes)?) {
                        sink.add(*p, part)?;
                    }
                }
                Op::Conv { x, weight, bias, geom } => {
                    let cg = conv2d_backward(self.value(*x), self.value(*weight), geom, g, sink.wants(*x));
                    if let Some(dx) = cg.dx {
                        sink.add(*x, dx)?;
                    }
                    sink.add(*weight, cg.dweight)?;
                    if let Some(b) = bias {
                        let shape = self.value(*b).shape();
                        sink.add(*b, Tensor::from_vec(shape, cg.dbias)?)?;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let gamma_v = self.value(*gamma);
                    let bg = bn_backward(g, xhat, inv_std, gamma_v.data(), *train);
                    sink.add(*x, bg.dx)?;
                    sink.add(*gamma, Tensor::from_vec(gamma_v.shape(), bg.dgamma)?)?;
                    sink.add(*beta, Tensor::from_vec(self.value(*beta).shape(), bg.dbeta)?)?;
                }
                Op::Relu(x) => {
                    sink.add(*x, relu_backward(self.value(*x), g))?;
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x).shape();
                    sink.add(*x, global_avg_pool_backward(xs, g))?;
                }
                Op::Linear { x, weight, bias } => {
                    let lg = linear_backward(self.value(*x), self.value(*weight), self.value(*bias).shape(), g);
                    sink.add(*x, lg.dx)?;
                    sink.add(*weight, lg.dweight)?;
                    sink.add(*bias, lg.dbias)?;
                }
                Op::SoftmaxCrossEntropy { probs, labels } => {
                    let logits = node.input.expect("cross-entropy operand");
                    sink.add(logits, softmax_cross_entropy_backward(probs, labels, g.data()[0]))?;
                }
            }
        }

        let mut params: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads[i].as_ref()) {
                match params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.add_assign(g)?,
                    None => params.push((*id, g.clone())),
                }
            }
        }
        Ok(Gradients { grads, params })
    }
}

struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Element> GradSink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match self.grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads[v.0] = Some(g);
                Ok(())
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradients for every recorded node that
/// requires them, plus per-parameter totals.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at element {i}")));
        }
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Default finite-difference step for unit-scale activations.
pub const FD_EPS: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-8)`, maximized over elements.
pub fn max_relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

impl<T: Element> Tape<T> {
    /// Shape of a recorded value.
    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_plus_x() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::scalar(5.0), true);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.add(xv, xv).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(x).unwrap().item(), Some(2.0));
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum_all(sq);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::ones([1, 2, 1, 1]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        let y = tape.sum_all(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
        tape.reset();
        let x = tape.input(Tensor::ones([1, 2, 1, 1]), true);
        let y = tape.sum_all(x);
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn accumulation_over_two_consumers() {
        // d/dx [sum(x*x) + sum(x)] = 2x + 1
        let x0 = Tensor::from_vec([1, 3, 1, 1], vec![1.0f64, -2.0, 0.5]).unwrap();
        let grad_of = |both: bool, first: bool| {
            let mut tape = Tape::<f64>::new();
            let x = tape.input(x0.clone(), true);
            let sq = tape.mul(x, x).unwrap();
            let a = tape.sum_all(sq);
            let b = tape.sum_all(x);
            let root = match (both, first) {
                (true, _) => tape.add(a, b).unwrap(),
                (false, true) => a,
                (false, false) => b,
            };
            tape.backward(root).unwrap().wrt(x).unwrap().clone()
        };
        let sum = grad_of(false, true).add(&grad_of(false, false)).unwrap();
        assert_eq!(grad_of(true, true), sum);
        assert_eq!(sum.data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn zero_grads_clears_and_replays() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::from_vec([1, 2, 1, 1], vec![0.5, -1.5]).unwrap(), true);
        zero_grads(&mut store);
        assert!(store.grad(w).is_none());
        let run = |store: &mut ParamStore<f32>| {
            let mut tape = Tape::new();
            let wv = tape.param(store, w);
            let sq = tape.mul(wv, wv).unwrap();
            let y = tape.sum_all(sq);
            let g = tape.backward(y).unwrap();
            store.accumulate(&g).unwrap();
        };
        run(&mut store);
        let first = store.grad(w).unwrap().clone();
        store.zero_grads();
        assert!(store.grad(w).is_none());
        run(&mut store);
        assert_eq!(store.grad(w).unwrap(), &first);
        run(&mut store);
        assert_eq!(store.grad(w).unwrap(), &first.add(&first).unwrap());
    }

    #[test]
    fn finite_differences() {
        let x = Tensor::from_vec([1, 4, 1, 1], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.sum()), &x, FD_EPS).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));

        let x = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);

        assert!(finite_diff_gradient(|_| Ok(f64::NAN), &x, 1e-4).is_err());
        assert!(finite_diff_gradient(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn split_and_concat_gradients_route_back() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(
            Tensor::from_fn([2, 4, 2, 2], |[n, c, i, j]| (n + c + i + j) as f64),
            true,
        );
        let parts = tape.split_channels(x, &[1, 3]).unwrap();
        let sq = tape.mul(parts[1], parts[1]).unwrap();
        let joined = tape.concat_channels(&[parts[0], sq]).unwrap();
        let y = tape.sum_all(joined);
        let g = tape.backward(y).unwrap();
        let gx = g.wrt(x).unwrap();
        let xv = tape.value(x);
        for n in 0..2 {
            for i in 0..2 {
                assert_eq!(gx[[n, 0, i, 1]], 1.0);
                assert_eq!(gx[[n, 2, i, 1]], 2.0 * xv[[n, 2, i, 1]]);
            }
        }
    }
}
