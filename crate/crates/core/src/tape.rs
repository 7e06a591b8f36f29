//! Reverse-mode gradient tape over the primitive operations.
//!
//! Forward calls record one node per primitive application together with the
//! saved values its backward rule needs. `backward` replays the tape in
//! reverse, accumulating into every reachable input's gradient exactly once
//! per use. A tape is confined to one logical thread of execution.

use crate::error::OpError;
use crate::ops::{self, BnSaved, ConvSpec};
use crate::tensor::{Element, Labels, Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

pub(crate) enum Op<E: Element> {
    Leaf,
    Conv2d { x: ValueId, weight: ValueId, bias: Option<ValueId>, spec: ConvSpec },
    BatchNorm { x: ValueId, gamma: ValueId, beta: ValueId, saved: BnSaved<E> },
    Relu { x: ValueId },
    Add { lhs: ValueId, rhs: ValueId },
    MulBroadcast { lhs: ValueId, rhs: ValueId },
    Concat { parts: Vec<ValueId> },
    Split { x: ValueId, index: usize, parts: usize },
    GlobalAvgPool { x: ValueId },
    ChannelMean { x: ValueId },
    Upsample2x { x: ValueId },
    SumAll { x: ValueId },
    CrossEntropy { logits: ValueId, labels: Labels, ignore: Option<u32>, softmax: Tensor<E>, counted: usize },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<E>) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Record an input that never needs a gradient (data, gates, masks).
    pub fn constant(&mut self, value: Tensor<E>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node { value, op, needs_grad });
        ValueId(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<E>, op: Op<E>, inputs: &[ValueId]) -> ValueId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        spec: &ConvSpec,
    ) -> Result<ValueId, OpError> {
        let y = ops::conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let mut ins = vec![x, weight];
        ins.extend(bias);
        Ok(self.push_op(y, Op::Conv2d { x, weight, bias, spec: spec.clone() }, &ins))
    }

    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: E,
    ) -> Result<ValueId, OpError> {
        let (y, saved) = ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push_op(y, Op::BatchNorm { x, gamma, beta, saved }, &[x, gamma, beta]))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<ValueId, OpError> {
        let (y, saved) = ops::batch_norm_infer(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push_op(y, Op::BatchNorm { x, gamma, beta, saved }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let y = ops::relu(self.value(x));
        self.push_op(y, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, OpError> {
        let y = ops::add(self.value(lhs), self.value(rhs))?;
        Ok(self.push_op(y, Op::Add { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn mul_broadcast(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, OpError> {
        let y = ops::mul_broadcast(self.value(lhs), self.value(rhs))?;
        Ok(self.push_op(y, Op::MulBroadcast { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId, OpError> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&tensors)?;
        Ok(self.push_op(y, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub(crate) fn push_split(&mut self, value: Tensor<E>, x: ValueId, index: usize, parts: usize) -> ValueId {
        self.push_op(value, Op::Split { x, index, parts }, &[x])
    }

    pub fn split_channels(&mut self, x: ValueId, parts: usize) -> Result<Vec<ValueId>, OpError> {
        let pieces = ops::split_channels(self.value(x), parts)?;
        let mut ids = Vec::with_capacity(parts);
        for (index, piece) in pieces.into_iter().enumerate() {
            ids.push(self.push_op(piece, Op::Split { x, index, parts }, &[x]));
        }
        Ok(ids)
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> ValueId {
        let y = ops::global_avg_pool(self.value(x));
        self.push_op(y, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn channel_mean(&mut self, x: ValueId) -> ValueId {
        let y = ops::channel_mean(self.value(x));
        self.push_op(y, Op::ChannelMean { x }, &[x])
    }

    pub fn bilinear_upsample_x2(&mut self, x: ValueId) -> ValueId {
        let y = ops::bilinear_upsample_x2(self.value(x));
        self.push_op(y, Op::Upsample2x { x }, &[x])
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let y = ops::sum_all(self.value(x));
        self.push_op(y, Op::SumAll { x }, &[x])
    }

    /// Softmax cross-entropy against integer labels, averaged over pixels not
    /// equal to `ignore`. Produces a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &Labels,
        ignore: Option<u32>,
    ) -> Result<ValueId, OpError> {
        let (loss, softmax, counted) =
            crate::train::loss::softmax_nll(self.value(logits), labels, ignore)?;
        let value = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![loss]);
        Ok(self.push_op(
            value,
            Op::CrossEntropy { logits, labels: labels.clone(), ignore, softmax, counted },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss. Returns a gradient per tape value;
    /// recorded inputs that the loss does not reach keep a zero gradient.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<E>, OpError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(OpError::Config(format!(
                "backward: loss must be a scalar, got shape {}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        // Gradient of the output with respect to itself: the identity seed.
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].clone().unwrap();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv2d { x, weight, bias, spec } => {
                    if self.wants(*x) {
                        let dx = ops::conv2d_backward_input(self.value(*weight), &g, spec, self.shape(*x));
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.wants(*weight) || bias.map_or(false, |b| self.wants(b)) {
                        let (dw, db) = ops::conv2d_backward_weights(self.value(*x), &g, spec);
                        if self.wants(*weight) {
                            accumulate(&mut grads[weight.0], dw);
                        }
                        if let (Some(b), Some(db)) = (bias, db) {
                            if self.wants(*b) {
                                accumulate(&mut grads[b.0], db);
                            }
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let (dx, dgamma, dbeta) =
                        ops::batch_norm_backward(self.value(*x), self.value(*gamma), saved, &g);
                    if self.wants(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.wants(*gamma) {
                        accumulate(&mut grads[gamma.0], dgamma);
                    }
                    if self.wants(*beta) {
                        accumulate(&mut grads[beta.0], dbeta);
                    }
                }
                Op::Relu { x } => {
                    if self.wants(*x) {
                        accumulate(&mut grads[x.0], ops::relu_backward(self.value(*x), &g));
                    }
                }
                Op::Add { lhs, rhs } => {
                    if self.wants(*lhs) {
                        accumulate(&mut grads[lhs.0], g.clone());
                    }
                    if self.wants(*rhs) {
                        accumulate(&mut grads[rhs.0], g.clone());
                    }
                }
                Op::MulBroadcast { lhs, rhs } => {
                    let (da, db) = ops::mul_broadcast_backward(self.value(*lhs), self.value(*rhs), &g);
                    if self.wants(*lhs) {
                        accumulate(&mut grads[lhs.0], da);
                    }
                    if self.wants(*rhs) {
                        accumulate(&mut grads[rhs.0], db);
                    }
                }
                Op::Concat { parts } => {
                    let counts: Vec<usize> = parts.iter().map(|&p| self.shape(p).c).collect();
                    let pieces = ops::split_by_channels(&g, &counts);
                    for (part, piece) in parts.iter().zip(pieces) {
                        if self.wants(*part) {
                            accumulate(&mut grads[part.0], piece);
                        }
                    }
                }
                Op::Split { x, index, parts } => {
                    if self.wants(*x) {
                        let dx = scatter_split(self.shape(*x), *index, *parts, &g);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if self.wants(*x) {
                        accumulate(&mut grads[x.0], ops::global_avg_pool_backward(self.shape(*x), &g));
                    }
                }
                Op::ChannelMean { x } => {
                    if self.wants(*x) {
                        accumulate(&mut grads[x.0], ops::channel_mean_backward(self.shape(*x), &g));
                    }
                }
                Op::Upsample2x { x } => {
                    if self.wants(*x) {
                        accumulate(&mut grads[x.0], ops::bilinear_upsample_x2_backward(self.shape(*x), &g));
                    }
                }
                Op::SumAll { x } => {
                    if self.wants(*x) {
                        accumulate(&mut grads[x.0], Tensor::full(self.shape(*x), g.scalar()));
                    }
                }
                Op::CrossEntropy { logits, labels, ignore, softmax, counted } => {
                    if self.wants(*logits) {
                        let dl = crate::train::loss::softmax_nll_backward(
                            softmax, labels, *ignore, *counted, g.scalar(),
                        );
                        accumulate(&mut grads[logits.0], dl);
                    }
                }
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }

    fn wants(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Smallest |x| over all recorded relu inputs, if any were recorded.
    /// Gradient checks use this to keep finite differences away from the
    /// kink.
    pub fn relu_input_min_abs(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.nodes[x.0].value.data() {
                    let a = v.to_f64().abs();
                    if min.map_or(true, |m| a < m) {
                        min = Some(a);
                    }
                }
            }
        }
        min
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, delta: Tensor<E>) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
    }
}

fn scatter_split<E: Element>(input_shape: Shape, index: usize, parts: usize, g: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(input_shape);
    let sub = input_shape.c / parts;
    let hw = input_shape.h * input_shape.w;
    for n in 0..input_shape.n {
        for c in 0..sub {
            let base = (n * input_shape.c + index * sub + c) * hw;
            dx.data_mut()[base..base + hw].copy_from_slice(g.plane(n, c));
        }
    }
    dx
}

/// Per-value gradients produced by a backward sweep.
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Shape>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, zero-filled if the loss does not reach it.
    pub fn grad_or_zeros(&self, id: ValueId) -> Tensor<E> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ramp(Shape::new(1, 2, 3, 3)));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));
        // Gradient of the loss w.r.t. itself is the identity seed.
        assert_eq!(grads.get(loss).unwrap().scalar(), 1.0);
    }

    #[test]
    fn relu_gradient_is_positive_indicator() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(
            Shape::new(1, 1, 1, 5),
            vec![-2.0, -0.5, 0.25, 1.0, 3.0],
        ));
        let y = tape.relu(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn value_used_twice_accumulates_twice() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ramp(Shape::new(1, 1, 2, 2)));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ramp(Shape::new(1, 1, 2, 2)));
        let orphan = tape.leaf(Tensor::ramp(Shape::new(1, 1, 2, 2)));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(orphan).is_none());
        assert!(grads.grad_or_zeros(orphan).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ramp(Shape::new(1, 1, 2, 2)));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn split_concat_roundtrip_routes_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ramp(Shape::new(1, 4, 2, 2)));
        let parts = tape.split_channels(x, 2).unwrap();
        let back = tape.concat_channels(&parts).unwrap();
        // Weight the second half so routing errors are visible.
        let mut w = Tensor::ones(Shape::new(1, 4, 2, 2));
        for i in 8..16 {
            w.data_mut()[i] = 3.0;
        }
        let wid = tape.constant(w);
        let prod = tape.mul_broadcast(back, wid).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for i in 0..8 {
            assert_eq!(gx.data()[i], 1.0);
        }
        for i in 8..16 {
            assert_eq!(gx.data()[i], 3.0);
        }
    }
}
