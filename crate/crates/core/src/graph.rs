//! Executable layer graphs: ordered primitive nodes plus a named parameter
//! registry. Graphs are built once (with full shape inference), then run
//! either purely (infer) or through a gradient tape (train).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Axis, OpError};
use crate::ops::{self, BnMode, ConvSpec};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Element, Labels, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One primitive layer application.
#[derive(Clone, Debug)]
pub enum NodeKind {
    Input,
    Conv { spec: ConvSpec, weight: ParamId, bias: Option<ParamId> },
    BatchNorm { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId },
    Relu,
    /// Elementwise sum. `cascade` marks the additions between FPE branches,
    /// which the receptive-field walk ignores (per-branch convention).
    Add { cascade: bool },
    MulBroadcast,
    Concat,
    Split { index: usize, parts: usize },
    GlobalAvgPool,
    ChannelMean,
    Upsample2x,
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    /// Output shape inferred at build time for the configured input size
    /// (batch extent 1; execution allows any batch size).
    pub shape: Shape,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    /// Learnable parameters receive gradients and count toward parameter
    /// totals; running statistics do not.
    pub learnable: bool,
}

/// Named-tensor registry. Names are unique dotted paths; iteration order is
/// insertion order, which fixes initialization and optimizer order.
#[derive(Clone, Debug)]
pub struct ParamRegistry<E: Element = f32> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> Default for ParamRegistry<E> {
    fn default() -> Self {
        ParamRegistry { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<E: Element> ParamRegistry<E> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: String, tensor: Tensor<E>, learnable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, tensor, learnable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<E> {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<E>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn learnable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.learnable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Sum of element counts over learnable entries.
    pub fn learnable_elements(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.tensor.len() as u64)
            .sum()
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<E>) -> Result<(), OpError> {
        let id = self
            .id_of(name)
            .ok_or_else(|| OpError::Config(format!("unknown parameter {name}")))?;
        let entry = self.get_mut(id);
        if entry.tensor.shape() != tensor.shape() {
            return Err(OpError::ShapeIncompatible {
                op: "set parameter",
                lhs: tensor.shape(),
                rhs: entry.tensor.shape(),
            });
        }
        entry.tensor = tensor;
        Ok(())
    }
}

/// Marked stage boundaries, in network order, for the shape table.
#[derive(Clone, Debug)]
pub struct StageMark {
    pub name: String,
    pub node: NodeId,
}

/// Incrementally builds a graph with shape inference; `finish` freezes it.
pub struct GraphBuilder<E: Element = f32> {
    nodes: Vec<GraphNode>,
    registry: ParamRegistry<E>,
    inputs: Vec<NodeId>,
    marks: Vec<StageMark>,
    rng: ChaCha8Rng,
    bn_eps: E,
    bn_momentum: E,
}

impl<E: Element> GraphBuilder<E> {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            registry: ParamRegistry::default(),
            inputs: Vec::new(),
            marks: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_eps: E::from_f64(1e-5),
            bn_momentum: E::from_f64(0.1),
        }
    }

    fn push(&mut self, name: String, kind: NodeKind, inputs: Vec<NodeId>, shape: Shape) -> NodeId {
        self.nodes.push(GraphNode { name, kind, inputs, shape });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn input(&mut self, channels: usize, h: usize, w: usize) -> NodeId {
        let id = self.push("input".into(), NodeKind::Input, vec![], Shape::new(1, channels, h, w));
        self.inputs.push(id);
        id
    }

    /// Convolution with freshly created parameters: fan-in-scaled normal
    /// weights (std = sqrt(2/fan_in)), zero bias.
    pub fn conv(&mut self, name: &str, input: NodeId, spec: ConvSpec) -> Result<NodeId, OpError> {
        spec.validate()?;
        let in_shape = self.shape(input);
        in_shape.check_axis("conv2d input", Axis::Channel, spec.in_channels)?;
        let (oh, ow) = spec.output_hw(in_shape.h, in_shape.w)?;
        let out_shape = Shape::new(in_shape.n, spec.out_channels, oh, ow);

        let fan_in = (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight_t = Tensor::randn(spec.weight_shape(), std, &mut self.rng);
        let weight = self.registry.insert(format!("{name}.weight"), weight_t, true);
        let bias = if spec.has_bias {
            let b = Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1));
            Some(self.registry.insert(format!("{name}.bias"), b, true))
        } else {
            None
        };
        Ok(self.push(name.into(), NodeKind::Conv { spec, weight, bias }, vec![input], out_shape))
    }

    /// Batch normalization with gamma 1, beta 0, running mean 0, var 1.
    pub fn batch_norm(&mut self, name: &str, input: NodeId) -> NodeId {
        let shape = self.shape(input);
        let c = shape.c;
        let vec_shape = Shape::new(1, c, 1, 1);
        let gamma = self.registry.insert(format!("{name}.gamma"), Tensor::ones(vec_shape), true);
        let beta = self.registry.insert(format!("{name}.beta"), Tensor::zeros(vec_shape), true);
        let mean = self.registry.insert(format!("{name}.running_mean"), Tensor::zeros(vec_shape), false);
        let var = self.registry.insert(format!("{name}.running_var"), Tensor::ones(vec_shape), false);
        self.push(name.into(), NodeKind::BatchNorm { gamma, beta, mean, var }, vec![input], shape)
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> NodeId {
        let shape = self.shape(input);
        self.push(name.into(), NodeKind::Relu, vec![input], shape)
    }

    pub fn add(&mut self, name: &str, lhs: NodeId, rhs: NodeId) -> Result<NodeId, OpError> {
        self.add_inner(name, lhs, rhs, false)
    }

    /// Addition between adjacent FPE branches (excluded from receptive-field
    /// propagation).
    pub fn add_cascade(&mut self, name: &str, lhs: NodeId, rhs: NodeId) -> Result<NodeId, OpError> {
        self.add_inner(name, lhs, rhs, true)
    }

    fn add_inner(&mut self, name: &str, lhs: NodeId, rhs: NodeId, cascade: bool) -> Result<NodeId, OpError> {
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        if ls != rs {
            return Err(OpError::ShapeIncompatible { op: "add", lhs: ls, rhs: rs });
        }
        Ok(self.push(name.into(), NodeKind::Add { cascade }, vec![lhs, rhs], ls))
    }

    pub fn mul_broadcast(&mut self, name: &str, lhs: NodeId, rhs: NodeId) -> Result<NodeId, OpError> {
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        ops::broadcast_kind(ls, rs)?;
        Ok(self.push(name.into(), NodeKind::MulBroadcast, vec![lhs, rhs], ls))
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId, OpError> {
        let first = *parts.first().ok_or_else(|| OpError::Config("concat: empty list".into()))?;
        let fs = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (fs.n, fs.h, fs.w) {
                return Err(OpError::ShapeIncompatible { op: "concat_channels", lhs: fs, rhs: s });
            }
            channels += s.c;
        }
        let shape = Shape::new(fs.n, channels, fs.h, fs.w);
        Ok(self.push(name.into(), NodeKind::Concat, parts.to_vec(), shape))
    }

    pub fn split(&mut self, name: &str, input: NodeId, parts: usize) -> Result<Vec<NodeId>, OpError> {
        let s = self.shape(input);
        if parts == 0 || s.c % parts != 0 {
            return Err(OpError::Config(format!(
                "split_channels: channel count {} not divisible into {parts} parts",
                s.c
            )));
        }
        let sub = Shape::new(s.n, s.c / parts, s.h, s.w);
        Ok((0..parts)
            .map(|index| {
                self.push(
                    format!("{name}.part{index}"),
                    NodeKind::Split { index, parts },
                    vec![input],
                    sub,
                )
            })
            .collect())
    }

    pub fn global_avg_pool(&mut self, name: &str, input: NodeId) -> NodeId {
        let s = self.shape(input);
        self.push(name.into(), NodeKind::GlobalAvgPool, vec![input], Shape::new(s.n, s.c, 1, 1))
    }

    pub fn channel_mean(&mut self, name: &str, input: NodeId) -> NodeId {
        let s = self.shape(input);
        self.push(name.into(), NodeKind::ChannelMean, vec![input], Shape::new(s.n, 1, s.h, s.w))
    }

    pub fn upsample_x2(&mut self, name: &str, input: NodeId) -> NodeId {
        let s = self.shape(input);
        self.push(name.into(), NodeKind::Upsample2x, vec![input], Shape::new(s.n, s.c, s.h * 2, s.w * 2))
    }

    /// Mark a node as a stage boundary for the shape table.
    pub fn mark_stage(&mut self, name: &str, node: NodeId) {
        self.marks.push(StageMark { name: name.into(), node });
    }

    pub fn finish(self, output: NodeId) -> LayerGraph<E> {
        let mut use_counts = vec![0u32; self.nodes.len()];
        for node in &self.nodes {
            for inp in &node.inputs {
                use_counts[inp.0] += 1;
            }
        }
        use_counts[output.0] += 1;
        LayerGraph {
            nodes: self.nodes,
            registry: self.registry,
            inputs: self.inputs,
            output,
            marks: self.marks,
            use_counts,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }
}

/// A recorded training forward pass: the tape, plus handles for the output,
/// the inputs, and every learnable parameter.
pub struct Recorded<E: Element = f32> {
    pub tape: Tape<E>,
    pub output: ValueId,
    pub inputs: Vec<ValueId>,
    pub params: Vec<(ParamId, ValueId)>,
}

/// Built network: topologically ordered nodes plus the parameter registry.
#[derive(Clone, Debug)]
pub struct LayerGraph<E: Element = f32> {
    nodes: Vec<GraphNode>,
    registry: ParamRegistry<E>,
    inputs: Vec<NodeId>,
    output: NodeId,
    marks: Vec<StageMark>,
    use_counts: Vec<u32>,
    bn_eps: E,
    bn_momentum: E,
}

impl<E: Element> LayerGraph<E> {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn registry(&self) -> &ParamRegistry<E> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry<E> {
        &mut self.registry
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_nodes(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn stage_marks(&self) -> &[StageMark] {
        &self.marks
    }

    pub fn node_shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn bn_eps(&self) -> E {
        self.bn_eps
    }

    fn check_input_shapes(&self, xs: &[&Tensor<E>]) -> Result<(), OpError> {
        if xs.len() != self.inputs.len() {
            return Err(OpError::Config(format!(
                "graph expects {} inputs, got {}",
                self.inputs.len(),
                xs.len()
            )));
        }
        let batch = xs[0].shape().n;
        for (x, &node) in xs.iter().zip(&self.inputs) {
            let want = self.nodes[node.0].shape;
            let got = x.shape();
            got.check_axis("forward input", Axis::Channel, want.c)?;
            got.check_axis("forward input", Axis::Height, want.h)?;
            got.check_axis("forward input", Axis::Width, want.w)?;
            got.check_axis("forward input", Axis::Batch, batch)?;
        }
        Ok(())
    }

    /// Pure inference pass. Batch-norm layers use running statistics; the
    /// graph is not mutated, so concurrent calls may share `self`.
    pub fn forward(&self, xs: &[&Tensor<E>]) -> Result<Tensor<E>, OpError> {
        self.check_input_shapes(xs)?;
        let mut values: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut remaining = self.use_counts.clone();
        let mut next_input = 0;

        for (i, node) in self.nodes.iter().enumerate() {
            let out = match &node.kind {
                NodeKind::Input => {
                    let t = xs[next_input].clone();
                    next_input += 1;
                    t
                }
                NodeKind::Conv { spec, weight, bias } => ops::conv2d(
                    value(&values, node.inputs[0]),
                    &self.registry.get(*weight).tensor,
                    bias.map(|b| &self.registry.get(b).tensor),
                    spec,
                )?,
                NodeKind::BatchNorm { gamma, beta, mean, var } => {
                    let (y, _) = ops::batch_norm_infer(
                        value(&values, node.inputs[0]),
                        &self.registry.get(*gamma).tensor,
                        &self.registry.get(*beta).tensor,
                        self.registry.get(*mean).tensor.data(),
                        self.registry.get(*var).tensor.data(),
                        self.bn_eps,
                    )?;
                    y
                }
                NodeKind::Relu => ops::relu(value(&values, node.inputs[0])),
                NodeKind::Add { .. } => {
                    ops::add(value(&values, node.inputs[0]), value(&values, node.inputs[1]))?
                }
                NodeKind::MulBroadcast => {
                    ops::mul_broadcast(value(&values, node.inputs[0]), value(&values, node.inputs[1]))?
                }
                NodeKind::Concat => {
                    let parts: Vec<&Tensor<E>> =
                        node.inputs.iter().map(|&p| value(&values, p)).collect();
                    ops::concat_channels(&parts)?
                }
                NodeKind::Split { index, parts } => {
                    let x = value(&values, node.inputs[0]);
                    let sub = x.shape().c / *parts;
                    ops::channel_slice(x, index * sub, sub)
                }
                NodeKind::GlobalAvgPool => ops::global_avg_pool(value(&values, node.inputs[0])),
                NodeKind::ChannelMean => ops::channel_mean(value(&values, node.inputs[0])),
                NodeKind::Upsample2x => ops::bilinear_upsample_x2(value(&values, node.inputs[0])),
            };
            values[i] = Some(out);
            // Free values after their last structural use.
            for inp in &node.inputs {
                remaining[inp.0] -= 1;
                if remaining[inp.0] == 0 {
                    values[inp.0] = None;
                }
            }
        }
        Ok(values[self.output.0].take().expect("output computed"))
    }

    /// Training-style pass through a gradient tape. `bn_mode` selects batch
    /// or running statistics; with `update_stats` the running statistics are
    /// folded forward (train mode only).
    pub fn record_forward(
        &mut self,
        xs: &[&Tensor<E>],
        bn_mode: BnMode,
        update_stats: bool,
    ) -> Result<Recorded<E>, OpError> {
        self.check_input_shapes(xs)?;
        let mut tape = Tape::new();
        let mut param_vals: Vec<Option<ValueId>> = vec![None; self.registry.len()];
        let mut values: Vec<Option<ValueId>> = vec![None; self.nodes.len()];
        let mut input_ids = Vec::new();
        let mut next_input = 0;

        for (i, node) in self.nodes.iter().enumerate() {
            let vid = match &node.kind {
                NodeKind::Input => {
                    let id = tape.leaf(xs[next_input].clone());
                    next_input += 1;
                    input_ids.push(id);
                    id
                }
                NodeKind::Conv { spec, weight, bias } => {
                    let w = leaf_param(&mut tape, &self.registry, &mut param_vals, *weight);
                    let b = bias.map(|b| leaf_param(&mut tape, &self.registry, &mut param_vals, b));
                    tape.conv2d(values[node.inputs[0].0].unwrap(), w, b, spec)?
                }
                NodeKind::BatchNorm { gamma, beta, mean, var } => {
                    let g = leaf_param(&mut tape, &self.registry, &mut param_vals, *gamma);
                    let bt = leaf_param(&mut tape, &self.registry, &mut param_vals, *beta);
                    let x = values[node.inputs[0].0].unwrap();
                    match bn_mode {
                        BnMode::Train => {
                            let y = tape.batch_norm_train(x, g, bt, self.bn_eps)?;
                            if update_stats {
                                let (m, v) = ops::batch_moments(tape.value(x));
                                let xs_shape = tape.shape(x);
                                let count = xs_shape.n * xs_shape.h * xs_shape.w;
                                let momentum = self.bn_momentum;
                                // Split borrows: copy out, update, write back.
                                let mut rm = self.registry.get(*mean).tensor.clone();
                                let mut rv = self.registry.get(*var).tensor.clone();
                                ops::update_running(
                                    rm.data_mut(),
                                    rv.data_mut(),
                                    &m,
                                    &v,
                                    momentum,
                                    count,
                                );
                                self.registry.get_mut(*mean).tensor = rm;
                                self.registry.get_mut(*var).tensor = rv;
                            }
                            y
                        }
                        BnMode::Infer => tape.batch_norm_infer(
                            x,
                            g,
                            bt,
                            self.registry.get(*mean).tensor.data(),
                            self.registry.get(*var).tensor.data(),
                            self.bn_eps,
                        )?,
                    }
                }
                NodeKind::Relu => tape.relu(values[node.inputs[0].0].unwrap()),
                NodeKind::Add { .. } => {
                    tape.add(values[node.inputs[0].0].unwrap(), values[node.inputs[1].0].unwrap())?
                }
                NodeKind::MulBroadcast => tape.mul_broadcast(
                    values[node.inputs[0].0].unwrap(),
                    values[node.inputs[1].0].unwrap(),
                )?,
                NodeKind::Concat => {
                    let parts: Vec<ValueId> =
                        node.inputs.iter().map(|p| values[p.0].unwrap()).collect();
                    tape.concat_channels(&parts)?
                }
                NodeKind::Split { index, parts } => {
                    // One tape split node per graph split node.
                    let x = values[node.inputs[0].0].unwrap();
                    let sub = tape.shape(x).c / *parts;
                    let piece = ops::channel_slice(tape.value(x), index * sub, sub);
                    tape.push_split(piece, x, *index, *parts)
                }
                NodeKind::GlobalAvgPool => tape.global_avg_pool(values[node.inputs[0].0].unwrap()),
                NodeKind::ChannelMean => tape.channel_mean(values[node.inputs[0].0].unwrap()),
                NodeKind::Upsample2x => tape.bilinear_upsample_x2(values[node.inputs[0].0].unwrap()),
            };
            values[i] = Some(vid);
        }

        let params = param_vals
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|vid| (ParamId(i), vid)))
            .collect();
        Ok(Recorded { tape, output: values[self.output.0].unwrap(), inputs: input_ids, params })
    }

    /// Forward in infer mode, bilinear-upsample logits x2 to the input
    /// resolution, then per-pixel argmax (ties go to the lowest index).
    pub fn predict(&self, x: &Tensor<E>) -> Result<Labels, OpError> {
        let logits = self.forward(&[x])?;
        let up = ops::bilinear_upsample_x2(&logits);
        Ok(argmax_channels(&up))
    }
}

/// Per-pixel channel argmax; ties break toward the lowest class index.
pub fn argmax_channels<E: Element>(t: &Tensor<E>) -> Labels {
    let s = t.shape();
    let mut labels = Labels::filled(s.n, s.h, s.w, 0);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut best = t.at(n, 0, y, x);
                let mut best_c = 0u32;
                for c in 1..s.c {
                    let v = t.at(n, c, y, x);
                    if v > best {
                        best = v;
                        best_c = c as u32;
                    }
                }
                *labels.at_mut(n, y, x) = best_c;
            }
        }
    }
    labels
}

fn value<'a, E: Element>(values: &'a [Option<Tensor<E>>], id: NodeId) -> &'a Tensor<E> {
    values[id.0].as_ref().expect("topological order guarantees inputs precede use")
}

fn leaf_param<E: Element>(
    tape: &mut Tape<E>,
    registry: &ParamRegistry<E>,
    cache: &mut [Option<ValueId>],
    id: ParamId,
) -> ValueId {
    if let Some(v) = cache[id.0] {
        return v;
    }
    let v = tape.leaf(registry.get(id).tensor.clone());
    cache[id.0] = Some(v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_graph(seed: u64) -> LayerGraph<f32> {
        let mut b = GraphBuilder::<f32>::new(seed);
        let x = b.input(3, 8, 8);
        let c = b.conv("conv1", x, ConvSpec::standard(3, 4, 3, 1, 1)).unwrap();
        let n = b.batch_norm("conv1.bn", c);
        let r = b.relu("conv1.relu", n);
        let c2 = b.conv("head", r, ConvSpec::pointwise(4, 2, true)).unwrap();
        b.finish(c2)
    }

    #[test]
    fn same_seed_builds_identical_registries() {
        let a = tiny_graph(42);
        let b = tiny_graph(42);
        for ((_, ea), (_, eb)) in a.registry().iter().zip(b.registry().iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor.data(), eb.tensor.data());
        }
        let c = tiny_graph(43);
        let wa = &a.registry().get(a.registry().id_of("conv1.weight").unwrap()).tensor;
        let wc = &c.registry().get(c.registry().id_of("conv1.weight").unwrap()).tensor;
        assert_ne!(wa.data(), wc.data());
    }

    #[test]
    fn infer_is_pure_and_deterministic() {
        let g = tiny_graph(7);
        let x = Tensor::<f32>::ramp(Shape::new(2, 3, 8, 8));
        let y1 = g.forward(&[&x]).unwrap();
        let y2 = g.forward(&[&x]).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let g = tiny_graph(7);
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 8, 6));
        assert!(g.forward(&[&x]).is_err());
    }

    #[test]
    fn concurrent_infer_shares_graph() {
        let g = std::sync::Arc::new(tiny_graph(7));
        let x = Tensor::<f32>::ramp(Shape::new(1, 3, 8, 8));
        let base = g.forward(&[&x]).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let g = g.clone();
                let x = x.clone();
                std::thread::spawn(move || g.forward(&[&x]).unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap().data(), base.data());
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        let mut t = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 2));
        // Pixel 0: exact tie between classes 0 and 2; pixel 1: class 1 wins.
        *t.at_mut(0, 2, 0, 0) = 0.0;
        *t.at_mut(0, 1, 0, 1) = 1.0;
        let l = argmax_channels(&t);
        assert_eq!(l.at(0, 0, 0), 0);
        assert_eq!(l.at(0, 0, 1), 1);
    }

    #[test]
    fn recorded_forward_matches_pure_forward_in_infer_mode() {
        let mut g = tiny_graph(9);
        let x = Tensor::<f32>::ramp(Shape::new(1, 3, 8, 8));
        let pure = g.forward(&[&x]).unwrap();
        let rec = g.record_forward(&[&x], BnMode::Infer, false).unwrap();
        assert_eq!(rec.tape.value(rec.output).data(), pure.data());
    }
}
