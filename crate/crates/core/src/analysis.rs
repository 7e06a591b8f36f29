//! Static cost model: parameter counts, multiply-accumulate counts,
//! receptive-field propagation and the stage shape table. All figures come
//! from walking the built layer graph, so the static model and the runnable
//! network can never drift apart.

use crate::config::ModelConfig;
use crate::error::OpError;
use crate::graph::{LayerGraph, NodeKind};
use crate::net::build;
use crate::tensor::{Element, Shape};

/// Cost classification of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    /// Convolution counted in the MAC column.
    Conv,
    /// Attention-gate convolution fed by global pooling: constant cost,
    /// independent of resolution, counted with the elementwise ops so the
    /// MAC column stays exactly resolution-linear.
    Gate,
    Norm,
    Elementwise,
    /// Pure routing (inputs, splits, concatenations): no arithmetic.
    Routing,
}

#[derive(Clone, Debug)]
pub struct CostRow {
    pub name: String,
    pub kind: RowKind,
    pub shape: Shape,
    pub params: u64,
    pub macs: u64,
    pub rf: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    /// Convolution multiply-accumulates (not doubled into FLOPs).
    pub conv_macs: u64,
    /// Elementwise work: normalization, activations, additions, gates,
    /// pooling and upsampling, one op per element.
    pub aux_ops: u64,
    pub convention: String,
}

/// Receptive-field propagation state, in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfState {
    pub rf: u64,
    pub jump: u64,
}

impl RfState {
    pub const INPUT: RfState = RfState { rf: 1, jump: 1 };
}

/// Standard composition rule: rf' = rf + (dilation·(k−1))·jump,
/// jump' = jump·stride.
pub fn compose_rf(state: RfState, kernel: usize, stride: usize, dilation: usize) -> RfState {
    RfState {
        rf: state.rf + (dilation as u64 * (kernel as u64 - 1)) * state.jump,
        jump: state.jump * stride as u64,
    }
}

fn upsample_rf(state: RfState) -> RfState {
    // Two interpolation taps one source pixel apart.
    RfState { rf: state.rf + state.jump, jump: (state.jump / 2).max(1) }
}

/// Walk the graph built from `cfg` at `input_size` and price every node.
pub fn analyze(cfg: &ModelConfig, input_size: (usize, usize)) -> Result<CostReport, OpError> {
    let sized = ModelConfig { input_size, ..cfg.clone() };
    let graph = build::<f32>(&sized, 0)?;
    Ok(analyze_graph(&graph))
}

/// Price an already-built graph.
pub fn analyze_graph<E: Element>(graph: &LayerGraph<E>) -> CostReport {
    let nodes = graph.nodes();
    let mut rows = Vec::with_capacity(nodes.len());
    let mut rf = vec![RfState::INPUT; nodes.len()];
    let mut total_params = 0u64;
    let mut conv_macs = 0u64;
    let mut aux_ops = 0u64;

    for (i, node) in nodes.iter().enumerate() {
        let s = node.shape;
        let elems = (s.c * s.h * s.w) as u64;
        let (kind, params, macs, state) = match &node.kind {
            NodeKind::Input => (RowKind::Routing, 0, 0, RfState::INPUT),
            NodeKind::Conv { spec, weight, bias } => {
                let mut params = graph.registry().get(*weight).tensor.len() as u64;
                if let Some(b) = bias {
                    params += graph.registry().get(*b).tensor.len() as u64;
                }
                let macs = (s.h * s.w * s.c) as u64 * spec.macs_per_output();
                let fed_by_gap = matches!(nodes[node.inputs[0].0].kind, NodeKind::GlobalAvgPool);
                let kind = if fed_by_gap { RowKind::Gate } else { RowKind::Conv };
                let k = spec.kernel.0.max(spec.kernel.1);
                let state = compose_rf(rf[node.inputs[0].0], k, spec.stride, spec.dilation);
                (kind, params, macs, state)
            }
            NodeKind::BatchNorm { gamma, beta, .. } => {
                let params = (graph.registry().get(*gamma).tensor.len()
                    + graph.registry().get(*beta).tensor.len()) as u64;
                (RowKind::Norm, params, elems, rf[node.inputs[0].0])
            }
            NodeKind::Relu | NodeKind::MulBroadcast => {
                // Gated products keep the feature road's receptive field; the
                // gate operand is a modulator, not a spatial path.
                (RowKind::Elementwise, 0, elems, rf[node.inputs[0].0])
            }
            NodeKind::Add { cascade } => {
                let state = if *cascade {
                    rf[node.inputs[0].0]
                } else {
                    let a = rf[node.inputs[0].0];
                    let b = rf[node.inputs[1].0];
                    RfState { rf: a.rf.max(b.rf), jump: a.jump.max(b.jump) }
                };
                (RowKind::Elementwise, 0, elems, state)
            }
            NodeKind::Concat => {
                let state = node
                    .inputs
                    .iter()
                    .map(|p| rf[p.0])
                    .reduce(|a, b| RfState { rf: a.rf.max(b.rf), jump: a.jump.max(b.jump) })
                    .unwrap();
                (RowKind::Routing, 0, 0, state)
            }
            NodeKind::Split { .. } => (RowKind::Routing, 0, 0, rf[node.inputs[0].0]),
            NodeKind::GlobalAvgPool | NodeKind::ChannelMean => {
                let in_shape = nodes[node.inputs[0].0].shape;
                let reads = (in_shape.c * in_shape.h * in_shape.w) as u64;
                (RowKind::Elementwise, 0, reads, rf[node.inputs[0].0])
            }
            NodeKind::Upsample2x => {
                (RowKind::Elementwise, 0, elems, upsample_rf(rf[node.inputs[0].0]))
            }
        };
        rf[i] = state;
        total_params += params;
        match kind {
            RowKind::Conv => conv_macs += macs,
            RowKind::Routing => {}
            _ => aux_ops += macs,
        }
        rows.push(CostRow { name: node.name.clone(), kind, shape: s, params, macs, rf: state.rf });
    }

    CostReport {
        rows,
        total_params,
        conv_macs,
        aux_ops,
        convention: "counts are multiply-accumulates (FLOPs would be about 2x); normalization, \
                     activations, additions, pooling, upsampling and attention-gate convolutions \
                     are tallied separately as elementwise ops"
            .into(),
    }
}

/// Parameter column (sizes do not affect it).
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport, OpError> {
    analyze(cfg, cfg.input_size)
}

/// MAC column at a given input size.
pub fn count_macs(cfg: &ModelConfig, input_size: (usize, usize)) -> Result<CostReport, OpError> {
    analyze(cfg, input_size)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub name: String,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

/// Stage-level shape table (name, channels, output size).
pub fn shape_table(cfg: &ModelConfig, input_size: (usize, usize)) -> Result<Vec<ShapeRow>, OpError> {
    let sized = ModelConfig { input_size, ..cfg.clone() };
    let graph = build::<f32>(&sized, 0)?;
    Ok(graph
        .stage_marks()
        .iter()
        .map(|m| {
            let s = graph.node_shape(m.node);
            ShapeRow { name: m.name.clone(), channels: s.c, h: s.h, w: s.w }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfRow {
    pub name: String,
    pub rf: u64,
}

/// Cumulative receptive field at each stage boundary plus the network total.
/// Cascade additions are excluded (per-branch maximum convention).
pub fn receptive_field_table(cfg: &ModelConfig) -> Result<Vec<RfRow>, OpError> {
    let graph = build::<f32>(cfg, 0)?;
    let report = analyze_graph(&graph);
    let rf_by_name: std::collections::HashMap<&str, u64> =
        report.rows.iter().map(|r| (r.name.as_str(), r.rf)).collect();
    let mut rows: Vec<RfRow> = graph
        .stage_marks()
        .iter()
        .map(|m| RfRow { name: m.name.clone(), rf: rf_by_name[graph.nodes()[m.node.0].name.as_str()] })
        .collect();
    rows.push(RfRow { name: "network".into(), rf: report.rows.last().map(|r| r.rf).unwrap_or(1) });
    Ok(rows)
}

impl CostReport {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        out.push_str(&format!(
            "{:<name_w$}  {:>14}  {:>12}  {:>14}  {:>6}\n",
            "layer", "output", "params", "macs", "rf"
        ));
        for r in &self.rows {
            let shape = format!("{}x{}x{}", r.shape.c, r.shape.h, r.shape.w);
            out.push_str(&format!(
                "{:<name_w$}  {:>14}  {:>12}  {:>14}  {:>6}\n",
                r.name, shape, r.params, r.macs, r.rf
            ));
        }
        out.push_str(&format!(
            "total params {} | conv macs {} | elementwise ops {}\n",
            self.total_params, self.conv_macs, self.aux_ops
        ));
        out.push_str(&format!("note: {}\n", self.convention));
        out
    }

    /// Machine-readable lines: name, shape, params, macs, rf (tab-separated).
    pub fn to_machine(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}x{}x{}\t{}\t{}\t{}\n",
                r.name, r.shape.c, r.shape.h, r.shape.w, r.params, r.macs, r.rf
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DecoderKind;

    fn grid_cfg(p: usize, q: usize) -> ModelConfig {
        ModelConfig { p, q, decoder: DecoderKind::Bilinear, ..ModelConfig::default() }
    }

    #[test]
    fn single_conv_receptive_fields() {
        // 3x3 at dilation 8 from scratch.
        let rf = compose_rf(RfState::INPUT, 3, 1, 8);
        assert_eq!(rf, RfState { rf: 17, jump: 1 });
        // 3x3 stride-2 from scratch.
        let rf = compose_rf(RfState::INPUT, 3, 2, 1);
        assert_eq!(rf, RfState { rf: 3, jump: 2 });
        // Two stacked 3x3s.
        let rf = compose_rf(compose_rf(RfState::INPUT, 3, 1, 1), 3, 1, 1);
        assert_eq!(rf.rf, 5);
    }

    #[test]
    fn params_match_registry_exactly_across_depth_grid() {
        for (p, q) in [(3, 5), (3, 7), (5, 7), (3, 9), (5, 9), (3, 11)] {
            let cfg = grid_cfg(p, q);
            let report = count_params(&cfg).unwrap();
            let graph = build::<f32>(&cfg, 0).unwrap();
            assert_eq!(
                report.total_params,
                graph.registry().learnable_elements(),
                "static/dynamic parameter disagreement at p={p}, q={q}"
            );
        }
    }

    #[test]
    fn smallest_conv_has_two_params() {
        // 1x1 conv, one in, one out, with bias.
        let mut b = crate::graph::GraphBuilder::<f32>::new(0);
        let x = b.input(1, 1, 1);
        let c = b.conv("c", x, crate::ops::ConvSpec::pointwise(1, 1, true)).unwrap();
        let g = b.finish(c);
        let report = analyze_graph(&g);
        assert_eq!(report.total_params, 2);
        // 1 -> 1 channel at 1x1 input: exactly one multiply-accumulate.
        assert_eq!(report.conv_macs, 1);
    }

    #[test]
    fn macs_are_exactly_resolution_linear() {
        let cfg = ModelConfig::default();
        let base = count_macs(&cfg, (1024, 512)).unwrap();
        let double = count_macs(&cfg, (2048, 1024)).unwrap();
        assert_eq!(double.conv_macs, base.conv_macs * 4);
        // Every conv row quadruples.
        for (a, b) in base.rows.iter().zip(&double.rows) {
            if a.kind == RowKind::Conv {
                assert_eq!(b.macs, a.macs * 4, "row {}", a.name);
            }
        }
    }

    #[test]
    fn params_and_macs_increase_strictly_in_depth() {
        let base = grid_cfg(3, 7);
        let deeper_q = grid_cfg(3, 9);
        let deeper_p = grid_cfg(5, 7);
        let params = |c: &ModelConfig| count_params(c).unwrap().total_params;
        let macs = |c: &ModelConfig| count_macs(c, (1024, 512)).unwrap().conv_macs;
        assert!(params(&deeper_q) > params(&base));
        assert!(params(&deeper_p) > params(&base));
        assert!(macs(&deeper_q) > macs(&base));
        assert!(macs(&deeper_p) > macs(&base));
    }

    #[test]
    fn stage_shape_table_for_reference_input() {
        let cfg = ModelConfig::default();
        let rows = shape_table(&cfg, (1024, 512)).unwrap();
        let expect = [
            ("stage1", 16, 512, 256),
            ("stage2", 32, 256, 128),
            ("stage3", 64, 128, 64),
            ("decoder2", 64, 256, 128),
            ("decoder1", 32, 512, 256),
            ("final", 19, 512, 256),
        ];
        assert_eq!(rows.len(), expect.len());
        for (row, (name, c, h, w)) in rows.iter().zip(expect) {
            assert_eq!(row.name, name);
            assert_eq!((row.channels, row.h, row.w), (c, h, w));
        }
    }

    #[test]
    fn machine_format_is_five_tab_columns() {
        let cfg = ModelConfig { input_size: (64, 64), num_classes: 4, ..ModelConfig::default() };
        let report = analyze(&cfg, (64, 64)).unwrap();
        for line in report.to_machine().lines() {
            assert_eq!(line.split('\t').count(), 5, "{line}");
        }
    }
}
