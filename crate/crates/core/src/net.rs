//! Assembly of the complete encoder-decoder network.
//!
//! Encoder: a strided 3x3 stem to the first stage width, one plain bottleneck
//! FPE block, then two stages that each open with a stride-2 FPE block and
//! stack p (resp. q) stride-1 blocks. Long skip connections (when enabled)
//! feed each stage the sum of the previous stage's first- and last-block
//! outputs. Decoder: two MEU modules, or bilinear upsampling for the ablation
//! baseline. A biased 1x1 classifier emits logits at half input resolution.

use crate::block::{emit_fpe, emit_meu, FpeConfig, MeuConfig};
use crate::config::{DecoderKind, ModelConfig};
use crate::error::OpError;
use crate::graph::{GraphBuilder, LayerGraph, NodeId};
use crate::ops::ConvSpec;
use crate::tensor::Element;

fn stage_fpe(cfg: &ModelConfig, in_channels: usize, out_channels: usize, stride: usize) -> FpeConfig {
    FpeConfig {
        in_channels,
        out_channels,
        expansion: 4,
        branches: cfg.branches,
        dilations: cfg.dilations.clone(),
        stride,
        inter_branch_add: cfg.inter_branch_add,
    }
}

/// Build the network for `cfg` with seeded parameter initialization. The same
/// seed always yields a bit-identical parameter registry.
pub fn build<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<LayerGraph<E>, OpError> {
    cfg.validate().map_err(|e| OpError::Config(e.to_string()))?;
    let (c1, c2, c3) = cfg.stage_channels;
    let (h, w) = cfg.input_size;

    let mut b = GraphBuilder::<E>::new(seed);
    let input = b.input(3, h, w);

    // Stage 1: strided stem + one plain bottleneck block (k=1, single branch).
    let stem = b.conv("stem", input, ConvSpec::standard(3, c1, 3, 2, 1))?;
    let stem = b.batch_norm("stem.bn", stem);
    let stem = b.relu("stem.relu", stem);
    let bottleneck = FpeConfig {
        in_channels: c1,
        out_channels: c1,
        expansion: 1,
        branches: 1,
        dilations: vec![1],
        stride: 1,
        inter_branch_add: cfg.inter_branch_add,
    };
    let stage1 = emit_fpe(&mut b, stem, &bottleneck, "stage1.block0")?;
    b.mark_stage("stage1", stage1);

    // Long skips combine a stage's first- and last-block outputs by addition
    // (concatenation would contradict the per-stage channel widths).
    let stage2_in = if cfg.long_skip {
        b.add("stage2.skip", stem, stage1)?
    } else {
        stage1
    };
    let (stage2, stage2_first) = emit_stage(&mut b, cfg, stage2_in, c1, c2, cfg.p, "stage2")?;
    b.mark_stage("stage2", stage2);

    let stage3_in = if cfg.long_skip {
        b.add("stage3.skip", stage2_first, stage2)?
    } else {
        stage2
    };
    let (stage3, _) = emit_stage(&mut b, cfg, stage3_in, c2, c3, cfg.q, "stage3")?;
    b.mark_stage("stage3", stage3);

    let output = match cfg.decoder {
        DecoderKind::Meu => {
            let meu2 = MeuConfig {
                high_channels: c3,
                low_channels: c2,
                out_channels: c3,
                channel_attention: cfg.meu_channel_attention,
                spatial_attention: cfg.meu_spatial_attention,
            };
            let d2 = emit_meu(&mut b, stage3, stage2, &meu2, "decoder2")?;
            b.mark_stage("decoder2", d2);
            let meu1 = MeuConfig {
                high_channels: c3,
                low_channels: c1,
                out_channels: c2,
                channel_attention: cfg.meu_channel_attention,
                spatial_attention: cfg.meu_spatial_attention,
            };
            let d1 = emit_meu(&mut b, d2, stage1, &meu1, "decoder1")?;
            b.mark_stage("decoder1", d1);
            let logits =
                b.conv("classifier", d1, ConvSpec::pointwise(c2, cfg.num_classes, true))?;
            b.mark_stage("final", logits);
            logits
        }
        DecoderKind::Bilinear => {
            // Ablation baseline: classify at 1/8 scale, recover by upsampling.
            let logits =
                b.conv("classifier", stage3, ConvSpec::pointwise(c3, cfg.num_classes, true))?;
            b.mark_stage("final", logits);
            let up1 = b.upsample_x2("up1", logits);
            b.mark_stage("up1", up1);
            let up2 = b.upsample_x2("up2", up1);
            b.mark_stage("up2", up2);
            up2
        }
    };

    Ok(b.finish(output))
}

/// One encoder stage: a stride-2 downsampling block followed by `depth`
/// stride-1 blocks. Returns (stage output, first-block output).
fn emit_stage<E: Element>(
    b: &mut GraphBuilder<E>,
    cfg: &ModelConfig,
    input: NodeId,
    in_channels: usize,
    out_channels: usize,
    depth: usize,
    prefix: &str,
) -> Result<(NodeId, NodeId), OpError> {
    let down = stage_fpe(cfg, in_channels, out_channels, 2);
    let first = emit_fpe(b, input, &down, &format!("{prefix}.block0"))?;
    let mut cur = first;
    for i in 1..=depth {
        let block = stage_fpe(cfg, out_channels, out_channels, 1);
        cur = emit_fpe(b, cur, &block, &format!("{prefix}.block{i}"))?;
    }
    Ok((cur, first))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeKind;
    use crate::ops::BnMode;
    use crate::tensor::{Shape, Tensor};

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            p: 1,
            q: 1,
            input_size: (32, 32),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn stage_shapes_follow_stride_schedule() {
        let cfg = ModelConfig { num_classes: 19, ..ModelConfig::default() };
        let g = build::<f32>(&cfg, 0).unwrap();
        let by_name = |name: &str| {
            let mark = g.stage_marks().iter().find(|m| m.name == name).unwrap();
            g.node_shape(mark.node)
        };
        assert_eq!(by_name("stage1"), Shape::new(1, 16, 512, 256));
        assert_eq!(by_name("stage2"), Shape::new(1, 32, 256, 128));
        assert_eq!(by_name("stage3"), Shape::new(1, 64, 128, 64));
        assert_eq!(by_name("decoder2"), Shape::new(1, 64, 256, 128));
        assert_eq!(by_name("decoder1"), Shape::new(1, 32, 512, 256));
        assert_eq!(by_name("final"), Shape::new(1, 19, 512, 256));
    }

    #[test]
    fn forward_emits_half_resolution_logits() {
        let cfg = toy_cfg();
        let g = build::<f32>(&cfg, 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 32, 32));
        let y = g.forward(&[&x]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 16, 16));

        let bilinear = ModelConfig { decoder: DecoderKind::Bilinear, ..toy_cfg() };
        let g = build::<f32>(&bilinear, 1).unwrap();
        let y = g.forward(&[&x]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 16, 16));
    }

    #[test]
    fn predict_returns_full_resolution_labels() {
        let cfg = toy_cfg();
        let g = build::<f32>(&cfg, 1).unwrap();
        let x = Tensor::zeros(Shape::new(2, 3, 32, 32));
        let labels = g.predict(&x).unwrap();
        assert_eq!((labels.n, labels.h, labels.w), (2, 32, 32));
    }

    #[test]
    fn same_seed_bit_identical_registry() {
        let cfg = toy_cfg();
        let a = build::<f32>(&cfg, 77).unwrap();
        let b = build::<f32>(&cfg, 77).unwrap();
        assert_eq!(a.registry().len(), b.registry().len());
        for ((_, ea), (_, eb)) in a.registry().iter().zip(b.registry().iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor.data(), eb.tensor.data());
        }
    }

    #[test]
    fn infer_twice_is_bit_identical() {
        let cfg = toy_cfg();
        let g = build::<f32>(&cfg, 5).unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::randn(Shape::new(1, 3, 32, 32), 1.0, &mut rng);
        assert_eq!(g.forward(&[&x]).unwrap().data(), g.forward(&[&x]).unwrap().data());
    }

    #[test]
    fn without_skips_and_cascades_graph_is_a_chain() {
        let plain = ModelConfig {
            long_skip: false,
            inter_branch_add: false,
            ..toy_cfg()
        };
        let g = build::<f32>(&plain, 0).unwrap();
        assert!(g.nodes().iter().all(|n| !n.name.contains(".skip") && !n.name.contains(".csum")));

        let skips = build::<f32>(&toy_cfg(), 0).unwrap();
        assert!(skips.nodes().iter().any(|n| n.name.contains(".skip")));
        assert!(skips.nodes().iter().any(|n| n.name.contains(".csum")));
    }

    #[test]
    fn train_mode_updates_running_stats_and_infer_does_not() {
        let cfg = toy_cfg();
        let mut g = build::<f32>(&cfg, 3).unwrap();
        let x = Tensor::<f32>::ramp(Shape::new(1, 3, 32, 32));
        let stat_id = g.registry().id_of("stem.bn.running_mean").unwrap();
        let before = g.registry().get(stat_id).tensor.clone();
        g.record_forward(&[&x], BnMode::Infer, false).unwrap();
        assert_eq!(g.registry().get(stat_id).tensor.data(), before.data());
        g.record_forward(&[&x], BnMode::Train, true).unwrap();
        assert_ne!(g.registry().get(stat_id).tensor.data(), before.data());
    }

    #[test]
    fn generalized_shape_pattern() {
        for (h, w) in [(64usize, 64usize), (1536, 768)] {
            let cfg = ModelConfig { input_size: (h, w), num_classes: 4, ..ModelConfig::default() };
            let g = build::<f32>(&cfg, 0).unwrap();
            let marks: Vec<(String, Shape)> = g
                .stage_marks()
                .iter()
                .map(|m| (m.name.clone(), g.node_shape(m.node)))
                .collect();
            let find = |n: &str| marks.iter().find(|(name, _)| name == n).unwrap().1;
            assert_eq!((find("stage1").h, find("stage1").w), (h / 2, w / 2));
            assert_eq!((find("stage2").h, find("stage2").w), (h / 4, w / 4));
            assert_eq!((find("stage3").h, find("stage3").w), (h / 8, w / 8));
            assert_eq!((find("decoder2").h, find("decoder2").w), (h / 4, w / 4));
            assert_eq!((find("decoder1").h, find("decoder1").w), (h / 2, w / 2));
        }
    }

    #[test]
    fn long_skip_preserves_shapes() {
        let g = build::<f32>(&toy_cfg(), 0).unwrap();
        for node in g.nodes() {
            if let NodeKind::Add { .. } = node.kind {
                let a = g.node_shape(node.inputs[0]);
                let b = g.node_shape(node.inputs[1]);
                assert_eq!(a, b);
                assert_eq!(a, node.shape);
            }
        }
    }
}
