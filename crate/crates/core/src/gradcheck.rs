//! Central finite-difference verification of every backward rule.
//!
//! Each check runs a double-precision forward through the tape, reduces the
//! output to a scalar with a fixed random weighting, and compares analytic
//! gradients against (f(x+h) − f(x−h)) / 2h element by element.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{FpeBlock, FpeConfig, MeuConfig, MeuModule};
use crate::error::OpError;
use crate::graph::LayerGraph;
use crate::ops::{BnMode, ConvSpec};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Labels, Shape, Tensor};

/// Central-difference step (double precision).
pub const STEP: f64 = 1e-5;
/// Maximum allowed relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Minimum distance of any relu input from the kink for composite checks.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Location of the worst element: input tag, flat index, both values.
    pub detail: String,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    // Differences at central-difference noise scale count as agreement, so
    // elements whose true gradient is zero do not divide noise by the floor.
    if diff < 1e-8 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(1e-6)
}

/// Core harness: compare caller-supplied analytic gradients against finite
/// differences of `value` for every element of every input.
pub fn finite_difference_check(
    name: &str,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut value: impl FnMut(&[Tensor<f64>]) -> Result<f64, OpError>,
) -> Result<CheckOutcome, OpError> {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut detail = String::from("all elements agree");

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = value(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = value(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let rel = rel_err(a, numeric);
            if rel > max_rel {
                max_rel = rel;
                detail = format!(
                    "input {} shape {} index {j}: analytic {a:.9e} vs numeric {numeric:.9e}",
                    i,
                    input.shape()
                );
            }
        }
    }
    Ok(CheckOutcome { name: name.into(), max_rel_err: max_rel, pass: max_rel < TOLERANCE, detail })
}

type ForwardFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId, OpError>;

/// Check one primitive expressed as a tape closure.
fn check_closure(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    forward: ForwardFn,
    seed: u64,
) -> Result<CheckOutcome, OpError> {
    // Fixed weighting head so sign and permutation errors cannot cancel.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = forward(&mut tape, &ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let head = Tensor::randn(tape.shape(out), 1.0, &mut rng);

    let hid = tape.constant(head.clone());
    let prod = tape.mul_broadcast(out, hid)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.grad_or_zeros(id)).collect();

    let value = |xs: &[Tensor<f64>]| -> Result<f64, OpError> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = forward(&mut tape, &ids)?;
        let hid = tape.constant(head.clone());
        let prod = tape.mul_broadcast(out, hid)?;
        let loss = tape.sum(prod);
        Ok(tape.value(loss).scalar())
    };
    finite_difference_check(name, &inputs, &analytic, value)
}

/// Check a composite block: gradients w.r.t. every graph input and every
/// learnable parameter.
fn check_graph(
    name: &str,
    graph: &mut LayerGraph<f64>,
    inputs: &[Tensor<f64>],
    bn_mode: BnMode,
    seed: u64,
) -> Result<CheckOutcome, OpError> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let rec = graph.record_forward(&refs, bn_mode, false)?;
    let mut tape = rec.tape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_270b);
    let head = Tensor::randn(tape.shape(rec.output), 1.0, &mut rng);
    let hid = tape.constant(head.clone());
    let prod = tape.mul_broadcast(rec.output, hid)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;

    let mut all_inputs: Vec<Tensor<f64>> = inputs.to_vec();
    let mut analytic: Vec<Tensor<f64>> =
        rec.inputs.iter().map(|&id| grads.grad_or_zeros(id)).collect();
    let param_ids: Vec<_> = rec.params.iter().map(|&(pid, _)| pid).collect();
    for &(pid, vid) in &rec.params {
        all_inputs.push(graph.registry().get(pid).tensor.clone());
        analytic.push(grads.grad_or_zeros(vid));
    }

    let n_data = inputs.len();
    let result = {
        // xs = data inputs followed by parameter tensors, in param_ids order.
        // Every evaluation rewrites all parameters before running, so no
        // restore is needed between evaluations.
        let value = |xs: &[Tensor<f64>]| -> Result<f64, OpError> {
            for (k, &pid) in param_ids.iter().enumerate() {
                graph.registry_mut().get_mut(pid).tensor = xs[n_data + k].clone();
            }
            let refs: Vec<&Tensor<f64>> = xs[..n_data].iter().collect();
            let rec = graph.record_forward(&refs, bn_mode, false)?;
            let out = rec.tape.value(rec.output);
            let prod = crate::ops::mul_broadcast(out, &head)?;
            Ok(crate::ops::sum_all(&prod).scalar())
        };
        finite_difference_check(name, &all_inputs, &analytic, value)
    };
    // Put the original parameter values back.
    for (k, &pid) in param_ids.iter().enumerate() {
        graph.registry_mut().get_mut(pid).tensor = all_inputs[n_data + k].clone();
    }
    result
}

fn randn(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

/// Random tensor with every element at least `margin` away from zero.
fn randn_off_kink(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v >= 0.0 { *v + 0.1 } else { *v - 0.1 };
        }
    }
    t
}

pub fn op_names() -> Vec<&'static str> {
    vec![
        "conv2d",
        "conv2d_strided_grouped",
        "conv2d_dilated_depthwise",
        "conv2d_pointwise",
        "batch_norm_train",
        "batch_norm_infer",
        "relu",
        "add",
        "mul_broadcast_channel",
        "mul_broadcast_pixel",
        "mul_broadcast_elementwise",
        "split_concat",
        "global_avg_pool",
        "channel_mean",
        "bilinear_upsample_x2",
        "sum",
        "cross_entropy",
        "fpe",
        "fpe_stride2",
        "fpe_bottleneck",
        "meu",
        "meu_bare",
    ]
}

fn conv_case(name: &str, spec: ConvSpec, input: Shape, seed: u64) -> Result<CheckOutcome, OpError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![randn(input, 1.0, &mut rng), randn(spec.weight_shape(), 0.5, &mut rng)];
    if spec.has_bias {
        inputs.push(randn(Shape::new(1, spec.out_channels, 1, 1), 0.5, &mut rng));
    }
    let has_bias = spec.has_bias;
    check_closure(
        name,
        inputs,
        &move |tape, ids| tape.conv2d(ids[0], ids[1], has_bias.then(|| ids[2]), &spec),
        seed,
    )
}

/// Give every learnable parameter a generic random value. Identity-initial
/// BN (beta = 0) would park attention-gate relu inputs exactly on the kink,
/// and gradients at gamma = 1, beta = 0 exercise fewer backward terms.
fn randomize_params(graph: &mut LayerGraph<f64>, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for id in graph.registry().learnable_ids() {
        let entry = graph.registry_mut().get_mut(id);
        let gamma_like = entry.name.ends_with(".gamma");
        for v in entry.tensor.data_mut() {
            *v = if gamma_like {
                0.7 + 0.6 * rng.gen::<f64>()
            } else {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                0.5 * g
            };
        }
    }
}

fn fpe_case(name: &str, cfg: FpeConfig, hw: (usize, usize), seed: u64) -> Result<CheckOutcome, OpError> {
    // Seed search keeps every relu input off the kink so central differences
    // stay on one side of it.
    for attempt in 0..64 {
        let s = seed + attempt;
        let mut block = FpeBlock::<f64>::new(cfg.clone(), hw, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xabcd);
        randomize_params(block.graph_mut(), &mut rng);
        let x = randn(Shape::new(1, cfg.in_channels, hw.0, hw.1), 1.0, &mut rng);
        let rec = block.record(&x, BnMode::Train)?;
        let margin = rec.tape.relu_input_min_abs().unwrap_or(f64::INFINITY);
        if margin > KINK_MARGIN {
            return check_graph(name, block.graph_mut(), &[x], BnMode::Train, s);
        }
    }
    Err(OpError::Config(format!("{name}: no kink-free seed found")))
}

fn meu_case(name: &str, cfg: MeuConfig, seed: u64) -> Result<CheckOutcome, OpError> {
    for attempt in 0..64 {
        let s = seed + attempt;
        let mut module = MeuModule::<f64>::new(cfg, (4, 4), s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x7777);
        randomize_params(module.graph_mut(), &mut rng);
        let high = randn(Shape::new(1, cfg.high_channels, 4, 4), 1.0, &mut rng);
        let low = randn(Shape::new(1, cfg.low_channels, 8, 8), 1.0, &mut rng);
        let rec = module.record(&high, &low, BnMode::Train)?;
        let margin = rec.tape.relu_input_min_abs().unwrap_or(f64::INFINITY);
        if margin > KINK_MARGIN {
            return check_graph(name, module.graph_mut(), &[high, low], BnMode::Train, s);
        }
    }
    Err(OpError::Config(format!("{name}: no kink-free seed found")))
}

/// Run one named check. Returns `None` for unknown names.
pub fn run_op(name: &str, seed: u64) -> Option<Result<CheckOutcome, OpError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = match name {
        "conv2d" => conv_case(
            name,
            ConvSpec { has_bias: true, ..ConvSpec::standard(3, 4, 3, 1, 1) },
            Shape::new(1, 3, 7, 6),
            seed,
        ),
        "conv2d_strided_grouped" => conv_case(
            name,
            ConvSpec {
                in_channels: 4,
                out_channels: 6,
                kernel: (3, 3),
                stride: 2,
                dilation: 1,
                padding: 1,
                groups: 2,
                has_bias: false,
            },
            Shape::new(2, 4, 8, 9),
            seed,
        ),
        "conv2d_dilated_depthwise" => {
            conv_case(name, ConvSpec::depthwise3(5, 1, 2), Shape::new(1, 5, 9, 9), seed)
        }
        "conv2d_pointwise" => conv_case(
            name,
            ConvSpec::pointwise(4, 3, true),
            Shape::new(2, 4, 5, 5),
            seed,
        ),
        "batch_norm_train" => {
            let x = randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
            let gamma = randn(Shape::new(1, 3, 1, 1), 0.5, &mut rng);
            let beta = randn(Shape::new(1, 3, 1, 1), 0.5, &mut rng);
            check_closure(
                name,
                vec![x, gamma, beta],
                &|tape, ids| tape.batch_norm_train(ids[0], ids[1], ids[2], 1e-5),
                seed,
            )
        }
        "batch_norm_infer" => {
            let x = randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
            let gamma = randn(Shape::new(1, 3, 1, 1), 0.5, &mut rng);
            let beta = randn(Shape::new(1, 3, 1, 1), 0.5, &mut rng);
            let rm: Vec<f64> = (0..3).map(|i| 0.1 * i as f64).collect();
            let rv: Vec<f64> = (0..3).map(|i| 1.0 + 0.2 * i as f64).collect();
            check_closure(
                name,
                vec![x, gamma, beta],
                &move |tape, ids| tape.batch_norm_infer(ids[0], ids[1], ids[2], &rm, &rv, 1e-5),
                seed,
            )
        }
        "relu" => {
            // Inputs resampled away from the kink (|x| >= ~0.05 >> STEP).
            let x = randn_off_kink(Shape::new(1, 4, 6, 6), &mut rng);
            check_closure(name, vec![x], &|tape, ids| Ok(tape.relu(ids[0])), seed)
        }
        "add" => {
            let a = randn(Shape::new(1, 3, 5, 4), 1.0, &mut rng);
            let b = randn(Shape::new(1, 3, 5, 4), 1.0, &mut rng);
            check_closure(name, vec![a, b], &|tape, ids| tape.add(ids[0], ids[1]), seed)
        }
        "mul_broadcast_channel" => {
            let a = randn(Shape::new(2, 3, 4, 4), 1.0, &mut rng);
            let b = randn(Shape::new(2, 3, 1, 1), 1.0, &mut rng);
            check_closure(name, vec![a, b], &|tape, ids| tape.mul_broadcast(ids[0], ids[1]), seed)
        }
        "mul_broadcast_pixel" => {
            let a = randn(Shape::new(2, 3, 4, 4), 1.0, &mut rng);
            let b = randn(Shape::new(2, 1, 4, 4), 1.0, &mut rng);
            check_closure(name, vec![a, b], &|tape, ids| tape.mul_broadcast(ids[0], ids[1]), seed)
        }
        "mul_broadcast_elementwise" => {
            let a = randn(Shape::new(1, 3, 4, 4), 1.0, &mut rng);
            let b = randn(Shape::new(1, 3, 4, 4), 1.0, &mut rng);
            check_closure(name, vec![a, b], &|tape, ids| tape.mul_broadcast(ids[0], ids[1]), seed)
        }
        "split_concat" => {
            let x = randn(Shape::new(1, 6, 4, 4), 1.0, &mut rng);
            check_closure(
                name,
                vec![x],
                &|tape, ids| {
                    let parts = tape.split_channels(ids[0], 3)?;
                    // Swap two parts so routing errors show up.
                    tape.concat_channels(&[parts[2], parts[0], parts[1]])
                },
                seed,
            )
        }
        "global_avg_pool" => {
            let x = randn(Shape::new(2, 3, 5, 6), 1.0, &mut rng);
            check_closure(name, vec![x], &|tape, ids| Ok(tape.global_avg_pool(ids[0])), seed)
        }
        "channel_mean" => {
            let x = randn(Shape::new(2, 4, 5, 5), 1.0, &mut rng);
            check_closure(name, vec![x], &|tape, ids| Ok(tape.channel_mean(ids[0])), seed)
        }
        "bilinear_upsample_x2" => {
            let x = randn(Shape::new(1, 3, 4, 5), 1.0, &mut rng);
            check_closure(name, vec![x], &|tape, ids| Ok(tape.bilinear_upsample_x2(ids[0])), seed)
        }
        "sum" => {
            let x = randn(Shape::new(1, 2, 3, 3), 1.0, &mut rng);
            check_closure(name, vec![x], &|tape, ids| Ok(tape.sum(ids[0])), seed)
        }
        "cross_entropy" => {
            let x = randn(Shape::new(1, 3, 3, 4), 2.0, &mut rng);
            let mut labels = Labels::filled(1, 3, 4, 0);
            for (i, l) in labels.data_mut().iter_mut().enumerate() {
                *l = (i % 3) as u32;
            }
            *labels.at_mut(0, 1, 1) = 255;
            check_closure(
                name,
                vec![x],
                &move |tape, ids| tape.cross_entropy(ids[0], &labels, Some(255)),
                seed,
            )
        }
        "fpe" => fpe_case(
            name,
            FpeConfig {
                in_channels: 4,
                out_channels: 4,
                expansion: 4,
                branches: 4,
                dilations: vec![1, 2, 4, 8],
                stride: 1,
                inter_branch_add: true,
            },
            (9, 9),
            seed,
        ),
        "fpe_stride2" => fpe_case(
            name,
            FpeConfig {
                in_channels: 4,
                out_channels: 6,
                expansion: 4,
                branches: 4,
                dilations: vec![1, 2, 4, 8],
                stride: 2,
                inter_branch_add: true,
            },
            (8, 8),
            seed,
        ),
        "fpe_bottleneck" => fpe_case(
            name,
            FpeConfig {
                in_channels: 5,
                out_channels: 5,
                expansion: 1,
                branches: 1,
                dilations: vec![1],
                stride: 1,
                inter_branch_add: false,
            },
            (7, 7),
            seed,
        ),
        "meu" => meu_case(
            name,
            MeuConfig {
                high_channels: 3,
                low_channels: 4,
                out_channels: 5,
                channel_attention: true,
                spatial_attention: true,
            },
            seed,
        ),
        "meu_bare" => meu_case(
            name,
            MeuConfig {
                high_channels: 3,
                low_channels: 4,
                out_channels: 5,
                channel_attention: false,
                spatial_attention: false,
            },
            seed,
        ),
        _ => return None,
    };
    Some(result)
}

/// Run the whole suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>, OpError> {
    op_names()
        .into_iter()
        .map(|name| run_op(name, seed).expect("known name"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn corrupted_backward_rule_is_detected_with_op_name() {
        // Fixture: relu forward with a deliberately wrong analytic gradient
        // (mask ignored). The harness must flag it under the given name.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn_off_kink(Shape::new(1, 2, 3, 3), &mut rng);
        let head = randn(x.shape(), 1.0, &mut rng);
        let wrong = head.clone(); // pretends relu' == 1 everywhere
        let head_for_value = head.clone();
        let outcome = finite_difference_check(
            "relu(corrupted)",
            &[x.clone()],
            &[wrong],
            move |xs| {
                let y = ops::relu(&xs[0]);
                let prod = ops::mul_broadcast(&y, &head_for_value)?;
                Ok(ops::sum_all(&prod).scalar())
            },
        )
        .unwrap();
        assert!(!outcome.pass, "corrupted rule must fail");
        assert_eq!(outcome.name, "relu(corrupted)");
        assert!(x.data().iter().any(|&v| v < 0.0), "needs negative inputs to expose the mask");
    }

    #[test]
    fn relu_primitive_passes_off_kink() {
        let outcome = run_op("relu", 5).unwrap().unwrap();
        assert!(outcome.pass, "{}: {} ({})", outcome.name, outcome.max_rel_err, outcome.detail);
        assert!(outcome.max_rel_err < 1e-7);
    }

    #[test]
    fn a_few_primitives_pass_quickly() {
        for name in ["add", "global_avg_pool", "sum", "mul_broadcast_channel"] {
            let outcome = run_op(name, 11).unwrap().unwrap();
            assert!(outcome.pass, "{}: {} ({})", outcome.name, outcome.max_rel_err, outcome.detail);
        }
    }
}
