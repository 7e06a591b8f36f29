//! The desk-scale training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{AdamConfig, AdamState};
use super::augment::{augment, normalize_only, AugmentationPolicy};
use super::dataset::stack_samples;
use super::metrics::{ConfusionMatrix, MiouResult};
use super::schedule::PolySchedule;
use super::TrainError;
use crate::error::OpError;
use crate::graph::LayerGraph;
use crate::ops::BnMode;
use crate::tensor::{Labels, Tensor};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: PolySchedule,
    pub adam: AdamConfig,
    pub policy: AugmentationPolicy,
    pub seed: u64,
    pub ignore_index: Option<u32>,
}

impl TrainOptions {
    pub fn new(epochs: usize) -> Self {
        TrainOptions {
            epochs,
            batch_size: 8,
            schedule: PolySchedule::new(epochs.max(1)),
            adam: AdamConfig::default(),
            policy: AugmentationPolicy::default(),
            seed: 0,
            ignore_index: Some(255),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Line-oriented text: epoch, lr, loss, miou — tab-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.8e}\t{:.6}\t{:.6}\n",
                r.epoch, r.lr, r.mean_loss, r.val_miou
            ));
        }
        out
    }
}

/// Confusion-matrix evaluation of `graph` over unaugmented (normalized-only)
/// samples at full resolution.
pub fn evaluate(
    graph: &LayerGraph<f32>,
    data: &[(Tensor<f32>, Labels)],
    classes: usize,
    ignore: Option<u32>,
    policy: &AugmentationPolicy,
) -> Result<MiouResult, OpError> {
    let mut cm = ConfusionMatrix::new(classes, ignore);
    for (image, labels) in data {
        let x = normalize_only(image, policy);
        let pred = graph.predict(&x)?;
        cm.update(labels, &pred)?;
    }
    cm.miou()
}

/// Train `graph` in place. Deterministic per seed: the shuffle order and the
/// augmentation draws are re-derived from the seed identically every epoch,
/// so a zero learning rate reproduces the same loss each epoch exactly.
pub fn train(
    graph: &mut LayerGraph<f32>,
    train_set: &[(Tensor<f32>, Labels)],
    val_set: &[(Tensor<f32>, Labels)],
    opts: &TrainOptions,
) -> Result<TrainLog, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = graph.node_shape(graph.output()).c;
    let mut adam = AdamState::new(graph, opts.adam);
    let learnable = graph.registry().learnable_ids();
    let mut log = TrainLog::default();

    for epoch in 0..opts.epochs {
        let lr = opts.schedule.lr(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            let samples: Vec<(Tensor<f32>, Labels)> = chunk
                .iter()
                .map(|&i| augment(&train_set[i].0, &train_set[i].1, &opts.policy, &mut rng))
                .collect();
            let (images, labels) = stack_samples(&samples);

            let recorded = graph.record_forward(&[&images], BnMode::Train, true)?;
            let mut tape = recorded.tape;
            // Logits live at half resolution; recover to label resolution
            // before the per-pixel loss, mirroring prediction.
            let full = tape.bilinear_upsample_x2(recorded.output);
            let loss = tape.cross_entropy(full, &labels, opts.ignore_index)?;
            let loss_value = tape.value(loss).scalar() as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            loss_sum += loss_value;
            batches += 1;

            let grads = tape.backward(loss)?;
            let by_param: std::collections::HashMap<_, _> = recorded.params.iter().copied().collect();
            let grad_vec: Vec<Tensor<f32>> = learnable
                .iter()
                .map(|id| match by_param.get(id) {
                    Some(&vid) => grads.grad_or_zeros(vid),
                    None => Tensor::zeros(graph.registry().get(*id).tensor.shape()),
                })
                .collect();
            adam.step(graph, &grad_vec, lr)?;
        }

        let val_miou = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(graph, val_set, classes, opts.ignore_index, &opts.policy)?.mean_iou
        };
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / batches.max(1) as f64,
            val_miou,
        });
    }
    Ok(log)
}
