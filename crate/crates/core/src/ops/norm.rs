//! Batch normalization over the (batch, height, width) axes.

use crate::error::{Axis, OpError};
use crate::tensor::{Element, Shape, Tensor};

/// Whether batch statistics (train) or running statistics (infer) normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Full normalization state for one layer: affine parameters plus running
/// statistics. Parameters are stored as (1, c, 1, 1) tensors so they plug
/// into the gradient tape like any other parameter.
#[derive(Clone, Debug)]
pub struct BatchNormState<E: Element = f32> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub eps: E,
    pub momentum: E,
    pub mode: BnMode,
}

impl<E: Element> BatchNormState<E> {
    /// Identity-initialized state: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize) -> Self {
        let vec_shape = Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::ones(vec_shape),
            beta: Tensor::zeros(vec_shape),
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            eps: E::from_f64(1e-5),
            momentum: E::from_f64(0.1),
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Saved values needed by the backward rule.
#[derive(Clone, Debug)]
pub struct BnSaved<E: Element> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
    pub mode: BnMode,
}

fn check_channels<E: Element>(op: &'static str, x: &Tensor<E>, channels: usize) -> Result<(), OpError> {
    x.shape().check_axis(op, Axis::Channel, channels)
}

/// Per-channel batch mean and biased variance (two-pass, fixed order).
pub fn batch_moments<E: Element>(x: &Tensor<E>) -> (Vec<E>, Vec<E>) {
    let s = x.shape();
    let count = E::from_f64((s.n * s.h * s.w) as f64);
    let mut means = Vec::with_capacity(s.c);
    let mut vars = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let mut acc = E::zero();
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                acc += v;
            }
        }
        let mean = acc / count;
        let mut sq = E::zero();
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - mean;
                sq += d * d;
            }
        }
        means.push(mean);
        vars.push(sq / count);
    }
    (means, vars)
}

/// Train-mode normalization by batch statistics. Returns the output and the
/// saved values for the backward rule. Does not touch running statistics.
pub fn batch_norm_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<(Tensor<E>, BnSaved<E>), OpError> {
    let channels = gamma.len();
    check_channels("batch_norm", x, channels)?;
    let (mean, var) = batch_moments(x);
    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let y = normalize(x, &mean, &inv_std, gamma.data(), beta.data());
    Ok((y, BnSaved { mean, inv_std, mode: BnMode::Train }))
}

/// Infer-mode normalization by running statistics.
pub fn batch_norm_infer<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &[E],
    running_var: &[E],
    eps: E,
) -> Result<(Tensor<E>, BnSaved<E>), OpError> {
    check_channels("batch_norm", x, gamma.len())?;
    let inv_std: Vec<E> = running_var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let y = normalize(x, running_mean, &inv_std, gamma.data(), beta.data());
    Ok((y, BnSaved { mean: running_mean.to_vec(), inv_std, mode: BnMode::Infer }))
}

/// One-call interface over a full state record. Train mode also folds the
/// batch statistics into the running statistics (EMA, unbiased variance).
pub fn batch_norm<E: Element>(x: &Tensor<E>, s: &mut BatchNormState<E>) -> Result<Tensor<E>, OpError> {
    match s.mode {
        BnMode::Infer => {
            let (y, _) = batch_norm_infer(x, &s.gamma, &s.beta, &s.running_mean, &s.running_var, s.eps)?;
            Ok(y)
        }
        BnMode::Train => {
            let (y, _) = batch_norm_train(x, &s.gamma, &s.beta, s.eps)?;
            let (mean, var) = batch_moments(x);
            let count = x.shape().n * x.shape().h * x.shape().w;
            update_running(&mut s.running_mean, &mut s.running_var, &mean, &var, s.momentum, count);
            Ok(y)
        }
    }
}

/// EMA update of running statistics from batch statistics. `var` is the
/// biased batch variance; the stored running variance uses the unbiased
/// estimate when more than one value contributed.
pub fn update_running<E: Element>(
    running_mean: &mut [E],
    running_var: &mut [E],
    mean: &[E],
    var: &[E],
    momentum: E,
    count: usize,
) {
    let keep = E::one() - momentum;
    let correction = if count > 1 {
        E::from_f64(count as f64 / (count as f64 - 1.0))
    } else {
        E::one()
    };
    for c in 0..mean.len() {
        running_mean[c] = keep * running_mean[c] + momentum * mean[c];
        running_var[c] = keep * running_var[c] + momentum * var[c] * correction;
    }
}

fn normalize<E: Element>(x: &Tensor<E>, mean: &[E], inv_std: &[E], gamma: &[E], beta: &[E]) -> Tensor<E> {
    let s = x.shape();
    let mut y = Tensor::zeros(s);
    let hw = s.h * s.w;
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            let src = x.plane(n, c);
            let base = (n * s.c + c) * hw;
            let dst = &mut y.data_mut()[base..base + hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * scale + shift;
            }
        }
    }
    y
}

/// Backward rule. Train mode differentiates through the batch statistics;
/// infer mode sees only the per-channel affine map.
pub fn batch_norm_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    saved: &BnSaved<E>,
    gout: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let s = x.shape();
    let hw = s.h * s.w;
    let count = E::from_f64((s.n * hw) as f64);
    let mut dx = Tensor::zeros(s);
    let vec_shape = Shape::new(1, s.c, 1, 1);
    let mut dgamma = Tensor::zeros(vec_shape);
    let mut dbeta = Tensor::zeros(vec_shape);

    for c in 0..s.c {
        let mean = saved.mean[c];
        let istd = saved.inv_std[c];
        // Reductions over the channel: sum g and sum g * x_hat.
        let mut sum_g = E::zero();
        let mut sum_gx = E::zero();
        for n in 0..s.n {
            let xs = x.plane(n, c);
            let gs = gout.plane(n, c);
            for (&xv, &gv) in xs.iter().zip(gs) {
                sum_g += gv;
                sum_gx += gv * (xv - mean) * istd;
            }
        }
        dgamma.data_mut()[c] = sum_gx;
        dbeta.data_mut()[c] = sum_g;

        let gscale = gamma.data()[c] * istd;
        match saved.mode {
            BnMode::Infer => {
                for n in 0..s.n {
                    let gs = gout.plane(n, c);
                    let base = (n * s.c + c) * hw;
                    let dst = &mut dx.data_mut()[base..base + hw];
                    for (d, &gv) in dst.iter_mut().zip(gs) {
                        *d = gv * gscale;
                    }
                }
            }
            BnMode::Train => {
                let mg = sum_g / count;
                let mgx = sum_gx / count;
                for n in 0..s.n {
                    let xs = x.plane(n, c);
                    let gs = gout.plane(n, c);
                    let base = (n * s.c + c) * hw;
                    let dst = &mut dx.data_mut()[base..base + hw];
                    for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                        let xhat = (xv - mean) * istd;
                        *d = gscale * (gv - mg - xhat * mgx);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infer_with_identity_statistics_is_near_identity() {
        let mut s = BatchNormState::<f64>::identity(3);
        s.mode = BnMode::Infer;
        let x = Tensor::<f64>::ramp(Shape::new(1, 3, 2, 2));
        let y = batch_norm(&x, &mut s).unwrap();
        let factor = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn train_constant_channel_outputs_beta() {
        let mut s = BatchNormState::<f64>::identity(2);
        s.beta = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.25, -1.5]);
        let mut x = Tensor::<f64>::zeros(Shape::new(2, 2, 3, 3));
        for v in x.data_mut().iter_mut() {
            *v = 7.0;
        }
        let y = batch_norm(&x, &mut s).unwrap();
        for n in 0..2 {
            for (c, expect) in [(0usize, 0.25f64), (1, -1.5)] {
                for &v in y.plane(n, c) {
                    assert!((v - expect).abs() < 1e-12, "zero-variance channel must be all beta");
                }
            }
        }
    }

    #[test]
    fn train_statistics_match_recomputed_moments() {
        // Recompute moments oracle: per-channel mean of output must equal
        // beta and std gamma/sqrt(1+eps) when the input has exactly unit
        // batch variance per channel.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape::new(2, 4, 3, 3);
        let mut x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let (m0, v0) = batch_moments(&x);
        for c in 0..4 {
            for n in 0..2 {
                let hw = shape.h * shape.w;
                let base = (n * shape.c + c) * hw;
                for i in 0..hw {
                    let v = x.data()[base + i];
                    x.data_mut()[base + i] = (v - m0[c]) / v0[c].sqrt();
                }
            }
        }
        let mut s = BatchNormState::<f64>::identity(4);
        s.gamma = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 0.5, 3.0]);
        s.beta = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![0.0, 1.0, -2.0, 0.25]);
        let y = batch_norm(&x, &mut s).unwrap();

        let (my, vy) = batch_moments(&y);
        let eps = 1e-5f64;
        for c in 0..4 {
            assert!((my[c] - s.beta.data()[c]).abs() < 1e-10);
            let expect_std = s.gamma.data()[c] * (1.0 + eps).powf(-0.5);
            assert!((vy[c].sqrt() - expect_std).abs() < 1e-9);
        }
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut s = BatchNormState::<f64>::identity(1);
        s.momentum = 0.1;
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]);
        batch_norm(&x, &mut s).unwrap();
        // batch mean 4, biased var 5, unbiased 20/3.
        assert!((s.running_mean[0] - 0.4).abs() < 1e-12);
        assert!((s.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut s = BatchNormState::<f32>::identity(4);
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        assert!(batch_norm(&x, &mut s).is_err());
    }
}
