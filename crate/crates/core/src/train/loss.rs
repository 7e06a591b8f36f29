//! Softmax cross-entropy over pixel labels.

use crate::error::{Axis, OpError};
use crate::tensor::{Element, Labels, Tensor};

fn check_shapes<E: Element>(logits: &Tensor<E>, labels: &Labels) -> Result<(), OpError> {
    let s = logits.shape();
    if labels.n != s.n {
        return Err(OpError::AxisMismatch { op: "cross_entropy", axis: Axis::Batch, expected: s.n, actual: labels.n });
    }
    if labels.h != s.h {
        return Err(OpError::AxisMismatch { op: "cross_entropy", axis: Axis::Height, expected: s.h, actual: labels.h });
    }
    if labels.w != s.w {
        return Err(OpError::AxisMismatch { op: "cross_entropy", axis: Axis::Width, expected: s.w, actual: labels.w });
    }
    Ok(())
}

/// Numerically stabilized softmax + negative log-likelihood, averaged over
/// pixels whose label differs from `ignore`. Returns (loss, per-pixel
/// softmax, counted pixels).
pub(crate) fn softmax_nll<E: Element>(
    logits: &Tensor<E>,
    labels: &Labels,
    ignore: Option<u32>,
) -> Result<(E, Tensor<E>, usize), OpError> {
    check_shapes(logits, labels)?;
    let s = logits.shape();
    let classes = s.c;
    let mut softmax = Tensor::zeros(s);
    let mut loss = E::zero();
    let mut counted = 0usize;

    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let label = labels.at(n, y, x);
                let ignored = ignore == Some(label);
                if !ignored && label as usize >= classes {
                    return Err(OpError::Data(format!(
                        "label {label} at pixel (n={n}, y={y}, x={x}) out of range for {classes} classes"
                    )));
                }
                // Max-subtracted softmax, stored even for ignored pixels so
                // the backward rule can zero them explicitly.
                let mut max = logits.at(n, 0, y, x);
                for c in 1..classes {
                    let v = logits.at(n, c, y, x);
                    if v > max {
                        max = v;
                    }
                }
                let mut denom = E::zero();
                for c in 0..classes {
                    let e = (logits.at(n, c, y, x) - max).exp();
                    *softmax.at_mut(n, c, y, x) = e;
                    denom += e;
                }
                for c in 0..classes {
                    let v = softmax.at(n, c, y, x) / denom;
                    *softmax.at_mut(n, c, y, x) = v;
                }
                if !ignored {
                    let p = softmax.at(n, label as usize, y, x);
                    loss -= p.ln();
                    counted += 1;
                }
            }
        }
    }
    if counted == 0 {
        return Err(OpError::Data("cross_entropy: no pixels left after ignore filtering".into()));
    }
    Ok((loss / E::from_f64(counted as f64), softmax, counted))
}

/// Gradient of the mean NLL w.r.t. the logits: (softmax − one-hot)/count,
/// scaled by the incoming scalar gradient; ignored pixels get zero.
pub(crate) fn softmax_nll_backward<E: Element>(
    softmax: &Tensor<E>,
    labels: &Labels,
    ignore: Option<u32>,
    counted: usize,
    gscale: E,
) -> Tensor<E> {
    let s = softmax.shape();
    let mut dl = Tensor::zeros(s);
    let scale = gscale / E::from_f64(counted as f64);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let label = labels.at(n, y, x);
                if ignore == Some(label) {
                    continue;
                }
                for c in 0..s.c {
                    let p = softmax.at(n, c, y, x);
                    let delta = if c as u32 == label { E::one() } else { E::zero() };
                    *dl.at_mut(n, c, y, x) = (p - delta) * scale;
                }
            }
        }
    }
    dl
}

/// Loss value only. The gradient hook is `Tape::cross_entropy`.
pub fn cross_entropy_loss<E: Element>(
    logits: &Tensor<E>,
    labels: &Labels,
    ignore: Option<u32>,
) -> Result<E, OpError> {
    softmax_nll(logits, labels, ignore).map(|(loss, _, _)| loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::<f64>::full(Shape::new(1, 5, 2, 3), 0.37);
        let labels = Labels::filled(1, 2, 3, 4);
        let loss = cross_entropy_loss(&logits, &labels, None).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_with_growing_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 4.0, 16.0, 64.0] {
            let mut logits = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
            for y in 0..2 {
                for x in 0..2 {
                    *logits.at_mut(0, 1, y, x) = margin;
                }
            }
            let labels = Labels::filled(1, 2, 2, 1);
            let loss = cross_entropy_loss(&logits, &labels, None).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn matches_per_pixel_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let logits = Tensor::<f64>::randn(Shape::new(1, 3, 2, 2), 2.0, &mut rng);
        let labels = Labels::from_vec(1, 2, 2, vec![0, 2, 1, 0]);
        let loss = cross_entropy_loss(&logits, &labels, None).unwrap();

        // Direct per-pixel softmax / NLL oracle.
        let mut expect = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                let v: Vec<f64> = (0..3).map(|c| logits.at(0, c, y, x)).collect();
                let denom: f64 = v.iter().map(|a| a.exp()).sum();
                let p = v[labels.at(0, y, x) as usize].exp() / denom;
                expect -= p.ln();
            }
        }
        expect /= 4.0;
        assert!((loss - expect).abs() < 1e-7, "{loss} vs {expect}");
    }

    #[test]
    fn ignored_pixels_are_excluded() {
        let mut logits = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 2));
        *logits.at_mut(0, 0, 0, 0) = 3.0;
        let labels = Labels::from_vec(1, 1, 2, vec![0, 255]);
        let loss = cross_entropy_loss(&logits, &labels, Some(255)).unwrap();
        // Only the first pixel counts.
        let expect = -(3.0f64.exp() / (3.0f64.exp() + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12);
        // All ignored -> undefined.
        let all = Labels::filled(1, 1, 2, 255);
        assert!(cross_entropy_loss(&logits, &all, Some(255)).is_err());
    }

    #[test]
    fn out_of_range_label_names_pixel() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let labels = Labels::from_vec(1, 2, 2, vec![0, 1, 7, 0]);
        let err = cross_entropy_loss(&logits, &labels, None).unwrap_err();
        match err {
            OpError::Data(msg) => {
                assert!(msg.contains("y=1") && msg.contains("x=0"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
