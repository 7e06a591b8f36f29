//! Elementwise, channel-routing and pooling primitives.

use crate::error::OpError;
use crate::tensor::{Element, Shape, Tensor};

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

pub fn relu_backward<E: Element>(x: &Tensor<E>, gout: &Tensor<E>) -> Tensor<E> {
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&xv, &gv)| if xv > E::zero() { gv } else { E::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, OpError> {
    if a.shape() != b.shape() {
        return Err(OpError::ShapeIncompatible { op: "add", lhs: a.shape(), rhs: b.shape() });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_vec(a.shape(), data))
}

/// How the right operand of `mul_broadcast` expands against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastKind {
    /// Same shape: plain elementwise product.
    Elementwise,
    /// (n, c, 1, 1) against (n, c, h, w): per-channel gate.
    PerChannel,
    /// (n, 1, h, w) against (n, c, h, w): per-pixel gate.
    PerPixel,
}

pub fn broadcast_kind(a: Shape, b: Shape) -> Result<BroadcastKind, OpError> {
    if a == b {
        Ok(BroadcastKind::Elementwise)
    } else if b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1 {
        Ok(BroadcastKind::PerChannel)
    } else if b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w {
        Ok(BroadcastKind::PerPixel)
    } else {
        Err(OpError::ShapeIncompatible { op: "mul_broadcast", lhs: a, rhs: b })
    }
}

/// Elementwise product where `b` may have singleton channel or spatial axes.
pub fn mul_broadcast<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, OpError> {
    let s = a.shape();
    let mut out = Tensor::zeros(s);
    match broadcast_kind(s, b.shape())? {
        BroadcastKind::Elementwise => {
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = x * y;
            }
        }
        BroadcastKind::PerChannel => {
            let hw = s.h * s.w;
            for n in 0..s.n {
                for c in 0..s.c {
                    let gate = b.at(n, c, 0, 0);
                    let base = (n * s.c + c) * hw;
                    let src = a.plane(n, c);
                    let dst = &mut out.data_mut()[base..base + hw];
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d = x * gate;
                    }
                }
            }
        }
        BroadcastKind::PerPixel => {
            let hw = s.h * s.w;
            for n in 0..s.n {
                let gate = b.plane(n, 0);
                for c in 0..s.c {
                    let base = (n * s.c + c) * hw;
                    let src = a.plane(n, c);
                    let dst = &mut out.data_mut()[base..base + hw];
                    for ((d, &x), &g) in dst.iter_mut().zip(src).zip(gate) {
                        *d = x * g;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `mul_broadcast` for both operands: da = g ⊙ b (broadcast),
/// db = g ⊙ a reduced over the broadcast axes.
pub fn mul_broadcast_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    gout: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let da = mul_broadcast(gout, b).expect("shapes already validated in forward");
    let s = a.shape();
    let mut db = Tensor::zeros(b.shape());
    match broadcast_kind(s, b.shape()).expect("shapes already validated in forward") {
        BroadcastKind::Elementwise => {
            for ((d, &g), &x) in db.data_mut().iter_mut().zip(gout.data()).zip(a.data()) {
                *d = g * x;
            }
        }
        BroadcastKind::PerChannel => {
            for n in 0..s.n {
                for c in 0..s.c {
                    let mut acc = E::zero();
                    for (&g, &x) in gout.plane(n, c).iter().zip(a.plane(n, c)) {
                        acc += g * x;
                    }
                    *db.at_mut(n, c, 0, 0) = acc;
                }
            }
        }
        BroadcastKind::PerPixel => {
            let hw = s.h * s.w;
            for n in 0..s.n {
                for c in 0..s.c {
                    let g = gout.plane(n, c);
                    let x = a.plane(n, c);
                    let base = n * hw;
                    let dst = &mut db.data_mut()[base..base + hw];
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
                        *d += gv * xv;
                    }
                }
            }
        }
    }
    (da, db)
}

pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>, OpError> {
    let first = parts.first().ok_or_else(|| OpError::Config("concat_channels: empty input list".into()))?;
    let fs = first.shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.n != fs.n || s.h != fs.h || s.w != fs.w {
            return Err(OpError::ShapeIncompatible { op: "concat_channels", lhs: fs, rhs: s });
        }
        channels += s.c;
    }
    let out_shape = Shape::new(fs.n, channels, fs.h, fs.w);
    let hw = fs.h * fs.w;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..fs.n {
        let mut c_off = 0;
        for p in parts {
            for c in 0..p.shape().c {
                let base = (n * channels + c_off + c) * hw;
                out.data_mut()[base..base + hw].copy_from_slice(p.plane(n, c));
            }
            c_off += p.shape().c;
        }
    }
    Ok(out)
}

/// Split along channels into `parts` equal pieces.
pub fn split_channels<E: Element>(x: &Tensor<E>, parts: usize) -> Result<Vec<Tensor<E>>, OpError> {
    let s = x.shape();
    if parts == 0 || s.c % parts != 0 {
        return Err(OpError::Config(format!(
            "split_channels: channel count {} not divisible into {} parts",
            s.c, parts
        )));
    }
    let sub = s.c / parts;
    let hw = s.h * s.w;
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        let mut t = Tensor::zeros(Shape::new(s.n, sub, s.h, s.w));
        for n in 0..s.n {
            for c in 0..sub {
                let base = (n * sub + c) * hw;
                t.data_mut()[base..base + hw].copy_from_slice(x.plane(n, p * sub + c));
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// Copy of channels [start, start + count) as a standalone tensor.
pub fn channel_slice<E: Element>(x: &Tensor<E>, start: usize, count: usize) -> Tensor<E> {
    let s = x.shape();
    debug_assert!(start + count <= s.c);
    let hw = s.h * s.w;
    let mut t = Tensor::zeros(Shape::new(s.n, count, s.h, s.w));
    for n in 0..s.n {
        for c in 0..count {
            let base = (n * count + c) * hw;
            t.data_mut()[base..base + hw].copy_from_slice(x.plane(n, start + c));
        }
    }
    t
}

/// Split along channels into pieces of the given channel counts. Used by the
/// concat backward rule; counts must sum to the input channel count.
pub fn split_by_channels<E: Element>(x: &Tensor<E>, counts: &[usize]) -> Vec<Tensor<E>> {
    let s = x.shape();
    debug_assert_eq!(counts.iter().sum::<usize>(), s.c);
    let hw = s.h * s.w;
    let mut out = Vec::with_capacity(counts.len());
    let mut c_off = 0;
    for &sub in counts {
        let mut t = Tensor::zeros(Shape::new(s.n, sub, s.h, s.w));
        for n in 0..s.n {
            for c in 0..sub {
                let base = (n * sub + c) * hw;
                t.data_mut()[base..base + hw].copy_from_slice(x.plane(n, c_off + c));
            }
        }
        c_off += sub;
        out.push(t);
    }
    out
}

/// Mean over the spatial axes: (n, c, h, w) -> (n, c, 1, 1).
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let count = E::from_f64((s.h * s.w) as f64);
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = E::zero();
            for &v in x.plane(n, c) {
                acc += v;
            }
            *out.at_mut(n, c, 0, 0) = acc / count;
        }
    }
    out
}

pub fn global_avg_pool_backward<E: Element>(input_shape: Shape, gout: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(input_shape);
    let hw = input_shape.h * input_shape.w;
    let inv = E::one() / E::from_f64(hw as f64);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = gout.at(n, c, 0, 0) * inv;
            let base = (n * input_shape.c + c) * hw;
            for d in &mut dx.data_mut()[base..base + hw] {
                *d = g;
            }
        }
    }
    dx
}

/// Mean over the channel axis: (n, c, h, w) -> (n, 1, h, w).
pub fn channel_mean<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let hw = s.h * s.w;
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    let inv = E::one() / E::from_f64(s.c as f64);
    for n in 0..s.n {
        let base = n * hw;
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = &mut out.data_mut()[base..base + hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        for d in &mut out.data_mut()[base..base + hw] {
            *d *= inv;
        }
    }
    out
}

pub fn channel_mean_backward<E: Element>(input_shape: Shape, gout: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(input_shape);
    let hw = input_shape.h * input_shape.w;
    let inv = E::one() / E::from_f64(input_shape.c as f64);
    for n in 0..input_shape.n {
        let g = gout.plane(n, 0);
        for c in 0..input_shape.c {
            let base = (n * input_shape.c + c) * hw;
            let dst = &mut dx.data_mut()[base..base + hw];
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d = gv * inv;
            }
        }
    }
    dx
}

/// Sum of all elements, as a (1,1,1,1) tensor.
pub fn sum_all<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::zero();
    for &v in x.data() {
        acc += v;
    }
    Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![acc])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_concat_roundtrip_is_bit_exact() {
        let x = Tensor::<f32>::ramp(Shape::new(1, 64, 8, 8));
        let parts = split_channels(&x, 4).unwrap();
        assert_eq!(parts.len(), 4);
        for p in &parts {
            assert_eq!(p.shape(), Shape::new(1, 16, 8, 8));
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        let back = concat_channels(&refs).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn split_rejects_indivisible() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 6, 2, 2));
        assert!(matches!(split_channels(&x, 4), Err(OpError::Config(_))));
    }

    #[test]
    fn unit_gate_is_identity() {
        let x = Tensor::<f32>::ramp(Shape::new(1, 4, 2, 2));
        let gate = Tensor::<f32>::ones(Shape::new(1, 4, 1, 1));
        let y = mul_broadcast(&x, &gate).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 1));
        assert!(mul_broadcast(&x, &b).is_err());
    }

    #[test]
    fn add_matches_element_loop_oracle() {
        let a = Tensor::<f64>::ramp(Shape::new(2, 3, 4, 5));
        let b = a.map(|v| 3.0 * v + 1.0);
        let y = add(&a, &b).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..5 {
                        assert_eq!(y.at(n, c, i, j), a.at(n, c, i, j) + b.at(n, c, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn pools_on_symmetric_input() {
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        for i in 0..4 {
            x.data_mut()[i] = 1.0;
            x.data_mut()[4 + i] = 3.0;
        }
        let g = global_avg_pool(&x);
        assert_eq!(g.data(), &[1.0, 3.0]);
        let m = channel_mean(&x);
        assert_eq!(m.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn pools_match_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
        let g = global_avg_pool(&x);
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for y in 0..4 {
                    for xx in 0..5 {
                        acc += x.at(n, c, y, xx);
                    }
                }
                assert!((g.at(n, c, 0, 0) - acc / 20.0).abs() < 1e-12);
            }
        }
        let m = channel_mean(&x);
        for n in 0..2 {
            for y in 0..4 {
                for xx in 0..5 {
                    let acc = (0..3).map(|c| x.at(n, c, y, xx)).sum::<f64>() / 3.0;
                    assert!((m.at(n, 0, y, xx) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 4), vec![-2.0, -0.0, 0.5, 3.0]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 3.0]);
    }
}
