//! 2D convolution: forward, input gradient, weight gradient.
//!
//! Three code paths share one contract: pointwise (1x1, stride 1, ungrouped),
//! depthwise (groups = channels), and the general grouped/dilated/strided
//! loop. Every output element is a reduction in a fixed order, so results are
//! bit-deterministic regardless of thread count.

use rayon::prelude::*;

use crate::error::{Axis, OpError};
use crate::tensor::{Element, Shape, Tensor};

/// Static description of a convolution layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (kh, kw)
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn standard(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            dilation: 1,
            padding,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, has_bias: bool) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (1, 1),
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
            has_bias,
        }
    }

    /// 3x3 depthwise with padding = dilation, so stride 1 preserves the
    /// spatial extent and stride 2 halves it (ceiling).
    pub fn depthwise3(channels: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: (3, 3),
            stride,
            dilation,
            padding: dilation,
            groups: channels,
            has_bias: false,
        }
    }

    pub fn validate(&self) -> Result<(), OpError> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(OpError::Config("conv2d: channel counts must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(OpError::Config("conv2d: kernel, stride and dilation must be positive".into()));
        }
        if self.groups == 0 || self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(OpError::Config(format!(
                "conv2d: groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Expected weight tensor shape: (out, in/groups, kh, kw).
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels / self.groups, self.kernel.0, self.kernel.1)
    }

    /// floor((extent + 2·padding − dilation·(k−1) − 1)/stride) + 1 per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), OpError> {
        let ext = |size: usize, k: usize| -> Result<usize, OpError> {
            let span = self.dilation * (k - 1) + 1;
            let padded = size + 2 * self.padding;
            if padded < span {
                return Err(OpError::Config(format!(
                    "conv2d: kernel span {span} exceeds padded input extent {padded}"
                )));
            }
            Ok((padded - span) / self.stride + 1)
        };
        Ok((ext(h, self.kernel.0)?, ext(w, self.kernel.1)?))
    }

    /// Multiply-accumulates per output pixel per output channel.
    pub fn macs_per_output(&self) -> u64 {
        (self.in_channels / self.groups) as u64 * (self.kernel.0 * self.kernel.1) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == 0 && self.groups == 1
    }
}

fn check_args<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<(), OpError> {
    spec.validate()?;
    x.shape().check_axis("conv2d input", Axis::Channel, spec.in_channels)?;
    let ws = spec.weight_shape();
    if weight.shape() != ws {
        return Err(OpError::ShapeIncompatible { op: "conv2d weight", lhs: weight.shape(), rhs: ws });
    }
    match (bias, spec.has_bias) {
        (Some(b), true) => {
            let expect = Shape::new(1, spec.out_channels, 1, 1);
            if b.shape() != expect {
                return Err(OpError::ShapeIncompatible { op: "conv2d bias", lhs: b.shape(), rhs: expect });
            }
        }
        (None, false) => {}
        (Some(_), false) => return Err(OpError::Config("conv2d: bias given but spec.has_bias is false".into())),
        (None, true) => return Err(OpError::Config("conv2d: spec.has_bias set but no bias given".into())),
    }
    Ok(())
}

// Parallelism threshold: planes smaller than this are not worth a task.
const PAR_MIN_ELEMS: usize = 1 << 14;

fn for_each_plane<E: Element, F: Fn(usize, &mut [E]) + Sync>(data: &mut [E], plane: usize, f: F) {
    if plane == 0 || data.is_empty() {
        return;
    }
    if data.len() >= PAR_MIN_ELEMS {
        data.par_chunks_mut(plane).enumerate().for_each(|(i, chunk)| f(i, chunk));
    } else {
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            f(i, chunk);
        }
    }
}

/// Forward convolution. Output value at each site is the kernel-support sum
/// (stride/dilation applied, zero padding) plus bias.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<Tensor<E>, OpError> {
    check_args(x, weight, bias, spec)?;
    let xs = x.shape();
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    let out_shape = Shape::new(xs.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(out_shape);

    let oc_total = spec.out_channels;
    let plane = oh * ow;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.map(|b| b.data());

    if spec.is_pointwise() {
        let in_c = spec.in_channels;
        let hw = xs.h * xs.w;
        for_each_plane(out.data_mut(), plane, |idx, o| {
            let n = idx / oc_total;
            let oc = idx % oc_total;
            if let Some(b) = bd {
                o.fill(b[oc]);
            }
            for ic in 0..in_c {
                let wv = wd[oc * in_c + ic];
                let xp = &xd[(n * in_c + ic) * hw..(n * in_c + ic + 1) * hw];
                for (ov, &xv) in o.iter_mut().zip(xp) {
                    *ov += wv * xv;
                }
            }
        });
        return Ok(out);
    }

    let (kh, kw) = spec.kernel;
    let (stride, dil, pad) = (spec.stride, spec.dilation, spec.padding);
    let (ih, iw) = (xs.h, xs.w);
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let in_c = spec.in_channels;

    for_each_plane(out.data_mut(), plane, |idx, o| {
        let n = idx / oc_total;
        let oc = idx % oc_total;
        let group = oc / ocg;
        let bias_v = bd.map_or(E::zero(), |b| b[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias_v;
                for i in 0..icg {
                    let ic = group * icg + i;
                    let xbase = (n * in_c + ic) * ih;
                    let wbase = ((oc * icg + i) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky * dil) as isize - pad as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let row = (xbase + iy as usize) * iw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            acc += wd[wbase + ky * kw + kx] * xd[row + ix as usize];
                        }
                    }
                }
                o[oy * ow + ox] = acc;
            }
        }
    });
    Ok(out)
}

/// Gradient of the convolution output w.r.t. its input (gather formulation:
/// each input element sums the weighted output gradients that used it).
pub fn conv2d_backward_input<E: Element>(
    weight: &Tensor<E>,
    gout: &Tensor<E>,
    spec: &ConvSpec,
    input_shape: Shape,
) -> Tensor<E> {
    let mut dx = Tensor::zeros(input_shape);
    let gs = gout.shape();
    let (oh, ow) = (gs.h, gs.w);
    let (ih, iw) = (input_shape.h, input_shape.w);
    let in_c = spec.in_channels;
    let oc_total = spec.out_channels;
    let gd = gout.data();
    let wd = weight.data();
    let plane = ih * iw;

    if spec.is_pointwise() {
        let hw = ih * iw;
        for_each_plane(dx.data_mut(), plane, |idx, d| {
            let n = idx / in_c;
            let ic = idx % in_c;
            for oc in 0..oc_total {
                let wv = wd[oc * in_c + ic];
                let gp = &gd[(n * oc_total + oc) * hw..(n * oc_total + oc + 1) * hw];
                for (dv, &gv) in d.iter_mut().zip(gp) {
                    *dv += wv * gv;
                }
            }
        });
        return dx;
    }

    let (kh, kw) = spec.kernel;
    let (stride, dil, pad) = (spec.stride, spec.dilation, spec.padding);
    let icg = in_c / spec.groups;
    let ocg = oc_total / spec.groups;

    for_each_plane(dx.data_mut(), plane, |idx, d| {
        let n = idx / in_c;
        let ic = idx % in_c;
        let group = ic / icg;
        let i = ic % icg;
        for iy in 0..ih {
            for ix in 0..iw {
                let mut acc = E::zero();
                for o in 0..ocg {
                    let oc = group * ocg + o;
                    let gbase = (n * oc_total + oc) * oh;
                    let wbase = (oc * icg + i) * kh;
                    for ky in 0..kh {
                        let num_y = iy as isize + pad as isize - (ky * dil) as isize;
                        if num_y < 0 || num_y % stride as isize != 0 {
                            continue;
                        }
                        let oy = (num_y / stride as isize) as usize;
                        if oy >= oh {
                            continue;
                        }
                        let grow = (gbase + oy) * ow;
                        let wrow = (wbase + ky) * kw;
                        for kx in 0..kw {
                            let num_x = ix as isize + pad as isize - (kx * dil) as isize;
                            if num_x < 0 || num_x % stride as isize != 0 {
                                continue;
                            }
                            let ox = (num_x / stride as isize) as usize;
                            if ox >= ow {
                                continue;
                            }
                            acc += wd[wrow + kx] * gd[grow + ox];
                        }
                    }
                }
                d[iy * iw + ix] = acc;
            }
        }
    });
    dx
}

/// Gradients w.r.t. weights and (when present) bias.
pub fn conv2d_backward_weights<E: Element>(
    x: &Tensor<E>,
    gout: &Tensor<E>,
    spec: &ConvSpec,
) -> (Tensor<E>, Option<Tensor<E>>) {
    let xs = x.shape();
    let gs = gout.shape();
    let (oh, ow) = (gs.h, gs.w);
    let (ih, iw) = (xs.h, xs.w);
    let (kh, kw) = spec.kernel;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let in_c = spec.in_channels;
    let oc_total = spec.out_channels;
    let (stride, dil, pad) = (spec.stride, spec.dilation, spec.padding);
    let xd = x.data();
    let gd = gout.data();

    let mut dw = Tensor::zeros(spec.weight_shape());
    let per_oc = icg * kh * kw;

    if spec.is_pointwise() {
        let hw = ih * iw;
        // dw[oc][ic] = sum over images of <gout[n][oc], x[n][ic]>.
        dw.data_mut().par_chunks_mut(per_oc).enumerate().for_each(|(oc, dwslice)| {
            for ic in 0..in_c {
                let mut acc = E::zero();
                for n in 0..gs.n {
                    let gp = &gd[(n * oc_total + oc) * hw..(n * oc_total + oc + 1) * hw];
                    let xp = &xd[(n * in_c + ic) * hw..(n * in_c + ic + 1) * hw];
                    for (&g, &x) in gp.iter().zip(xp) {
                        acc += g * x;
                    }
                }
                dwslice[ic] = acc;
            }
        });
        let db = if spec.has_bias { Some(bias_grad(gout)) } else { None };
        return (dw, db);
    }

    for_each_plane(dw.data_mut(), per_oc, |oc, dwslice| {
        let group = oc / ocg;
        for i in 0..icg {
            let ic = group * icg + i;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = E::zero();
                    for n in 0..gs.n {
                        let gbase = (n * oc_total + oc) * oh;
                        let xbase = (n * in_c + ic) * ih;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let grow = (gbase + oy) * ow;
                            let xrow = (xbase + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                acc += gd[grow + ox] * xd[xrow + ix as usize];
                            }
                        }
                    }
                    dwslice[(i * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });

    let db = if spec.has_bias { Some(bias_grad(gout)) } else { None };
    (dw, db)
}

fn bias_grad<E: Element>(gout: &Tensor<E>) -> Tensor<E> {
    let gs = gout.shape();
    let mut db = Tensor::zeros(Shape::new(1, gs.c, 1, 1));
    for oc in 0..gs.c {
        let mut acc = E::zero();
        for n in 0..gs.n {
            for &g in gout.plane(n, oc) {
                acc += g;
            }
        }
        db.data_mut()[oc] = acc;
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent direct-summation oracle: plain quadruple loop over the
    // kernel support with explicit zero padding.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, spec: &ConvSpec) -> Tensor<f64> {
        let xs = x.shape();
        let (oh, ow) = spec.output_hw(xs.h, xs.w).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, spec.out_channels, oh, ow));
        let icg = spec.in_channels / spec.groups;
        let ocg = spec.out_channels / spec.groups;
        for n in 0..xs.n {
            for oc in 0..spec.out_channels {
                let g = oc / ocg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[oc]);
                        for i in 0..icg {
                            for ky in 0..spec.kernel.0 {
                                for kx in 0..spec.kernel.1 {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += w.at(oc, i, ky, kx) * x.at(n, g * icg + i, iy as usize, ix as usize);
                                }
                            }
                        }
                        *out.at_mut(n, oc, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn table_stem_shape() {
        let spec = ConvSpec::standard(3, 16, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::randn(Shape::new(1, 3, 1024, 512), 1.0, &mut rng);
        let w = Tensor::<f32>::randn(spec.weight_shape(), 0.1, &mut rng);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 16, 512, 256));
    }

    #[test]
    fn pointwise_identity_permutation() {
        let c = 5;
        let spec = ConvSpec::pointwise(c, c, false);
        let mut w = Tensor::<f32>::zeros(spec.weight_shape());
        for o in 0..c {
            *w.at_mut(o, o, 0, 0) = 1.0;
        }
        let x = Tensor::<f32>::ramp(Shape::new(2, c, 3, 4));
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilated_matches_direct_summation_oracle() {
        // 4x4 ramp, 3x3 kernel of ones, dilation 2, pad 2, stride 1.
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 3),
            stride: 1,
            dilation: 2,
            padding: 2,
            groups: 1,
            has_bias: false,
        };
        let x = Tensor::<f64>::ramp(Shape::new(1, 1, 4, 4));
        let w = Tensor::<f64>::ones(spec.weight_shape());
        let y = conv2d(&x, &w, None, &spec).unwrap();
        let expect = conv_oracle(&x, &w, None, &spec);
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert_close(&y, &expect, 1e-12);
    }

    #[test]
    fn grouped_and_strided_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            ConvSpec { in_channels: 4, out_channels: 6, kernel: (3, 3), stride: 2, dilation: 1, padding: 1, groups: 2, has_bias: true },
            ConvSpec { in_channels: 6, out_channels: 6, kernel: (3, 3), stride: 1, dilation: 4, padding: 4, groups: 6, has_bias: false },
            ConvSpec { in_channels: 3, out_channels: 5, kernel: (1, 1), stride: 1, dilation: 1, padding: 0, groups: 1, has_bias: true },
            ConvSpec { in_channels: 2, out_channels: 4, kernel: (5, 3), stride: 3, dilation: 2, padding: 4, groups: 1, has_bias: false },
        ] {
            let x = Tensor::<f64>::randn(Shape::new(2, spec.in_channels, 9, 8), 1.0, &mut rng);
            let w = Tensor::<f64>::randn(spec.weight_shape(), 0.5, &mut rng);
            let b = if spec.has_bias {
                Some(Tensor::<f64>::randn(Shape::new(1, spec.out_channels, 1, 1), 0.5, &mut rng))
            } else {
                None
            };
            let y = conv2d(&x, &w, b.as_ref(), &spec).unwrap();
            let expect = conv_oracle(&x, &w, b.as_ref().map(|b| b.data()), &spec);
            assert_close(&y, &expect, 1e-12);
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 5;
        let spec = ConvSpec::depthwise3(c, 1, 2);
        let x = Tensor::<f64>::randn(Shape::new(1, c, 7, 6), 1.0, &mut rng);
        let w = Tensor::<f64>::randn(spec.weight_shape(), 0.7, &mut rng);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        // One independent single-channel convolution per channel.
        let single = ConvSpec { in_channels: 1, out_channels: 1, groups: 1, ..spec.clone() };
        for ch in 0..c {
            let xc = Tensor::from_vec(Shape::new(1, 1, 7, 6), x.plane(0, ch).to_vec());
            let wc = Tensor::from_vec(single.weight_shape(), w.plane(ch, 0).to_vec());
            let yc = conv_oracle(&xc, &wc, None, &single);
            for (a, b) in y.plane(0, ch).iter().zip(yc.data()) {
                let denom = a.abs().max(b.abs()).max(1.0);
                assert!((a - b).abs() / denom < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let spec = ConvSpec::pointwise(4, 8, false);
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::zeros(spec.weight_shape());
        let err = conv2d(&x, &w, None, &spec).unwrap_err();
        assert!(matches!(err, OpError::AxisMismatch { axis: Axis::Channel, expected: 4, actual: 3, .. }));
    }

    #[test]
    fn rejects_empty_output() {
        let spec = ConvSpec::standard(1, 1, 7, 1, 0);
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let w = Tensor::<f32>::zeros(spec.weight_shape());
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(OpError::Config(_))));
    }

    #[test]
    fn backward_input_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for spec in [
            ConvSpec { in_channels: 4, out_channels: 6, kernel: (3, 3), stride: 2, dilation: 1, padding: 1, groups: 2, has_bias: false },
            ConvSpec { in_channels: 3, out_channels: 3, kernel: (3, 3), stride: 1, dilation: 2, padding: 2, groups: 3, has_bias: false },
            ConvSpec::pointwise(3, 5, false),
        ] {
            let in_shape = Shape::new(2, spec.in_channels, 6, 7);
            let (oh, ow) = spec.output_hw(6, 7).unwrap();
            let w = Tensor::<f64>::randn(spec.weight_shape(), 0.5, &mut rng);
            let g = Tensor::<f64>::randn(Shape::new(2, spec.out_channels, oh, ow), 1.0, &mut rng);
            let dx = conv2d_backward_input(&w, &g, &spec, in_shape);

            // Scatter oracle: forward loop structure, accumulating g*w into dx.
            let mut expect = Tensor::<f64>::zeros(in_shape);
            let icg = spec.in_channels / spec.groups;
            let ocg = spec.out_channels / spec.groups;
            for n in 0..2 {
                for oc in 0..spec.out_channels {
                    let grp = oc / ocg;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for i in 0..icg {
                                for ky in 0..spec.kernel.0 {
                                    for kx in 0..spec.kernel.1 {
                                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                        if iy < 0 || ix < 0 || iy >= 6 || ix >= 7 {
                                            continue;
                                        }
                                        *expect.at_mut(n, grp * icg + i, iy as usize, ix as usize) +=
                                            g.at(n, oc, oy, ox) * w.at(oc, i, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            assert_close(&dx, &expect, 1e-10);
        }
    }
}
