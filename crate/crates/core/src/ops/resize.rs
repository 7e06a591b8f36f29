//! Bilinear x2 upsampling with half-pixel source alignment.

use crate::tensor::{Element, Shape, Tensor};

/// Interpolation taps for one destination index: source indices (clamped to
/// the border) and the fractional weight of the upper tap.
#[inline]
fn taps<E: Element>(dst: usize, src_len: usize) -> (usize, usize, E) {
    // source coordinate = (dst + 0.5)/2 - 0.5
    let src = (dst as f64 + 0.5) / 2.0 - 0.5;
    let floor = src.floor();
    let frac = src - floor;
    let lo = floor.max(0.0) as usize;
    let hi = (floor + 1.0).max(0.0) as usize;
    (lo.min(src_len - 1), hi.min(src_len - 1), E::from_f64(frac))
}

/// Doubles both spatial extents. Interpolation uses the lerp form
/// a + (b - a)·w, so constant inputs are preserved bit-exactly.
pub fn bilinear_upsample_x2<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let (oh, ow) = (s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));

    let xtaps: Vec<(usize, usize, E)> = (0..ow).map(|d| taps(d, s.w)).collect();
    let ytaps: Vec<(usize, usize, E)> = (0..oh).map(|d| taps(d, s.h)).collect();

    let hw_out = oh * ow;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let base = (n * s.c + c) * hw_out;
            let dst = &mut out.data_mut()[base..base + hw_out];
            for oy in 0..oh {
                let (y0, y1, wy) = ytaps[oy];
                let row0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let row1 = &src[y1 * s.w..(y1 + 1) * s.w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for ox in 0..ow {
                    let (x0, x1, wx) = xtaps[ox];
                    let top = row0[x0] + (row0[x1] - row0[x0]) * wx;
                    let bot = row1[x0] + (row1[x1] - row1[x0]) * wx;
                    drow[ox] = top + (bot - top) * wy;
                }
            }
        }
    }
    out
}

/// Adjoint of the upsample: scatter each output gradient into its (up to
/// four) source taps with the interpolation weights.
pub fn bilinear_upsample_x2_backward<E: Element>(input_shape: Shape, gout: &Tensor<E>) -> Tensor<E> {
    let s = input_shape;
    let gs = gout.shape();
    let mut dx = Tensor::zeros(s);
    let xtaps: Vec<(usize, usize, E)> = (0..gs.w).map(|d| taps(d, s.w)).collect();
    let ytaps: Vec<(usize, usize, E)> = (0..gs.h).map(|d| taps(d, s.h)).collect();
    let one = E::one();
    let hw_in = s.h * s.w;
    for n in 0..s.n {
        for c in 0..s.c {
            let g = gout.plane(n, c);
            let base = (n * s.c + c) * hw_in;
            let dst = &mut dx.data_mut()[base..base + hw_in];
            for oy in 0..gs.h {
                let (y0, y1, wy) = ytaps[oy];
                for ox in 0..gs.w {
                    let (x0, x1, wx) = xtaps[ox];
                    let gv = g[oy * gs.w + ox];
                    dst[y0 * s.w + x0] += gv * (one - wy) * (one - wx);
                    dst[y0 * s.w + x1] += gv * (one - wy) * wx;
                    dst[y1 * s.w + x0] += gv * wy * (one - wx);
                    dst[y1 * s.w + x1] += gv * wy * wx;
                }
            }
        }
    }
    dx
}
