//! Geometric data augmentation for aligned image/label pairs.
//!
//! One affine transform (flip, rotate, scale about the image center) drives
//! both maps: the image resamples bilinearly, labels use nearest-neighbor
//! (labels are categorical). Samples falling outside the source are filled
//! with the channel mean in the image and the ignore index in the labels; the
//! output keeps the input extent, so scaling below 1 shows filled borders and
//! scaling above 1 is a center zoom.

use rand::Rng;

use crate::tensor::{Labels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub flip_prob: f64,
    /// Degrees, inclusive range.
    pub rotation_deg: (f64, f64),
    pub scale_range: (f64, f64),
    /// Per-channel means subtracted after the geometric transform (and used
    /// as the exterior fill, so filled pixels normalize to zero).
    pub channel_means: Vec<f32>,
    pub ignore_index: u32,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            flip_prob: 0.5,
            rotation_deg: (-10.0, 10.0),
            scale_range: (0.5, 1.75),
            channel_means: vec![0.5; 3],
            ignore_index: 255,
        }
    }
}

impl AugmentationPolicy {
    /// Normalization only: no flip, rotation or scaling.
    pub fn geometry_free() -> Self {
        AugmentationPolicy {
            flip_prob: 0.0,
            rotation_deg: (0.0, 0.0),
            scale_range: (1.0, 1.0),
            ..AugmentationPolicy::default()
        }
    }
}

/// One sampled transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle_deg: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { flip: false, angle_deg: 0.0, scale: 1.0 };
}

/// Draw (flip, angle, scale) in that fixed order.
pub fn sample_draw<R: Rng>(policy: &AugmentationPolicy, rng: &mut R) -> AugmentDraw {
    let flip = rng.gen::<f64>() < policy.flip_prob;
    let angle_deg = if policy.rotation_deg.0 == policy.rotation_deg.1 {
        policy.rotation_deg.0
    } else {
        rng.gen_range(policy.rotation_deg.0..=policy.rotation_deg.1)
    };
    let scale = if policy.scale_range.0 == policy.scale_range.1 {
        policy.scale_range.0
    } else {
        rng.gen_range(policy.scale_range.0..=policy.scale_range.1)
    };
    AugmentDraw { flip, angle_deg, scale }
}

pub fn augment<R: Rng>(
    image: &Tensor<f32>,
    labels: &Labels,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> (Tensor<f32>, Labels) {
    let draw = sample_draw(policy, rng);
    augment_with(image, labels, policy, draw)
}

/// Apply a fixed transform (deterministic core of `augment`).
pub fn augment_with(
    image: &Tensor<f32>,
    labels: &Labels,
    policy: &AugmentationPolicy,
    draw: AugmentDraw,
) -> (Tensor<f32>, Labels) {
    let s = image.shape();
    debug_assert_eq!(s.n, 1, "augmentation operates on single samples");
    debug_assert_eq!((labels.n, labels.h, labels.w), (1, s.h, s.w));
    let (h, w) = (s.h, s.w);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let theta = draw.angle_deg.to_radians();
    let (sin, cos) = ((-theta).sin(), (-theta).cos());

    let mut out = Tensor::zeros(s);
    let mut out_labels = Labels::filled(1, h, w, policy.ignore_index);

    for oy in 0..h {
        for ox in 0..w {
            // Inverse map: un-scale, un-rotate, un-flip about the center.
            let mut dy = (oy as f64 - cy) / draw.scale;
            let mut dx = (ox as f64 - cx) / draw.scale;
            let (ry, rx) = (sin * dx + cos * dy, cos * dx - sin * dy);
            dy = ry;
            dx = if draw.flip { -rx } else { rx };
            let sy = cy + dy;
            let sx = cx + dx;

            let inside = sy >= 0.0 && sy <= (h - 1) as f64 && sx >= 0.0 && sx <= (w - 1) as f64;
            if inside {
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = (sy - y0 as f64) as f32;
                let fx = (sx - x0 as f64) as f32;
                for c in 0..s.c {
                    let v00 = image.at(0, c, y0, x0);
                    let v01 = image.at(0, c, y0, x1);
                    let v10 = image.at(0, c, y1, x0);
                    let v11 = image.at(0, c, y1, x1);
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    *out.at_mut(0, c, oy, ox) = top + (bot - top) * fy;
                }
                let ny = sy.round() as usize;
                let nx = sx.round() as usize;
                *out_labels.at_mut(0, oy, ox) = labels.at(0, ny.min(h - 1), nx.min(w - 1));
            } else {
                for c in 0..s.c {
                    *out.at_mut(0, c, oy, ox) = policy.channel_means[c];
                }
            }
        }
    }

    // Zero-mean normalization.
    for c in 0..s.c {
        let mean = policy.channel_means[c];
        let hw = h * w;
        let base = c * hw;
        for v in &mut out.data_mut()[base..base + hw] {
            *v -= mean;
        }
    }
    (out, out_labels)
}

/// Normalization without geometry, for evaluation inputs.
pub fn normalize_only(image: &Tensor<f32>, policy: &AugmentationPolicy) -> Tensor<f32> {
    let s = image.shape();
    let mut out = image.clone();
    let hw = s.h * s.w;
    for n in 0..s.n {
        for c in 0..s.c {
            let mean = policy.channel_means[c];
            let base = (n * s.c + c) * hw;
            for v in &mut out.data_mut()[base..base + hw] {
                *v -= mean;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn sample(h: usize, w: usize) -> (Tensor<f32>, Labels) {
        let mut img = Tensor::zeros(Shape::new(1, 3, h, w));
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 97) as f32 / 97.0;
        }
        let mut lab = Labels::filled(1, h, w, 1);
        *lab.at_mut(0, h / 3, w / 4) = 2;
        (img, lab)
    }

    fn zero_mean_policy() -> AugmentationPolicy {
        AugmentationPolicy { channel_means: vec![0.0; 3], ..AugmentationPolicy::default() }
    }

    #[test]
    fn identity_transform_changes_nothing_but_normalization() {
        let (img, lab) = sample(12, 10);
        let policy = AugmentationPolicy::default();
        let (out, out_lab) = augment_with(&img, &lab, &policy, AugmentDraw::IDENTITY);
        assert_eq!(out_lab.data(), lab.data());
        for (o, i) in out.data().iter().zip(img.data()) {
            assert_eq!(*o, i - 0.5);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let (img, lab) = sample(9, 14);
        let policy = zero_mean_policy();
        let flip = AugmentDraw { flip: true, ..AugmentDraw::IDENTITY };
        let (once, lab1) = augment_with(&img, &lab, &policy, flip);
        let (twice, lab2) = augment_with(&once, &lab1, &policy, flip);
        assert_eq!(twice.data(), img.data());
        assert_eq!(lab2.data(), lab.data());
    }

    #[test]
    fn output_extent_always_matches_input() {
        let (img, lab) = sample(16, 16);
        let policy = AugmentationPolicy::default();
        for draw in [
            AugmentDraw { flip: true, angle_deg: 7.3, scale: 0.5 },
            AugmentDraw { flip: false, angle_deg: -9.9, scale: 1.75 },
        ] {
            let (out, out_lab) = augment_with(&img, &lab, &policy, draw);
            assert_eq!(out.shape(), img.shape());
            assert_eq!((out_lab.h, out_lab.w), (16, 16));
        }
    }

    #[test]
    fn marked_pixel_lands_at_analytic_coordinates() {
        // Coordinate-map oracle for (flip, scale 1.5): recompute the inverse
        // map with scalar arithmetic and compare label placement.
        let h = 17;
        let w = 17;
        let mut lab = Labels::filled(1, h, w, 0);
        let marked = (11usize, 4usize);
        *lab.at_mut(0, marked.0, marked.1) = 2;
        let img = Tensor::zeros(Shape::new(1, 3, h, w));
        let policy = zero_mean_policy();
        let draw = AugmentDraw { flip: true, angle_deg: 0.0, scale: 1.5 };
        let (_, out_lab) = augment_with(&img, &lab, &policy, draw);

        let c = (h as f64 - 1.0) / 2.0;
        let mut expected_hits = 0;
        for oy in 0..h {
            for ox in 0..w {
                let sy = c + (oy as f64 - c) / 1.5;
                let sx = c - (ox as f64 - c) / 1.5;
                let expect =
                    if sy.round() as usize == marked.0 && sx.round() as usize == marked.1 { 2 } else { 0 };
                assert_eq!(out_lab.at(0, oy, ox), expect, "at ({oy},{ox})");
                expected_hits += (expect == 2) as usize;
            }
        }
        assert!(expected_hits > 0, "the marked pixel must land somewhere");
    }

    #[test]
    fn shrink_fills_labels_with_ignore_and_image_with_mean() {
        let (img, lab) = sample(16, 16);
        let policy = AugmentationPolicy::default();
        let draw = AugmentDraw { flip: false, angle_deg: 0.0, scale: 0.5 };
        let (out, out_lab) = augment_with(&img, &lab, &policy, draw);
        assert_eq!(out_lab.at(0, 0, 0), 255);
        // Filled image pixels normalize to exactly zero.
        assert_eq!(out.at(0, 0, 0, 0), 0.0);
        assert_eq!(out_lab.len(), out.shape().h * out.shape().w);
    }
}
