//! Synthetic segmentation dataset: textured background plus colored
//! rectangles and discs with exact masks. Deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Labels, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyDatasetSpec {
    /// Square side; must be divisible by 8 for the network.
    pub size: usize,
    pub classes: usize,
    /// Std of the per-pixel noise added on top of class colors.
    pub noise_std: f64,
    pub max_shapes: usize,
}

impl ToyDatasetSpec {
    pub fn new(size: usize, classes: usize) -> Self {
        assert!(classes >= 2, "need a background class and at least one shape class");
        assert_eq!(size % 8, 0, "toy image side must be divisible by 8");
        ToyDatasetSpec { size, classes, noise_std: 0.08, max_shapes: 3 }
    }
}

/// Reference color per class, spread over RGB.
pub fn class_color(class: usize, classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.25, 0.25, 0.25];
    }
    let a = std::f64::consts::TAU * class as f64 / classes as f64;
    let third = std::f64::consts::TAU / 3.0;
    [
        (0.55 + 0.35 * a.cos()) as f32,
        (0.55 + 0.35 * (a - third).cos()) as f32,
        (0.55 + 0.35 * (a + third).cos()) as f32,
    ]
}

/// Generate `n_images` samples. Every sample carries 1..=max_shapes shapes;
/// the first shape's class cycles through 1..classes so each class keeps a
/// guaranteed appearance rate.
pub fn generate(spec: &ToyDatasetSpec, seed: u64, n_images: usize) -> Vec<(Tensor<f32>, Labels)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.size;
    let mut out = Vec::with_capacity(n_images);

    for idx in 0..n_images {
        let mut labels = Labels::filled(1, size, size, 0);
        let count = rng.gen_range(1..=spec.max_shapes);
        for shape_i in 0..count {
            let class = if shape_i == 0 {
                1 + (idx % (spec.classes - 1)) as u32
            } else {
                rng.gen_range(1..spec.classes) as u32
            };
            let cy = rng.gen_range(0..size) as isize;
            let cx = rng.gen_range(0..size) as isize;
            let is_disc = rng.gen::<bool>();
            if is_disc {
                let r = rng.gen_range(size / 6..=size / 3) as isize;
                for y in 0..size as isize {
                    for x in 0..size as isize {
                        if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                            *labels.at_mut(0, y as usize, x as usize) = class;
                        }
                    }
                }
            } else {
                let ry = rng.gen_range(size / 8..=size / 3) as isize;
                let rx = rng.gen_range(size / 8..=size / 3) as isize;
                for y in (cy - ry).max(0)..(cy + ry + 1).min(size as isize) {
                    for x in (cx - rx).max(0)..(cx + rx + 1).min(size as isize) {
                        *labels.at_mut(0, y as usize, x as usize) = class;
                    }
                }
            }
        }

        // Background texture phase + per-pixel noise.
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut image = Tensor::zeros(Shape::new(1, 3, size, size));
        for y in 0..size {
            for x in 0..size {
                let class = labels.at(0, y, x) as usize;
                let color = class_color(class, spec.classes);
                let texture = if class == 0 {
                    0.05 * ((x + 2 * y) as f64 * std::f64::consts::TAU / size as f64 + phase).sin()
                } else {
                    0.0
                };
                for c in 0..3 {
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = color[c] as f64 + texture + noise * spec.noise_std;
                    *image.at_mut(0, c, y, x) = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        out.push((image, labels));
    }
    out
}

/// Default generator used by the CLI training path.
pub fn make_toy_dataset(seed: u64, n_images: usize, size: usize, classes: usize) -> Vec<(Tensor<f32>, Labels)> {
    generate(&ToyDatasetSpec::new(size, classes), seed, n_images)
}

/// Stack single-sample pairs into one batch pair.
pub fn stack_samples(samples: &[(Tensor<f32>, Labels)]) -> (Tensor<f32>, Labels) {
    assert!(!samples.is_empty());
    let s = samples[0].0.shape();
    let n = samples.len();
    let mut image = Tensor::zeros(Shape::new(n, s.c, s.h, s.w));
    let mut labels = Labels::filled(n, s.h, s.w, 0);
    let chw = s.c * s.h * s.w;
    let hw = s.h * s.w;
    for (i, (img, lab)) in samples.iter().enumerate() {
        assert_eq!(img.shape(), s);
        image.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(img.data());
        labels.data_mut()[i * hw..(i + 1) * hw].copy_from_slice(lab.data());
    }
    (image, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = make_toy_dataset(4, 3, 16, 3);
        let b = make_toy_dataset(4, 3, 16, 3);
        for ((ia, la), (ib, lb)) in a.iter().zip(&b) {
            assert_eq!(ia.data(), ib.data());
            assert_eq!(la.data(), lb.data());
        }
        let c = make_toy_dataset(5, 3, 16, 3);
        assert_ne!(a[0].0.data(), c[0].0.data());
    }

    #[test]
    fn labels_stay_in_class_range() {
        for &classes in &[2usize, 3, 5] {
            let data = make_toy_dataset(9, 8, 16, classes);
            for (_, lab) in &data {
                assert!(lab.data().iter().all(|&l| (l as usize) < classes));
            }
        }
    }

    #[test]
    fn every_class_appears_in_at_least_half_the_samples() {
        let classes = 3;
        let data = make_toy_dataset(11, 100, 16, classes);
        let mut appearances = vec![0usize; classes];
        for (_, lab) in &data {
            let mut seen = vec![false; classes];
            for &l in lab.data() {
                seen[l as usize] = true;
            }
            for c in 1..classes {
                appearances[c] += seen[c] as usize;
            }
        }
        for c in 1..classes {
            assert!(appearances[c] >= 50, "class {c} appeared in only {} samples", appearances[c]);
        }
    }

    #[test]
    fn images_are_unit_range() {
        let data = make_toy_dataset(2, 4, 24, 4);
        for (img, _) in &data {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn stack_concatenates_on_batch_axis() {
        let data = make_toy_dataset(1, 3, 16, 3);
        let refs: Vec<(Tensor<f32>, Labels)> = data.clone();
        let (img, lab) = stack_samples(&refs);
        assert_eq!(img.shape(), Shape::new(3, 3, 16, 16));
        assert_eq!((lab.n, lab.h, lab.w), (3, 16, 16));
        assert_eq!(&img.data()[0..data[0].0.len()], data[0].0.data());
    }
}
