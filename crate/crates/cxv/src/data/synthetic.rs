//! Class-structured synthetic datasets in CIFAR shape, for smoke training
//! and pipeline tests when the real batch files are not on disk. Each class
//! owns a smooth random pattern; samples are the pattern plus pixel noise,
//! so small models can learn the classes quickly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DatasetName, IMAGE_BYTES};
use crate::scalar::derive_seed;

const GRID: usize = 4;

/// Bilinear upsample of a per-class 4x4 anchor grid to 32x32.
fn class_pattern(class: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC1A55, class as u64]));
    let mut anchors = [[0.0f64; GRID * GRID]; 3];
    for plane in anchors.iter_mut() {
        for v in plane.iter_mut() {
            *v = rng.gen_range(30.0..225.0);
        }
    }
    let mut out = vec![0.0f64; IMAGE_BYTES];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let gy = y as f64 / 31.0 * (GRID - 1) as f64;
                let gx = x as f64 / 31.0 * (GRID - 1) as f64;
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
                let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                let a = anchors[c][y0 * GRID + x0];
                let b = anchors[c][y0 * GRID + x1];
                let d = anchors[c][y1 * GRID + x0];
                let e = anchors[c][y1 * GRID + x1];
                out[c * 1024 + y * 32 + x] =
                    a * (1.0 - fy) * (1.0 - fx) + b * (1.0 - fy) * fx + d * fy * (1.0 - fx) + e * fy * fx;
            }
        }
    }
    out
}

/// `n` class-balanced samples (label = index mod classes), deterministic in
/// `seed`.
pub fn synthetic_dataset(name: DatasetName, n: usize, seed: u64) -> Dataset {
    let classes = name.classes();
    let patterns: Vec<Vec<f64>> = (0..classes).map(|c| class_pattern(c, seed)).collect();
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, i as u64]));
        for &base in &patterns[class] {
            let noisy = base + rng.gen_range(-25.0..25.0);
            images.push(noisy.round().clamp(0.0, 255.0) as u8);
        }
        labels.push(class as u8);
    }
    Dataset {
        name,
        images,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synthetic_dataset(DatasetName::Cifar10, 30, 7);
        let b = synthetic_dataset(DatasetName::Cifar10, 30, 7);
        assert_eq!(a, b);
        for c in 0..10u8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 3);
        }
        let other = synthetic_dataset(DatasetName::Cifar10, 30, 8);
        assert_ne!(a.images, other.images);
    }

    #[test]
    fn same_class_samples_share_structure() {
        let ds = synthetic_dataset(DatasetName::Cifar10, 20, 3);
        // distance within a class is much smaller than across classes
        let dist = |i: usize, j: usize| -> f64 {
            ds.image(i)
                .iter()
                .zip(ds.image(j))
                .map(|(&a, &b)| ((a as f64) - (b as f64)).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let same = dist(0, 10); // both class 0
        let cross = dist(0, 1); // class 0 vs class 1
        assert!(same < cross, "same {same} cross {cross}");
    }
}
