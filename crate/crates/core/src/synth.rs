//! Synthetic two-class benchmark dataset.
//!
//! Class 0 is a Gaussian-textured bright blob; class 1 is a ring with a
//! dark nucleus-like center. Both sit on a noisy background with seeded
//! per-image parameter jitter, standing in for the two blood-smear
//! morphologies at desk scale.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::afim::{self, RawImage};
use crate::nn::Tensor;
use crate::scalar::{mix_seed, Scalar};

fn render(size: usize, label: u8, rng: &mut ChaCha8Rng) -> RawImage {
    let s = size as f64;
    let bg = 0.10 + rng.random::<f64>() * 0.12;
    let amp = 0.55 + rng.random::<f64>() * 0.30;
    let cx = (s - 1.0) / 2.0 + (rng.random::<f64>() - 0.5) * s * 0.16;
    let cy = (s - 1.0) / 2.0 + (rng.random::<f64>() - 0.5) * s * 0.16;
    let blob_sigma = s * (0.15 + rng.random::<f64>() * 0.08);
    let ring_r = s * (0.26 + rng.random::<f64>() * 0.10);
    let ring_w = s * (0.035 + rng.random::<f64>() * 0.03);
    let channel_gain = [
        0.95 + rng.random::<f64>() * 0.05,
        0.80 + rng.random::<f64>() * 0.08,
        0.90 + rng.random::<f64>() * 0.08,
    ];
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let shape = if label == 0 {
                amp * (-d * d / (2.0 * blob_sigma * blob_sigma)).exp()
            } else {
                let ring = amp * (-(d - ring_r).powi(2) / (2.0 * ring_w * ring_w)).exp();
                let nucleus = 0.55 * amp * (-d * d / (2.0 * (0.45 * ring_r).powi(2))).exp();
                ring - nucleus
            };
            let noise = (rng.random::<f64>() - 0.5) * 0.08;
            for gain in channel_gain {
                let v = ((bg + shape) * gain + noise).clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
    }
    RawImage::new(size, size, 3, data).expect("render emits size*size*3 bytes")
}

/// Write `n_per_class` AFIM images per class under
/// `<root>/<class_dirs[i]>/img_*.raw`.
pub fn generate_dataset(
    root: &Path,
    class_dirs: &[String; 2],
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<()> {
    if n_per_class == 0 {
        return Err(Error::Argument("n_per_class must be at least 1".into()));
    }
    if size < 8 {
        return Err(Error::Argument(format!("image size {} too small", size)));
    }
    for (label, dir_name) in class_dirs.iter().enumerate() {
        let dir = root.join(dir_name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n_per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5f9, label as u64, i as u64]));
            let img = render(size, label as u8, &mut rng);
            afim::write(&dir.join(format!("img_{i:05}.raw")), &img)?;
        }
    }
    Ok(())
}

/// Seeded uniform-noise images for out-of-distribution probes.
pub fn uniform_noise_images<S: Scalar>(n: usize, size: usize, seed: u64) -> Vec<Tensor<S>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xf00d, i as u64]));
            let data = (0..size * size * 3)
                .map(|_| S::of(rng.random::<f64>()))
                .collect();
            Tensor::from_vec(&[size, size, 3], data).expect("length matches shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let dirs = ["notall".to_string(), "all".to_string()];
        generate_dataset(t1.path(), &dirs, 3, 16, 9).unwrap();
        generate_dataset(t2.path(), &dirs, 3, 16, 9).unwrap();
        for class in &dirs {
            for i in 0..3 {
                let a = std::fs::read(t1.path().join(class).join(format!("img_{i:05}.raw"))).unwrap();
                let b = std::fs::read(t2.path().join(class).join(format!("img_{i:05}.raw"))).unwrap();
                assert_eq!(a, b);
            }
        }
        // Different seed changes content.
        let t3 = tempfile::tempdir().unwrap();
        generate_dataset(t3.path(), &dirs, 1, 16, 10).unwrap();
        let a = std::fs::read(t1.path().join("all/img_00000.raw")).unwrap();
        let b = std::fs::read(t3.path().join("all/img_00000.raw")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn classes_have_distinct_center_statistics() {
        // Blobs are bright at the center; rings are dark there.
        let mut blob_center = 0.0;
        let mut ring_center = 0.0;
        let n = 20;
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(3, &[0x5f9, 0, i]));
            let img = render(32, 0, &mut rng);
            blob_center += img.data[(16 * 32 + 16) * 3] as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(3, &[0x5f9, 1, i]));
            let img = render(32, 1, &mut rng);
            ring_center += img.data[(16 * 32 + 16) * 3] as f64;
        }
        assert!(blob_center / n as f64 > ring_center / n as f64 + 30.0);
    }

    #[test]
    fn noise_images_are_seeded_and_in_range() {
        let a: Vec<Tensor<f32>> = uniform_noise_images(2, 8, 5);
        let b: Vec<Tensor<f32>> = uniform_noise_images(2, 8, 5);
        assert_eq!(a, b);
        assert!(a[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
