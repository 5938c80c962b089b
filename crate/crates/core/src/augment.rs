//! Resizing, feature scaling, and the seven training-set augmentation
//! transforms (rotation, height/width shift, zoom, horizontal/vertical
//! flip, shear).
//!
//! Images are `Tensor<S>` of shape `[H,W,C]` with intensities in `[0,1]`.
//! Geometric transforms resample bilinearly with nearest-edge fill, so
//! outputs keep the input's shape and value range.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::afim::{self, RawImage};
use crate::ingest::{self, ManifestEntry, Split};
use crate::nn::Tensor;
use crate::scalar::{mix_seed, Scalar};

/// Unit-interval image tensor, shape `[H,W,C]`.
pub type ImageTensor<S> = Tensor<S>;

/// Augmentation magnitudes and accounting.
#[derive(Clone, Debug)]
pub struct AugmentPolicy {
    pub rotation_deg: f64,
    pub height_shift_frac: f64,
    pub width_shift_frac: f64,
    pub zoom_frac: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub shear_deg: f64,
    /// Augmented copies generated per source image.
    pub multiplier: u32,
    /// Optional per-class override of `multiplier` (index = label).
    pub class_multipliers: [Option<u32>; 2],
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotation_deg: 45.0,
            height_shift_frac: 0.20,
            width_shift_frac: 0.20,
            zoom_frac: 0.10,
            horizontal_flip: true,
            vertical_flip: true,
            shear_deg: 20.0,
            multiplier: 4,
            class_multipliers: [None, None],
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn multiplier_for(&self, label: u8) -> u32 {
        self.class_multipliers[label as usize].unwrap_or(self.multiplier)
    }
}

/// Divide 0-255 intensities by 255 into a unit-interval tensor.
pub fn scale_features<S: Scalar>(raw: &RawImage) -> ImageTensor<S> {
    let data = raw
        .data
        .iter()
        .map(|&v| S::of(v as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[raw.height, raw.width, raw.channels], data)
        .expect("raw image dims are checked at construction")
}

/// Quantize a unit-interval tensor back to 0-255 bytes.
pub fn to_raw<S: Scalar>(img: &ImageTensor<S>) -> RawImage {
    let s = img.shape();
    let data = img
        .data()
        .iter()
        .map(|v| (v.to_f64().unwrap() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    RawImage::new(s[0], s[1], s[2], data).expect("shape is preserved")
}

#[inline]
fn clamp_idx(v: f64, max: usize) -> (usize, usize, f64) {
    let v = v.clamp(0.0, (max - 1) as f64);
    let i0 = v.floor() as usize;
    let i1 = (i0 + 1).min(max - 1);
    (i0, i1, v - i0 as f64)
}

/// Bilinear sample with nearest-edge replication outside the support.
fn sample<S: Scalar>(img: &ImageTensor<S>, y: f64, x: f64, c: usize) -> S {
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (y0, y1, fy) = clamp_idx(y, h);
    let (x0, x1, fx) = clamp_idx(x, w);
    let d = img.data();
    let v00 = d[(y0 * w + x0) * ch + c];
    let v01 = d[(y0 * w + x1) * ch + c];
    let v10 = d[(y1 * w + x0) * ch + c];
    let v11 = d[(y1 * w + x1) * ch + c];
    let fy = S::of(fy);
    let fx = S::of(fx);
    let one = S::one();
    let v = (one - fy) * (one - fx) * v00
        + (one - fy) * fx * v01
        + fy * (one - fx) * v10
        + fy * fx * v11;
    // Bilinear weights sum to one, but rounding can leak past the range.
    v.max(S::zero()).min(one)
}

/// Resample every output pixel from a source position given by `src`.
fn remap<S: Scalar>(
    img: &ImageTensor<S>,
    src: impl Fn(f64, f64) -> (f64, f64),
) -> ImageTensor<S> {
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(img.shape());
    {
        let od = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y as f64, x as f64);
                for c in 0..ch {
                    od[(y * w + x) * ch + c] = sample(img, sy, sx, c);
                }
            }
        }
    }
    out
}

/// Bilinear resize to `out_h x out_w` (half-pixel-centered sampling).
pub fn resize<S: Scalar>(img: &ImageTensor<S>, out_h: usize, out_w: usize) -> Result<ImageTensor<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument("resize target has a zero dimension".into()));
    }
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::Argument("resize of empty image".into()));
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Tensor::zeros(&[out_h, out_w, ch]);
    {
        let od = out.data_mut();
        for y in 0..out_h {
            for x in 0..out_w {
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..ch {
                    od[(y * out_w + x) * ch + c] = sample(img, src_y, src_x, c);
                }
            }
        }
    }
    Ok(out)
}

/// Rotate about the image center; out-of-support pixels replicate edges.
pub fn rotate<S: Scalar>(img: &ImageTensor<S>, angle_deg: f64) -> Result<ImageTensor<S>> {
    if angle_deg.abs() > 180.0 {
        return Err(Error::Argument(format!(
            "rotation angle {} outside [-180, 180]",
            angle_deg
        )));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    Ok(remap(img, |y, x| {
        let dy = y - cy;
        let dx = x - cx;
        (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
    }))
}

/// Translate by `round(frac * dimension)` pixels; vacated pixels replicate
/// the nearest edge. Positive `dx_frac` moves content right, positive
/// `dy_frac` moves content down.
pub fn shift<S: Scalar>(img: &ImageTensor<S>, dx_frac: f64, dy_frac: f64) -> Result<ImageTensor<S>> {
    if dx_frac.abs() > 1.0 || dy_frac.abs() > 1.0 {
        return Err(Error::Argument(format!(
            "shift fractions ({}, {}) outside [-1, 1]",
            dx_frac, dy_frac
        )));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let sx = (dx_frac * w as f64).round();
    let sy = (dy_frac * h as f64).round();
    Ok(remap(img, |y, x| (y - sy, x - sx)))
}

/// Central crop of size `dim/factor` resized back to the original shape.
pub fn zoom<S: Scalar>(img: &ImageTensor<S>, factor: f64) -> Result<ImageTensor<S>> {
    if factor <= 0.0 {
        return Err(Error::Argument(format!("zoom factor {} must be > 0", factor)));
    }
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let crop_h = ((h as f64 / factor).round() as usize).clamp(1, h);
    let crop_w = ((w as f64 / factor).round() as usize).clamp(1, w);
    if crop_h == h && crop_w == w {
        return Ok(img.clone());
    }
    let off_y = (h - crop_h) / 2;
    let off_x = (w - crop_w) / 2;
    let mut crop = Tensor::zeros(&[crop_h, crop_w, ch]);
    {
        let cd = crop.data_mut();
        let id = img.data();
        for y in 0..crop_h {
            let src = ((y + off_y) * w + off_x) * ch;
            cd[y * crop_w * ch..(y + 1) * crop_w * ch]
                .copy_from_slice(&id[src..src + crop_w * ch]);
        }
    }
    resize(&crop, h, w)
}

/// Exact column reversal.
pub fn flip_h<S: Scalar>(img: &ImageTensor<S>) -> ImageTensor<S> {
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(img.shape());
    {
        let od = out.data_mut();
        let id = img.data();
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + (w - 1 - x)) * ch;
                od[(y * w + x) * ch..(y * w + x) * ch + ch]
                    .copy_from_slice(&id[src..src + ch]);
            }
        }
    }
    out
}

/// Exact row reversal.
pub fn flip_v<S: Scalar>(img: &ImageTensor<S>) -> ImageTensor<S> {
    let (h, w, ch) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(img.shape());
    {
        let od = out.data_mut();
        let id = img.data();
        for y in 0..h {
            let src = (h - 1 - y) * w * ch;
            od[y * w * ch..(y + 1) * w * ch].copy_from_slice(&id[src..src + w * ch]);
        }
    }
    out
}

/// Horizontal shear `x' = x + tan(angle) * (y - center_y)`.
pub fn shear<S: Scalar>(img: &ImageTensor<S>, angle_deg: f64) -> Result<ImageTensor<S>> {
    if angle_deg.abs() >= 90.0 {
        return Err(Error::Argument(format!(
            "shear angle {} outside (-90, 90)",
            angle_deg
        )));
    }
    let h = img.shape()[0];
    let cy = (h as f64 - 1.0) / 2.0;
    let t = angle_deg.to_radians().tan();
    Ok(remap(img, |y, x| (y, x - t * (y - cy))))
}

/// The transform pool the policy samples from.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Kind {
    Rotate,
    HeightShift,
    WidthShift,
    Zoom,
    FlipH,
    FlipV,
    Shear,
}

fn pool(policy: &AugmentPolicy) -> Vec<Kind> {
    let mut kinds = vec![Kind::Rotate, Kind::HeightShift, Kind::WidthShift, Kind::Zoom];
    if policy.horizontal_flip {
        kinds.push(Kind::FlipH);
    }
    if policy.vertical_flip {
        kinds.push(Kind::FlipV);
    }
    kinds.push(Kind::Shear);
    kinds
}

/// Apply one transform chosen uniformly from the policy's pool, with its
/// parameter drawn from the policy's symmetric range.
pub fn apply_random_transform<S: Scalar>(
    img: &ImageTensor<S>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor<S>> {
    let kinds = pool(policy);
    let kind = kinds[rng.random_range(0..kinds.len())];
    let sym = |rng: &mut ChaCha8Rng, mag: f64| (rng.random::<f64>() * 2.0 - 1.0) * mag;
    match kind {
        Kind::Rotate => rotate(img, sym(rng, policy.rotation_deg)),
        Kind::HeightShift => shift(img, 0.0, sym(rng, policy.height_shift_frac)),
        Kind::WidthShift => shift(img, sym(rng, policy.width_shift_frac), 0.0),
        Kind::Zoom => zoom(img, 1.0 + rng.random::<f64>() * policy.zoom_frac),
        Kind::FlipH => Ok(flip_h(img)),
        Kind::FlipV => Ok(flip_v(img)),
        Kind::Shear => shear(img, sym(rng, policy.shear_deg)),
    }
}

/// Expand a training split: each source image yields `multiplier` augmented
/// copies materialized as AFIM `.raw` files under `out_dir`, with labels
/// inherited. Returns originals followed by the new entries.
///
/// The RNG stream of copy `c` of source `i` is derived from
/// `(policy.seed, i, c)`, so the expansion is reproducible and sources can
/// be processed in parallel.
pub fn augment_split<S: Scalar>(
    entries: &[ManifestEntry],
    policy: &AugmentPolicy,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    if let Some(bad) = entries.iter().find(|e| e.split != Split::Train) {
        return Err(Error::Argument(format!(
            "augment_split requires train entries only, found {:?} for {}",
            bad.split.as_str(),
            bad.path.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let copies: Vec<Vec<ManifestEntry>> = entries
        .par_iter()
        .enumerate()
        .map(|(si, entry)| -> Result<Vec<ManifestEntry>> {
            let raw = ingest::load_image(&entry.path)?;
            let img: ImageTensor<S> = scale_features(&raw);
            let n_copies = policy.multiplier_for(entry.label.value());
            let mut out = Vec::with_capacity(n_copies as usize);
            for ci in 0..n_copies {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    policy.seed,
                    &[si as u64, ci as u64],
                ));
                let aug = apply_random_transform(&img, policy, &mut rng)?;
                let path = out_dir.join(format!("aug_{si:05}_{ci:02}.raw"));
                afim::write(&path, &to_raw(&aug))?;
                out.push(ManifestEntry {
                    path,
                    label: entry.label,
                    split: Split::Train,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut result: Vec<ManifestEntry> = entries.to_vec();
    result.extend(copies.into_iter().flatten());
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, data: &[f64]) -> ImageTensor<f64> {
        Tensor::from_vec(&[h, w, 1], data.to_vec()).unwrap()
    }

    fn rgb_random(h: usize, w: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[h, w, 3],
            (0..h * w * 3).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let x = rgb_random(7, 9, 1);
        let y = resize(&x, 7, 9).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn resize_2x2_to_center_pixel() {
        let x = img(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let y = resize(&x, 1, 1).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resize_high_resolution_shape_only() {
        let x: ImageTensor<f32> = Tensor::zeros(&[1944, 2592, 3]);
        let y = resize(&x, 224, 224).unwrap();
        assert_eq!(y.shape(), &[224, 224, 3]);
    }

    #[test]
    fn resize_zero_target_is_error() {
        let x = rgb_random(4, 4, 2);
        assert!(resize(&x, 0, 4).is_err());
    }

    #[test]
    fn scale_features_endpoints() {
        let raw = RawImage::new(1, 3, 1, vec![255, 0, 51]).unwrap();
        let t: ImageTensor<f64> = scale_features(&raw);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let x = rgb_random(5, 5, 3);
        assert_eq!(rotate(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn rotate_180_reflects_marker() {
        // Marker at (0,1) moves to (2,1) under point reflection.
        let x = img(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let y = rotate(&x, 180.0).unwrap();
        let mut want = vec![0.0; 9];
        want[2 * 3 + 1] = 1.0;
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{:?}", y.data());
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let x = rgb_random(6, 6, 4);
        let mut y = x.clone();
        for _ in 0..4 {
            y = rotate(&y, 90.0).unwrap();
        }
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shift_zero_is_identity() {
        let x = rgb_random(4, 4, 5);
        assert_eq!(shift(&x, 0.0, 0.0).unwrap(), x);
    }

    #[test]
    fn shift_moves_bright_column() {
        let x = img(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        let y = shift(&x, 0.5, 0.0).unwrap();
        // round(0.5*4) = 2: column 0 lands on column 2; vacated left edge
        // replicates the original column 0.
        assert_eq!(y.data()[2], 1.0);
        assert_eq!(y.data()[3], 0.0);
    }

    #[test]
    fn shift_of_constant_is_constant() {
        let x = Tensor::full(&[3, 5, 1], 0.7f64);
        let y = shift(&x, 0.2, 0.0).unwrap();
        let z = shift(&y, -0.2, 0.0).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn zoom_identity_and_constant() {
        let x = rgb_random(4, 4, 6);
        assert_eq!(zoom(&x, 1.0).unwrap(), x);
        let c = Tensor::full(&[4, 4, 1], 0.3f64);
        let z = zoom(&c, 1.07).unwrap();
        for v in z.data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn zoom_2x_spreads_bright_center() {
        let mut data = vec![0.0; 16];
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            data[y * 4 + x] = 1.0;
        }
        let x = img(4, 4, &data);
        let y = zoom(&x, 2.0).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zoom_nonpositive_factor_is_error() {
        let x = rgb_random(4, 4, 7);
        assert!(zoom(&x, 0.0).is_err());
    }

    #[test]
    fn flips_are_exact() {
        let x = img(1, 3, &[0.1, 0.2, 0.3]);
        let y = flip_h(&x);
        assert_eq!(y.data(), &[0.3, 0.2, 0.1]);

        let r = rgb_random(5, 7, 8);
        assert_eq!(flip_h(&flip_h(&r)), r);
        assert_eq!(flip_v(&flip_v(&r)), r);
    }

    #[test]
    fn shear_zero_and_constant() {
        let x = rgb_random(5, 5, 9);
        assert_eq!(shear(&x, 0.0).unwrap(), x);
        let c = Tensor::full(&[5, 5, 1], 0.42f64);
        let y = shear(&c, 17.0).unwrap();
        for v in y.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn shear_round_trip_on_gradient() {
        // Gentle horizontal gradient; forward+inverse shear restores it
        // up to edge-replication loss.
        let (h, w) = (16, 16);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = 0.4 + 0.2 * x as f64 / (w - 1) as f64;
            }
        }
        let x = img(h, w, &data);
        let y = shear(&x, 20.0).unwrap();
        let z = shear(&y, -20.0).unwrap();
        for (a, b) in z.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 5e-2, "{} vs {}", a, b);
        }
    }

    #[test]
    fn augment_split_counts_and_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        let mut entries = Vec::new();
        for i in 0..4 {
            let p = src.join(format!("t{i}.raw"));
            let raw = RawImage::new(6, 6, 3, vec![(i * 40) as u8; 108]).unwrap();
            afim::write(&p, &raw).unwrap();
            entries.push(ManifestEntry {
                path: p,
                label: crate::ingest::LabelId::new((i % 2) as u8).unwrap(),
                split: Split::Train,
            });
        }
        let policy = AugmentPolicy {
            multiplier: 1,
            seed: 11,
            ..AugmentPolicy::default()
        };
        let out1 = tmp.path().join("aug1");
        let expanded = augment_split::<f64>(&entries, &policy, &out1).unwrap();
        // multiplier 1: originals + one copy each.
        assert_eq!(expanded.len(), 2 * entries.len());
        for (orig, copy) in entries.iter().zip(&expanded[entries.len()..]) {
            assert_eq!(orig.label, copy.label);
        }

        let out2 = tmp.path().join("aug2");
        let expanded2 = augment_split::<f64>(&entries, &policy, &out2).unwrap();
        assert_eq!(expanded.len(), expanded2.len());
        for (a, b) in expanded[entries.len()..]
            .iter()
            .zip(&expanded2[entries.len()..])
        {
            let ba = std::fs::read(&a.path).unwrap();
            let bb = std::fs::read(&b.path).unwrap();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn augment_split_rejects_non_train_entries() {
        let tmp = tempfile::tempdir().unwrap();
        let entries = vec![ManifestEntry {
            path: tmp.path().join("x.raw"),
            label: crate::ingest::LabelId::NOT_ALL,
            split: Split::Test,
        }];
        let policy = AugmentPolicy::default();
        assert!(augment_split::<f64>(&entries, &policy, tmp.path()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn transforms_preserve_shape_and_range(
            seed in 0u64..1000,
            angle in -45.0f64..45.0,
            dx in -0.2f64..0.2,
            dy in -0.2f64..0.2,
            factor in 1.0f64..1.1,
            sh in -20.0f64..20.0,
        ) {
            let x = rgb_random(9, 11, seed);
            for y in [
                rotate(&x, angle).unwrap(),
                shift(&x, dx, dy).unwrap(),
                zoom(&x, factor).unwrap(),
                flip_h(&x),
                flip_v(&x),
                shear(&x, sh).unwrap(),
                resize(&x, 9, 11).unwrap(),
            ] {
                prop_assert_eq!(y.shape(), x.shape());
                prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
