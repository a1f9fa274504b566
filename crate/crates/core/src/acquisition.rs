//! Structured-illumination acquisition simulation: phantom generation,
//! half-Gaussian mask sets, bucket measurements with Poisson photon noise,
//! and the pencil-beam reference scan.
//!
//! Every randomized operation derives its generator from (seed, stream) so
//! results are reproducible and safe to call concurrently. Stream ids are
//! fixed constants; per-bucket and per-pixel draws use `base + index`.

use crate::error::{GhostError, Result};
use crate::image::Image;
use crate::rng::Rng64;
use rayon::prelude::*;

const STREAM_MASKS: u64 = 0x4d41_534b; // "MASK"
const STREAM_NOISE: u64 = 0x4e4f_4953_0000_0000; // "NOIS" << 32
const STREAM_PENCIL: u64 = 0x5042_4541_0000_0000; // "PBEA" << 32
const STREAM_PHANTOM: u64 = 0x5048_414e; // "PHAN"

/// Stack of `count` illumination masks, one row of the acquisition matrix
/// each, flattened row-major as [mask, row, col].
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MaskSet {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> MaskSet {
        let n = self.pixel_count();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &m in indices {
            data.extend_from_slice(self.row(m));
        }
        MaskSet {
            count: indices.len(),
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sum over masks of the per-mask mean transmittance (dose bookkeeping).
    pub fn total_mean_transmittance(&self) -> f64 {
        let n = self.pixel_count() as f64;
        (0..self.count)
            .map(|m| self.row(m).iter().sum::<f64>() / n)
            .sum()
    }
}

/// Measured bucket values, optionally paired with the noiseless signal.
#[derive(Clone, Debug)]
pub struct BucketVector {
    pub values: Vec<f64>,
    pub clean: Option<Vec<f64>>,
}

impl BucketVector {
    pub fn clean_only(values: Vec<f64>) -> Self {
        BucketVector {
            values,
            clean: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> BucketVector {
        BucketVector {
            values: indices.iter().map(|&i| self.values[i]).collect(),
            clean: self
                .clean
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Poisson photon-count model: each bucket is drawn as
/// `Poisson(max_photons * b) / max_photons`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseModel {
    /// Maximum expected emitted photons per pixel per realization.
    pub max_photons: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(max_photons: f64, seed: u64) -> Result<Self> {
        if !(max_photons > 0.0) {
            return Err(GhostError::invalid(format!(
                "photon constant must be > 0, got {max_photons}"
            )));
        }
        Ok(NoiseModel { max_photons, seed })
    }
}

/// Built-in synthetic phantoms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    /// Constant image of ones.
    Flat,
    /// Random non-overlapping disks with amplitudes from a fixed set.
    Disks,
    /// Thresholded band-pass noise; elongated binary structures.
    Blobs,
}

impl std::str::FromStr for PhantomKind {
    type Err = GhostError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(PhantomKind::Flat),
            "disks" => Ok(PhantomKind::Disks),
            "blobs" => Ok(PhantomKind::Blobs),
            other => Err(GhostError::invalid(format!("unknown phantom kind {other:?}"))),
        }
    }
}

/// Amplitudes used by the disk phantom.
pub const DISK_AMPLITUDES: [f64; 4] = [0.4, 0.6, 0.8, 1.0];

/// Draw `count` masks of |N(0,1)| values and normalize the whole set by its
/// global maximum, so every value is a transmittance in [0, 1] and the set
/// maximum is exactly 1.
pub fn generate_masks(count: usize, height: usize, width: usize, seed: u64) -> Result<MaskSet> {
    if count == 0 {
        return Err(GhostError::invalid("mask count must be >= 1"));
    }
    if height == 0 || width == 0 {
        return Err(GhostError::invalid("mask dimensions must be nonzero"));
    }
    let mut rng = Rng64::from_seed_stream(seed, STREAM_MASKS);
    let mut data = vec![0.0f64; count * height * width];
    let mut max = f64::NEG_INFINITY;
    for v in data.iter_mut() {
        *v = rng.normal().abs();
        if *v > max {
            max = *v;
        }
    }
    for v in data.iter_mut() {
        *v /= max;
    }
    Ok(MaskSet {
        count,
        height,
        width,
        data,
    })
}

/// Clean buckets b = W x (64-bit accumulation).
pub fn forward_project(masks: &MaskSet, image: &Image) -> Result<BucketVector> {
    if masks.height != image.height {
        return Err(GhostError::ShapeMismatch {
            op: "forward_project",
            axis: "height",
            expected: masks.height,
            got: image.height,
        });
    }
    if masks.width != image.width {
        return Err(GhostError::ShapeMismatch {
            op: "forward_project",
            axis: "width",
            expected: masks.width,
            got: image.width,
        });
    }
    let n = masks.pixel_count();
    let values: Vec<f64> = (0..masks.count)
        .into_par_iter()
        .map(|m| {
            let row = &masks.data[m * n..(m + 1) * n];
            let mut acc = 0.0f64;
            for (w, x) in row.iter().zip(image.pixels.iter()) {
                acc += w * x;
            }
            acc
        })
        .collect();
    Ok(BucketVector::clean_only(values))
}

/// Corrupt clean buckets with the Eq.-style photon model:
/// `y_m = Poisson(C * b_m) / C`, independent across buckets. Bucket `m`
/// draws from stream `seed + m` offsets so the result is order-independent.
pub fn apply_poisson(clean: &BucketVector, model: &NoiseModel) -> Result<BucketVector> {
    for (m, &b) in clean.values.iter().enumerate() {
        if !b.is_finite() {
            return Err(GhostError::non_finite(format!("clean bucket {m}")));
        }
        if b < 0.0 {
            return Err(GhostError::invalid(format!(
                "clean bucket {m} is negative ({b}); Poisson model requires b >= 0"
            )));
        }
    }
    let c = model.max_photons;
    let values: Vec<f64> = clean
        .values
        .par_iter()
        .enumerate()
        .map(|(m, &b)| {
            let mut rng = Rng64::from_seed_stream(model.seed, STREAM_NOISE + m as u64);
            rng.poisson(c * b) as f64 / c
        })
        .collect();
    Ok(BucketVector {
        values,
        clean: Some(clean.values.clone()),
    })
}

/// Mean noise fluctuation as a percentage of the mean clean-signal
/// fluctuation: `100 * mean|y - b| / mean|b - mean(b)|`.
pub fn noise_fluctuation_ratio(clean: &[f64], noisy: &[f64]) -> f64 {
    assert_eq!(clean.len(), noisy.len());
    let n = clean.len() as f64;
    let noise_mad = clean
        .iter()
        .zip(noisy.iter())
        .map(|(b, y)| (y - b).abs())
        .sum::<f64>()
        / n;
    if noise_mad == 0.0 {
        return 0.0;
    }
    let mean_b = clean.iter().sum::<f64>() / n;
    let signal_mad = clean.iter().map(|b| (b - mean_b).abs()).sum::<f64>() / n;
    100.0 * noise_mad / signal_mad
}

/// Raster-scan reference: every pixel is measured independently as
/// `Poisson(photons_per_pixel * x) / photons_per_pixel`.
pub fn pencil_beam_scan(image: &Image, photons_per_pixel: f64, seed: u64) -> Result<Image> {
    if !(photons_per_pixel > 0.0) {
        return Err(GhostError::invalid(format!(
            "photons per pixel must be > 0, got {photons_per_pixel}"
        )));
    }
    for (i, &x) in image.pixels.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(GhostError::invalid(format!(
                "pixel {i} is {x}; pencil beam requires finite nonnegative intensities"
            )));
        }
    }
    if photons_per_pixel.is_infinite() {
        return Ok(image.clone());
    }
    let pixels: Vec<f64> = image
        .pixels
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut rng = Rng64::from_seed_stream(seed, STREAM_PENCIL + i as u64);
            rng.poisson(photons_per_pixel * x) as f64 / photons_per_pixel
        })
        .collect();
    Ok(Image {
        height: image.height,
        width: image.width,
        pixels,
    })
}

/// Deterministic synthetic phantom in [0, 1].
pub fn generate_phantom(kind: PhantomKind, height: usize, width: usize, seed: u64) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(GhostError::invalid("phantom dimensions must be nonzero"));
    }
    let mut rng = Rng64::from_seed_stream(seed, STREAM_PHANTOM);
    match kind {
        PhantomKind::Flat => Ok(Image::constant(height, width, 1.0)),
        PhantomKind::Disks => Ok(disks_phantom(height, width, &mut rng)),
        PhantomKind::Blobs => Ok(blobs_phantom(height, width, &mut rng)),
    }
}

fn disks_phantom(height: usize, width: usize, rng: &mut Rng64) -> Image {
    let mut img = Image::zeros(height, width);
    let min_dim = height.min(width) as f64;
    let r_lo = (min_dim / 16.0).max(1.5);
    let r_hi = (min_dim / 6.0).max(r_lo + 0.5);
    let target = ((height * width) as f64 / 300.0).ceil().max(3.0) as usize;
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < target && attempts < 400 {
        attempts += 1;
        let r = r_lo + rng.uniform() * (r_hi - r_lo);
        let cy = r + rng.uniform() * (height as f64 - 2.0 * r);
        let cx = r + rng.uniform() * (width as f64 - 2.0 * r);
        let overlaps = placed
            .iter()
            .any(|&(py, px, pr)| ((cy - py).powi(2) + (cx - px).powi(2)).sqrt() < r + pr + 1.0);
        if overlaps {
            continue;
        }
        let amp = DISK_AMPLITUDES[rng.below(DISK_AMPLITUDES.len())];
        placed.push((cy, cx, r));
        for y in 0..height {
            for x in 0..width {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                if d <= r {
                    img.set(y, x, amp);
                }
            }
        }
    }
    img
}

fn blobs_phantom(height: usize, width: usize, rng: &mut Rng64) -> Image {
    let n = height * width;
    let noise: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let min_dim = height.min(width) as f64;
    // band-pass: fine smoothing minus coarse smoothing gives elongated ridges
    let fine = gaussian_blur(&noise, height, width, (min_dim / 24.0).max(0.8));
    let coarse = gaussian_blur(&noise, height, width, (min_dim / 6.0).max(2.0));
    let field: Vec<f64> = fine.iter().zip(coarse.iter()).map(|(f, c)| f - c).collect();
    let mut sorted = field.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = sorted[(0.75 * n as f64) as usize];
    let pixels = field
        .iter()
        .map(|&v| if v > threshold { 1.0 } else { 0.0 })
        .collect();
    Image {
        height,
        width,
        pixels,
    }
}

/// Separable Gaussian blur with clamped (Neumann) boundaries.
fn gaussian_blur(data: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, width as isize - 1) as usize;
                acc += k * data[y * width + sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, height as isize - 1) as usize;
                acc += k * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_normalized_and_deterministic() {
        let a = generate_masks(8, 10, 10, 99).unwrap();
        assert!((a.max_value() - 1.0).abs() < 1e-15);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b = generate_masks(8, 10, 10, 99).unwrap();
        assert_eq!(a.data, b.data);
        // no all-zero mask
        for m in 0..a.count {
            assert!(a.row(m).iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn masks_reject_degenerate_dims() {
        assert!(generate_masks(0, 4, 4, 1).is_err());
        assert!(generate_masks(4, 0, 4, 1).is_err());
        assert!(generate_masks(4, 4, 0, 1).is_err());
    }

    #[test]
    fn forward_project_trivial_cases() {
        let masks = MaskSet {
            count: 1,
            height: 2,
            width: 2,
            data: vec![1.0; 4],
        };
        let zeros = Image::zeros(2, 2);
        assert_eq!(forward_project(&masks, &zeros).unwrap().values, vec![0.0]);
        let img = Image::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = forward_project(&masks, &img).unwrap();
        assert!((b.values[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_zero_buckets_stay_zero() {
        let clean = BucketVector::clean_only(vec![0.0; 16]);
        let model = NoiseModel::new(5.0, 3).unwrap();
        let noisy = apply_poisson(&clean, &model).unwrap();
        assert!(noisy.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_rejects_negative() {
        let clean = BucketVector::clean_only(vec![1.0, -0.5]);
        let model = NoiseModel::new(5.0, 3).unwrap();
        assert!(apply_poisson(&clean, &model).is_err());
    }

    #[test]
    fn fluctuation_ratio_zero_for_identical() {
        let b = vec![1.0, 2.0, 3.0];
        assert_eq!(noise_fluctuation_ratio(&b, &b), 0.0);
    }

    #[test]
    fn pencil_beam_zero_image() {
        let img = Image::zeros(4, 4);
        let out = pencil_beam_scan(&img, 100.0, 1).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phantom_flat_and_determinism() {
        let flat = generate_phantom(PhantomKind::Flat, 5, 7, 1).unwrap();
        assert!(flat.pixels.iter().all(|&v| v == 1.0));
        let a = generate_phantom(PhantomKind::Blobs, 32, 32, 5).unwrap();
        let b = generate_phantom(PhantomKind::Blobs, 32, 32, 5).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn disks_values_from_amplitude_set() {
        let img = generate_phantom(PhantomKind::Disks, 48, 48, 7).unwrap();
        for &v in &img.pixels {
            let ok = v == 0.0 || DISK_AMPLITUDES.iter().any(|&a| (a - v).abs() < 1e-12);
            assert!(ok, "unexpected pixel value {v}");
        }
        assert!(img.max() > 0.0);
    }
}
