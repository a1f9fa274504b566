//! Quantitative evaluation: MSE, PSNR, SSIM (Wang 2004 constants), Fourier
//! ring correlation with the van Heel half-bit threshold, and the FRC-based
//! resolution estimate.
//!
//! Conventions pinned here:
//! * PSNR peak is the maximum of the declared reference (first argument);
//!   identical images report +inf.
//! * SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
//!   dynamic range = reference max - min, averaged over the valid region.
//! * FRC rings are one frequency bin wide up to Nyquist (0.5 cycles/pixel);
//!   resolution is 1/f at the first half-bit crossing (linear interpolation
//!   between rings), or 2 px when the curve never crosses.

use crate::error::{GhostError, Result};
use crate::image::Image;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

pub fn mse(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b), "mse: image shapes differ");
    let n = a.len() as f64;
    a.pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// 10 log10(peak^2 / MSE) with peak taken from `reference`.
pub fn psnr(reference: &Image, image: &Image) -> f64 {
    let err = mse(reference, image);
    if err == 0.0 {
        return f64::INFINITY;
    }
    let peak = reference.max();
    10.0 * (peak * peak / err).log10()
}

/// Mean structural similarity over valid 11x11 windows.
pub fn ssim(reference: &Image, image: &Image) -> Result<f64> {
    ssim_components(reference, image).map(|c| c.mean_ssim)
}

/// SSIM with its averaged luminance/contrast/structure factors.
#[derive(Clone, Copy, Debug)]
pub struct SsimComponents {
    pub mean_ssim: f64,
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn ssim_components(reference: &Image, image: &Image) -> Result<SsimComponents> {
    if !reference.same_shape(image) {
        return Err(GhostError::ShapeMismatch {
            op: "ssim",
            axis: "height",
            expected: reference.height,
            got: image.height,
        });
    }
    if reference.height < SSIM_WINDOW || reference.width < SSIM_WINDOW {
        return Err(GhostError::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            reference.height, reference.width
        )));
    }
    if reference.pixels == image.pixels {
        return Ok(SsimComponents {
            mean_ssim: 1.0,
            luminance: 1.0,
            contrast: 1.0,
            structure: 1.0,
        });
    }
    // normalized Gaussian window
    let half = (SSIM_WINDOW / 2) as isize;
    let mut window = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let mut wsum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            window[((dy + half) * SSIM_WINDOW as isize + dx + half) as usize] = v;
            wsum += v;
        }
    }
    for w in window.iter_mut() {
        *w /= wsum;
    }

    let range = (reference.max() - reference.min()).max(f64::EPSILON);
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let c3 = c2 / 2.0;

    let (h, w) = (reference.height, reference.width);
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // ssim, l, c, s
    let mut count = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb) = (0.0, 0.0);
            let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wv = window[dy * SSIM_WINDOW + dx];
                    let pa = reference.get(y + dy, x + dx);
                    let pb = image.get(y + dy, x + dx);
                    ma += wv * pa;
                    mb += wv * pb;
                    aa += wv * pa * pa;
                    bb += wv * pb * pb;
                    ab += wv * pa * pb;
                }
            }
            let va = (aa - ma * ma).max(0.0);
            let vb = (bb - mb * mb).max(0.0);
            let cov = ab - ma * mb;
            let (sa, sb) = (va.sqrt(), vb.sqrt());
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let c = (2.0 * sa * sb + c2) / (va + vb + c2);
            let s = (cov + c3) / (sa * sb + c3);
            sums.0 += l * c * s;
            sums.1 += l;
            sums.2 += c;
            sums.3 += s;
            count += 1;
        }
    }
    let n = count as f64;
    Ok(SsimComponents {
        mean_ssim: sums.0 / n,
        luminance: sums.1 / n,
        contrast: sums.2 / n,
        structure: sums.3 / n,
    })
}

/// Fourier ring correlation curve with per-ring half-bit thresholds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrcCurve {
    /// Ring center frequencies in cycles/pixel, strictly increasing.
    pub frequencies: Vec<f64>,
    pub correlations: Vec<f64>,
    pub sample_counts: Vec<usize>,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrcWindow {
    /// No apodization (default).
    #[default]
    None,
    /// Separable Hann window; useful on real data with strong edges.
    Hann,
}

fn fft2(pixels: &[f64], h: usize, w: usize, window: FrcWindow) -> Vec<Complex<f64>> {
    let mut data: Vec<Complex<f64>> = match window {
        FrcWindow::None => pixels.iter().map(|&p| Complex::new(p, 0.0)).collect(),
        FrcWindow::Hann => {
            let hann = |i: usize, n: usize| {
                if n <= 1 {
                    1.0
                } else {
                    0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
                }
            };
            pixels
                .iter()
                .enumerate()
                .map(|(i, &p)| Complex::new(p * hann(i / w, h) * hann(i % w, w), 0.0))
                .collect()
        }
    };
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    data
}

/// van Heel & Schatz half-bit information threshold.
pub fn half_bit_threshold(sample_count: usize) -> f64 {
    let sq = (sample_count as f64).sqrt();
    (0.2071 + 1.9102 / sq) / (1.2071 + 0.9102 / sq)
}

pub fn frc(a: &Image, b: &Image) -> Result<FrcCurve> {
    frc_windowed(a, b, FrcWindow::None)
}

pub fn frc_windowed(a: &Image, b: &Image, window: FrcWindow) -> Result<FrcCurve> {
    if !a.same_shape(b) {
        return Err(GhostError::ShapeMismatch {
            op: "frc",
            axis: "height",
            expected: a.height,
            got: b.height,
        });
    }
    let (h, w) = (a.height, a.width);
    let fa = fft2(&a.pixels, h, w, window);
    let fb = fft2(&b.pixels, h, w, window);
    let size = h.min(w);
    let rings = size / 2;
    let mut num = vec![0.0f64; rings + 1];
    let mut pow_a = vec![0.0f64; rings + 1];
    let mut pow_b = vec![0.0f64; rings + 1];
    let mut counts = vec![0usize; rings + 1];
    for y in 0..h {
        let fy = signed_freq(y, h) / h as f64;
        for x in 0..w {
            let fx = signed_freq(x, w) / w as f64;
            let r = (fy * fy + fx * fx).sqrt();
            let ring = (r * size as f64).round() as usize;
            if ring == 0 || ring > rings {
                continue;
            }
            let va = fa[y * w + x];
            let vb = fb[y * w + x];
            num[ring] += va.re * vb.re + va.im * vb.im; // Re(va * conj(vb))
            pow_a[ring] += va.norm_sqr();
            pow_b[ring] += vb.norm_sqr();
            counts[ring] += 1;
        }
    }
    let mut frequencies = Vec::with_capacity(rings);
    let mut correlations = Vec::with_capacity(rings);
    let mut sample_counts = Vec::with_capacity(rings);
    let mut thresholds = Vec::with_capacity(rings);
    for ring in 1..=rings {
        if counts[ring] == 0 {
            continue;
        }
        let den = (pow_a[ring] * pow_b[ring]).sqrt();
        let corr = if den == 0.0 {
            if num[ring] == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (num[ring] / den).clamp(-1.0, 1.0)
        };
        frequencies.push(ring as f64 / size as f64);
        correlations.push(corr);
        sample_counts.push(counts[ring]);
        thresholds.push(half_bit_threshold(counts[ring]));
    }
    Ok(FrcCurve {
        frequencies,
        correlations,
        sample_counts,
        thresholds,
    })
}

fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Spatial resolution in pixels from the first half-bit crossing of the
/// curve; 2 px (Nyquist-limited) when the curve never drops below the
/// threshold.
pub fn resolution_from_frc(curve: &FrcCurve) -> f64 {
    for i in 0..curve.correlations.len() {
        let d = curve.correlations[i] - curve.thresholds[i];
        if d < 0.0 {
            let f_cross = if i == 0 {
                curve.frequencies[0]
            } else {
                let d_prev = curve.correlations[i - 1] - curve.thresholds[i - 1];
                let t = d_prev / (d_prev - d);
                curve.frequencies[i - 1] + t * (curve.frequencies[i] - curve.frequencies[i - 1])
            };
            return 1.0 / f_cross.max(f64::EPSILON);
        }
    }
    2.0
}

/// The standard metric set computed against a reference.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricBundle {
    pub mse: f64,
    #[serde(with = "infinity_as_string")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub resolution_px: f64,
}

impl MetricBundle {
    pub fn compute(reference: &Image, image: &Image) -> Result<MetricBundle> {
        let curve = frc(reference, image)?;
        Ok(MetricBundle {
            mse: mse(reference, image),
            psnr_db: psnr(reference, image),
            ssim: ssim(reference, image)?,
            resolution_px: resolution_from_frc(&curve),
        })
    }
}

/// JSON cannot carry IEEE infinities; encode them as the string "inf".
mod infinity_as_string {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("bad psnr value {other:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let pixels = (0..h * w).map(|i| i as f64 / (h * w - 1) as f64).collect();
        Image::new(h, w, pixels).unwrap()
    }

    #[test]
    fn identical_images_are_perfect() {
        let img = ramp(16, 16);
        assert_eq!(mse(&img, &img), 0.0);
        assert!(psnr(&img, &img).is_infinite());
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn uniform_error_closed_form_psnr() {
        let reference = ramp(16, 16); // peak exactly 1
        let mut shifted = reference.clone();
        for p in shifted.pixels.iter_mut() {
            *p += 0.1;
        }
        assert!((mse(&reference, &shifted) - 0.01).abs() < 1e-15);
        assert!((psnr(&reference, &shifted) - 20.0).abs() < 1e-10);
    }

    #[test]
    fn constant_shift_hits_luminance_not_structure() {
        let mut reference = ramp(20, 20);
        // add texture so windows have variance
        for (i, p) in reference.pixels.iter_mut().enumerate() {
            *p += 0.3 * ((i % 7) as f64 / 7.0);
        }
        let mut shifted = reference.clone();
        for p in shifted.pixels.iter_mut() {
            *p += 0.2;
        }
        let c = ssim_components(&reference, &shifted).unwrap();
        assert!(c.luminance < 1.0 - 1e-6, "luminance {}", c.luminance);
        assert!((c.structure - 1.0).abs() < 1e-9, "structure {}", c.structure);
        assert!((c.contrast - 1.0).abs() < 1e-9, "contrast {}", c.contrast);
    }

    #[test]
    fn frc_self_identity_all_rings_one() {
        let mut img = ramp(32, 32);
        // non-degenerate spectrum
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p += ((i * 37 % 101) as f64) / 101.0;
        }
        let curve = frc(&img, &img).unwrap();
        assert!(!curve.correlations.is_empty());
        for (f, c) in curve.frequencies.iter().zip(curve.correlations.iter()) {
            assert!(*f <= 0.5 + 1e-12);
            assert!((c - 1.0).abs() < 1e-9, "ring at {f} has correlation {c}");
        }
        assert_eq!(resolution_from_frc(&curve), 2.0);
    }

    #[test]
    fn frequencies_strictly_increasing() {
        let img = ramp(24, 24);
        let curve = frc(&img, &img).unwrap();
        for pair in curve.frequencies.windows(2) {
            assert!(pair[1] > pair[0]);
        }
        for &n in &curve.sample_counts {
            assert!(n >= 1);
        }
    }

    #[test]
    fn psnr_uses_reference_peak() {
        let a = ramp(16, 16);
        let mut b = a.clone();
        for p in b.pixels.iter_mut() {
            *p = 0.5 * *p + 0.1;
        }
        // mse symmetric, psnr differs through the peak convention
        assert!((mse(&a, &b) - mse(&b, &a)).abs() < 1e-18);
        let pa = psnr(&a, &b);
        let pb = psnr(&b, &a);
        assert!((pa - pb).abs() > 1e-6);
    }

    #[test]
    fn metric_bundle_json_roundtrip_with_infinity() {
        let bundle = MetricBundle {
            mse: 0.0,
            psnr_db: f64::INFINITY,
            ssim: 1.0,
            resolution_px: 2.0,
        };
        let text = serde_json::to_string(&bundle).unwrap();
        assert!(text.contains("\"inf\""));
        let back: MetricBundle = serde_json::from_str(&text).unwrap();
        assert!(back.psnr_db.is_infinite());
    }
}
