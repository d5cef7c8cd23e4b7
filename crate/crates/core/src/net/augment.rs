//! On-the-fly training augmentation: rotation, rescaling, mirroring.
//!
//! Transforms run in the HU domain before windowing. Mirroring is an exact
//! column reversal; rotation and scaling resample bilinearly around the image
//! center with air (-1000 HU) fill. Labels are unchanged: the taxonomy has no
//! lateralized traits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const FILL_HU: f32 = -1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation drawn from `[-rotate_deg, +rotate_deg]`.
    pub rotate_deg: f32,
    pub scale_lo: f32,
    pub scale_hi: f32,
    pub mirror_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg: 15.0,
            scale_lo: 0.9,
            scale_hi: 1.1,
            mirror_prob: 0.5,
        }
    }
}

/// Deterministic transform: optional mirror, then rotate/scale resampling.
pub fn transform(
    pixels: &[f32],
    rows: usize,
    cols: usize,
    theta_rad: f32,
    scale: f32,
    mirror: bool,
) -> Vec<f32> {
    let mut src = pixels.to_vec();
    if mirror {
        for row in src.chunks_mut(cols) {
            row.reverse();
        }
    }
    if theta_rad == 0.0 && scale == 1.0 {
        return src;
    }
    let (cx, cy) = ((cols as f32 - 1.0) * 0.5, (rows as f32 - 1.0) * 0.5);
    let (sin, cos) = (-theta_rad).sin_cos();
    let inv_s = 1.0 / scale;
    let mut out = vec![FILL_HU; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let sx = (cos * dx - sin * dy) * inv_s + cx;
            let sy = (sin * dx + cos * dy) * inv_s + cy;
            out[y * cols + x] = bilinear(&src, rows, cols, sx, sy);
        }
    }
    out
}

fn bilinear(src: &[f32], rows: usize, cols: usize, x: f32, y: f32) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |ix: i64, iy: i64| -> f32 {
        if ix < 0 || iy < 0 || ix >= cols as i64 || iy >= rows as i64 {
            FILL_HU
        } else {
            src[iy as usize * cols + ix as usize]
        }
    };
    let (x0, y0) = (x0 as i64, y0 as i64);
    let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1, y0) * fx;
    let bottom = sample(x0, y0 + 1) * (1.0 - fx) + sample(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Randomized training augmentation.
pub fn augment(
    pixels: &[f32],
    rows: usize,
    cols: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let theta = (2.0 * rng.gen::<f32>() - 1.0) * cfg.rotate_deg.to_radians();
    let scale = cfg.scale_lo + (cfg.scale_hi - cfg.scale_lo) * rng.gen::<f32>();
    let mirror = rng.gen::<f64>() < cfg.mirror_prob;
    transform(pixels, rows, cols, theta, scale, mirror)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth brain-like test image: a soft blob over air.
    fn smooth_image(n: usize) -> Vec<f32> {
        let c = (n as f32 - 1.0) * 0.5;
        (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f32, (i / n) as f32);
                let r2 = ((x - c).powi(2) + (y - c).powi(2)) / (0.12 * (n * n) as f32);
                -1000.0 + 1030.0 * (-r2).exp()
            })
            .collect()
    }

    #[test]
    fn identity_transform_is_exact() {
        let img = smooth_image(32);
        let out = transform(&img, 32, 32, 0.0, 1.0, false);
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mirror_twice_is_exact_identity() {
        let img = smooth_image(32);
        let once = transform(&img, 32, 32, 0.0, 1.0, true);
        let twice = transform(&once, 32, 32, 0.0, 1.0, true);
        assert_eq!(img, twice);
    }

    #[test]
    fn rotate_there_and_back_stays_within_resampling_error() {
        // RMS over the head region (central disk); corners compare fill
        // against fill and would only measure the out-of-frame policy
        let n = 64usize;
        let img = smooth_image(n);
        let theta = 10f32.to_radians();
        let there = transform(&img, n, n, theta, 1.0, false);
        let back = transform(&there, n, n, -theta, 1.0, false);
        let c = (n as f32 - 1.0) * 0.5;
        let mut se = 0.0f64;
        let mut count = 0usize;
        for y in 0..n {
            for x in 0..n {
                let r2 = (x as f32 - c).powi(2) + (y as f32 - c).powi(2);
                if r2.sqrt() < 0.42 * n as f32 {
                    let d = (img[y * n + x] - back[y * n + x]) as f64;
                    se += d * d;
                    count += 1;
                }
            }
        }
        let rms = (se / count as f64).sqrt();
        assert!(rms < 2.0, "double-resample RMS {rms} HU exceeds 2 HU");
    }

    #[test]
    fn scaling_down_shrinks_the_blob() {
        let img = smooth_image(64);
        let shrunk = transform(&img, 64, 64, 0.0, 0.9, false);
        let bright = |v: &[f32]| v.iter().filter(|&&h| h > -500.0).count();
        assert!(bright(&shrunk) < bright(&img));
    }
}
