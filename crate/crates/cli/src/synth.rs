//! Synthetic demo inputs: the 3x4 numbered grid, a piecewise-smooth "sharp"
//! scene, its blurred noisy NIR counterpart and an RGB guide.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spectral_optim::imageio::{RgbImage, LUMA_WEIGHTS};
use spectral_optim::{convolve_circular, Image, Kernel};

/// The grid `1..=12` laid out as 3 rows of 4.
pub fn demo_grid() -> Image {
    Image::new(Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j + 1) as f64)).unwrap()
}

/// Rectangles, disks, a ramp and a stripe patch on a flat background.
/// Values stay in `[0.1, 0.9]`.
pub fn sharp_image(p: usize, q: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array2::from_elem((p, q), 0.3);
    let (pf, qf) = (p as f64, q as f64);

    for ((i, j), v) in img.indexed_iter_mut() {
        if i >= p * 3 / 4 {
            *v = 0.1 + 0.8 * j as f64 / qf.max(1.0);
        }
    }
    for _ in 0..6 {
        let h = rng.random_range(0.1..0.35) * pf;
        let w = rng.random_range(0.1..0.35) * qf;
        let top = rng.random_range(0.0..0.7) * pf;
        let left = rng.random_range(0.0..0.7) * qf;
        let level = rng.random_range(0.1..0.9);
        for ((i, j), v) in img.indexed_iter_mut() {
            let (y, x) = (i as f64, j as f64);
            if y >= top && y < top + h && x >= left && x < left + w {
                *v = level;
            }
        }
    }
    for _ in 0..4 {
        let cy = rng.random_range(0.1..0.9) * pf;
        let cx = rng.random_range(0.1..0.9) * qf;
        let r = rng.random_range(0.04..0.15) * pf.min(qf);
        let level = rng.random_range(0.1..0.9);
        for ((i, j), v) in img.indexed_iter_mut() {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            if dy * dy + dx * dx <= r * r {
                *v = level;
            }
        }
    }
    let period = (q / 16).max(2);
    for ((i, j), v) in img.indexed_iter_mut() {
        if i < p / 5 && j >= q * 3 / 5 {
            *v = if (j / period) % 2 == 0 { 0.85 } else { 0.15 };
        }
    }
    Image::new(img).unwrap()
}

/// Circular blur by `kernel` plus i.i.d. Gaussian noise of std `noise_sigma`.
/// No clipping is applied.
pub fn blur_with_noise(sharp: &Image, kernel: &Kernel, noise_sigma: f64, seed: u64) -> anyhow::Result<Image> {
    let blurred = convolve_circular(sharp, kernel)?;
    if noise_sigma == 0.0 {
        return Ok(blurred);
    }
    let normal = Normal::new(0.0, noise_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = blurred.as_array().mapv(|v| v + normal.sample(&mut rng));
    Ok(Image::new(noisy)?)
}

/// An RGB image whose luminance is exactly `gray`: small chroma offsets on R
/// and B are compensated on G.
pub fn rgb_guide(gray: &Image, seed: u64) -> anyhow::Result<RgbImage> {
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tr, tb) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let (p, q) = gray.shape().dims();
    let y = gray.as_array();
    let mut r = Array2::zeros((p, q));
    let mut g = Array2::zeros((p, q));
    let mut b = Array2::zeros((p, q));
    for ((i, j), &v) in y.indexed_iter() {
        // offsets fade out near the range ends so all channels stay in [0, 1]
        let room = (v.min(1.0 - v) / 0.1).clamp(0.0, 1.0);
        let dr = tr * room;
        let db = tb * room;
        r[[i, j]] = v + dr;
        b[[i, j]] = v + db;
        g[[i, j]] = v - (wr * dr + wb * db) / wg;
    }
    Ok(RgbImage::new(Image::new(r)?, Image::new(g)?, Image::new(b)?)?)
}

/// Peak signal-to-noise ratio in dB for signals with peak 1.
pub fn psnr(estimate: &Image, reference: &Image) -> f64 {
    let n = reference.shape().n_pixels() as f64;
    let mse = estimate
        .as_array()
        .iter()
        .zip(reference.as_array().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spectral_optim::imageio::luminance;

    #[test]
    fn grid_counts_row_major() {
        let g = demo_grid();
        assert_eq!(g.as_array()[[0, 0]], 1.0);
        assert_eq!(g.as_array()[[1, 0]], 5.0);
        assert_eq!(g.as_array()[[2, 3]], 12.0);
    }

    #[test]
    fn sharp_image_is_deterministic_and_in_range() {
        let a = sharp_image(40, 50, 7);
        assert_eq!(a, sharp_image(40, 50, 7));
        assert_ne!(a, sharp_image(40, 50, 8));
        assert!(a.as_array().iter().all(|&v| (0.1..=0.9).contains(&v)));
    }

    #[test]
    fn guide_luminance_is_the_gray_image() {
        let s = sharp_image(32, 32, 1);
        let rgb = rgb_guide(&s, 2).unwrap();
        assert!(luminance(&rgb).max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn noise_has_requested_scale() {
        let s = sharp_image(64, 64, 3);
        let k = Kernel::identity();
        let noisy = blur_with_noise(&s, &k, 0.01, 4).unwrap();
        let rms = (s.as_array() - noisy.as_array()).mapv(|v| v * v).mean().unwrap().sqrt();
        assert!((rms - 0.01).abs() < 1e-3);
        assert!((psnr(&noisy, &s) - 40.0).abs() < 0.5);
    }
}
