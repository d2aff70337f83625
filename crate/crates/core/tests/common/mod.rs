#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectral_optim::{Image, Kernel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, p: usize, q: usize) -> Image {
    Image::new(Array2::from_shape_fn((p, q), |_| rng.random_range(-1.0..1.0))).unwrap()
}

pub fn random_kernel(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Kernel {
    Kernel::new(Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0))).unwrap()
}

/// Textbook valid convolution: output `(i, j)` sees `N[i..i+m][j..j+n]`
/// weighted by the kernel rotated by 180 degrees.
pub fn naive_valid_convolution(img: &Image, k: &Kernel) -> Array2<f64> {
    let (p, q) = img.shape().dims();
    let (m, n) = k.dims();
    let src = img.as_array();
    let ker = k.as_array();
    Array2::from_shape_fn((p - m + 1, q - n + 1), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..m {
            for b in 0..n {
                acc += ker[[a, b]] * src[[i + m - 1 - a, j + n - 1 - b]];
            }
        }
        acc
    })
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
