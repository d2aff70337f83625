//! Direct spatial-domain circular convolution and its adjoint.
//!
//! `O(p q m n)` loops with no transforms involved. Used where an evaluation
//! route independent of the FFT is wanted (gradient checks, iterative
//! baselines).

use ndarray::Array2;

use crate::error::Result;
use crate::kernel::{flip, Kernel};
use crate::spectral::Image;

/// `R[i][j] = sum flip(k)[r][c] * N[(i + r) mod p][(j + c) mod q]`.
pub fn convolve_direct(img: &Image, k: &Kernel) -> Result<Image> {
    let shape = img.shape();
    k.check_fits(shape)?;
    let (p, q) = shape.dims();
    let k_f = flip(k);
    let src = img.as_array();
    let mut out = Array2::zeros((p, q));
    for ((r, c), &w) in k_f.as_array().indexed_iter() {
        if w == 0.0 {
            continue;
        }
        for i in 0..p {
            let si = (i + r) % p;
            for j in 0..q {
                out[[i, j]] += w * src[[si, (j + c) % q]];
            }
        }
    }
    Ok(Image::from_array_unchecked(out))
}

/// Transpose of [`convolve_direct`]:
/// `(A^T v)[i][j] = sum flip(k)[r][c] * v[(i - r) mod p][(j - c) mod q]`.
pub fn convolve_adjoint_direct(img: &Image, k: &Kernel) -> Result<Image> {
    let shape = img.shape();
    k.check_fits(shape)?;
    let (p, q) = shape.dims();
    let k_f = flip(k);
    let src = img.as_array();
    let mut out = Array2::zeros((p, q));
    for ((r, c), &w) in k_f.as_array().indexed_iter() {
        if w == 0.0 {
            continue;
        }
        for i in 0..p {
            let si = (i + p - r) % p;
            for j in 0..q {
                out[[i, j]] += w * src[[si, (j + q - c) % q]];
            }
        }
    }
    Ok(Image::from_array_unchecked(out))
}
