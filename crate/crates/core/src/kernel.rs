//! Convolution kernels and their Fourier-side representation.
//!
//! Kernels are anchored at their top-left element: convolving an image `N`
//! with an `m x n` kernel `k` yields
//!
//! ```text
//! R[i][j] = sum_{r,c} flip(k)[r][c] * N[(i + r) mod p][(j + c) mod q]
//! ```
//!
//! so the top-left `(p - m + 1) x (q - n + 1)` block of `R` is the valid
//! convolution and the remaining rows/columns carry the circular wraparound.
//! No center shift is applied; a centered blur is therefore translated by
//! `((m - 1) / 2, (n - 1) / 2)` relative to a center-anchored convention.

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{fft2_leading_rows, Direction};

/// Number of rows and columns of an image grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub rows: usize,
    pub cols: usize,
}

impl ImageShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyGrid(rows, cols));
        }
        Ok(Self { rows, cols })
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// A small real-valued convolution kernel (the PSF of a blur, or a finite
/// difference operator).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    data: Array2<f64>,
}

impl Kernel {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (m, n) = data.dim();
        if m == 0 || n == 0 {
            return Err(Error::EmptyGrid(m, n));
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// Builds a kernel from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.as_ref().len());
        if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != n) {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: bad.as_ref().len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        let data = Array2::from_shape_vec((m, n), flat).map_err(|_| Error::EmptyGrid(m, n))?;
        Self::new(data)
    }

    /// The 1x1 unit kernel; convolution with it is the identity.
    pub fn identity() -> Self {
        Self {
            data: Array2::ones((1, 1)),
        }
    }

    /// Horizontal forward difference `[-1 1]`.
    pub fn gradient_x() -> Self {
        Self {
            data: ndarray::arr2(&[[-1.0, 1.0]]),
        }
    }

    /// Vertical forward difference `[-1 1]^T`.
    pub fn gradient_y() -> Self {
        Self {
            data: ndarray::arr2(&[[-1.0], [1.0]]),
        }
    }

    /// Normalized `size x size` Gaussian with standard deviation `sigma`
    /// (in pixels), centered on the middle of the grid.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyGrid(size, size));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        let center = (size as f64 - 1.0) / 2.0;
        let mut data = Array2::from_shape_fn((size, size), |(r, c)| {
            let dy = r as f64 - center;
            let dx = c as f64 - center;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        });
        let total = data.sum();
        data /= total;
        Ok(Self { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.sum()
    }

    pub fn fits(&self, shape: ImageShape) -> bool {
        self.rows() <= shape.rows && self.cols() <= shape.cols
    }

    pub(crate) fn check_fits(&self, shape: ImageShape) -> Result<()> {
        if self.fits(shape) {
            Ok(())
        } else {
            Err(Error::KernelTooLarge {
                kernel: self.dims(),
                image: shape.dims(),
            })
        }
    }

    /// `a * self + b * other`, for kernels of identical shape.
    pub fn linear_combination(&self, a: f64, other: &Kernel, b: f64) -> Result<Kernel> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Kernel::new(&self.data * a + &other.data * b)
    }
}

/// Optical transfer function: the per-frequency gain of circular convolution
/// with a kernel on a fixed image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Otf {
    data: Array2<Complex64>,
}

impl Otf {
    pub fn shape(&self) -> ImageShape {
        let (rows, cols) = self.data.dim();
        ImageShape { rows, cols }
    }

    pub fn as_array(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<Complex64> {
        self.data
    }

    /// Gain at frequency (0, 0); equals the kernel sum.
    pub fn dc(&self) -> Complex64 {
        self.data[[0, 0]]
    }
}

/// Rotates the kernel by 180 degrees.
pub fn flip(k: &Kernel) -> Kernel {
    let (m, n) = k.dims();
    Kernel {
        data: Array2::from_shape_fn((m, n), |(i, j)| k.data[[m - 1 - i, n - 1 - j]]),
    }
}

/// Unrolls a (flipped) kernel into a zero vector of length `p * q`, row `r`
/// starting at offset `r * q`.
pub fn embed(k_f: &Kernel, shape: ImageShape) -> Result<Array1<f64>> {
    k_f.check_fits(shape)?;
    let mut out = Array1::zeros(shape.n_pixels());
    for ((r, c), &v) in k_f.data.indexed_iter() {
        out[r * shape.cols + c] = v;
    }
    Ok(out)
}

/// Computes the OTF of `k` for images of the given shape.
///
/// The result is the diagonal of `F circ2(k') F^-1`, where `k'` is
/// `embed(flip(k))` and `F` the unnormalized 2D DFT, so that
/// `dft2(convolve_circular(N, k)) == otf .* dft2(N)`. For a real kernel this
/// is the complex conjugate of the DFT of the zero-padded flipped kernel.
pub fn psf_to_otf(k: &Kernel, shape: ImageShape) -> Result<Otf> {
    k.check_fits(shape)?;
    let k_f = flip(k);
    let mut buf = vec![Complex64::new(0.0, 0.0); shape.n_pixels()];
    for ((r, c), &v) in k_f.data.indexed_iter() {
        buf[r * shape.cols + c] = Complex64::new(v, 0.0);
    }
    fft2_leading_rows(&mut buf, shape.rows, shape.cols, k.rows(), Direction::Forward);
    for z in &mut buf {
        *z = z.conj();
    }
    let data = Array2::from_shape_vec(shape.dims(), buf).expect("buffer matches shape");
    Ok(Otf { data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn shape(p: usize, q: usize) -> ImageShape {
        ImageShape::new(p, q).unwrap()
    }

    #[test]
    fn flip_examples() {
        let k = Kernel::from_rows(&[[-1.0, -2.0], [-3.0, -4.0]]).unwrap();
        assert_eq!(flip(&k).as_array(), &arr2(&[[-4.0, -3.0], [-2.0, -1.0]]));
        let one = Kernel::from_rows(&[[5.0]]).unwrap();
        assert_eq!(flip(&one), one);
        assert_eq!(
            flip(&Kernel::gradient_x()).as_array(),
            &arr2(&[[1.0, -1.0]])
        );
    }

    #[test]
    fn embed_examples() {
        let k_f = Kernel::from_rows(&[[1.0, -1.0]]).unwrap();
        let v = embed(&k_f, shape(3, 4)).unwrap();
        let mut expected = vec![0.0; 12];
        expected[0] = 1.0;
        expected[1] = -1.0;
        assert_eq!(v.to_vec(), expected);

        let k_f = Kernel::from_rows(&[[-4.0, -3.0], [-2.0, -1.0]]).unwrap();
        let v = embed(&k_f, shape(3, 4)).unwrap();
        assert_eq!(
            v.to_vec(),
            vec![-4.0, -3.0, 0.0, 0.0, -2.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );

        let k_f = Kernel::from_rows(&[[7.0]]).unwrap();
        assert_eq!(embed(&k_f, shape(2, 2)).unwrap().to_vec(), vec![7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_rejects_oversized_kernel() {
        let k = Kernel::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            embed(&k, shape(4, 2)),
            Err(Error::KernelTooLarge { .. })
        ));
        let tall = Kernel::gradient_y();
        assert!(matches!(
            psf_to_otf(&tall, shape(1, 5)),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn delta_kernel_has_unit_otf() {
        let otf = psf_to_otf(&Kernel::identity(), shape(3, 5)).unwrap();
        for z in otf.as_array() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn gradient_kernel_has_zero_dc() {
        let otf = psf_to_otf(&Kernel::gradient_x(), shape(3, 4)).unwrap();
        assert_eq!(otf.shape(), shape(3, 4));
        assert!(otf.dc().norm() < 1e-12);
    }

    #[test]
    fn otf_dc_is_kernel_sum() {
        let k = Kernel::from_rows(&[[0.3, -1.2, 2.0], [4.5, 0.1, -0.7]]).unwrap();
        let otf = psf_to_otf(&k, shape(5, 4)).unwrap();
        assert!((otf.dc() - Complex64::new(k.sum(), 0.0)).norm() < 1e-12);
    }

    #[test]
    fn invalid_kernels_are_rejected() {
        assert!(Kernel::new(Array2::zeros((0, 3))).is_err());
        assert!(matches!(
            Kernel::from_rows(&[[1.0, f64::NAN]]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(Kernel::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(Kernel::gaussian(3, 0.0).is_err());
        assert!(ImageShape::new(0, 3).is_err());
    }

    #[test]
    fn gaussian_is_normalized_and_symmetric() {
        let g = Kernel::gaussian(5, 1.5).unwrap();
        assert!((g.sum() - 1.0).abs() < 1e-14);
        assert_eq!(flip(&g).as_array(), g.as_array());
    }
}
