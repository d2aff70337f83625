//! Fourier-domain convolution and deconvolution.
//!
//! The forward DFT is unnormalized and the inverse carries the `1/(p*q)`
//! factor, so that the convolution theorem reads
//! `dft2(convolve_circular(N, k)) == psf_to_otf(k) .* dft2(N)` with no extra
//! scale. Transforms accept any size; `rustfft` picks mixed-radix, Rader or
//! Bluestein plans so composite and prime lengths all stay `O(n log n)`.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::kernel::{psf_to_otf, ImageShape, Kernel, Otf};

/// Ratio of the largest imaginary part to the largest real part above which
/// an inverse transform is rejected as coming from a non-Hermitian spectrum.
pub const IMAG_RESIDUAL_TOLERANCE: f64 = 1e-6;

/// Default singular-bin threshold, relative to the largest denominator.
pub const DEFAULT_RELATIVE_EPS: f64 = 1e-12;

// Below this many samples the row passes run on the calling thread.
const PARALLEL_MIN_LEN: usize = 1 << 15;

/// A single-channel real image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array2<f64>,
}

impl Image {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (p, q) = data.dim();
        if p == 0 || q == 0 {
            return Err(Error::EmptyGrid(p, q));
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            data: Array2::zeros(shape.dims()),
        }
    }

    pub fn filled(shape: ImageShape, value: f64) -> Self {
        Self {
            data: Array2::from_elem(shape.dims(), value),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let p = rows.len();
        let q = rows.first().map_or(0, |r| r.as_ref().len());
        if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != q) {
            return Err(Error::LengthMismatch {
                expected: q,
                actual: bad.as_ref().len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(Array2::from_shape_vec((p, q), flat).map_err(|_| Error::EmptyGrid(p, q))?)
    }

    // Callers guarantee finiteness and a standard layout.
    pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
        debug_assert!(data.is_standard_layout());
        Self { data }
    }

    pub fn shape(&self) -> ImageShape {
        let (rows, cols) = self.data.dim();
        ImageShape { rows, cols }
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute pixel difference to `other`.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub(crate) fn check_shape(&self, shape: ImageShape) -> Result<()> {
        if self.shape() == shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: shape.dims(),
                actual: self.shape().dims(),
            })
        }
    }
}

/// Complex 2D spectrum of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    data: Array2<Complex64>,
}

impl Spectrum {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        let (p, q) = data.dim();
        if p == 0 || q == 0 {
            return Err(Error::EmptyGrid(p, q));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

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
}

/// Real part of an inverse transform together with the largest imaginary
/// magnitude that was discarded.
#[derive(Debug, Clone)]
pub struct RealInverse {
    pub image: Image,
    pub max_imag_residual: f64,
}

/// Output of [`deconvolve`].
#[derive(Debug, Clone)]
pub struct Deconvolved {
    pub image: Image,
    /// Frequency bins whose output was set to zero by the singular-bin policy.
    pub zeroed_bins: usize,
    pub dc_zeroed: bool,
}

/// Threshold below which a frequency-domain denominator is treated as zero.
///
/// Such bins get a zero output spectrum (pseudo-inverse), which for zero-sum
/// kernels selects the zero-mean member of the constant-shift null space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinThreshold {
    /// Fraction of the largest denominator magnitude.
    Relative(f64),
    Absolute(f64),
}

impl Default for BinThreshold {
    fn default() -> Self {
        BinThreshold::Relative(DEFAULT_RELATIVE_EPS)
    }
}

impl BinThreshold {
    pub fn resolve(&self, max_denominator: f64) -> f64 {
        match *self {
            BinThreshold::Relative(r) => r * max_denominator,
            BinThreshold::Absolute(a) => a,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let v = match *self {
            BinThreshold::Relative(v) | BinThreshold::Absolute(v) => v,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "bin threshold must be finite and nonnegative, got {v}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Forward,
    Inverse,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: Direction) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        match direction {
            Direction::Forward => p.plan_fft_forward(len),
            Direction::Inverse => p.plan_fft_inverse(len),
        }
    })
}

fn fft_rows(buf: &mut [Complex64], len: usize, direction: Direction) {
    if len <= 1 {
        return;
    }
    let fft = plan(len, direction);
    let scratch_len = fft.get_inplace_scratch_len();
    if buf.len() >= PARALLEL_MIN_LEN && rayon::current_num_threads() > 1 {
        let rows = buf.len() / len;
        let rows_per_task = rows.div_ceil(rayon::current_num_threads() * 4).max(1);
        buf.par_chunks_mut(rows_per_task * len).for_each_init(
            || vec![Complex64::new(0.0, 0.0); scratch_len],
            |scratch, chunk| fft.process_with_scratch(chunk, scratch),
        );
    } else {
        let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
        fft.process_with_scratch(buf, &mut scratch);
    }
}

/// Columns transformed together in the column pass. A strip of a few
/// columns stays in cache while its FFTs run.
const STRIP: usize = 8;

fn gather_strip(buf: &[Complex64], cols: usize, c0: usize, width: usize, strip: &mut [Complex64]) {
    let rows = buf.len() / cols;
    for r in 0..rows {
        let row = &buf[r * cols + c0..r * cols + c0 + width];
        for (j, &v) in row.iter().enumerate() {
            strip[j * rows + r] = v;
        }
    }
}

fn scatter_strip(strip: &[Complex64], cols: usize, c0: usize, width: usize, buf: &mut [Complex64]) {
    let rows = buf.len() / cols;
    for r in 0..rows {
        let row = &mut buf[r * cols + c0..r * cols + c0 + width];
        for (j, v) in row.iter_mut().enumerate() {
            *v = strip[j * rows + r];
        }
    }
}

fn fft_columns(buf: &mut [Complex64], rows: usize, cols: usize, direction: Direction) {
    if rows <= 1 {
        return;
    }
    if cols == 1 {
        fft_rows(buf, rows, direction);
        return;
    }
    let fft = plan(rows, direction);
    let scratch_len = fft.get_inplace_scratch_len();
    let zero = Complex64::new(0.0, 0.0);
    if buf.len() >= PARALLEL_MIN_LEN && rayon::current_num_threads() > 1 {
        let starts: Vec<usize> = (0..cols).step_by(STRIP).collect();
        let src: &[Complex64] = buf;
        let strips: Vec<Vec<Complex64>> = starts
            .par_iter()
            .map_init(
                || vec![zero; scratch_len],
                |scratch, &c0| {
                    let width = STRIP.min(cols - c0);
                    let mut strip = vec![zero; width * rows];
                    gather_strip(src, cols, c0, width, &mut strip);
                    fft.process_with_scratch(&mut strip, scratch);
                    strip
                },
            )
            .collect();
        for (&c0, strip) in starts.iter().zip(&strips) {
            scatter_strip(strip, cols, c0, STRIP.min(cols - c0), buf);
        }
    } else {
        let mut strip = vec![zero; STRIP * rows];
        let mut scratch = vec![zero; scratch_len];
        for c0 in (0..cols).step_by(STRIP) {
            let width = STRIP.min(cols - c0);
            let strip = &mut strip[..width * rows];
            gather_strip(buf, cols, c0, width, strip);
            fft.process_with_scratch(strip, &mut scratch);
            scatter_strip(strip, cols, c0, width, buf);
        }
    }
}

/// Unnormalized 2D DFT of a row-major `rows x cols` buffer, in place.
pub(crate) fn fft2_in_place(buf: &mut [Complex64], rows: usize, cols: usize, direction: Direction) {
    fft2_leading_rows(buf, rows, cols, rows, direction);
}

/// As [`fft2_in_place`], for a buffer whose rows from `nonzero_rows` on are
/// known to be zero (their row transforms are skipped).
pub(crate) fn fft2_leading_rows(
    buf: &mut [Complex64],
    rows: usize,
    cols: usize,
    nonzero_rows: usize,
    direction: Direction,
) {
    debug_assert_eq!(buf.len(), rows * cols);
    let nonzero_rows = nonzero_rows.min(rows);
    fft_rows(&mut buf[..nonzero_rows * cols], cols, direction);
    fft_columns(buf, rows, cols, direction);
}

/// Forward 2D DFT.
pub fn dft2(img: &Image) -> Spectrum {
    let shape = img.shape();
    let mut buf: Vec<Complex64> = img.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, shape.rows, shape.cols, Direction::Forward);
    Spectrum {
        data: Array2::from_shape_vec(shape.dims(), buf).expect("buffer matches shape"),
    }
}

/// Inverse 2D DFT of a spectrum that is expected to come from a real image.
pub fn idft2(s: &Spectrum) -> Result<RealInverse> {
    let shape = s.shape();
    let max_in = s.data.iter().fold(0.0_f64, |m, z| m.max(z.norm_sqr())).sqrt();
    let mut buf: Vec<Complex64> = s.data.iter().copied().collect();
    fft2_in_place(&mut buf, shape.rows, shape.cols, Direction::Inverse);
    let scale = 1.0 / shape.n_pixels() as f64;
    let mut max_real = 0.0_f64;
    let mut max_imag = 0.0_f64;
    let real: Vec<f64> = buf
        .iter()
        .map(|z| {
            let re = z.re * scale;
            max_real = max_real.max(re.abs());
            max_imag = max_imag.max((z.im * scale).abs());
            re
        })
        .collect();
    // Floor at rounding level so an all-zero output does not trip the check.
    let tolerance = (IMAG_RESIDUAL_TOLERANCE * max_real).max(64.0 * f64::EPSILON * max_in);
    if !(max_imag <= tolerance) {
        return Err(Error::ImaginaryResidualTooLarge {
            residual: max_imag,
            tolerance,
        });
    }
    if let Some(i) = real.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i / shape.cols,
            col: i % shape.cols,
        });
    }
    Ok(RealInverse {
        image: Image::from_array_unchecked(
            Array2::from_shape_vec(shape.dims(), real).expect("buffer matches shape"),
        ),
        max_imag_residual: max_imag,
    })
}

/// Pointwise product of an OTF with a spectrum of the same shape.
pub fn apply_otf(otf: &Otf, s: &Spectrum) -> Result<Spectrum> {
    if otf.shape() != s.shape() {
        return Err(Error::ShapeMismatch {
            expected: otf.shape().dims(),
            actual: s.shape().dims(),
        });
    }
    Ok(Spectrum {
        data: otf.as_array() * &s.data,
    })
}

/// Circular (periodic-boundary) convolution computed in the Fourier domain.
pub fn convolve_circular(img: &Image, k: &Kernel) -> Result<Image> {
    let otf = psf_to_otf(k, img.shape())?;
    Ok(idft2(&apply_otf(&otf, &dft2(img))?)?.image)
}

/// Inverts a circular convolution by pointwise division in the Fourier
/// domain. Bins with `|OTF| <= eps` are set to zero.
pub fn deconvolve(r: &Image, k: &Kernel, threshold: BinThreshold) -> Result<Deconvolved> {
    threshold.validate()?;
    let otf = psf_to_otf(k, r.shape())?;
    let max_gain = otf.as_array().iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    let eps = threshold.resolve(max_gain);
    let mut spectrum = dft2(r).into_array();
    let mut zeroed = 0;
    for (out, gain) in spectrum.iter_mut().zip(otf.as_array().iter()) {
        if gain.norm() <= eps {
            *out = Complex64::new(0.0, 0.0);
            zeroed += 1;
        } else {
            *out /= gain;
        }
    }
    if zeroed == spectrum.len() {
        return Err(Error::AllBinsSingular);
    }
    let dc_zeroed = otf.dc().norm() <= eps;
    let image = idft2(&Spectrum { data: spectrum })?.image;
    Ok(Deconvolved {
        image,
        zeroed_bins: zeroed,
        dc_zeroed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, p: usize, q: usize) -> Image {
        Image::new(Array2::from_shape_fn((p, q), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn zeros_transform_to_zeros() {
        let img = Image::zeros(ImageShape::new(3, 5).unwrap());
        assert!(dft2(&img).as_array().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn single_pixel_transform_is_identity() {
        let img = Image::from_rows(&[[2.5]]).unwrap();
        let s = dft2(&img);
        assert_eq!(s.as_array()[[0, 0]], Complex64::new(2.5, 0.0));
        assert_eq!(idft2(&s).unwrap().image, img);
    }

    #[test]
    fn roundtrip_on_odd_and_prime_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (p, q) in [(4, 6), (7, 13), (1, 11), (9, 1), (17, 10)] {
            let img = random_image(&mut rng, p, q);
            let back = idft2(&dft2(&img)).unwrap();
            assert!(back.image.max_abs_diff(&img) <= 1e-10 * img.max_abs());
            assert!(back.max_imag_residual < 1e-12);
        }
    }

    #[test]
    fn parallel_path_matches_single_threaded_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 256, 160);
        let s = dft2(&img);
        let mut reference: Vec<Complex64> =
            img.as_array().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        pool.install(|| fft2_in_place(&mut reference, 256, 160, Direction::Forward));
        assert!(s.as_array().iter().zip(&reference).all(|(a, b)| a == b));
    }

    #[test]
    fn non_hermitian_spectrum_is_rejected() {
        let mut data = Array2::zeros((2, 3));
        data[[0, 1]] = Complex64::new(0.0, 1.0);
        let s = Spectrum::new(data).unwrap();
        assert!(matches!(
            idft2(&s),
            Err(Error::ImaginaryResidualTooLarge { .. })
        ));
    }

    #[test]
    fn gradient_on_symbolic_grid_wraps_within_rows() {
        // numbers 1..12 stand in for a1..d3
        let n = Image::from_rows(&[
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
        ])
        .unwrap();
        let r = convolve_circular(&n, &Kernel::gradient_x()).unwrap();
        let expected = arr2(&[
            [-1.0, -1.0, -1.0, 3.0],
            [-1.0, -1.0, -1.0, 3.0],
            [-1.0, -1.0, -1.0, 3.0],
        ]);
        assert!(r.as_array().iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn identity_kernel_convolution_and_deconvolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, 5, 7);
        let c = convolve_circular(&img, &Kernel::identity()).unwrap();
        assert!(c.max_abs_diff(&img) < 1e-14);
        let d = deconvolve(&img, &Kernel::identity(), BinThreshold::default()).unwrap();
        assert!(d.image.max_abs_diff(&img) < 1e-14);
        assert_eq!(d.zeroed_bins, 0);
    }

    #[test]
    fn gaussian_roundtrip_recovers_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Kernel::gaussian(3, 0.7).unwrap();
        let img = random_image(&mut rng, 16, 16);
        let blurred = convolve_circular(&img, &k).unwrap();
        let d = deconvolve(&blurred, &k, BinThreshold::default()).unwrap();
        assert_eq!(d.zeroed_bins, 0);
        assert!(d.image.max_abs_diff(&img) < 1e-8);
    }

    #[test]
    fn gradient_deconvolution_is_zero_mean_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random_image(&mut rng, 6, 8);
        let base = deconvolve(&r, &Kernel::gradient_x(), BinThreshold::default()).unwrap();
        assert!(base.dc_zeroed);
        assert!(base.zeroed_bins >= 1);
        assert!(base.image.mean().abs() < 1e-12);
        for c in [-3.0, 0.25, 40.0] {
            let shifted = Image::new(r.as_array() + c).unwrap();
            let d = deconvolve(&shifted, &Kernel::gradient_x(), BinThreshold::default()).unwrap();
            assert!(d.image.max_abs_diff(&base.image) < 1e-10);
        }
    }

    #[test]
    fn all_singular_bins_is_an_error() {
        let zero = Kernel::from_rows(&[[0.0, 0.0]]).unwrap();
        let img = Image::filled(ImageShape::new(2, 2).unwrap(), 1.0);
        assert!(matches!(
            deconvolve(&img, &zero, BinThreshold::default()),
            Err(Error::AllBinsSingular)
        ));
        assert!(matches!(
            deconvolve(&img, &Kernel::identity(), BinThreshold::Absolute(2.0)),
            Err(Error::AllBinsSingular)
        ));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let img = Image::zeros(ImageShape::new(2, 2).unwrap());
        let k = Kernel::gaussian(3, 1.0).unwrap();
        assert!(matches!(
            convolve_circular(&img, &k),
            Err(Error::KernelTooLarge { .. })
        ));
    }
}
