//! Closed-form minimization of sums of quadratic convolution losses.
//!
//! A problem is a list of terms `(k_i, G_i, w_i)` with loss
//!
//! ```text
//! L(N) = sum_i w_i * ||G_i - k_i * N||_F^2
//! ```
//!
//! Setting the gradient to zero gives normal equations whose matrix is a sum
//! of products of circulant matrices, hence diagonal in the Fourier domain:
//!
//! ```text
//! dft2(N) = sum_i w_i conj(K_i) .* dft2(G_i)  ./  sum_i w_i |K_i|^2
//! ```
//!
//! with `K_i` the OTF of `k_i`. Bins where the denominator falls below the
//! singular-bin threshold are set to zero, which for zero-sum kernels picks
//! the zero-mean minimizer out of the constant-shift family.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernel::{psf_to_otf, ImageShape, Kernel};
use crate::spatial::{convolve_adjoint_direct, convolve_direct};
use crate::spectral::{apply_otf, dft2, idft2, BinThreshold, Image, Spectrum};

/// One summand `weight * ||guide - kernel * N||_F^2`.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub kernel: Kernel,
    pub guide: Image,
    pub weight: f64,
}

impl LossTerm {
    pub fn new(kernel: Kernel, guide: Image, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidWeight(weight));
        }
        kernel.check_fits(guide.shape())?;
        Ok(Self {
            kernel,
            guide,
            weight,
        })
    }
}

#[derive(Debug, Clone)]
pub struct QuadProblem {
    terms: Vec<LossTerm>,
    shape: ImageShape,
}

impl QuadProblem {
    pub fn new(terms: Vec<LossTerm>) -> Result<Self> {
        let shape = terms.first().ok_or(Error::NoActiveTerms)?.guide.shape();
        for t in &terms {
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::InvalidWeight(t.weight));
            }
            t.guide.check_shape(shape)?;
            t.kernel.check_fits(shape)?;
        }
        if !terms.iter().any(|t| t.weight > 0.0) {
            return Err(Error::NoActiveTerms);
        }
        Ok(Self { terms, shape })
    }

    pub fn terms(&self) -> &[LossTerm] {
        &self.terms
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    /// Same problem with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let terms = self
            .terms
            .iter()
            .map(|t| LossTerm::new(t.kernel.clone(), t.guide.clone(), t.weight * factor))
            .collect::<Result<Vec<_>>>()?;
        Self::new(terms)
    }
}

#[derive(Debug, Clone)]
pub struct QuadSolution {
    pub image: Image,
    /// Bins handled by the singular-bin policy.
    pub zeroed_bins: usize,
    pub dc_zeroed: bool,
    pub loss_value: f64,
}

/// Accumulated numerator and denominator spectra of the normal equations.
///
/// Lets callers that re-solve with one changing term (half-quadratic
/// splitting) pay for the fixed terms once.
#[derive(Debug, Clone)]
pub struct SpectralSystem {
    numerator: Array2<Complex64>,
    denominator: Array2<f64>,
    /// `sum w_i ||G_i||_F^2`.
    guide_energy: f64,
}

/// Below this fraction of the guide energy the Parseval form of the optimal
/// loss loses too many digits to cancellation and the loss is re-evaluated
/// directly.
const PARSEVAL_MIN_FRACTION: f64 = 1e-5;

fn energy(img: &Image) -> f64 {
    img.as_array().iter().map(|v| v * v).sum()
}

impl SpectralSystem {
    pub fn new(shape: ImageShape) -> Self {
        Self {
            numerator: Array2::zeros(shape.dims()),
            denominator: Array2::zeros(shape.dims()),
            guide_energy: 0.0,
        }
    }

    pub fn from_terms(terms: &[LossTerm], shape: ImageShape) -> Result<Self> {
        let mut system = Self::new(shape);
        for t in terms {
            system.add_term(t)?;
        }
        Ok(system)
    }

    pub fn shape(&self) -> ImageShape {
        let (rows, cols) = self.denominator.dim();
        ImageShape { rows, cols }
    }

    pub fn add_term(&mut self, term: &LossTerm) -> Result<()> {
        let shape = self.shape();
        term.guide.check_shape(shape)?;
        if term.weight == 0.0 {
            return Ok(());
        }
        let otf = psf_to_otf(&term.kernel, shape)?;
        let guide = dft2(&term.guide);
        let w = term.weight;
        self.guide_energy += w * energy(&term.guide);
        ndarray::Zip::from(&mut self.numerator)
            .and(&mut self.denominator)
            .and(otf.as_array())
            .and(guide.as_array())
            .for_each(|num, den, k, g| {
                *num += k.conj() * g * w;
                *den += k.norm_sqr() * w;
            });
        Ok(())
    }

    /// Adds a term with the 1x1 unit kernel, whose OTF is identically one.
    pub fn add_identity_term(&mut self, guide: &Image, weight: f64) -> Result<()> {
        guide.check_shape(self.shape())?;
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidWeight(weight));
        }
        let g = dft2(guide);
        self.guide_energy += weight * energy(guide);
        ndarray::Zip::from(&mut self.numerator)
            .and(&mut self.denominator)
            .and(g.as_array())
            .for_each(|num, den, g| {
                *num += g * weight;
                *den += weight;
            });
        Ok(())
    }

    pub fn denominator(&self) -> &Array2<f64> {
        &self.denominator
    }

    /// Divides numerator by denominator and transforms back. Returns the
    /// image, the number of zeroed bins and whether the DC bin was zeroed.
    pub fn solve(&self, threshold: BinThreshold) -> Result<(Image, usize, bool)> {
        let s = self.solve_spectrum(threshold)?;
        let image = idft2(&Spectrum::new(s.spectrum)?)?.image;
        Ok((image, s.zeroed, s.dc_zeroed))
    }

    fn solve_spectrum(&self, threshold: BinThreshold) -> Result<SolvedSpectrum> {
        threshold.validate()?;
        let max_den = self.denominator.iter().fold(0.0_f64, |m, &d| m.max(d));
        let eps = threshold.resolve(max_den);
        let mut zeroed = 0;
        // sum over kept bins of |num|^2 / den, the energy explained by the fit
        let mut explained = 0.0;
        let mut out = self.numerator.clone();
        ndarray::Zip::from(&mut out)
            .and(&self.denominator)
            .for_each(|z, &d| {
                if d <= eps {
                    *z = Complex64::new(0.0, 0.0);
                    zeroed += 1;
                } else {
                    explained += z.norm_sqr() / d;
                    *z /= d;
                }
            });
        if zeroed == out.len() {
            return Err(Error::AllBinsSingular);
        }
        let n = out.len() as f64;
        Ok(SolvedSpectrum {
            spectrum: out,
            zeroed,
            dc_zeroed: self.denominator[[0, 0]] <= eps,
            optimal_loss: self.guide_energy - explained / n,
        })
    }
}

struct SolvedSpectrum {
    spectrum: Array2<Complex64>,
    zeroed: usize,
    dc_zeroed: bool,
    /// Loss at the returned spectrum by Parseval; subject to cancellation.
    optimal_loss: f64,
}

/// `sum w_i ||G_i - k_i * n||_F^2` for any term list (no activity check).
pub fn loss_of_terms(terms: &[LossTerm], n: &Image) -> Result<f64> {
    let mut total = 0.0;
    let mut spectrum = None;
    for t in terms {
        n.check_shape(t.guide.shape())?;
        if t.weight == 0.0 {
            continue;
        }
        let n_hat = spectrum.get_or_insert_with(|| dft2(n));
        let otf = psf_to_otf(&t.kernel, n.shape())?;
        let kn = idft2(&apply_otf(&otf, n_hat)?)?.image;
        let sq: f64 = t
            .guide
            .as_array()
            .iter()
            .zip(kn.as_array().iter())
            .map(|(g, v)| (g - v) * (g - v))
            .sum();
        total += t.weight * sq;
    }
    Ok(total)
}

pub fn evaluate_loss(problem: &QuadProblem, n: &Image) -> Result<f64> {
    n.check_shape(problem.shape)?;
    loss_of_terms(&problem.terms, n)
}

/// Closed-form minimizer with the default singular-bin threshold.
pub fn solve(problem: &QuadProblem) -> Result<QuadSolution> {
    solve_with(problem, BinThreshold::default())
}

pub fn solve_with(problem: &QuadProblem, threshold: BinThreshold) -> Result<QuadSolution> {
    let system = SpectralSystem::from_terms(&problem.terms, problem.shape)?;
    let solved = system.solve_spectrum(threshold)?;
    let image = idft2(&Spectrum::new(solved.spectrum)?)?.image;
    let loss_value = if solved.optimal_loss >= PARSEVAL_MIN_FRACTION * system.guide_energy {
        solved.optimal_loss
    } else {
        evaluate_loss(problem, &image)?
    };
    Ok(QuadSolution {
        image,
        zeroed_bins: solved.zeroed,
        dc_zeroed: solved.dc_zeroed,
        loss_value,
    })
}

/// `2 sum w_i A_i^T (A_i n - G_i)`, evaluated in the spatial domain.
pub fn analytic_gradient(terms: &[LossTerm], n: &Image) -> Result<Image> {
    let shape = n.shape();
    let mut grad = Array2::zeros(shape.dims());
    for t in terms {
        t.guide.check_shape(shape)?;
        if t.weight == 0.0 {
            continue;
        }
        let kn = convolve_direct(n, &t.kernel)?;
        let residual = Image::from_array_unchecked(kn.as_array() - t.guide.as_array());
        let back = convolve_adjoint_direct(&residual, &t.kernel)?;
        grad.scaled_add(2.0 * t.weight, back.as_array());
    }
    Ok(Image::from_array_unchecked(grad))
}

/// Outcome of comparing the analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    /// Largest analytic gradient magnitude over the whole image.
    pub max_abs_gradient: f64,
    /// Largest `|fd - analytic|` over the sampled pixels.
    pub max_abs_discrepancy: f64,
    /// `max_abs_discrepancy / (1 + max |analytic|)` over the sampled pixels.
    pub relative_discrepancy: f64,
    pub sampled: Vec<(usize, usize)>,
}

/// Number of pixels probed by [`gradient_check`].
pub const GRADIENT_CHECK_SAMPLES: usize = 10;

/// Compares the spatial-domain analytic gradient against central finite
/// differences of [`evaluate_loss`] (an FFT route) at up to ten pixels
/// chosen by `seed`.
pub fn gradient_check(problem: &QuadProblem, n: &Image, h: f64, seed: u64) -> Result<GradientCheck> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    n.check_shape(problem.shape)?;
    let grad = analytic_gradient(&problem.terms, n)?;
    let (p, q) = problem.shape.dims();
    let total = p * q;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled: Vec<(usize, usize)> = if total <= GRADIENT_CHECK_SAMPLES {
        (0..total).map(|i| (i / q, i % q)).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, GRADIENT_CHECK_SAMPLES)
            .into_iter()
            .map(|i| (i / q, i % q))
            .collect()
    };

    let mut max_abs_discrepancy = 0.0_f64;
    let mut max_sampled_grad = 0.0_f64;
    let mut probe = n.as_array().clone();
    for &(i, j) in &sampled {
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let up = evaluate_loss(problem, &Image::from_array_unchecked(probe.clone()))?;
        probe[[i, j]] = orig - h;
        let down = evaluate_loss(problem, &Image::from_array_unchecked(probe.clone()))?;
        probe[[i, j]] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grad.as_array()[[i, j]];
        max_abs_discrepancy = max_abs_discrepancy.max((fd - an).abs());
        max_sampled_grad = max_sampled_grad.max(an.abs());
    }
    Ok(GradientCheck {
        max_abs_gradient: grad.max_abs(),
        max_abs_discrepancy,
        relative_discrepancy: max_abs_discrepancy / (1.0 + max_sampled_grad),
        sampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn shape(p: usize, q: usize) -> ImageShape {
        ImageShape::new(p, q).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, p: usize, q: usize) -> Image {
        Image::new(Array2::from_shape_fn((p, q), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn loss_is_zero_at_guide_for_identity_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_image(&mut rng, 3, 4);
        let p = QuadProblem::new(vec![LossTerm::new(Kernel::identity(), g.clone(), 1.0).unwrap()])
            .unwrap();
        assert!(evaluate_loss(&p, &g).unwrap() < 1e-28);
    }

    #[test]
    fn loss_of_ones_against_zero_guide() {
        let p = QuadProblem::new(vec![
            LossTerm::new(Kernel::identity(), Image::zeros(shape(2, 2)), 1.0).unwrap(),
        ])
        .unwrap();
        let ones = Image::filled(shape(2, 2), 1.0);
        assert!((evaluate_loss(&p, &ones).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_identity_term_returns_guide() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_image(&mut rng, 5, 3);
        let p = QuadProblem::new(vec![LossTerm::new(Kernel::identity(), g.clone(), 0.3).unwrap()])
            .unwrap();
        let s = solve(&p).unwrap();
        assert!(s.image.max_abs_diff(&g) < 1e-14);
        assert_eq!(s.zeroed_bins, 0);
        assert!(s.loss_value < 1e-26);
    }

    #[test]
    fn reported_loss_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = random_image(&mut rng, 12, 10);
        let blur = Kernel::gaussian(3, 0.9).unwrap();
        let exact_fit = crate::spectral::convolve_circular(&target, &blur).unwrap();
        let noisy = QuadProblem::new(vec![
            LossTerm::new(blur.clone(), random_image(&mut rng, 12, 10), 1.0).unwrap(),
            LossTerm::new(Kernel::gradient_x(), random_image(&mut rng, 12, 10), 0.5).unwrap(),
        ])
        .unwrap();
        // the second problem is fit exactly, so the loss is pure rounding
        let fitted = QuadProblem::new(vec![LossTerm::new(blur, exact_fit, 1.0).unwrap()]).unwrap();
        for p in [noisy, fitted] {
            let s = solve(&p).unwrap();
            let direct = evaluate_loss(&p, &s.image).unwrap();
            assert!(s.loss_value >= 0.0);
            assert!((s.loss_value - direct).abs() <= 1e-9 * direct.max(1e-20), "{} vs {direct}", s.loss_value);
        }
    }

    #[test]
    fn two_identity_terms_give_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g1 = random_image(&mut rng, 4, 4);
        let g2 = random_image(&mut rng, 4, 4);
        let (w1, w2) = (0.25, 1.75);
        let p = QuadProblem::new(vec![
            LossTerm::new(Kernel::identity(), g1.clone(), w1).unwrap(),
            LossTerm::new(Kernel::identity(), g2.clone(), w2).unwrap(),
        ])
        .unwrap();
        let s = solve(&p).unwrap();
        let expected = (g1.as_array() * w1 + g2.as_array() * w2) / (w1 + w2);
        let expected = Image::new(expected).unwrap();
        assert!(s.image.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn problem_validation() {
        let g = Image::zeros(shape(2, 2));
        assert!(matches!(QuadProblem::new(vec![]), Err(Error::NoActiveTerms)));
        assert!(matches!(
            LossTerm::new(Kernel::identity(), g.clone(), -1.0),
            Err(Error::InvalidWeight(_))
        ));
        assert!(matches!(
            QuadProblem::new(vec![LossTerm::new(Kernel::identity(), g.clone(), 0.0).unwrap()]),
            Err(Error::NoActiveTerms)
        ));
        let other = Image::zeros(shape(3, 2));
        assert!(matches!(
            QuadProblem::new(vec![
                LossTerm::new(Kernel::identity(), g.clone(), 1.0).unwrap(),
                LossTerm::new(Kernel::identity(), other, 1.0).unwrap(),
            ]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            LossTerm::new(Kernel::gaussian(3, 1.0).unwrap(), g, 1.0),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn gradient_is_exactly_zero_at_identity_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_image(&mut rng, 4, 5);
        let p = QuadProblem::new(vec![LossTerm::new(Kernel::identity(), g.clone(), 2.0).unwrap()])
            .unwrap();
        let check = gradient_check(&p, &g, 1e-5, 0).unwrap();
        assert_eq!(check.max_abs_gradient, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences_off_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Kernel::from_rows(&[[0.2, -0.5, 1.0], [0.7, 0.3, -0.1]]).unwrap();
        let p = QuadProblem::new(vec![
            LossTerm::new(k, random_image(&mut rng, 6, 7), 0.8).unwrap(),
            LossTerm::new(Kernel::gradient_y(), random_image(&mut rng, 6, 7), 1.3).unwrap(),
        ])
        .unwrap();
        let n = random_image(&mut rng, 6, 7);
        let check = gradient_check(&p, &n, 1e-5, 42).unwrap();
        assert_eq!(check.sampled.len(), GRADIENT_CHECK_SAMPLES);
        assert!(check.max_abs_gradient > 0.1);
        assert!(check.relative_discrepancy < 1e-4, "{check:?}");
    }

    #[test]
    fn gradient_check_rejects_bad_step() {
        let g = Image::zeros(shape(2, 2));
        let p = QuadProblem::new(vec![LossTerm::new(Kernel::identity(), g.clone(), 1.0).unwrap()])
            .unwrap();
        assert!(gradient_check(&p, &g, 0.0, 0).is_err());
    }

    #[test]
    fn otf_power_is_real_nonnegative() {
        let k = Kernel::from_rows(&[[0.4, -2.0], [1.1, 0.6], [-0.3, 0.9]]).unwrap();
        let otf = psf_to_otf(&k, shape(5, 6)).unwrap();
        for z in otf.as_array() {
            let power = z.conj() * z;
            assert!(power.im.abs() < 1e-14 * (1.0 + power.re));
            assert!(power.re >= 0.0);
        }
    }
}
