//! Closed-form image convolution, deconvolution and quadratic optimization
//! in the Fourier domain.
//!
//! Circular convolution with a kernel is multiplication by a (two-level)
//! circulant matrix, which the 2D DFT diagonalizes. Losses built from squared
//! Frobenius norms of convolution residuals therefore have normal equations
//! that are diagonal in the Fourier domain and can be solved with a handful
//! of FFTs ([`quad::solve`]). Non-quadratic losses can be attacked with
//! half-quadratic splitting ([`hqs::run`]), which alternates that closed-form
//! step with a proximal step.
//!
//! Conventions: indices are 0-based and row-major; the forward DFT is
//! unnormalized and the inverse carries `1/(p*q)`; kernels are anchored at
//! their top-left element (see [`kernel`]).
//!
//! [`circulant`] holds a dense `O(n^3)` reference implementation used to
//! verify the fast path on small instances.

pub mod circulant;
pub mod error;
pub mod hqs;
pub mod imageio;
pub mod kernel;
pub mod quad;
pub mod spatial;
pub mod spectral;

pub use error::{Error, Result};
pub use kernel::{flip, embed, psf_to_otf, ImageShape, Kernel, Otf};
pub use quad::{evaluate_loss, solve, LossTerm, QuadProblem, QuadSolution};
pub use spectral::{convolve_circular, deconvolve, dft2, idft2, BinThreshold, Image, Spectrum};
