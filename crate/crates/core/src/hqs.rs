//! Half-quadratic splitting for losses `f1(N) + f2(N)` where `f1` is a sum of
//! quadratic convolution terms and `f2` is only reachable through its
//! proximal operator.
//!
//! The split loss `f1(N) + f2(Z) + beta ||N - Z||_F^2` is minimized by
//! alternating
//!
//! * an N-step, solved in closed form by treating the coupling as one more
//!   loss term with the 1x1 unit kernel and guide `Z`,
//! * a Z-step `Z = prox_f2(N, beta)`,
//!
//! while `beta` grows along a caller-supplied increasing schedule.
//!
//! With a single N/Z alternation per `beta` value and geometric growth the
//! iterates can stall short of the minimizer (the per-stage contraction
//! factors `1 - c / beta` have a product bounded away from zero). Setting
//! [`HqsProblem::alternations`] above one repeats the pair at fixed `beta`
//! until `N` settles, which tracks the penalized minimizer at every stage.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::quad::{loss_of_terms, solve, LossTerm, QuadProblem, SpectralSystem};
use crate::spectral::{BinThreshold, Image};

pub const DEFAULT_BETA0: f64 = 1e-2;
pub const DEFAULT_GROWTH: f64 = 2.0;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITERS: usize = 30;
pub const DEFAULT_ALTERNATION_TOL: f64 = 1e-10;

/// Proximal operator of `f2` under the coupling weight `beta`:
/// `argmin_Z f2(Z) + beta ||v - Z||_F^2`.
///
/// Implementations must not carry mutable state between calls.
pub trait Prox {
    fn prox(&self, v: &Image, beta: f64) -> Array2<f64>;

    /// `f2(z)`, when it can be evaluated.
    fn value(&self, _z: &Image) -> Option<f64> {
        None
    }
}

impl<F> Prox for F
where
    F: Fn(&Image, f64) -> Array2<f64>,
{
    fn prox(&self, v: &Image, beta: f64) -> Array2<f64> {
        self(v, beta)
    }
}

/// `f2 = 0`; the prox returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProx;

impl Prox for IdentityProx {
    fn prox(&self, v: &Image, _beta: f64) -> Array2<f64> {
        v.as_array().clone()
    }

    fn value(&self, _z: &Image) -> Option<f64> {
        Some(0.0)
    }
}

/// `f2(Z) = mu * sum |Z|`, whose prox is elementwise soft thresholding at
/// `mu / (2 beta)`.
#[derive(Debug, Clone, Copy)]
pub struct SoftThreshold {
    pub mu: f64,
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

impl Prox for SoftThreshold {
    fn prox(&self, v: &Image, beta: f64) -> Array2<f64> {
        let t = self.mu / (2.0 * beta);
        v.as_array().mapv(|x| soft_threshold(x, t))
    }

    fn value(&self, z: &Image) -> Option<f64> {
        Some(self.mu * z.as_array().iter().map(|v| v.abs()).sum::<f64>())
    }
}

/// `f2(Z) = weight * ||Z - target||_F^2`.
#[derive(Debug, Clone)]
pub struct QuadraticProx {
    pub target: Image,
    pub weight: f64,
}

impl Prox for QuadraticProx {
    fn prox(&self, v: &Image, beta: f64) -> Array2<f64> {
        (self.target.as_array() * self.weight + v.as_array() * beta) / (self.weight + beta)
    }

    fn value(&self, z: &Image) -> Option<f64> {
        let d = z.as_array() - self.target.as_array();
        Some(self.weight * d.iter().map(|v| v * v).sum::<f64>())
    }
}

pub struct HqsProblem<'a> {
    pub f1_terms: Vec<LossTerm>,
    pub prox: &'a dyn Prox,
    pub beta0: f64,
    pub schedule: Box<dyn Fn(f64) -> f64 + 'a>,
    pub max_iters: usize,
    /// Stop once `||N - Z|| / ||N||` falls to this value.
    pub tol: f64,
    /// Maximum N/Z alternations per `beta` value.
    pub alternations: usize,
    /// Relative change in `N` that ends the alternations early.
    pub alternation_tol: f64,
}

impl<'a> HqsProblem<'a> {
    /// Problem with the default schedule `beta <- 2 beta` from `1e-2`, one
    /// alternation per `beta`, and relative gap tolerance `1e-4`.
    pub fn new(f1_terms: Vec<LossTerm>, prox: &'a dyn Prox) -> Self {
        Self {
            f1_terms,
            prox,
            beta0: DEFAULT_BETA0,
            schedule: Box::new(|b| DEFAULT_GROWTH * b),
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            alternations: 1,
            alternation_tol: DEFAULT_ALTERNATION_TOL,
        }
    }

    pub fn with_beta0(mut self, beta0: f64) -> Self {
        self.beta0 = beta0;
        self
    }

    pub fn with_growth(mut self, factor: f64) -> Self {
        self.schedule = Box::new(move |b| factor * b);
        self
    }

    pub fn with_schedule(mut self, schedule: impl Fn(f64) -> f64 + 'a) -> Self {
        self.schedule = Box::new(schedule);
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_alternations(mut self, alternations: usize, tol: f64) -> Self {
        self.alternations = alternations;
        self.alternation_tol = tol;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta0 must be positive, got {}",
                self.beta0
            )));
        }
        if self.max_iters == 0 || self.alternations == 0 {
            return Err(Error::InvalidParameter(
                "max_iters and alternations must be at least 1".into(),
            ));
        }
        if !(self.tol > 0.0) || !(self.alternation_tol >= 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        for t in &self.f1_terms {
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::InvalidWeight(t.weight));
            }
        }
        Ok(())
    }

    /// `f1(N) + f2(Z) + beta ||N - Z||^2`, if `f2` is evaluable.
    pub fn split_loss(&self, n: &Image, z: &Image, beta: f64) -> Result<Option<f64>> {
        let f1 = loss_of_terms(&self.f1_terms, n)?;
        Ok(self
            .prox
            .value(z)
            .map(|f2| f1 + f2 + beta * squared_distance(n, z)))
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub beta: f64,
    /// `||N - Z||_F` after the Z-step.
    pub gap: f64,
    pub relative_gap: f64,
    /// Split loss at `(N^t, Z^{t-1})`, i.e. before the final Z-step.
    pub split_loss_before_z: Option<f64>,
    /// Split loss at `(N^t, Z^t)`.
    pub split_loss: Option<f64>,
    pub alternations: usize,
}

#[derive(Debug, Clone)]
pub struct HqsTrace {
    pub records: Vec<IterationRecord>,
    pub n: Image,
    pub z: Image,
    pub converged: bool,
}

fn squared_distance(a: &Image, b: &Image) -> f64 {
    a.as_array()
        .iter()
        .zip(b.as_array().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn relative_gap(n: &Image, z: &Image) -> (f64, f64) {
    let gap = squared_distance(n, z).sqrt();
    let norm = n.frobenius_norm();
    let rel = if gap == 0.0 { 0.0 } else { gap / norm.max(f64::MIN_POSITIVE) };
    (gap, rel)
}

/// Closed-form minimizer of `f1(N) + beta ||N - z||_F^2`.
pub fn n_step(f1_terms: &[LossTerm], z: &Image, beta: f64) -> Result<Image> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let mut terms = f1_terms.to_vec();
    terms.push(LossTerm::new(Kernel::identity(), z.clone(), beta)?);
    Ok(solve(&QuadProblem::new(terms)?)?.image)
}

fn cached_n_step(f1: &SpectralSystem, z: &Image, beta: f64) -> Result<Image> {
    let mut system = f1.clone();
    system.add_identity_term(z, beta)?;
    Ok(system.solve(BinThreshold::default())?.0)
}

fn checked_prox(problem: &HqsProblem<'_>, n: &Image, beta: f64, iteration: usize) -> Result<Image> {
    let raw = problem.prox.prox(n, beta);
    if raw.dim() != n.shape().dims() {
        return Err(Error::ShapeMismatch {
            expected: n.shape().dims(),
            actual: raw.dim(),
        });
    }
    Image::new(raw).map_err(|_| Error::ProxFailure { iteration })
}

/// Runs the splitting iteration from `z_init`.
pub fn run(problem: &HqsProblem<'_>, z_init: &Image) -> Result<HqsTrace> {
    problem.validate()?;
    let shape = z_init.shape();
    let f1 = SpectralSystem::from_terms(&problem.f1_terms, shape)?;

    let mut z = z_init.clone();
    let mut beta = problem.beta0;
    let mut records = Vec::new();
    let mut converged = false;
    let mut n = z.clone();

    for iteration in 1..=problem.max_iters {
        let mut previous: Option<Image> = None;
        let mut z_before = z.clone();
        let mut used = 0;
        for _ in 0..problem.alternations {
            used += 1;
            n = cached_n_step(&f1, &z, beta)?;
            z_before = z;
            z = checked_prox(problem, &n, beta, iteration)?;
            if let Some(prev) = &previous {
                let change = squared_distance(&n, prev).sqrt();
                if change <= problem.alternation_tol * n.frobenius_norm() {
                    break;
                }
            }
            previous = Some(n.clone());
        }

        let (gap, rel) = relative_gap(&n, &z);
        if !gap.is_finite() {
            return Err(Error::ProxFailure { iteration });
        }
        records.push(IterationRecord {
            iteration,
            beta,
            gap,
            relative_gap: rel,
            split_loss_before_z: problem.split_loss(&n, &z_before, beta)?,
            split_loss: problem.split_loss(&n, &z, beta)?,
            alternations: used,
        });
        if rel <= problem.tol {
            converged = true;
            break;
        }
        if iteration < problem.max_iters {
            let next = (problem.schedule)(beta);
            if !(next > beta) || !next.is_finite() {
                return Err(Error::NonIncreasingBeta {
                    from: beta,
                    to: next,
                });
            }
            beta = next;
        }
    }

    Ok(HqsTrace {
        records,
        n,
        z,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ImageShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, p: usize, q: usize) -> Image {
        Image::new(Array2::from_shape_fn((p, q), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn n_step_with_inactive_f1_returns_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_image(&mut rng, 4, 3);
        let f1 = vec![LossTerm::new(Kernel::gradient_x(), random_image(&mut rng, 4, 3), 0.0).unwrap()];
        let n = n_step(&f1, &z, 0.7).unwrap();
        assert!(n.max_abs_diff(&z) < 1e-14);
    }

    #[test]
    fn n_step_identity_term_is_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_image(&mut rng, 3, 5);
        let z = random_image(&mut rng, 3, 5);
        let (w, beta) = (1.5, 0.25);
        let f1 = vec![LossTerm::new(Kernel::identity(), g.clone(), w).unwrap()];
        let n = n_step(&f1, &z, beta).unwrap();
        let expected = Image::new((g.as_array() * w + z.as_array() * beta) / (w + beta)).unwrap();
        assert!(n.max_abs_diff(&expected) < 1e-14);
        assert!(n_step(&f1, &z, 0.0).is_err());
    }

    #[test]
    fn cached_step_matches_literal_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = vec![
            LossTerm::new(Kernel::gaussian(3, 1.0).unwrap(), random_image(&mut rng, 6, 5), 0.9).unwrap(),
            LossTerm::new(Kernel::gradient_y(), random_image(&mut rng, 6, 5), 1.0).unwrap(),
        ];
        let z = random_image(&mut rng, 6, 5);
        let system = SpectralSystem::from_terms(&f1, ImageShape::new(6, 5).unwrap()).unwrap();
        let a = cached_n_step(&system, &z, 0.3).unwrap();
        let b = n_step(&f1, &z, 0.3).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-13);
    }

    #[test]
    fn soft_threshold_values() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
    }

    #[test]
    fn non_increasing_schedule_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_image(&mut rng, 3, 3);
        let prox = SoftThreshold { mu: 0.5 };
        let f1 = vec![LossTerm::new(Kernel::identity(), g.clone(), 1.0).unwrap()];
        let problem = HqsProblem::new(f1, &prox)
            .with_schedule(|b| b)
            .with_tol(1e-300);
        assert!(matches!(
            run(&problem, &Image::zeros(g.shape())),
            Err(Error::NonIncreasingBeta { .. })
        ));
    }

    #[test]
    fn non_finite_prox_output_is_reported() {
        let g = Image::filled(ImageShape::new(2, 2).unwrap(), 1.0);
        let bad = |v: &Image, _beta: f64| v.as_array().mapv(|_| f64::NAN);
        let f1 = vec![LossTerm::new(Kernel::identity(), g.clone(), 1.0).unwrap()];
        let problem = HqsProblem::new(f1, &bad);
        assert!(matches!(
            run(&problem, &g),
            Err(Error::ProxFailure { iteration: 1 })
        ));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let g = Image::filled(ImageShape::new(2, 2).unwrap(), 1.0);
        let f1 = vec![LossTerm::new(Kernel::identity(), g.clone(), 1.0).unwrap()];
        let prox = IdentityProx;
        assert!(run(&HqsProblem::new(f1.clone(), &prox).with_beta0(0.0), &g).is_err());
        assert!(run(&HqsProblem::new(f1.clone(), &prox).with_max_iters(0), &g).is_err());
        assert!(run(&HqsProblem::new(f1, &prox).with_tol(0.0), &g).is_err());
    }

    #[test]
    fn vanishing_f2_returns_f1_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f1 = vec![
            LossTerm::new(Kernel::gaussian(3, 0.8).unwrap(), random_image(&mut rng, 5, 5), 1.0).unwrap(),
            LossTerm::new(Kernel::gradient_x(), random_image(&mut rng, 5, 5), 0.5).unwrap(),
        ];
        let reference = solve(&QuadProblem::new(f1.clone()).unwrap()).unwrap().image;
        let prox = IdentityProx;
        let problem = HqsProblem::new(f1, &prox).with_beta0(1e-9);
        let trace = run(&problem, &random_image(&mut rng, 5, 5)).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.records.len(), 1);
        assert!(trace.n.max_abs_diff(&reference) < 1e-6);
    }
}
