//! Closed-form Fourier solve against a gradient-descent baseline and the
//! dense oracle on the guided-deblurring loss.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context};
use ndarray::Array2;
use spectral_optim::circulant::dense_quadratic_solve;
use spectral_optim::spatial::{convolve_adjoint_direct, convolve_direct};
use spectral_optim::{evaluate_loss, psf_to_otf, solve, Image, Kernel, QuadProblem};

use crate::commands::guided_problem;
use crate::synth::{blur_with_noise, sharp_image};

/// Gradient descent stops once its loss is within this fraction of the
/// closed-form optimum.
pub const MATCH_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_GD_MAX_ITERS: usize = 20_000;
/// Dense oracle is only attempted up to this many pixels.
pub const DENSE_MAX_PIXELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    FourierClosedForm,
    GradientDescent,
    DenseOracle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FourierClosedForm, Method::GradientDescent, Method::DenseOracle];

    pub fn label(self) -> &'static str {
        match self {
            Method::FourierClosedForm => "fourier-closed-form",
            Method::GradientDescent => "gradient-descent",
            Method::DenseOracle => "dense-oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .with_context(|| format!("unknown method `{s}` (expected fourier-closed-form, gradient-descent or dense-oracle)"))
    }
}

/// `"512"` is a 512x512 image, `"480x640"` is 480 rows by 640 columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub rows: usize,
    pub cols: usize,
}

impl FromStr for Size {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let (rows, cols) = match s.split_once('x') {
            Some((r, c)) => (r.trim().parse()?, c.trim().parse()?),
            None => {
                let n = s.trim().parse()?;
                (n, n)
            }
        };
        if rows == 0 || cols == 0 {
            bail!("image size must be positive, got `{s}`");
        }
        Ok(Size { rows, cols })
    }
}

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub rows: usize,
    pub cols: usize,
    pub method: Method,
    /// Best wall time over the repeats; `None` for skipped pairs.
    pub seconds: Option<f64>,
    pub peak_bytes: Option<u64>,
    pub loss: Option<f64>,
    pub iterations: Option<usize>,
    pub status: String,
}

/// Synthetic guided-deblurring instance: blur `gaussian:min(9,p,q):2.0`,
/// noise 0.01, guide equal to the sharp scene, `lambda = 1`.
pub fn bench_problem(rows: usize, cols: usize, seed: u64) -> anyhow::Result<QuadProblem> {
    let sharp = sharp_image(rows, cols, seed);
    let blur = Kernel::gaussian(9.min(rows).min(cols), 2.0)?;
    let blurry = blur_with_noise(&sharp, &blur, 0.01, seed.wrapping_add(1))?;
    guided_problem(&blurry, &sharp, &blur, 1.0)
}

/// `L = 2 sum_i w_i max |OTF_i|^2`, the Lipschitz constant of the gradient.
pub fn lipschitz(problem: &QuadProblem) -> anyhow::Result<f64> {
    let mut l = 0.0;
    for t in problem.terms() {
        let otf = psf_to_otf(&t.kernel, problem.shape())?;
        let peak = otf.as_array().iter().fold(0.0_f64, |m, z| m.max(z.norm_sqr()));
        l += 2.0 * t.weight * peak;
    }
    Ok(l)
}

#[derive(Debug, Clone)]
pub struct DescentOutcome {
    pub image: Image,
    pub loss: f64,
    pub iterations: usize,
    pub reached: bool,
}

/// Fixed-step (`1/L`) gradient descent from the first term's guide, with
/// residuals and gradients computed by direct spatial convolution. Stops when
/// the loss drops to `target` or after `max_iters` steps.
pub fn gradient_descent(problem: &QuadProblem, target: f64, max_iters: usize) -> anyhow::Result<DescentOutcome> {
    let step = 1.0 / lipschitz(problem)?;
    let terms = problem.terms();
    let mut n = terms[0].guide.as_array().clone();
    let (p, q) = problem.shape().dims();
    let mut iterations = 0;
    loop {
        let current = Image::new(n.clone())?;
        let mut loss = 0.0;
        let mut grad = Array2::<f64>::zeros((p, q));
        for t in terms {
            if t.weight == 0.0 {
                continue;
            }
            let residual = convolve_direct(&current, &t.kernel)?.into_array() - t.guide.as_array();
            loss += t.weight * residual.iter().map(|v| v * v).sum::<f64>();
            let back = convolve_adjoint_direct(&Image::new(residual)?, &t.kernel)?;
            grad.scaled_add(2.0 * t.weight, back.as_array());
        }
        if loss <= target || iterations >= max_iters {
            return Ok(DescentOutcome {
                image: current,
                loss,
                iterations,
                reached: loss <= target,
            });
        }
        n.scaled_add(-step, &grad);
        iterations += 1;
    }
}

fn fourier_bytes(problem: &QuadProblem) -> u64 {
    let px = problem.shape().n_pixels() as u64;
    // numerator + per-term OTF and guide spectrum (complex), denominator and
    // output (real), plus the guides themselves
    px * (16 * 3 + 8 * 2) + problem.terms().len() as u64 * px * 8
}

fn descent_bytes(problem: &QuadProblem) -> u64 {
    let px = problem.shape().n_pixels() as u64;
    px * 8 * (4 + problem.terms().len() as u64)
}

fn dense_bytes(problem: &QuadProblem) -> u64 {
    let px = problem.shape().n_pixels() as u64;
    // normal matrix, LU factors and explicit inverse for the condition number
    3 * px * px * 8
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> anyhow::Result<T>) -> anyhow::Result<(f64, T)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = f()?;
        best = best.min(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    Ok((best, last.expect("at least one repeat")))
}

/// Best-of-`repeats` wall time of the closed-form solve.
pub fn time_fourier(problem: &QuadProblem, repeats: usize) -> anyhow::Result<(f64, f64)> {
    let (seconds, sol) = best_of(repeats, || Ok(solve(problem)?))?;
    Ok((seconds, sol.loss_value))
}

pub fn run_bench(sizes: &[Size], methods: &[Method], repeats: usize, seed: u64) -> anyhow::Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for size in sizes {
        let problem = bench_problem(size.rows, size.cols, seed)?;
        let optimum = solve(&problem)?;
        for &method in methods {
            let mut record = BenchRecord {
                rows: size.rows,
                cols: size.cols,
                method,
                seconds: None,
                peak_bytes: None,
                loss: None,
                iterations: None,
                status: "ok".into(),
            };
            match method {
                Method::FourierClosedForm => {
                    let (seconds, loss) = time_fourier(&problem, repeats)?;
                    record.seconds = Some(seconds);
                    record.loss = Some(loss);
                    record.peak_bytes = Some(fourier_bytes(&problem));
                }
                Method::GradientDescent => {
                    let target = optimum.loss_value * (1.0 + MATCH_TOLERANCE);
                    let (seconds, out) =
                        best_of(repeats, || gradient_descent(&problem, target, DEFAULT_GD_MAX_ITERS))?;
                    record.seconds = Some(seconds);
                    record.loss = Some(out.loss);
                    record.iterations = Some(out.iterations);
                    record.peak_bytes = Some(descent_bytes(&problem));
                    if !out.reached {
                        record.status = format!("iteration cap {DEFAULT_GD_MAX_ITERS} reached");
                    }
                }
                Method::DenseOracle => {
                    if size.rows * size.cols > DENSE_MAX_PIXELS {
                        record.status = format!("skipped: dense oracle needs p*q <= {DENSE_MAX_PIXELS}");
                    } else {
                        let (seconds, img) =
                            best_of(repeats, || Ok(dense_quadratic_solve(problem.terms(), problem.shape())?))?;
                        record.seconds = Some(seconds);
                        record.loss = Some(evaluate_loss(&problem, &img)?);
                        record.peak_bytes = Some(dense_bytes(&problem));
                        let diff = img.max_abs_diff(&optimum.image);
                        record.status = format!("ok (max diff vs fourier {diff:.1e})");
                    }
                }
            }
            records.push(record);
        }
    }
    Ok(records)
}

pub fn write_csv(records: &[BenchRecord], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    write_records(records, &mut w)?;
    Ok(())
}

pub fn write_records<W: std::io::Write>(records: &[BenchRecord], w: &mut csv::Writer<W>) -> anyhow::Result<()> {
    w.write_record(["rows", "cols", "method", "seconds", "peak_bytes", "loss", "iterations", "status"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        w.write_record([
            r.rows.to_string(),
            r.cols.to_string(),
            r.method.label().to_string(),
            opt(r.seconds.map(|s| format!("{s:.6}"))),
            opt(r.peak_bytes.map(|b| b.to_string())),
            opt(r.loss.map(|l| format!("{l:.12e}"))),
            opt(r.iterations.map(|i| i.to_string())),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
