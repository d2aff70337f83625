//! Subcommand implementations. Each writes its output files and returns a
//! report that `main` prints.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use spectral_optim::circulant::{matmul_conv, matmul_conv_flat, valid_region};
use spectral_optim::hqs::{self, HqsProblem, SoftThreshold};
use spectral_optim::imageio::{self, BitDepth, Loaded, Pixels};
use spectral_optim::quad::{gradient_check, GradientCheck};
use spectral_optim::{
    convolve_circular, deconvolve as spectral_deconvolve, evaluate_loss, solve, BinThreshold, Image, Kernel,
    LossTerm, QuadProblem,
};

use crate::kernel_spec::KernelSpec;
use crate::synth::psnr;

/// Largest `p * q` for which the dense oracle is run by `convolve --verify`.
pub const VERIFY_MAX_PIXELS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Full p x q output with wraparound.
    Circular,
    /// Top-left (p-m+1) x (q-n+1) block, free of wraparound.
    Valid,
}

fn load(path: &Path) -> anyhow::Result<Loaded> {
    imageio::load(path).with_context(|| format!("loading {}", path.display()))
}

fn save(path: &Path, img: &Image, source: &Loaded) -> anyhow::Result<()> {
    let depth = source.bit_depth.unwrap_or(BitDepth::Sixteen);
    imageio::save(path, &Pixels::Gray(img.clone()), depth).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct Verification {
    /// Max |FFT route - dense two-level circulant product| over all entries.
    pub max_discrepancy: f64,
    /// Max difference between the row-major 1D circulant product and the FFT
    /// route on the valid block.
    pub flat_valid_discrepancy: f64,
    /// Same, over the wraparound entries.
    pub flat_nonvalid_difference: f64,
}

#[derive(Debug, Clone)]
pub struct ConvolveReport {
    pub output: PathBuf,
    pub shape: (usize, usize),
    pub verification: Option<Verification>,
    pub verify_skipped: bool,
}

impl fmt::Display for ConvolveReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "wrote {} ({}x{})", self.output.display(), self.shape.0, self.shape.1)?;
        if self.verify_skipped {
            writeln!(f, "verify: skipped, dense oracle limited to p*q <= {VERIFY_MAX_PIXELS}")?;
        }
        if let Some(v) = &self.verification {
            writeln!(f, "verify: max discrepancy vs dense circulant product {:.3e}", v.max_discrepancy)?;
            writeln!(
                f,
                "verify: row-major circulant product differs by {:.3e} on valid entries and {:.3e} on wraparound entries",
                v.flat_valid_discrepancy, v.flat_nonvalid_difference
            )?;
            writeln!(
                f,
                "note: nonvalid entries of the two circulant forms are different, but all valid entries are consistent; this is expected"
            )?;
        }
        Ok(())
    }
}

pub fn convolve(input: &Path, kernel: &KernelSpec, output: &Path, mode: Mode, verify: bool) -> anyhow::Result<ConvolveReport> {
    let source = load(input)?;
    let img = source.to_gray();
    let k = kernel.build()?;
    let circular = convolve_circular(&img, &k)?;

    let mut verification = None;
    let mut verify_skipped = false;
    if verify {
        if img.shape().n_pixels() <= VERIFY_MAX_PIXELS {
            let dense = matmul_conv(&k, &img)?;
            let flat = matmul_conv_flat(&k, &img)?;
            let (vp, vq) = (img.shape().rows - k.rows() + 1, img.shape().cols - k.cols() + 1);
            let mut valid_diff = 0.0_f64;
            let mut nonvalid_diff = 0.0_f64;
            for ((i, j), &a) in circular.as_array().indexed_iter() {
                let d = (a - flat.as_array()[[i, j]]).abs();
                if i < vp && j < vq {
                    valid_diff = valid_diff.max(d);
                } else {
                    nonvalid_diff = nonvalid_diff.max(d);
                }
            }
            verification = Some(Verification {
                max_discrepancy: dense.max_abs_diff(&circular),
                flat_valid_discrepancy: valid_diff,
                flat_nonvalid_difference: nonvalid_diff,
            });
        } else {
            verify_skipped = true;
        }
    }

    let result = match mode {
        Mode::Circular => circular,
        Mode::Valid => valid_region(&circular, k.dims())?,
    };
    save(output, &result, &source)?;
    Ok(ConvolveReport {
        output: output.to_path_buf(),
        shape: result.shape().dims(),
        verification,
        verify_skipped,
    })
}

#[derive(Debug, Clone)]
pub struct DeconvolveReport {
    pub output: PathBuf,
    pub zeroed_bins: usize,
    pub dc_zeroed: bool,
    pub mean: f64,
}

impl fmt::Display for DeconvolveReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "wrote {}", self.output.display())?;
        writeln!(f, "zeroed bins: {}", self.zeroed_bins)?;
        if self.dc_zeroed {
            writeln!(
                f,
                "warning: DC bin zeroed (kernel sums to ~0); output is the zero-mean solution, mean {:.3e}",
                self.mean
            )?;
        }
        Ok(())
    }
}

pub fn deconvolve(input: &Path, kernel: &KernelSpec, output: &Path, eps: Option<f64>) -> anyhow::Result<DeconvolveReport> {
    let source = load(input)?;
    let img = source.to_gray();
    let k = kernel.build()?;
    let threshold = eps.map(BinThreshold::Absolute).unwrap_or_default();
    let d = spectral_deconvolve(&img, &k, threshold)?;
    save(output, &d.image, &source)?;
    Ok(DeconvolveReport {
        output: output.to_path_buf(),
        zeroed_bins: d.zeroed_bins,
        dc_zeroed: d.dc_zeroed,
        mean: d.image.mean(),
    })
}

/// Guided deblurring loss:
/// `lambda ||b * N - N_b||^2 + ||dx * N - dx * Y||^2 + ||dy * N - dy * Y||^2`.
pub fn guided_problem(blurry: &Image, guide: &Image, blur: &Kernel, lambda: f64) -> anyhow::Result<QuadProblem> {
    if blurry.shape() != guide.shape() {
        bail!(
            "NIR image is {:?} but guide is {:?}",
            blurry.shape().dims(),
            guide.shape().dims()
        );
    }
    let dx = Kernel::gradient_x();
    let dy = Kernel::gradient_y();
    let gx = convolve_circular(guide, &dx)?;
    let gy = convolve_circular(guide, &dy)?;
    Ok(QuadProblem::new(vec![
        LossTerm::new(blur.clone(), blurry.clone(), lambda)?,
        LossTerm::new(dx, gx, 1.0)?,
        LossTerm::new(dy, gy, 1.0)?,
    ])?)
}

#[derive(Debug, Clone)]
pub struct GuidedReport {
    pub output: PathBuf,
    pub loss: f64,
    pub check: GradientCheck,
    pub zeroed_bins: usize,
    /// PSNR of (input, output) against the reference, when one was given.
    pub psnr: Option<(f64, f64)>,
}

impl fmt::Display for GuidedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "wrote {}", self.output.display())?;
        writeln!(f, "loss: {:.6e}", self.loss)?;
        writeln!(
            f,
            "gradient check: max |grad| {:.3e}, finite-difference discrepancy {:.3e}",
            self.check.max_abs_gradient, self.check.relative_discrepancy
        )?;
        writeln!(f, "zeroed bins: {}", self.zeroed_bins)?;
        if let Some((before, after)) = self.psnr {
            writeln!(f, "psnr: input {before:.2} dB, output {after:.2} dB")?;
        }
        Ok(())
    }
}

pub struct GuidedArgs<'a> {
    pub nir: &'a Path,
    pub guide: &'a Path,
    pub output: &'a Path,
    pub lambda: f64,
    pub blur: &'a KernelSpec,
    pub reference: Option<&'a Path>,
}

pub fn deblur_guided(args: &GuidedArgs<'_>) -> anyhow::Result<GuidedReport> {
    let nir_source = load(args.nir)?;
    let nir = nir_source.to_gray();
    let y = load(args.guide)?.to_gray();
    let problem = guided_problem(&nir, &y, &args.blur.build()?, args.lambda)?;
    let solution = solve(&problem)?;
    let check = gradient_check(&problem, &solution.image, 1e-5, 0)?;
    save(args.output, &solution.image, &nir_source)?;
    let psnr = match args.reference {
        Some(path) => {
            let reference = load(path)?.to_gray();
            if reference.shape() != nir.shape() {
                bail!("reference image shape does not match the NIR image");
            }
            Some((psnr(&nir, &reference), psnr(&solution.image, &reference)))
        }
        None => None,
    };
    Ok(GuidedReport {
        output: args.output.to_path_buf(),
        loss: evaluate_loss(&problem, &solution.image)?,
        check,
        zeroed_bins: solution.zeroed_bins,
        psnr,
    })
}

pub struct HqsArgs<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    pub trace: Option<&'a Path>,
    pub lambda1: f64,
    pub mu: f64,
    pub beta0: f64,
    pub growth: f64,
    pub iters: usize,
    pub tol: f64,
    pub alternations: usize,
}

#[derive(Debug, Clone)]
pub struct HqsReport {
    pub output: PathBuf,
    pub iterations: usize,
    pub converged: bool,
    pub final_gap: f64,
    pub final_beta: f64,
    pub zero_fraction: f64,
}

impl fmt::Display for HqsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "wrote {}", self.output.display())?;
        writeln!(
            f,
            "iterations: {} ({}), final beta {:.3e}, relative gap {:.3e}",
            self.iterations,
            if self.converged { "converged" } else { "iteration cap reached" },
            self.final_beta,
            self.final_gap
        )?;
        writeln!(f, "zero pixels: {:.1}%", 100.0 * self.zero_fraction)
    }
}

/// Sparsity demo: `lambda1 ||N - input||^2 + mu ||Z||_1` split with
/// `beta ||N - Z||^2`, started from `Z = input`. Writes the final `Z`.
pub fn hqs_demo(args: &HqsArgs<'_>) -> anyhow::Result<HqsReport> {
    let source = load(args.input)?;
    let input = source.to_gray();
    if !(args.mu >= 0.0) {
        bail!("--mu must be nonnegative");
    }
    let prox = SoftThreshold { mu: args.mu };
    let f1 = vec![LossTerm::new(Kernel::identity(), input.clone(), args.lambda1)?];
    let problem = HqsProblem::new(f1, &prox)
        .with_beta0(args.beta0)
        .with_growth(args.growth)
        .with_max_iters(args.iters)
        .with_tol(args.tol)
        .with_alternations(args.alternations, hqs::DEFAULT_ALTERNATION_TOL);
    let trace = hqs::run(&problem, &input)?;

    if let Some(path) = args.trace {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["iter", "beta", "gap", "l3"])?;
        for r in &trace.records {
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.beta),
                format!("{:e}", r.gap),
                r.split_loss.map(|v| format!("{v:e}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    save(args.output, &trace.z, &source)?;
    let last = trace.records.last().expect("at least one iteration");
    let zeros = trace.z.as_array().iter().filter(|v| **v == 0.0).count();
    Ok(HqsReport {
        output: args.output.to_path_buf(),
        iterations: trace.records.len(),
        converged: trace.converged,
        final_gap: last.relative_gap,
        final_beta: last.beta,
        zero_fraction: zeros as f64 / input.shape().n_pixels() as f64,
    })
}
