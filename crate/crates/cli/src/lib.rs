//! Command-line demos for `spectral-optim`: convolution and deconvolution,
//! guided NIR deblurring, a half-quadratic splitting sparsity demo and a
//! solver benchmark.

pub mod bench;
pub mod commands;
pub mod kernel_spec;
pub mod synth;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use spectral_optim::hqs::{DEFAULT_BETA0, DEFAULT_GROWTH, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use spectral_optim::imageio::{self, BitDepth, Pixels};

use crate::bench::{Method, Size};
use crate::commands::Mode;
use crate::kernel_spec::KernelSpec;

/// Environment variable that caps the worker threads used by the FFTs.
pub const THREADS_ENV: &str = "SPECTRAL_OPTIM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "spectral-optim", version, about = "Fourier-domain convolution, deconvolution and quadratic image optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Circular (or valid) convolution of an image with a kernel.
    Convolve {
        input: PathBuf,
        /// gaussian:<size>:<sigma>, gradx, grady, identity or file:<path>
        kernel: KernelSpec,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Circular)]
        mode: Mode,
        /// Compare against the dense circulant product (images up to 4096 pixels).
        #[arg(long)]
        verify: bool,
    },
    /// Fourier-domain inverse of a circular convolution.
    Deconvolve {
        input: PathBuf,
        kernel: KernelSpec,
        output: PathBuf,
        /// Absolute |OTF|^2 threshold below which bins are zeroed
        /// (default: 1e-12 of the largest).
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Deblur a NIR image using the gradients of an RGB guide's luminance.
    DeblurGuided {
        nir: PathBuf,
        guide: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value = "gaussian:9:2.0")]
        blur: KernelSpec,
        /// Sharp reference image; prints PSNR of input and output against it.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Half-quadratic splitting on lambda1 ||N - input||^2 + mu ||Z||_1.
    HqsDemo {
        input: PathBuf,
        output: PathBuf,
        /// CSV trace with columns iter, beta, gap, l3.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.1)]
        mu: f64,
        #[arg(long, default_value_t = DEFAULT_BETA0)]
        beta0: f64,
        #[arg(long, default_value_t = DEFAULT_GROWTH)]
        growth: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        iters: usize,
        /// Relative coupling gap at which the iteration stops.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// N/Z alternations per beta value.
        #[arg(long, default_value_t = 1)]
        alternations: usize,
    },
    /// Time the closed-form solver against gradient descent and the dense oracle.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
        sizes: Vec<Size>,
        #[arg(long, value_delimiter = ',', default_value = "fourier-closed-form,gradient-descent,dense-oracle")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the demo inputs: the 3x4 grid and a synthetic NIR/RGB pair.
    DemoData {
        dir: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value = "gaussian:9:2.0")]
        blur: KernelSpec,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Applies the thread cap from [`THREADS_ENV`], if set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{value}`"))?;
    if n == 0 {
        anyhow::bail!("{THREADS_ENV} must be a positive integer, got `{value}`");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Runs one subcommand and returns the text to print on success.
pub fn run(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::Convolve { input, kernel, output, mode, verify } => {
            Ok(commands::convolve(&input, &kernel, &output, mode, verify)?.to_string())
        }
        Command::Deconvolve { input, kernel, output, eps } => {
            Ok(commands::deconvolve(&input, &kernel, &output, eps)?.to_string())
        }
        Command::DeblurGuided { nir, guide, output, lambda, blur, reference } => {
            let args = commands::GuidedArgs {
                nir: &nir,
                guide: &guide,
                output: &output,
                lambda,
                blur: &blur,
                reference: reference.as_deref(),
            };
            Ok(commands::deblur_guided(&args)?.to_string())
        }
        Command::HqsDemo { input, output, trace, lambda1, mu, beta0, growth, iters, tol, alternations } => {
            let args = commands::HqsArgs {
                input: &input,
                output: &output,
                trace: trace.as_deref(),
                lambda1,
                mu,
                beta0,
                growth,
                iters,
                tol,
                alternations,
            };
            Ok(commands::hqs_demo(&args)?.to_string())
        }
        Command::Bench { sizes, methods, repeats, seed, out } => {
            let records = bench::run_bench(&sizes, &methods, repeats, seed)?;
            let mut text = String::new();
            for r in records.iter().filter(|r| r.status.starts_with("skipped")) {
                text.push_str(&format!("warning: {}x{} {}: {}\n", r.rows, r.cols, r.method, r.status));
            }
            match out {
                Some(path) => {
                    bench::write_csv(&records, &path)?;
                    text.push_str(&format!("wrote {}\n", path.display()));
                }
                None => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    bench::write_records(&records, &mut w)?;
                    text.push_str(&String::from_utf8(w.into_inner()?)?);
                }
            }
            Ok(text)
        }
        Command::DemoData { dir, size, blur, noise, seed } => demo_data(&dir, size, &blur, noise, seed),
    }
}

fn demo_data(dir: &std::path::Path, size: usize, blur: &KernelSpec, noise: f64, seed: u64) -> anyhow::Result<String> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let sharp = synth::sharp_image(size, size, seed);
    let blurry = synth::blur_with_noise(&sharp, &blur.build()?, noise, seed.wrapping_add(1))?;
    let guide = synth::rgb_guide(&sharp, seed.wrapping_add(2))?;
    let files = [
        ("grid.txt", Pixels::Gray(synth::demo_grid())),
        ("sharp.png", Pixels::Gray(sharp)),
        ("nir_blurry.png", Pixels::Gray(blurry)),
        ("rgb_guide.png", Pixels::Rgb(guide)),
    ];
    let mut text = String::new();
    for (name, pixels) in &files {
        let path = dir.join(name);
        imageio::save(&path, pixels, BitDepth::Sixteen).with_context(|| format!("writing {}", path.display()))?;
        text.push_str(&format!("wrote {}\n", path.display()));
    }
    Ok(text)
}
