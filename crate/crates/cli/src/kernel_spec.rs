//! Kernel mini-grammar: `gaussian:<size>:<sigma>`, `gradx`, `grady`,
//! `identity`, or `file:<path>` (whitespace-separated text grid).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use spectral_optim::imageio::parse_text_grid;
use spectral_optim::Kernel;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Gaussian { size: usize, sigma: f64 },
    GradX,
    GradY,
    Identity,
    File(PathBuf),
}

impl KernelSpec {
    pub fn build(&self) -> anyhow::Result<Kernel> {
        Ok(match self {
            KernelSpec::Gaussian { size, sigma } => Kernel::gaussian(*size, *sigma)?,
            KernelSpec::GradX => Kernel::gradient_x(),
            KernelSpec::GradY => Kernel::gradient_y(),
            KernelSpec::Identity => Kernel::identity(),
            KernelSpec::File(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading kernel {}", path.display()))?;
                let grid = parse_text_grid(&text)
                    .with_context(|| format!("parsing kernel {}", path.display()))?;
                Kernel::new(grid.into_array())?
            }
        })
    }
}

impl FromStr for KernelSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "gradx" => return Ok(KernelSpec::GradX),
            "grady" => return Ok(KernelSpec::GradY),
            "identity" => return Ok(KernelSpec::Identity),
            _ => {}
        }
        if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                bail!("kernel spec `file:` needs a path");
            }
            return Ok(KernelSpec::File(PathBuf::from(path)));
        }
        if let Some(rest) = s.strip_prefix("gaussian:") {
            let (size, sigma) = rest
                .split_once(':')
                .ok_or_else(|| anyhow!("expected gaussian:<size>:<sigma>, got `{s}`"))?;
            let size: usize = size.parse().with_context(|| format!("bad gaussian size `{size}`"))?;
            let sigma: f64 = sigma.parse().with_context(|| format!("bad gaussian sigma `{sigma}`"))?;
            if size == 0 || !(sigma > 0.0 && sigma.is_finite()) {
                bail!("gaussian needs size >= 1 and sigma > 0, got `{s}`");
            }
            return Ok(KernelSpec::Gaussian { size, sigma });
        }
        bail!("unknown kernel spec `{s}` (expected gaussian:<size>:<sigma>, gradx, grady, identity or file:<path>)")
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Gaussian { size, sigma } => write!(f, "gaussian:{size}:{sigma}"),
            KernelSpec::GradX => f.write_str("gradx"),
            KernelSpec::GradY => f.write_str("grady"),
            KernelSpec::Identity => f.write_str("identity"),
            KernelSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}
