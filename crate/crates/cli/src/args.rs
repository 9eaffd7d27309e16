use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "abq",
    version,
    about = "Arbitrary-bit quantized GEMM and block calibration"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random draw [default: 42]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for the GEMM engine [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl Global {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the engine against a naive integer matmul on random problems
    Verify(VerifyArgs),
    /// Autotune tile configs and time them against the untiled baseline
    Bench(BenchArgs),
    /// Calibrate a toy block
    Calibrate(CalibrateArgs),
    /// Quantize and pre-pack block weights
    Quantize(QuantizeArgs),
    /// Pack a quantized tensor into bit planes
    Pack(PackArgs),
    /// Describe a file and check its invariants
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,

    /// Fix every case to this shape instead of drawing M, N, K from 1..=64
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<Shape>,

    /// Fix the bit widths instead of drawing p, q from 1..=8
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<Bits>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_parser = parse_shape, conflicts_with = "preset")]
    pub shape: Option<Shape>,

    /// Named shape set (llama7b-gemv, llama7b-m4, llama7b-m8, llama7b)
    #[arg(long)]
    pub preset: Option<String>,

    #[arg(long, value_parser = parse_bits, default_value = "w4a4")]
    pub bits: Bits,

    /// Timed runs per config (after one warm-up)
    #[arg(long, default_value_t = 5)]
    pub trials: usize,

    /// Keep only the first N candidates of each search space
    #[arg(long)]
    pub max_candidates: Option<usize>,

    /// Write records to this path; `.json` selects JSON, anything else CSV
    #[arg(long)]
    pub emit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// key = value settings; defaults apply to missing keys
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Block weights (ABQM); generated from the seed when absent
    #[arg(long)]
    pub block: Option<PathBuf>,

    /// Calibration state output (ABQC)
    #[arg(long, default_value = "calib.abqc")]
    pub out: PathBuf,

    /// Loss history CSV (step,loss,dlc,akl)
    #[arg(long)]
    pub emit: Option<PathBuf>,

    /// Also write the block weights (ABQM) used for this run
    #[arg(long)]
    pub save_block: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Block weights (ABQM); generated from the seed when absent
    #[arg(long)]
    pub block: Option<PathBuf>,

    /// Weight bits; the activation part is ignored here
    #[arg(long, value_parser = parse_bits, default_value = "w4a4")]
    pub bits: Bits,

    /// Calibration state (ABQC) whose balance, clip and compensation to apply
    #[arg(long)]
    pub calib: Option<PathBuf>,

    #[arg(long, default_value = "block.abqq")]
    pub out: PathBuf,

    /// Also write each layer as a standalone tensor (`<layer>.abqt`) here
    #[arg(long)]
    pub tensor_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// Quantized tensor (ABQT)
    pub input: PathBuf,

    /// Bit planes output (ABQP)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub input: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

/// `MxNxK`, e.g. `8x4096x4096`.
pub fn parse_shape(s: &str) -> Result<Shape, String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let [m, n, k] = parts.as_slice() else {
        return Err(format!("expected MxNxK, got {s:?}"));
    };
    let dim = |v: &str| -> Result<usize, String> {
        match v.trim().parse::<usize>() {
            Ok(d) if d > 0 => Ok(d),
            _ => Err(format!("bad dimension {v:?} in {s:?}")),
        }
    };
    Ok(Shape {
        m: dim(m)?,
        n: dim(n)?,
        k: dim(k)?,
    })
}

/// Weight and activation widths. A `*` after the weight width selects the
/// balanced weight scheme (`w2*a8`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bits {
    pub w: u32,
    pub a: u32,
    pub balanced: bool,
}

impl Bits {
    /// Planes of the weight operand.
    pub fn weight_planes(&self) -> u32 {
        if self.balanced {
            self.w + 1
        } else {
            self.w
        }
    }
}

pub fn parse_bits(s: &str) -> Result<Bits, String> {
    let lower = s.trim().to_ascii_lowercase();
    let err = || format!("expected e.g. w2a8 or w2*a8, got {s:?}");
    let rest = lower.strip_prefix('w').ok_or_else(err)?;
    let (w, a) = rest.split_once('a').ok_or_else(err)?;
    let (w, balanced) = match w.strip_suffix('*') {
        Some(w) => (w, true),
        None => (w, false),
    };
    let w = u32::from_str(w).map_err(|_| err())?;
    let a = u32::from_str(a).map_err(|_| err())?;
    if w == 0 || a == 0 {
        return Err(format!("bit widths must be positive in {s:?}"));
    }
    Ok(Bits { w, a, balanced })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(
            parse_shape("8x4096x11008").unwrap(),
            Shape {
                m: 8,
                n: 4096,
                k: 11008
            }
        );
        assert!(parse_shape("8x4096").is_err());
        assert!(parse_shape("0x1x1").is_err());
    }

    #[test]
    fn bits() {
        assert_eq!(
            parse_bits("w2a8").unwrap(),
            Bits {
                w: 2,
                a: 8,
                balanced: false
            }
        );
        assert_eq!(parse_bits("W2*A8").unwrap().weight_planes(), 3);
        assert!(parse_bits("a8w2").is_err());
        assert!(parse_bits("w0a8").is_err());
    }
}
