//! `key = value` calibration settings.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{AbqError, Result};
use crate::quantizer::Scheme;
use crate::toymodel::BlockConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibOptions {
    pub epochs: usize,
    /// Learning rate of the balance vectors.
    pub lr_s: f64,
    /// Learning rate of the clip factors and compensation vectors.
    pub lr_clip: f64,
    /// Segments per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub bits_w: u32,
    pub bits_a: u32,
    /// Weight scheme; activations are always asymmetric per token.
    pub scheme: Scheme,
    /// Block indices that get compensation vectors on `down_proj`.
    pub gamma_blocks: Vec<usize>,
    /// Index of the block being calibrated.
    pub block_index: usize,
    pub segments: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for CalibOptions {
    fn default() -> Self {
        let block = BlockConfig::default();
        Self {
            epochs: 20,
            lr_s: 5e-3,
            lr_clip: 1e-2,
            batch: 1,
            seed: 42,
            bits_w: 4,
            bits_a: 4,
            scheme: Scheme::Asymmetric,
            gamma_blocks: vec![0],
            block_index: 0,
            segments: 128,
            tokens: 16,
            dim: block.dim,
            heads: block.heads,
            hidden: block.hidden,
        }
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| AbqError::Config(format!("bad value for {key}: {v:?}")))
}

impl CalibOptions {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            hidden: self.hidden,
        }
    }

    pub fn gamma(&self) -> bool {
        self.gamma_blocks.contains(&self.block_index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.segments == 0 || self.tokens == 0 {
            return Err(AbqError::Config(
                "batch, segments and tokens must be positive".into(),
            ));
        }
        if !(self.lr_s >= 0.0 && self.lr_clip >= 0.0) {
            return Err(AbqError::Config(
                "learning rates must be non-negative".into(),
            ));
        }
        self.block_config().validate()
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, v)?,
            "lr_s" => self.lr_s = parse(key, v)?,
            "lr_clip" => self.lr_clip = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "bits_w" => self.bits_w = parse(key, v)?,
            "bits_a" => self.bits_a = parse(key, v)?,
            "scheme" => self.scheme = v.parse()?,
            "gamma_blocks" => {
                self.gamma_blocks = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "block_index" => self.block_index = parse(key, v)?,
            "segments" => self.segments = parse(key, v)?,
            "tokens" => self.tokens = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            other => return Err(AbqError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the assignments in `text`. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut opts = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AbqError::Config(format!("line {}: expected key = value", n + 1)))?;
            opts.set(k, v).map_err(|e| {
                let msg = match e {
                    AbqError::Config(m) => m,
                    other => other.to_string(),
                };
                AbqError::Config(format!("line {}: {msg}", n + 1))
            })?;
        }
        opts.validate()?;
        Ok(opts)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let gb: Vec<String> = self.gamma_blocks.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr_s = {}", self.lr_s);
        let _ = writeln!(s, "lr_clip = {}", self.lr_clip);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "bits_w = {}", self.bits_w);
        let _ = writeln!(s, "bits_a = {}", self.bits_a);
        let _ = writeln!(s, "scheme = {}", self.scheme);
        let _ = writeln!(s, "gamma_blocks = {}", gb.join(","));
        let _ = writeln!(s, "block_index = {}", self.block_index);
        let _ = writeln!(s, "segments = {}", self.segments);
        let _ = writeln!(s, "tokens = {}", self.tokens);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let o = CalibOptions::parse_str(
            "# w2 run\nepochs = 3\nscheme = balanced\nbits_w=2\ngamma_blocks = 0, 11 \n\n",
        )
        .unwrap();
        assert_eq!(o.epochs, 3);
        assert_eq!(o.scheme, Scheme::Balanced);
        assert_eq!(o.bits_w, 2);
        assert_eq!(o.gamma_blocks, vec![0, 11]);
        assert_eq!(o.lr_s, 5e-3);
    }

    #[test]
    fn round_trips_through_text() {
        let mut o = CalibOptions::default();
        o.lr_clip = 0.25;
        o.gamma_blocks = vec![];
        assert_eq!(CalibOptions::parse_str(&o.to_config_string()).unwrap(), o);
    }

    #[test]
    fn rejects_unknown_keys_and_garbage() {
        assert!(CalibOptions::parse_str("epoch = 3").is_err());
        assert!(CalibOptions::parse_str("epochs 3").is_err());
        assert!(CalibOptions::parse_str("epochs = many").is_err());
        assert!(CalibOptions::parse_str("heads = 5").is_err());
    }
}
