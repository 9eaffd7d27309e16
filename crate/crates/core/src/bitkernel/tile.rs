//! Block/inner tile configuration, the candidate search space and the
//! padding-redundancy model for small-M (GEMV-like) problems.

use std::fmt;

use crate::error::{AbqError, Result};

/// Binary MMA instruction shape; the inner tile K is pinned to `MMA_K`.
pub const MMA_M: usize = 8;
pub const MMA_N: usize = 8;
pub const MMA_K: usize = 128;

pub const BK_CHOICES: [usize; 4] = [128, 256, 384, 512];
pub const BN_CHOICES: [usize; 5] = [8, 16, 32, 64, 128];
/// `(activation warps, weight warps)` layouts searched per block.
pub const WARP_LAYOUTS: [(usize, usize); 6] = [(1, 1), (1, 2), (1, 4), (2, 2), (2, 4), (4, 4)];
pub const MAX_BM: usize = 128;
/// Upper bound on an inner tile side, in stacked bit rows/columns.
pub const MAX_WARP_SIDE: usize = 128;
pub const MAX_WARPS: usize = 32;

/// Blocking parameters.
///
/// `bm`/`bn` count rows of A and columns of B. A block therefore covers a
/// `p·bm × q·bn` tile of plane products, which `wm × wn` inner tiles divide
/// exactly. `bk` and `wk` are in bits of K.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TileConfig {
    pub bm: usize,
    pub bn: usize,
    pub bk: usize,
    pub wm: usize,
    pub wn: usize,
    pub wk: usize,
}

impl TileConfig {
    pub fn new(bm: usize, bn: usize, bk: usize, wm: usize, wn: usize) -> Self {
        Self {
            bm,
            bn,
            bk,
            wm,
            wn,
            wk: MMA_K,
        }
    }

    /// Inner tiles along the stacked row and column axes.
    pub fn warp_grid(&self, p: u32, q: u32) -> (usize, usize) {
        (
            self.bm * p as usize / self.wm.max(1),
            self.bn * q as usize / self.wn.max(1),
        )
    }

    pub fn validate(&self, p: u32, q: u32) -> Result<()> {
        let fail = |reason: String| {
            Err(AbqError::InvalidTile {
                config: self.to_string(),
                reason,
            })
        };
        if self.wk != MMA_K {
            return fail(format!("wk must be {MMA_K}"));
        }
        if !BK_CHOICES.contains(&self.bk) || self.bk % self.wk != 0 {
            return fail(format!("bk must be one of {BK_CHOICES:?}"));
        }
        if self.bm == 0 || self.bn == 0 || self.wm == 0 || self.wn == 0 {
            return fail("zero-sized tile".into());
        }
        if self.wm % MMA_M != 0 || self.wn % MMA_N != 0 {
            return fail(format!("inner tile must be a multiple of {MMA_M}x{MMA_N}"));
        }
        let (rows, cols) = (self.bm * p as usize, self.bn * q as usize);
        if rows % self.wm != 0 || cols % self.wn != 0 {
            return fail(format!(
                "inner tiles do not divide the {rows}x{cols} plane tile"
            ));
        }
        let warps = (rows / self.wm) * (cols / self.wn);
        if !(1..=MAX_WARPS).contains(&warps) {
            return fail(format!(
                "{warps} inner tiles per block (need 1..={MAX_WARPS})"
            ));
        }
        Ok(())
    }
}

impl fmt::Display for TileConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}/{}x{}x{}",
            self.bm, self.bn, self.bk, self.wm, self.wn, self.wk
        )
    }
}

/// Fraction of wasted rows when `p·M` stacked rows are padded up to a
/// multiple of `mma_m`.
pub fn padding_redundancy(m: usize, p: usize, mma_m: usize) -> f64 {
    let used = p * m;
    let padded = used.div_ceil(mma_m) * mma_m;
    if padded == 0 {
        return 0.0;
    }
    (padded - used) as f64 / padded as f64
}

/// Stacked rows computed beyond `p·M` when M is split into `bm`-row blocks.
pub fn block_row_padding(m: usize, p: usize, bm: usize) -> usize {
    m.div_ceil(bm) * bm * p - m * p
}

/// Search space for a `(p, q)` problem of shape M × N × K.
///
/// For every warp layout the block height is the one with the least row
/// padding (all ties kept); block width and depth range over fixed menus and
/// the inner tile follows from the layout.
pub fn enumerate_tile_candidates(
    p: u32,
    q: u32,
    m: usize,
    _n: usize,
    _k: usize,
) -> Vec<TileConfig> {
    let (pu, qu) = (p as usize, q as usize);
    let mut out = Vec::new();
    for &(xw, ww) in &WARP_LAYOUTS {
        let fits_bm = |bm: usize| {
            (pu * bm) % xw == 0 && {
                let wm = pu * bm / xw;
                wm % MMA_M == 0 && wm <= MAX_WARP_SIDE
            }
        };
        let Some(best) = (1..=MAX_BM)
            .filter(|&bm| fits_bm(bm))
            .map(|bm| block_row_padding(m, pu, bm))
            .min()
        else {
            continue;
        };
        let bms: Vec<usize> = (1..=MAX_BM)
            .filter(|&bm| fits_bm(bm) && block_row_padding(m, pu, bm) == best)
            .collect();
        for bm in bms {
            for &bn in &BN_CHOICES {
                if (qu * bn) % ww != 0 {
                    continue;
                }
                let wn = qu * bn / ww;
                if wn % MMA_N != 0 || wn > MAX_WARP_SIDE {
                    continue;
                }
                for &bk in &BK_CHOICES {
                    out.push(TileConfig::new(bm, bn, bk, pu * bm / xw, wn));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemv_padding_figures() {
        assert_eq!(padding_redundancy(1, 1, 8), 0.875);
        assert_eq!(padding_redundancy(1, 8, 8), 0.0);
        assert_eq!(padding_redundancy(3, 2, 8), 0.25);
    }

    #[test]
    fn eight_bit_gemv_has_a_zero_padding_candidate() {
        let c = enumerate_tile_candidates(8, 2, 1, 4096, 4096);
        assert!(c.iter().any(|t| t.bm == 1 && t.wm == 8));
        assert_eq!(block_row_padding(1, 8, 1), 0);
    }

    #[test]
    fn every_candidate_is_valid() {
        for p in 1..=8 {
            for q in 1..=8 {
                for m in [1, 3, 8, 100] {
                    let c = enumerate_tile_candidates(p, q, m, 64, 256);
                    assert!(!c.is_empty(), "p={p} q={q} m={m}");
                    for t in c {
                        t.validate(p, q).unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        assert!(TileConfig::new(8, 8, 100, 8, 8).validate(1, 1).is_err());
        assert!(TileConfig::new(8, 8, 128, 12, 8).validate(1, 1).is_err());
        let mut t = TileConfig::new(8, 8, 128, 8, 8);
        t.wk = 64;
        assert!(t.validate(1, 1).is_err());
        // 64 inner tiles.
        assert!(TileConfig::new(64, 64, 128, 8, 8).validate(1, 1).is_err());
        TileConfig::new(8, 8, 128, 8, 8).validate(1, 1).unwrap();
    }
}
