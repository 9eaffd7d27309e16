//! Arbitrary-bit GEMM as p·q weighted 1-bit plane products.
//!
//! A block owns a `bm × bn` output tile. It stages the `p·bm` stacked A
//! plane rows and `q·bn` stacked B plane rows of one `bk` slice of K,
//! accumulates AND-popcounts into a `p·bm × q·bn` plane-product tile inner
//! tile by inner tile, and after the whole K range reduces that tile with
//! weights `2^(s+t)` into the output.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use super::bmma::and_popcount;
use super::pack::{BitPlaneMatrix, WORD_BITS};
use super::tile::{TileConfig, MMA_M, MMA_N};
use crate::error::{AbqError, Result};

/// Row-major integer matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix<I> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<I>,
}

impl<I: Copy> IntMatrix<I> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> I {
        self.data[i * self.cols + j]
    }
}

/// Instrumentation counters of one GEMM call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GemmStats {
    pub blocks: u64,
    /// `(s, t)` plane-pair tiles folded into the output by bit reduction.
    pub plane_pair_products: u64,
    /// Inner-tile products at instruction granularity (8 × 8 × 128 bits).
    pub bmma_ops: u64,
}

#[derive(Default)]
struct Counters {
    blocks: AtomicU64,
    plane_pairs: AtomicU64,
    bmma: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> GemmStats {
        GemmStats {
            blocks: self.blocks.load(Ordering::Relaxed),
            plane_pair_products: self.plane_pairs.load(Ordering::Relaxed),
            bmma_ops: self.bmma.load(Ordering::Relaxed),
        }
    }
}

/// `ceil(log2(K + 1))`.
pub fn k_bits(k: usize) -> u32 {
    64 - (k as u64).leading_zeros()
}

/// Refuse shapes whose worst-case sum `(2^p − 1)(2^q − 1)K` may not fit in i32.
pub fn check_overflow(p: u32, q: u32, k: usize) -> Result<()> {
    let kb = k_bits(k);
    if p + q + kb > 31 {
        return Err(AbqError::Overflow { p, q, k_bits: kb });
    }
    Ok(())
}

fn check_shapes(a: &BitPlaneMatrix, b: &BitPlaneMatrix) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(AbqError::Shape(format!(
            "A is {}x{} but B is {}x{}",
            a.rows(),
            a.cols(),
            b.cols(),
            b.rows()
        )));
    }
    Ok(())
}

/// Unsigned product of the code matrices behind `a` (M × K, p planes) and
/// `b` (K × N stored N × K, q planes), with 32-bit accumulation.
pub fn gemm_arbitrary(
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    tile: &TileConfig,
) -> Result<IntMatrix<i32>> {
    gemm_arbitrary_with_stats(a, b, tile).map(|(acc, _)| acc)
}

pub fn gemm_arbitrary_with_stats(
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    tile: &TileConfig,
) -> Result<(IntMatrix<i32>, GemmStats)> {
    check_shapes(a, b)?;
    check_overflow(a.planes(), b.planes(), a.cols())?;
    let (wide, stats) = run_blocked(a, b, tile)?;
    let data = wide.data.into_iter().map(|v| v as i32).collect();
    Ok((
        IntMatrix {
            rows: wide.rows,
            cols: wide.cols,
            data,
        },
        stats,
    ))
}

/// Same product with a 64-bit accumulator, for shapes the i32 guard rejects.
pub fn gemm_arbitrary_wide(
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    tile: &TileConfig,
) -> Result<IntMatrix<i64>> {
    check_shapes(a, b)?;
    run_blocked(a, b, tile).map(|(acc, _)| acc)
}

fn run_blocked(
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    tile: &TileConfig,
) -> Result<(IntMatrix<i64>, GemmStats)> {
    run_blocked_on(a, b, tile, detect_isa())
}

fn run_blocked_on(
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    tile: &TileConfig,
    isa: Isa,
) -> Result<(IntMatrix<i64>, GemmStats)> {
    let (p, q) = (a.planes(), b.planes());
    tile.validate(p, q)?;
    let (m, n) = (a.rows(), b.rows());
    let counters = Counters::default();
    let blocks: Vec<(usize, usize)> = (0..m.div_ceil(tile.bm))
        .flat_map(|bi| (0..n.div_ceil(tile.bn)).map(move |bj| (bi * tile.bm, bj * tile.bn)))
        .collect();
    let tiles: Vec<Vec<i64>> = blocks
        .par_iter()
        .map(|&(i0, j0)| {
            let job = BlockJob {
                a,
                b,
                tile,
                i0,
                j0,
                rows: tile.bm.min(m - i0),
                cols: tile.bn.min(n - j0),
            };
            job.run(isa, &counters)
        })
        .collect();
    let mut data = vec![0i64; m * n];
    for (&(i0, j0), t) in blocks.iter().zip(&tiles) {
        let cols = tile.bn.min(n - j0);
        for (r, chunk) in t.chunks(cols).enumerate() {
            data[(i0 + r) * n + j0..(i0 + r) * n + j0 + cols].copy_from_slice(chunk);
        }
    }
    Ok((
        IntMatrix {
            rows: m,
            cols: n,
            data,
        },
        counters.snapshot(),
    ))
}

/// Which inner-tile kernel the host supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Isa {
    Generic,
    Popcnt,
    Avx512,
}

fn detect_isa() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f")
            && std::is_x86_feature_detected!("avx512vpopcntdq")
        {
            return Isa::Avx512;
        }
        if std::is_x86_feature_detected!("popcnt") {
            return Isa::Popcnt;
        }
    }
    Isa::Generic
}

/// Rows of A and lanes of B handled by one register block.
const MR: usize = 4;
const LANES: usize = 8;

struct BlockJob<'a> {
    a: &'a BitPlaneMatrix,
    b: &'a BitPlaneMatrix,
    tile: &'a TileConfig,
    i0: usize,
    j0: usize,
    rows: usize,
    cols: usize,
}

/// Staged operands of one K slice: A as `[stacked row][word]`, B transposed
/// to `[word][stacked column]` so a vector load covers eight columns.
struct Stage<'s> {
    a: &'s [u64],
    b: &'s [u64],
    a_stride: usize,
    b_stride: usize,
    kw: usize,
}

impl BlockJob<'_> {
    fn run(&self, isa: Isa, counters: &Counters) -> Vec<i64> {
        match isa {
            #[cfg(target_arch = "x86_64")]
            // SAFETY: both features were detected at runtime.
            Isa::Avx512 => unsafe { self.run_avx512(counters) },
            #[cfg(target_arch = "x86_64")]
            // SAFETY: the popcnt feature was detected at runtime.
            Isa::Popcnt => unsafe { self.run_popcnt(counters) },
            _ => self.run_with(counters, inner_tile_scalar),
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "popcnt")]
    unsafe fn run_popcnt(&self, counters: &Counters) -> Vec<i64> {
        self.run_with(counters, inner_tile_scalar)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f,avx512vpopcntdq,popcnt")]
    unsafe fn run_avx512(&self, counters: &Counters) -> Vec<i64> {
        self.run_with(counters, |st, rows, cols, out_stride, out| {
            // SAFETY: the enclosing function carries the required features.
            unsafe { avx512::inner_tile(st, rows, cols, out_stride, out) }
        })
    }

    #[inline(always)]
    fn run_with(
        &self,
        counters: &Counters,
        kernel: impl Fn(&Stage<'_>, Range<usize>, Range<usize>, usize, &mut [u32]),
    ) -> Vec<i64> {
        let t = self.tile;
        let (p, q) = (self.a.planes() as usize, self.b.planes() as usize);
        let stacked_rows = p * t.bm;
        let stacked_cols = q * t.bn;
        let chunk_words = t.bk / WORD_BITS;
        let k_words = self.a.words_per_row();
        let (x_tiles, w_tiles) = t.warp_grid(p as u32, q as u32);

        let mut products = vec![0u32; stacked_rows * stacked_cols];
        let mut a_stage = vec![0u64; stacked_rows * chunk_words];
        let mut b_stage = vec![0u64; chunk_words * stacked_cols];
        let mut bmma_ops = 0u64;

        let mut kc = 0;
        while kc < k_words {
            let kw = chunk_words.min(k_words - kc);
            self.stage_a(p, kc, kw, chunk_words, &mut a_stage);
            self.stage_b(q, kc, kw, stacked_cols, &mut b_stage);
            let st = Stage {
                a: &a_stage,
                b: &b_stage,
                a_stride: chunk_words,
                b_stride: stacked_cols,
                kw,
            };
            for wr in 0..x_tiles {
                for wc in 0..w_tiles {
                    kernel(
                        &st,
                        wr * t.wm..(wr + 1) * t.wm,
                        wc * t.wn..(wc + 1) * t.wn,
                        stacked_cols,
                        &mut products,
                    );
                }
            }
            let k_steps = (kw * WORD_BITS).div_ceil(t.wk) as u64;
            bmma_ops +=
                (x_tiles * w_tiles) as u64 * ((t.wm / MMA_M) * (t.wn / MMA_N)) as u64 * k_steps;
            kc += kw;
        }

        // Bit reduction: Σ_s Σ_t Y^{s,t} · 2^(s+t).
        let mut out = vec![0i64; self.rows * self.cols];
        for s in 0..p {
            for tq in 0..q {
                let shift = (s + tq) as u32;
                for i in 0..self.rows {
                    let src = &products[(s * t.bm + i) * stacked_cols + tq * t.bn..][..self.cols];
                    for (o, &v) in out[i * self.cols..(i + 1) * self.cols].iter_mut().zip(src) {
                        *o += i64::from(v) << shift;
                    }
                }
            }
        }
        counters.blocks.fetch_add(1, Ordering::Relaxed);
        counters
            .plane_pairs
            .fetch_add((p * q) as u64, Ordering::Relaxed);
        counters.bmma.fetch_add(bmma_ops, Ordering::Relaxed);
        out
    }

    /// Stacked row `s·bm + r` holds plane `s` of block row `r`; rows past the
    /// matrix edge and words past the slice stay zero.
    #[inline(always)]
    fn stage_a(&self, planes: usize, kc: usize, kw: usize, stride: usize, buf: &mut [u64]) {
        let bm = self.tile.bm;
        for s in 0..planes {
            for r in 0..bm {
                let dst = &mut buf[(s * bm + r) * stride..][..stride];
                if r < self.rows {
                    dst[..kw]
                        .copy_from_slice(&self.a.plane_row(s as u32, self.i0 + r)[kc..kc + kw]);
                    dst[kw..].fill(0);
                } else {
                    dst.fill(0);
                }
            }
        }
    }

    #[inline(always)]
    fn stage_b(&self, planes: usize, kc: usize, kw: usize, stride: usize, buf: &mut [u64]) {
        let bn = self.tile.bn;
        buf.fill(0);
        for t in 0..planes {
            for c in 0..self.cols {
                let src = &self.b.plane_row(t as u32, self.j0 + c)[kc..kc + kw];
                let col = t * bn + c;
                for (w, &v) in src.iter().enumerate() {
                    buf[w * stride + col] = v;
                }
            }
        }
    }
}

/// Portable inner tile: `MR × 8` register blocks.
#[inline(always)]
fn inner_tile_scalar(
    st: &Stage<'_>,
    rows: Range<usize>,
    cols: Range<usize>,
    out_stride: usize,
    out: &mut [u32],
) {
    for r in rows.step_by(MR) {
        for c in cols.clone().step_by(LANES) {
            let mut acc = [[0u32; LANES]; MR];
            for k in 0..st.kw {
                let bv = &st.b[k * st.b_stride + c..][..LANES];
                for (d, row) in acc.iter_mut().enumerate() {
                    let x = st.a[(r + d) * st.a_stride + k];
                    for (cell, &y) in row.iter_mut().zip(bv) {
                        *cell += (x & y).count_ones();
                    }
                }
            }
            for (d, row) in acc.iter().enumerate() {
                let o = &mut out[(r + d) * out_stride + c..][..LANES];
                for (dst, &v) in o.iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;
    use std::ops::Range;

    use super::{Stage, LANES, MR};

    /// `MR × (8·V)` register blocks: A words are broadcast, eight B columns
    /// share one vector, so each lane accumulates its own output element.
    #[inline]
    #[target_feature(enable = "avx512f,avx512vpopcntdq")]
    unsafe fn block<const V: usize>(
        st: &Stage<'_>,
        r: usize,
        c: usize,
        out_stride: usize,
        out: &mut [u32],
    ) {
        let mut acc = [[_mm512_setzero_si512(); V]; MR];
        for k in 0..st.kw {
            let bp = st.b.as_ptr().add(k * st.b_stride + c);
            let bv: [__m512i; V] =
                std::array::from_fn(|v| _mm512_loadu_si512(bp.add(v * LANES).cast()));
            for (d, row) in acc.iter_mut().enumerate() {
                let x = _mm512_set1_epi64(*st.a.get_unchecked((r + d) * st.a_stride + k) as i64);
                for (cell, &y) in row.iter_mut().zip(&bv) {
                    *cell = _mm512_add_epi64(*cell, _mm512_popcnt_epi64(_mm512_and_si512(x, y)));
                }
            }
        }
        for (d, row) in acc.iter().enumerate() {
            for (v, &cell) in row.iter().enumerate() {
                let dst = out
                    .as_mut_ptr()
                    .add((r + d) * out_stride + c + v * LANES)
                    .cast::<__m256i>();
                let sum = _mm256_add_epi32(_mm256_loadu_si256(dst), _mm512_cvtepi64_epi32(cell));
                _mm256_storeu_si256(dst, sum);
            }
        }
    }

    #[inline]
    #[target_feature(enable = "avx512f,avx512vpopcntdq")]
    pub(super) unsafe fn inner_tile(
        st: &Stage<'_>,
        rows: Range<usize>,
        cols: Range<usize>,
        out_stride: usize,
        out: &mut [u32],
    ) {
        debug_assert!(rows.len() % MR == 0 && cols.len() % LANES == 0);
        debug_assert!(rows.end * st.a_stride <= st.a.len());
        debug_assert!(st.kw * st.b_stride <= st.b.len() && cols.end <= st.b_stride);
        debug_assert!(rows.end * out_stride <= out.len());
        let width = cols.len();
        for r in rows.step_by(MR) {
            let mut c = cols.start;
            while c < cols.end {
                let left = cols.end - c;
                if left >= 4 * LANES && width % (4 * LANES) == 0 {
                    block::<4>(st, r, c, out_stride, out);
                    c += 4 * LANES;
                } else if left >= 2 * LANES && width % (2 * LANES) == 0 {
                    block::<2>(st, r, c, out_stride, out);
                    c += 2 * LANES;
                } else {
                    block::<1>(st, r, c, out_stride, out);
                    c += LANES;
                }
            }
        }
    }
}

fn popcnt_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("popcnt")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// The 32-bit path when the overflow guard allows it, the 64-bit path
/// otherwise; either way the result is widened to `i64`.
pub fn gemm_i64(
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    tile: &TileConfig,
) -> Result<IntMatrix<i64>> {
    if check_overflow(a.planes(), b.planes(), a.cols()).is_ok() {
        gemm_arbitrary(a, b, tile).map(|r| IntMatrix {
            rows: r.rows,
            cols: r.cols,
            data: r.data.into_iter().map(i64::from).collect(),
        })
    } else {
        gemm_arbitrary_wide(a, b, tile)
    }
}

/// Untiled plane-by-plane reference: for every output element and every
/// plane pair, one AND-popcount over the whole K row. The autotune baseline.
pub fn gemm_naive(a: &BitPlaneMatrix, b: &BitPlaneMatrix) -> Result<IntMatrix<i64>> {
    check_shapes(a, b)?;
    #[cfg(target_arch = "x86_64")]
    {
        if popcnt_available() {
            // SAFETY: the popcnt feature was detected at runtime.
            return Ok(unsafe { naive_popcnt(a, b) });
        }
    }
    Ok(naive_generic(a, b))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn naive_popcnt(a: &BitPlaneMatrix, b: &BitPlaneMatrix) -> IntMatrix<i64> {
    naive_generic(a, b)
}

#[inline(always)]
fn naive_generic(a: &BitPlaneMatrix, b: &BitPlaneMatrix) -> IntMatrix<i64> {
    let (m, n) = (a.rows(), b.rows());
    let mut data = vec![0i64; m * n];
    for s in 0..a.planes() {
        for t in 0..b.planes() {
            for i in 0..m {
                let ar = a.plane_row(s, i);
                for j in 0..n {
                    data[i * n + j] += i64::from(and_popcount(ar, b.plane_row(t, j))) << (s + t);
                }
            }
        }
    }
    IntMatrix {
        rows: m,
        cols: n,
        data,
    }
}

/// `acc − z_a·colsum_b − z_b·rowsum_a + K·z_a·z_b`, i.e. `Σ_k (a − z_a)(b − z_b)`.
///
/// `a_row_sums[i]` sums row i of A's codes; `b_col_sums[j]` sums column j of
/// B (K × N). Zero points are per A row and per B column.
pub fn zero_point_correct(
    acc: &IntMatrix<i32>,
    a_row_sums: &[i64],
    b_col_sums: &[i64],
    z_a: &[i32],
    z_b: &[i32],
    k: usize,
) -> Result<IntMatrix<i32>> {
    let (m, n) = (acc.rows, acc.cols);
    if a_row_sums.len() != m || z_a.len() != m || b_col_sums.len() != n || z_b.len() != n {
        return Err(AbqError::Shape(format!(
            "correction vectors ({}, {}, {}, {}) for a {m}x{n} accumulator",
            a_row_sums.len(),
            z_a.len(),
            b_col_sums.len(),
            z_b.len()
        )));
    }
    let k = k as i64;
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let za = i64::from(z_a[i]);
        for j in 0..n {
            let zb = i64::from(z_b[j]);
            let v =
                i64::from(acc.get(i, j)) - za * b_col_sums[j] - zb * a_row_sums[i] + k * za * zb;
            data.push(i32::try_from(v).map_err(|_| {
                AbqError::Shape(format!("corrected value {v} at ({i}, {j}) exceeds i32"))
            })?);
        }
    }
    Ok(IntMatrix {
        rows: m,
        cols: n,
        data,
    })
}
