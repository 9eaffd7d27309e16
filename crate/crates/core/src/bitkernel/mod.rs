//! Arbitrary-bit GEMM engine.
//!
//! Codes of a p-bit operand A (M × K) and a q-bit operand B (K × N) are split
//! into bit planes; the unsigned product is `Σ_s Σ_t BMMA(A^s, B^t)·2^(s+t)`
//! where BMMA is an AND-popcount 1-bit matrix product. Signed values are
//! recovered afterwards by zero-point correction, then scaled back to reals.

pub mod autotune;
pub mod bmma;
pub mod gemm;
pub mod pack;
pub mod tile;

pub use autotune::{autotune, bench_naive, BenchRecord};
pub use bmma::bmma;
pub use gemm::{
    gemm_arbitrary, gemm_arbitrary_wide, gemm_arbitrary_with_stats, gemm_i64, gemm_naive,
    zero_point_correct, GemmStats, IntMatrix,
};
pub use pack::{bitpack, BitPlaneMatrix};
pub use tile::{enumerate_tile_candidates, padding_redundancy, TileConfig};

use crate::error::{AbqError, Result};
use crate::matrix::Matrix;
use crate::quantizer::QuantizedTensor;
use crate::scalar::Scalar;

/// Raw accumulator, zero-point-corrected integers and rescaled reals of one
/// quantized product.
#[derive(Clone, Debug, PartialEq)]
pub struct GemmResult<T> {
    pub acc: IntMatrix<i64>,
    pub corrected: IntMatrix<i64>,
    pub dequant: Matrix<T>,
}

/// Pack a quantized tensor into as many planes as its scheme needs.
pub fn pack_tensor<T: Scalar>(q: &QuantizedTensor<T>) -> Result<BitPlaneMatrix> {
    bitpack(&q.codes, q.rows, q.cols, q.spec.planes())
}

/// A tile that is valid for any shape: the minimal-padding block height with
/// a single inner tile, 64-column blocks and the deepest K slice.
pub fn default_tile(p: u32, q: u32, m: usize, n: usize, k: usize) -> TileConfig {
    let cands = enumerate_tile_candidates(p, q, m, n, k);
    cands
        .iter()
        .copied()
        .filter(|t| t.bk == 512)
        .max_by_key(|t| {
            let (x, w) = t.warp_grid(p, q);
            // prefer one inner tile per block, then wide blocks
            (std::cmp::Reverse(x * w), t.bn.min(64), t.bm)
        })
        .or_else(|| cands.first().copied())
        .unwrap_or_else(|| TileConfig::new(8, 8, 128, 8, 8))
}

/// `dequantize(act) · dequantize(weight)ᵀ` through the integer engine.
///
/// `act` is (tokens × in) with one scale per token, `weight` is (out × in)
/// with one scale per output channel; both planes come from [`pack_tensor`].
pub fn quantized_matmul<T: Scalar>(
    act: &QuantizedTensor<T>,
    act_planes: &BitPlaneMatrix,
    weight: &QuantizedTensor<T>,
    weight_planes: &BitPlaneMatrix,
    tile: Option<&TileConfig>,
) -> Result<GemmResult<T>> {
    if act.cols != weight.cols {
        return Err(AbqError::Shape(format!(
            "activation {}x{} against weight {}x{}",
            act.rows, act.cols, weight.rows, weight.cols
        )));
    }
    let (m, n, k) = (act.rows, weight.rows, act.cols);
    let (p, q) = (act_planes.planes(), weight_planes.planes());
    let tile = tile.copied().unwrap_or_else(|| default_tile(p, q, m, n, k));
    let acc = gemm_i64(act_planes, weight_planes, &tile)?;
    let z_a: Vec<i64> = (0..m).map(|i| i64::from(act.zero_of_row(i))).collect();
    let z_b: Vec<i64> = (0..n).map(|j| i64::from(weight.zero_of_row(j))).collect();
    let row_a = act.code_row_sums();
    let col_b = weight.code_row_sums();
    let k64 = k as i64;
    let mut corrected = Vec::with_capacity(m * n);
    let mut dequant = Matrix::zeros(m, n);
    for i in 0..m {
        let sa = act.scale_of_row(i);
        for j in 0..n {
            let v = acc.get(i, j) - z_a[i] * col_b[j] - z_b[j] * row_a[i] + k64 * z_a[i] * z_b[j];
            corrected.push(v);
            dequant[(i, j)] = sa * weight.scale_of_row(j) * T::of(v as f64);
        }
    }
    Ok(GemmResult {
        acc,
        corrected: IntMatrix {
            rows: m,
            cols: n,
            data: corrected,
        },
        dequant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{dequantize, quantize, Granularity, QuantSpec, Scheme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pipeline_matches_real_product_of_dequantized_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (wb, ab, scheme) in [
            (4, 4, Scheme::Asymmetric),
            (2, 8, Scheme::Balanced),
            (3, 5, Scheme::Symmetric),
        ] {
            let x = Matrix::<f64>::randn(9, 70, 1.0, &mut rng);
            let w = Matrix::<f64>::randn(13, 70, 0.2, &mut rng);
            let qa = quantize(&x, &QuantSpec::asymmetric(ab, Granularity::PerToken), None).unwrap();
            let qw = quantize(
                &w,
                &QuantSpec::new(wb, scheme, Granularity::PerChannel),
                None,
            )
            .unwrap();
            let out = quantized_matmul(
                &qa,
                &pack_tensor(&qa).unwrap(),
                &qw,
                &pack_tensor(&qw).unwrap(),
                None,
            )
            .unwrap();
            let reference = dequantize(&qa).matmul_t(&dequantize(&qw)).unwrap();
            assert!(out.dequant.rel_err(&reference) < 1e-12);
            assert!(out.acc.data.iter().all(|&v| v >= 0));
        }
    }

    #[test]
    fn default_tile_is_valid() {
        for (p, q, m) in [(1, 1, 1), (8, 2, 1), (4, 4, 8), (3, 5, 100)] {
            default_tile(p, q, m, 4096, 4096).validate(p, q).unwrap();
        }
    }
}
