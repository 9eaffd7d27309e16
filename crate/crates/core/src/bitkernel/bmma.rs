//! 1-bit matrix multiply: AND of packed words, then popcount.

use super::pack::PlaneView;
use crate::error::{AbqError, Result};

/// `Σ_k a[k] & b[k]` over packed words.
#[inline(always)]
pub fn and_popcount(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

/// `out[i][j] = Σ_k a[i][k]·b[k][j]` for a row-major `a` (M × K) and a
/// column-major `b` (K × N, passed as its N × K row-major form).
pub fn bmma(a: PlaneView<'_>, b: PlaneView<'_>) -> Result<Vec<i32>> {
    if a.cols != b.cols {
        return Err(AbqError::Shape(format!(
            "bmma K mismatch: {}x{} by {}x{}",
            a.rows, a.cols, b.cols, b.rows
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.push(and_popcount(ar, b.row(j)) as i32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitkernel::pack::bitpack;

    #[test]
    fn identity_times_identity() {
        let eye: Vec<u8> = (0..64).map(|p| u8::from(p / 8 == p % 8)).collect();
        let a = bitpack(&eye, 8, 8, 1).unwrap();
        let out = bmma(a.plane(0), a.plane(0)).unwrap();
        let expected: Vec<i32> = eye.iter().map(|&v| i32::from(v)).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn full_words() {
        let a = bitpack(&[1; 128], 1, 128, 1).unwrap();
        assert_eq!(bmma(a.plane(0), a.plane(0)).unwrap(), vec![128]);
    }

    #[test]
    fn random_against_naive_bit_loop() {
        let mut s = 0x9e37_79b9_7f4a_7c15u64;
        let mut next = || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s & 1) as u8
        };
        let a_bits: Vec<u8> = (0..8 * 256).map(|_| next()).collect();
        // b is K × N = 256 × 8; pack its transpose.
        let b_bits: Vec<u8> = (0..256 * 8).map(|_| next()).collect();
        let b_t: Vec<u8> = (0..8 * 256)
            .map(|p| b_bits[(p % 256) * 8 + p / 256])
            .collect();
        let a = bitpack(&a_bits, 8, 256, 1).unwrap();
        let b = bitpack(&b_t, 8, 256, 1).unwrap();
        let out = bmma(a.plane(0), b.plane(0)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let naive: i32 = (0..256)
                    .map(|k| i32::from(a_bits[i * 256 + k] & b_bits[k * 8 + j]))
                    .sum();
                assert_eq!(out[i * 8 + j], naive);
            }
        }
    }

    #[test]
    fn k_mismatch_is_rejected() {
        let a = bitpack(&[1; 10], 1, 10, 1).unwrap();
        let b = bitpack(&[1; 11], 1, 11, 1).unwrap();
        assert!(bmma(a.plane(0), b.plane(0)).is_err());
    }
}
