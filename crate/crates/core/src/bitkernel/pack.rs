//! BitPacking: `[rows, cols, p]` codes become `p` row-major bitsets.

use crate::error::{AbqError, Result};

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

/// `planes` row-major bitsets of a `rows × cols` code matrix, laid out
/// `[plane][row][word]`. Bits past `cols` in the last word of a row are zero.
///
/// The right-hand operand of a GEMM is stored the same way with `rows = N`,
/// `cols = K`, i.e. as the column-major form of its K × N matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlaneMatrix {
    planes: u32,
    rows: usize,
    cols: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitPlaneMatrix {
    pub fn zeros(planes: u32, rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        Self {
            planes,
            rows,
            cols,
            words_per_row,
            data: vec![0; planes as usize * rows * words_per_row],
        }
    }

    /// Rebuild from raw words, checking the layout and the zero-padding invariant.
    pub fn from_words(planes: u32, rows: usize, cols: usize, data: Vec<u64>) -> Result<Self> {
        let words_per_row = words_for(cols);
        if planes == 0 || data.len() != planes as usize * rows * words_per_row {
            return Err(AbqError::Format(format!(
                "{} words for {planes} planes of {rows}x{cols}",
                data.len()
            )));
        }
        let m = Self {
            planes,
            rows,
            cols,
            words_per_row,
            data,
        };
        if !m.padding_is_zero() {
            return Err(AbqError::Format("non-zero padding bits".into()));
        }
        Ok(m)
    }

    #[inline]
    pub fn planes(&self) -> u32 {
        self.planes
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.data
    }

    #[inline]
    pub fn plane_row(&self, plane: u32, row: usize) -> &[u64] {
        let start = (plane as usize * self.rows + row) * self.words_per_row;
        &self.data[start..start + self.words_per_row]
    }

    pub fn plane(&self, plane: u32) -> PlaneView<'_> {
        let len = self.rows * self.words_per_row;
        let start = plane as usize * len;
        PlaneView {
            rows: self.rows,
            cols: self.cols,
            words_per_row: self.words_per_row,
            data: &self.data[start..start + len],
        }
    }

    #[inline]
    pub fn bit(&self, plane: u32, row: usize, col: usize) -> bool {
        (self.plane_row(plane, row)[col / WORD_BITS] >> (col % WORD_BITS)) & 1 == 1
    }

    /// Inverse of [`bitpack`].
    pub fn unpack(&self) -> Vec<u8> {
        let mut codes = vec![0u8; self.rows * self.cols];
        for s in 0..self.planes {
            for i in 0..self.rows {
                let words = self.plane_row(s, i);
                for (k, c) in codes[i * self.cols..(i + 1) * self.cols]
                    .iter_mut()
                    .enumerate()
                {
                    let bit = (words[k / WORD_BITS] >> (k % WORD_BITS)) & 1;
                    *c |= (bit as u8) << s;
                }
            }
        }
        codes
    }

    pub fn padding_is_zero(&self) -> bool {
        let tail = self.cols % WORD_BITS;
        if tail == 0 || self.words_per_row == 0 {
            return true;
        }
        let mask = !0u64 << tail;
        self.data
            .chunks(self.words_per_row)
            .all(|row| row[self.words_per_row - 1] & mask == 0)
    }
}

/// One bit plane.
#[derive(Clone, Copy, Debug)]
pub struct PlaneView<'a> {
    pub rows: usize,
    pub cols: usize,
    pub words_per_row: usize,
    pub data: &'a [u64],
}

impl<'a> PlaneView<'a> {
    #[inline]
    pub fn row(&self, i: usize) -> &'a [u64] {
        &self.data[i * self.words_per_row..(i + 1) * self.words_per_row]
    }
}

/// Split `codes` (row-major `rows × cols`) into `planes` bit planes:
/// bit `(i, k)` of plane `s` is `(code[i][k] >> s) & 1`.
pub fn bitpack(codes: &[u8], rows: usize, cols: usize, planes: u32) -> Result<BitPlaneMatrix> {
    if codes.len() != rows * cols {
        return Err(AbqError::Shape(format!(
            "{} codes for a {rows}x{cols} matrix",
            codes.len()
        )));
    }
    if planes == 0 || planes > 8 {
        return Err(AbqError::InvalidSpec(format!(
            "{planes} bit planes (need 1..=8)"
        )));
    }
    if planes < 8 {
        if let Some(p) = codes.iter().position(|&c| u32::from(c) >> planes != 0) {
            return Err(AbqError::CodeOutOfRange {
                row: p / cols,
                col: p % cols,
                code: u32::from(codes[p]),
                planes,
            });
        }
    }
    let mut m = BitPlaneMatrix::zeros(planes, rows, cols);
    let wpr = m.words_per_row;
    let plane_len = rows * wpr;
    for i in 0..rows {
        let row = &codes[i * cols..(i + 1) * cols];
        for (w, chunk) in row.chunks(WORD_BITS).enumerate() {
            for s in 0..planes {
                let mut word = 0u64;
                for (b, &c) in chunk.iter().enumerate() {
                    word |= u64::from((c >> s) & 1) << b;
                }
                m.data[s as usize * plane_len + i * wpr + w] = word;
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_bit_scalar_splits_into_two_planes() {
        let m = bitpack(&[3], 1, 1, 2).unwrap();
        assert_eq!(m.plane_row(0, 0), &[1]);
        assert_eq!(m.plane_row(1, 0), &[1]);
    }

    #[test]
    fn zeros_pack_to_zero_planes() {
        let m = bitpack(&[0; 6 * 70], 6, 70, 5).unwrap();
        assert!(m.words().iter().all(|&w| w == 0));
        assert_eq!(m.words_per_row(), 2);
    }

    #[test]
    fn out_of_range_code_reports_coordinates() {
        let mut codes = vec![1u8; 12];
        codes[7] = 4;
        match bitpack(&codes, 3, 4, 2) {
            Err(AbqError::CodeOutOfRange {
                row: 1,
                col: 3,
                code: 4,
                planes: 2,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        let mut m = bitpack(&[1; 3], 1, 3, 1).unwrap().words().to_vec();
        m[0] |= 1 << 40;
        assert!(BitPlaneMatrix::from_words(1, 1, 3, m).is_err());
    }

    proptest! {
        #[test]
        fn unpack_inverts_bitpack(
            rows in 1usize..20,
            cols in 1usize..140,
            planes in 1u32..=8,
            seed in any::<u64>(),
        ) {
            let mut state = seed | 1;
            let codes: Vec<u8> = (0..rows * cols)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    (state % (1u64 << planes)) as u8
                })
                .collect();
            let m = bitpack(&codes, rows, cols, planes).unwrap();
            prop_assert!(m.padding_is_zero());
            prop_assert_eq!(m.unpack(), codes.clone());
            for s in 0..planes {
                for i in 0..rows {
                    for k in 0..cols {
                        prop_assert_eq!(m.bit(s, i, k), (codes[i * cols + k] >> s) & 1 == 1);
                    }
                }
            }
        }
    }
}
