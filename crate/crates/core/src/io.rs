//! Little-endian binary containers.
//!
//! | magic  | contents                                      |
//! |--------|-----------------------------------------------|
//! | `ABQT` | one quantized tensor                          |
//! | `ABQP` | bit planes of one code matrix                 |
//! | `ABQM` | block weights as named f32 tensors            |
//! | `ABQC` | calibration state as named parameter records  |
//! | `ABQQ` | quantized block: per layer an ABQT + ABQP pair |
//!
//! Every container starts with its magic and a `u16` version. Reals are
//! stored as `f32` whatever the in-memory scalar.

use std::io::{Read, Write};

use crate::bitkernel::BitPlaneMatrix;
use crate::calibration::{param_layout, param_tensors, param_tensors_mut, CalibState, LossRecord};
use crate::error::{AbqError, Result};
use crate::matrix::Matrix;
use crate::quantizer::{Granularity, QuantSpec, QuantizedTensor, Scheme};
use crate::scalar::Scalar;
use crate::toymodel::{BlockConfig, BlockParams, Linear, ToyBlock};

pub const VERSION: u16 = 1;

pub const TENSOR_MAGIC: &[u8; 4] = b"ABQT";
pub const PLANES_MAGIC: &[u8; 4] = b"ABQP";
pub const MODEL_MAGIC: &[u8; 4] = b"ABQM";
pub const CALIB_MAGIC: &[u8; 4] = b"ABQC";
pub const QMODEL_MAGIC: &[u8; 4] = b"ABQQ";

// Guards against absurd allocations from corrupt headers.
const MAX_ELEMS: usize = 1 << 31;

struct Out<'a, W: Write>(&'a mut W);

impl<W: Write> Out<'_, W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v =
            u32::try_from(v).map_err(|_| AbqError::Format(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32s<T: Scalar>(&mut self, v: &[T]) -> Result<()> {
        for x in v {
            self.bytes(&(x.as_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }
    fn name(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| AbqError::Format("name too long".into()))?;
        self.u16(n)?;
        self.bytes(s.as_bytes())
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        self.bytes(magic)?;
        self.u16(VERSION)
    }
}

struct In<'a, R: Read>(&'a mut R);

impl<R: Read> In<'_, R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => AbqError::Format("truncated file".into()),
            _ => AbqError::Io(e),
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        check_len(n)?;
        (0..n)
            .map(|_| Ok(T::of(f64::from(f32::from_le_bytes(self.array()?)))))
            .collect()
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        check_len(n)?;
        let mut v = vec![0u8; n];
        self.0
            .read_exact(&mut v)
            .map_err(|_| AbqError::Format("truncated file".into()))?;
        Ok(v)
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| AbqError::Format("record name is not UTF-8".into()))
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.array::<4>()?;
        if &m != magic {
            return Err(AbqError::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&m)
            )));
        }
        let v = self.u16()?;
        if v != VERSION {
            return Err(AbqError::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

fn check_len(n: usize) -> Result<()> {
    if n > MAX_ELEMS {
        return Err(AbqError::Format(format!("record of {n} elements")));
    }
    Ok(())
}

fn checked_area(rows: usize, cols: usize) -> Result<usize> {
    rows.checked_mul(cols)
        .filter(|&n| n <= MAX_ELEMS)
        .ok_or_else(|| AbqError::Format(format!("{rows}x{cols} is too large")))
}

/// Magic, version, bits, scheme, granularity, rows, cols, f32 scales,
/// i32 zero points, one byte per code. Clip factors are not stored.
pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, q: &QuantizedTensor<T>) -> Result<()> {
    q.validate()?;
    let mut o = Out(w);
    o.header(TENSOR_MAGIC)?;
    o.u8(q.spec.bits)?;
    o.u8(q.spec.scheme.id())?;
    o.u8(q.spec.granularity.id())?;
    o.u32(q.rows)?;
    o.u32(q.cols)?;
    o.f32s(&q.scales)?;
    for z in &q.zero_points {
        o.bytes(&z.to_le_bytes())?;
    }
    o.bytes(&q.codes)
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<QuantizedTensor<T>> {
    let mut i = In(r);
    i.header(TENSOR_MAGIC)?;
    let bits = i.u8()?;
    let scheme = Scheme::from_id(i.u8()?)?;
    let granularity = Granularity::from_id(i.u8()?)?;
    let rows = i.u32()?;
    let cols = i.u32()?;
    let area = checked_area(rows, cols)?;
    let groups = granularity.groups(rows);
    let scales = i.f32s(groups)?;
    let zero_points = (0..groups).map(|_| i.i32()).collect::<Result<Vec<_>>>()?;
    let codes = i.bytes(area)?;
    let q = QuantizedTensor {
        codes,
        rows,
        cols,
        scales,
        zero_points,
        spec: QuantSpec::new(bits, scheme, granularity),
    };
    q.validate()?;
    Ok(q)
}

/// Magic, version, planes, rows, cols, words per row, then the words.
pub fn write_planes<W: Write>(w: &mut W, p: &BitPlaneMatrix) -> Result<()> {
    let mut o = Out(w);
    o.header(PLANES_MAGIC)?;
    let planes =
        u8::try_from(p.planes()).map_err(|_| AbqError::Format("too many planes".into()))?;
    o.u8(planes)?;
    o.u32(p.rows())?;
    o.u32(p.cols())?;
    o.u32(p.words_per_row())?;
    for &word in p.words() {
        o.u64(word)?;
    }
    Ok(())
}

pub fn read_planes<R: Read>(r: &mut R) -> Result<BitPlaneMatrix> {
    let mut i = In(r);
    i.header(PLANES_MAGIC)?;
    let planes = u32::from(i.u8()?);
    let rows = i.u32()?;
    let cols = i.u32()?;
    let wpr = i.u32()?;
    if wpr != crate::bitkernel::pack::words_for(cols) {
        return Err(AbqError::Format(format!(
            "{wpr} words per row for {cols} columns"
        )));
    }
    let n = checked_area(checked_area(planes as usize, rows)?, wpr)?;
    let data = (0..n).map(|_| i.u64()).collect::<Result<Vec<_>>>()?;
    BitPlaneMatrix::from_words(planes, rows, cols, data)
}

fn write_matrix<T: Scalar, W: Write>(o: &mut Out<'_, W>, name: &str, m: &Matrix<T>) -> Result<()> {
    o.name(name)?;
    o.u32(m.rows())?;
    o.u32(m.cols())?;
    o.f32s(m.as_slice())
}

fn read_matrix<T: Scalar, R: Read>(i: &mut In<'_, R>) -> Result<(String, Matrix<T>)> {
    let name = i.name()?;
    let rows = i.u32()?;
    let cols = i.u32()?;
    let data = i.f32s(checked_area(rows, cols)?)?;
    Ok((name, Matrix::from_vec(rows, cols, data)?))
}

/// Block sizes, then one named tensor per projection and norm gain.
pub fn write_block<T: Scalar, W: Write>(w: &mut W, b: &ToyBlock<T>) -> Result<()> {
    b.validate()?;
    let mut o = Out(w);
    o.header(MODEL_MAGIC)?;
    o.u32(b.config.dim)?;
    o.u32(b.config.heads)?;
    o.u32(b.config.hidden)?;
    o.u32(Linear::ALL.len() + 2)?;
    for l in Linear::ALL {
        write_matrix(&mut o, l.name(), b.weight(l))?;
    }
    let gain = |v: &[T]| Matrix::from_vec(1, v.len(), v.to_vec());
    write_matrix(&mut o, "attn_norm", &gain(&b.attn_norm)?)?;
    write_matrix(&mut o, "mlp_norm", &gain(&b.mlp_norm)?)
}

pub fn read_block<T: Scalar, R: Read>(r: &mut R) -> Result<ToyBlock<T>> {
    let mut i = In(r);
    i.header(MODEL_MAGIC)?;
    let config = BlockConfig {
        dim: i.u32()?,
        heads: i.u32()?,
        hidden: i.u32()?,
    };
    config.validate()?;
    let count = i.u32()?;
    let mut weights: Vec<Option<Matrix<T>>> = vec![None; Linear::ALL.len()];
    let (mut attn_norm, mut mlp_norm) = (None, None);
    for _ in 0..count {
        let (name, m) = read_matrix::<T, R>(&mut i)?;
        match name.as_str() {
            "attn_norm" => attn_norm = Some(m.into_vec()),
            "mlp_norm" => mlp_norm = Some(m.into_vec()),
            n => match Linear::from_name(n) {
                Some(l) => weights[l.index()] = Some(m),
                None => return Err(AbqError::Format(format!("unknown tensor {n:?}"))),
            },
        }
    }
    let missing = |what: &str| AbqError::Format(format!("missing tensor {what}"));
    let weights = weights
        .into_iter()
        .zip(Linear::ALL)
        .map(|(w, l)| w.ok_or_else(|| missing(l.name())))
        .collect::<Result<Vec<_>>>()?;
    let block = ToyBlock {
        config,
        weights,
        attn_norm: attn_norm.ok_or_else(|| missing("attn_norm"))?,
        mlp_norm: mlp_norm.ok_or_else(|| missing("mlp_norm"))?,
    };
    block.validate()?;
    Ok(block)
}

/// γ flag, step, sizes, then per parameter: name, length, value, first and
/// second moments. Initial and final losses close the file.
pub fn write_calib<T: Scalar, W: Write>(
    w: &mut W,
    s: &CalibState<T>,
    config: &BlockConfig,
) -> Result<()> {
    let mut o = Out(w);
    o.header(CALIB_MAGIC)?;
    o.u8(u8::from(s.gamma))?;
    o.u64(s.step as u64)?;
    o.u32(config.dim)?;
    o.u32(config.heads)?;
    o.u32(config.hidden)?;
    let layout = param_layout(&s.params);
    let tensors = param_tensors(&s.params);
    o.u32(layout.len())?;
    for (k, ((name, _), t)) in layout.iter().zip(tensors).enumerate() {
        o.name(name)?;
        o.u32(t.len())?;
        o.f32s(t)?;
        o.f32s(&s.m[k])?;
        o.f32s(&s.v[k])?;
    }
    for rec in [s.initial_loss, s.final_loss] {
        match rec {
            None => o.u8(0)?,
            Some(r) => {
                o.u8(1)?;
                o.u64(r.step as u64)?;
                o.f32s(&[r.loss, r.dlc, r.akl])?;
            }
        }
    }
    Ok(())
}

/// Returns the state (without loss history) and the block sizes it was made for.
pub fn read_calib<T: Scalar, R: Read>(r: &mut R) -> Result<(CalibState<T>, BlockConfig)> {
    let mut i = In(r);
    i.header(CALIB_MAGIC)?;
    let gamma = i.u8()? != 0;
    let step = i.u64()? as usize;
    let config = BlockConfig {
        dim: i.u32()?,
        heads: i.u32()?,
        hidden: i.u32()?,
    };
    config.validate()?;
    let mut params = BlockParams::<T>::identity(&config, gamma);
    let layout = param_layout(&params);
    let count = i.u32()?;
    if count != layout.len() {
        return Err(AbqError::Format(format!(
            "{count} parameter records, expected {}",
            layout.len()
        )));
    }
    let mut state_m = Vec::with_capacity(count);
    let mut state_v = Vec::with_capacity(count);
    for ((expected, _), slot) in layout.iter().zip(param_tensors_mut(&mut params)) {
        let name = i.name()?;
        if &name != expected {
            return Err(AbqError::Format(format!(
                "record {name:?} where {expected:?} was expected"
            )));
        }
        let n = i.u32()?;
        if n != slot.len() {
            return Err(AbqError::Format(format!(
                "{name} has {n} entries, expected {}",
                slot.len()
            )));
        }
        *slot = i.f32s(n)?;
        state_m.push(i.f32s(n)?);
        state_v.push(i.f32s(n)?);
    }
    let mut losses = [None, None];
    for l in &mut losses {
        if i.u8()? == 1 {
            let step = i.u64()? as usize;
            let v: Vec<f64> = i.f32s(3)?;
            *l = Some(LossRecord {
                step,
                loss: v[0],
                dlc: v[1],
                akl: v[2],
            });
        }
    }
    let mut state = CalibState::new(params);
    state.m = state_m;
    state.v = state_v;
    state.step = step;
    state.initial_loss = losses[0];
    state.final_loss = losses[1];
    Ok((state, config))
}

/// One quantized projection with its pre-packed planes.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedLayer<T> {
    pub name: String,
    pub tensor: QuantizedTensor<T>,
    pub planes: BitPlaneMatrix,
}

pub fn write_packed_model<T: Scalar, W: Write>(w: &mut W, layers: &[PackedLayer<T>]) -> Result<()> {
    let mut o = Out(w);
    o.header(QMODEL_MAGIC)?;
    o.u32(layers.len())?;
    for l in layers {
        o.name(&l.name)?;
        write_tensor(o.0, &l.tensor)?;
        write_planes(o.0, &l.planes)?;
    }
    Ok(())
}

pub fn read_packed_model<T: Scalar, R: Read>(r: &mut R) -> Result<Vec<PackedLayer<T>>> {
    let mut i = In(r);
    i.header(QMODEL_MAGIC)?;
    let n = i.u32()?;
    check_len(n)?;
    let mut out = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let name = i.name()?;
        let tensor = read_tensor(i.0)?;
        let planes = read_planes(i.0)?;
        out.push(PackedLayer {
            name,
            tensor,
            planes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitkernel::pack_tensor;
    use crate::quantizer::quantize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f32_exact(m: &Matrix<f64>) -> Matrix<f64> {
        m.map(|v| f64::from(v as f32))
    }

    #[test]
    fn tensor_header_layout() {
        let x = Matrix::from_rows(&[vec![0.5f64, -1.0], vec![0.25, 0.0]]).unwrap();
        let q = quantize(&x, &QuantSpec::asymmetric(3, Granularity::PerChannel), None).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &q).unwrap();
        assert_eq!(&buf[..4], b"ABQT");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(&buf[6..9], &[3, 0, 1]);
        assert_eq!(u32::from_le_bytes(buf[9..13].try_into().unwrap()), 2);
        // header 17, scales 8, zero points 8, codes 4
        assert_eq!(buf.len(), 17 + 8 + 8 + 4);
    }

    #[test]
    fn tensor_and_planes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = f32_exact(&Matrix::<f64>::randn(5, 70, 1.0, &mut rng));
        for spec in [
            QuantSpec::asymmetric(4, Granularity::PerToken),
            QuantSpec::balanced(2, Granularity::PerChannel),
            QuantSpec::new(3, Scheme::Symmetric, Granularity::PerTensor),
        ] {
            let q = quantize(&x, &spec, None).unwrap();
            let q = QuantizedTensor {
                scales: q.scales.iter().map(|&s| f64::from(s as f32)).collect(),
                ..q
            };
            let mut buf = Vec::new();
            write_tensor(&mut buf, &q).unwrap();
            assert_eq!(read_tensor::<f64, _>(&mut buf.as_slice()).unwrap(), q);

            let p = pack_tensor(&q).unwrap();
            let mut buf = Vec::new();
            write_planes(&mut buf, &p).unwrap();
            assert_eq!(read_planes(&mut buf.as_slice()).unwrap(), p);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = crate::bitkernel::bitpack(&[1, 2, 3], 1, 3, 2).unwrap();
        let mut buf = Vec::new();
        write_planes(&mut buf, &p).unwrap();
        assert!(matches!(
            read_tensor::<f64, _>(&mut buf.as_slice()),
            Err(AbqError::Format(_))
        ));
        buf.pop();
        assert!(matches!(
            read_planes(&mut buf.as_slice()),
            Err(AbqError::Format(_))
        ));
    }

    #[test]
    fn block_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = ToyBlock::<f64>::random(BlockConfig::default(), &mut rng).unwrap();
        for w in &mut b.weights {
            *w = f32_exact(w);
        }
        b.mlp_norm[3] = 0.5;
        let mut buf = Vec::new();
        write_block(&mut buf, &b).unwrap();
        assert_eq!(read_block::<f64, _>(&mut buf.as_slice()).unwrap(), b);
    }

    #[test]
    fn calib_round_trip() {
        let cfg = BlockConfig::default();
        let mut st = CalibState::new(BlockParams::<f32>::identity(&cfg, true));
        st.params.balance[2][5] = 1.75;
        st.m[0][1] = 0.125;
        st.step = 9;
        st.initial_loss = Some(LossRecord {
            step: 0,
            loss: 0.5,
            dlc: 0.25,
            akl: 0.25,
        });
        let mut buf = Vec::new();
        write_calib(&mut buf, &st, &cfg).unwrap();
        let (back, c) = read_calib::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(c, cfg);
        assert_eq!(back, st);
    }
}
