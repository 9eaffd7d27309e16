//! Reverse-mode differentiation over small dense matrices.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse. The fake-quant op uses a straight-through
//! estimator and records its rounding decisions, so a second tape built with
//! [`Tape::replay`] evaluates the same graph with those decisions frozen.
//! That frozen function is smooth in the parameters and its exact derivative
//! is what the STE backward returns.

use crate::calibration::loss;
use crate::error::{AbqError, Result};
use crate::matrix::Matrix;
use crate::quantizer::{max_code, step_and_zero, QuantSpec, Scheme};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where one element landed relative to the clamp range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElemKind<T> {
    /// Not clamped; carries the rounding offset `round(u) − u`.
    Inside(T),
    Low,
    High,
}

/// Frozen decisions of one scale group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRecord<T> {
    pub degenerate: bool,
    /// Flat indices of the group max / min.
    pub argmax: usize,
    pub argmin: usize,
    /// Symmetric schemes: whether `|hi|` set the range.
    pub hi_wins: bool,
    /// Rounding offset of the asymmetric zero point.
    pub zero_offset: T,
}

/// Frozen decisions of one fake-quant call.
#[derive(Clone, Debug, PartialEq)]
pub struct FqRecord<T> {
    pub groups: Vec<GroupRecord<T>>,
    pub elems: Vec<ElemKind<T>>,
}

#[derive(Clone, Debug)]
struct GroupVals<T> {
    hi: T,
    lo: T,
    mx: T,
    mn: T,
    alpha: T,
    beta: T,
    zero: T,
}

#[derive(Clone, Debug)]
struct FqSaved<T> {
    x: Var,
    alpha: Option<Var>,
    beta: Option<Var>,
    bits: u8,
    scheme: Scheme,
    group_of_row: Vec<usize>,
    record: FqRecord<T>,
    vals: Vec<GroupVals<T>>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatmulT(Var, Var),
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleCols {
        x: Var,
        s: Var,
        divide: bool,
    },
    AddOuter {
        w: Var,
        a: Var,
        b: Var,
    },
    RmsNorm {
        x: Var,
        gain: Vec<T>,
        inv_rms: Vec<T>,
    },
    Silu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalSoftmax(Var),
    FakeQuant(Box<FqSaved<T>>),
    Dlc {
        q: Var,
        fp: Matrix<T>,
        fp_star: Matrix<T>,
    },
    Akl {
        q: Vec<Var>,
        fp: Vec<Matrix<T>>,
    },
    Sum(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Gradients of one scalar output with respect to every node.
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    records: Vec<FqRecord<T>>,
    frozen: Option<Vec<FqRecord<T>>>,
}

pub const RMS_EPS: f64 = 1e-6;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            records: Vec::new(),
            frozen: None,
        }
    }

    /// A tape whose fake-quant calls reuse `records` in call order instead of rounding.
    pub fn replay(records: Vec<FqRecord<T>>) -> Self {
        Self {
            nodes: Vec::new(),
            records: Vec::new(),
            frozen: Some(records),
        }
    }

    /// Rounding decisions taken so far, in call order.
    pub fn records(&self) -> &[FqRecord<T>] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FqRecord<T>> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> AbqError {
        AbqError::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A 1×n leaf.
    pub fn row_leaf(&mut self, v: &[T]) -> Var {
        self.leaf(Matrix::from_vec(1, v.len(), v.to_vec()).expect("1xn"))
    }

    /// An n×1 leaf.
    pub fn col_leaf(&mut self, v: &[T]) -> Var {
        self.leaf(Matrix::from_vec(v.len(), 1, v.to_vec()).expect("nx1"))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatmulT(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Self::shape_err("add", va.shape(), vb.shape()));
        }
        let v = va.add(vb);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Self::shape_err("mul", va.shape(), vb.shape()));
        }
        let v = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Multiply (or divide) column `j` of `x` by `s[j]`; `s` is 1×cols.
    pub fn scale_cols(&mut self, x: Var, s: Var, divide: bool) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.rows() != 1 || vs.cols() != vx.cols() {
            return Err(Self::shape_err("scale_cols", vx.shape(), vs.shape()));
        }
        let s_row = vs.row(0);
        let v = Matrix::from_fn(vx.rows(), vx.cols(), |i, j| {
            if divide {
                vx[(i, j)] / s_row[j]
            } else {
                vx[(i, j)] * s_row[j]
            }
        });
        Ok(self.push(v, Op::ScaleCols { x, s, divide }))
    }

    /// `w + a·bᵀ` with `a` rows×1 and `b` 1×cols.
    pub fn add_outer(&mut self, w: Var, a: Var, b: Var) -> Result<Var> {
        let (vw, va, vb) = (self.value(w), self.value(a), self.value(b));
        if va.shape() != (vw.rows(), 1) || vb.shape() != (1, vw.cols()) {
            return Err(AbqError::Shape(format!(
                "add_outer: w {}x{}, a {}x{}, b {}x{}",
                vw.rows(),
                vw.cols(),
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let (av, bv) = (va.as_slice(), vb.as_slice());
        let v = Matrix::from_fn(vw.rows(), vw.cols(), |i, j| vw[(i, j)] + av[i] * bv[j]);
        Ok(self.push(v, Op::AddOuter { w, a, b }))
    }

    /// Row-wise RMS normalization with a constant gain.
    pub fn rmsnorm(&mut self, x: Var, gain: &[T]) -> Result<Var> {
        let vx = self.value(x);
        if gain.len() != vx.cols() {
            return Err(AbqError::Shape(format!(
                "rmsnorm gain {} for {} columns",
                gain.len(),
                vx.cols()
            )));
        }
        let inv_rms = rms_inverse(vx);
        let v = Matrix::from_fn(vx.rows(), vx.cols(), |i, j| {
            vx[(i, j)] * inv_rms[i] * gain[j]
        });
        Ok(self.push(
            v,
            Op::RmsNorm {
                x,
                gain: gain.to_vec(),
                inv_rms,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(silu);
        self.push(v, Op::Silu(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(AbqError::Shape(format!(
                "columns {start}..{} of {}",
                start + len,
                vx.cols()
            )));
        }
        let v = Matrix::from_fn(vx.rows(), len, |i, j| vx[(i, start + j)]);
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(AbqError::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            for i in 0..rows {
                v.row_mut(i)[off..off + vp.cols()].copy_from_slice(vp.row(i));
            }
            off += vp.cols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Softmax of each row `i` over columns `0..=i`; later columns are 0.
    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let v = causal_softmax(self.value(x));
        self.push(v, Op::CausalSoftmax(x))
    }

    /// `dequantize(quantize(x))` under `spec`, with optional learnable clip
    /// factors (one per group, stored n×1) replacing `spec.alpha` / `spec.beta`.
    pub fn fake_quant(
        &mut self,
        x: Var,
        spec: &QuantSpec<T>,
        alpha: Option<Var>,
        beta: Option<Var>,
    ) -> Result<Var> {
        spec.validate()?;
        let vx = self.value(x).clone();
        if let Some((row, col)) = vx.find_non_finite() {
            return Err(AbqError::NonFinite { row, col });
        }
        let (rows, cols) = vx.shape();
        let groups = spec.granularity.groups(rows);
        let group_of_row: Vec<usize> = (0..rows).map(|r| spec.granularity.group_of(r)).collect();
        let clip = |v: Option<Var>, fixed: &dyn Fn(usize) -> T, name: &str| -> Result<Vec<T>> {
            match v {
                None => Ok((0..groups).map(fixed).collect()),
                Some(v) => {
                    let m = self.value(v);
                    if m.as_slice().len() != groups {
                        return Err(AbqError::Shape(format!(
                            "{name} has {} entries for {groups} groups",
                            m.as_slice().len()
                        )));
                    }
                    Ok(m.as_slice().to_vec())
                }
            }
        };
        let alphas = clip(alpha, &|g| spec.alpha_at(g), "alpha")?;
        let betas = clip(beta, &|g| spec.beta_at(g), "beta")?;

        let frozen = match &mut self.frozen {
            Some(list) => {
                let idx = self.records.len();
                Some(list.get(idx).cloned().ok_or_else(|| {
                    AbqError::Config(format!("replay has no record for fake-quant call {idx}"))
                })?)
            }
            None => None,
        };

        let big = max_code(spec.bits, spec.scheme);
        let l = T::of(f64::from(big));
        let mut value = Matrix::zeros(rows, cols);
        let mut vals = Vec::with_capacity(groups);
        let mut record = FqRecord {
            groups: Vec::with_capacity(groups),
            elems: Vec::with_capacity(rows * cols),
        };
        // flat element indices per group, in row-major order
        let members: Vec<Vec<usize>> = {
            let mut m = vec![Vec::new(); groups];
            for r in 0..rows {
                m[group_of_row[r]].extend(r * cols..(r + 1) * cols);
            }
            m
        };
        let data = vx.as_slice();
        let half = T::of(f64::from(1u32 << (spec.bits - 1)));
        let k_sym = match spec.scheme {
            Scheme::Symmetric => T::of(2.0) / l,
            _ => T::one() / half,
        };
        let mut elem_kinds = vec![ElemKind::Inside(T::zero()); rows * cols];

        for (g, idx) in members.iter().enumerate() {
            let gr = match &frozen {
                Some(f) => f.groups[g].clone(),
                None => {
                    let first = idx.first().copied().unwrap_or(0);
                    let (mut amx, mut amn) = (first, first);
                    for &e in idx {
                        if data[e] > data[amx] {
                            amx = e;
                        }
                        if data[e] < data[amn] {
                            amn = e;
                        }
                    }
                    GroupRecord {
                        degenerate: false,
                        argmax: amx,
                        argmin: amn,
                        hi_wins: true,
                        zero_offset: T::zero(),
                    }
                }
            };
            let (mx, mn) = if idx.is_empty() {
                (T::zero(), T::zero())
            } else {
                (data[gr.argmax], data[gr.argmin])
            };
            let (a, b) = (alphas[g], betas[g]);
            let (hi, lo) = (a * mx, b * mn);
            let mut gr = gr;
            let (step, zero) = match &frozen {
                None => {
                    let sz = step_and_zero(hi, lo, spec.bits, spec.scheme);
                    let degenerate = match spec.scheme {
                        Scheme::Asymmetric => !(hi > lo),
                        _ => !(hi.abs().max(lo.abs()) > T::zero()),
                    };
                    gr.degenerate = degenerate;
                    gr.hi_wins = hi.abs() >= lo.abs();
                    let z = T::of(f64::from(sz.zero));
                    if spec.scheme == Scheme::Asymmetric && !degenerate {
                        gr.zero_offset = z - (-lo / sz.step);
                    }
                    (sz.step, z)
                }
                Some(_) => {
                    if gr.degenerate {
                        (T::one(), T::zero())
                    } else {
                        match spec.scheme {
                            Scheme::Asymmetric => {
                                let step = (hi - lo) / l;
                                (step, -lo / step + gr.zero_offset)
                            }
                            _ => {
                                let amax = if gr.hi_wins { hi.abs() } else { lo.abs() };
                                (amax * k_sym, half)
                            }
                        }
                    }
                }
            };
            for &e in idx {
                let x = data[e];
                let (y, kind) = match &frozen {
                    None => {
                        let u = x / step;
                        let r = u.round_half_away();
                        let code = r + zero;
                        if code < T::zero() {
                            (-zero * step, ElemKind::Low)
                        } else if code > l {
                            ((l - zero) * step, ElemKind::High)
                        } else {
                            ((code - zero) * step, ElemKind::Inside(r - u))
                        }
                    }
                    Some(f) => {
                        let kind = f.elems[e];
                        let y = match kind {
                            ElemKind::Inside(c) => x + c * step,
                            ElemKind::Low => -zero * step,
                            ElemKind::High => (l - zero) * step,
                        };
                        (y, kind)
                    }
                };
                value.as_mut_slice()[e] = y;
                elem_kinds[e] = kind;
            }
            record.groups.push(gr);
            vals.push(GroupVals {
                hi,
                lo,
                mx,
                mn,
                alpha: a,
                beta: b,
                zero,
            });
        }
        record.elems = elem_kinds;
        self.records.push(record.clone());
        Ok(self.push(
            value,
            Op::FakeQuant(Box::new(FqSaved {
                x,
                alpha,
                beta,
                bits: spec.bits,
                scheme: spec.scheme,
                group_of_row,
                record,
                vals,
            })),
        ))
    }

    /// Double-log cosine loss of `q` against two constant references.
    pub fn dlc(&mut self, q: Var, fp: &Matrix<T>, fp_star: &Matrix<T>) -> Result<Var> {
        let l = loss::dlc_loss(self.value(q), fp, fp_star)?;
        Ok(self.push(
            Matrix::filled(1, 1, l),
            Op::Dlc {
                q,
                fp: fp.clone(),
                fp_star: fp_star.clone(),
            },
        ))
    }

    /// Symmetric KL between per-head attention maps and constant references.
    pub fn akl(&mut self, q: &[Var], fp: &[Matrix<T>]) -> Result<Var> {
        let maps: Vec<Matrix<T>> = q.iter().map(|&v| self.value(v).clone()).collect();
        let l = loss::akl_loss(&maps, fp)?;
        Ok(self.push(
            Matrix::filled(1, 1, l),
            Op::Akl {
                q: q.to_vec(),
                fp: fp.to_vec(),
            },
        ))
    }

    /// Sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AbqError::Shape("sum of nothing".into()))?;
        let mut v = self.value(*first).clone();
        for &p in &parts[1..] {
            let vp = self.value(p);
            if vp.shape() != v.shape() {
                return Err(Self::shape_err("sum", v.shape(), vp.shape()));
            }
            v = v.add(vp);
        }
        Ok(self.push(v, Op::Sum(parts.to_vec())))
    }

    /// Gradients of the 1×1 node `out`.
    pub fn backward(&self, out: Var) -> Grads<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; n];
        grads[out.0] = Some(Matrix::filled(1, 1, T::one()));
        fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
            match &mut grads[v.0] {
                Some(cur) => {
                    for (c, x) in cur.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *c += *x;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatmulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(vb).expect("shapes"));
                    acc(&mut grads, *b, g.transpose().matmul(va).expect("shapes"));
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_t(vb).expect("shapes"));
                    acc(&mut grads, *b, va.transpose().matmul(&g).expect("shapes"));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.zip_map(vb, |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(va, |x, y| x * y));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|x| x * c));
                }
                Op::ScaleCols { x, s, divide } => {
                    let (vx, vs) = (self.value(*x), self.value(*s));
                    let s_row = vs.row(0);
                    let mut ds = vec![T::zero(); s_row.len()];
                    let dx = Matrix::from_fn(vx.rows(), vx.cols(), |i, j| {
                        if *divide {
                            ds[j] -= g[(i, j)] * vx[(i, j)] / (s_row[j] * s_row[j]);
                            g[(i, j)] / s_row[j]
                        } else {
                            ds[j] += g[(i, j)] * vx[(i, j)];
                            g[(i, j)] * s_row[j]
                        }
                    });
                    acc(&mut grads, *x, dx);
                    acc(
                        &mut grads,
                        *s,
                        Matrix::from_vec(1, ds.len(), ds).expect("1xn"),
                    );
                }
                Op::AddOuter { w, a, b } => {
                    let (va, vb) = (self.value(*a).as_slice(), self.value(*b).as_slice());
                    let (r, c) = g.shape();
                    let da: Vec<T> = (0..r)
                        .map(|i| (0..c).map(|j| g[(i, j)] * vb[j]).sum())
                        .collect();
                    let db: Vec<T> = (0..c)
                        .map(|j| (0..r).map(|i| g[(i, j)] * va[i]).sum())
                        .collect();
                    acc(&mut grads, *w, g.clone());
                    acc(&mut grads, *a, Matrix::from_vec(r, 1, da).expect("nx1"));
                    acc(&mut grads, *b, Matrix::from_vec(1, c, db).expect("1xn"));
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let vx = self.value(*x);
                    let n = T::of(vx.cols() as f64);
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    for i in 0..vx.rows() {
                        let r = inv_rms[i];
                        let dot: T = (0..vx.cols())
                            .map(|j| g[(i, j)] * gain[j] * vx[(i, j)])
                            .sum();
                        for j in 0..vx.cols() {
                            dx[(i, j)] = r * gain[j] * g[(i, j)] - vx[(i, j)] * r * r * r * dot / n;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let vx = self.value(*x);
                    acc(
                        &mut grads,
                        *x,
                        g.zip_map(vx, |gi, xi| {
                            let sig = T::one() / (T::one() + (-xi).exp());
                            gi * sig * (T::one() + xi * (T::one() - sig))
                        }),
                    );
                }
                Op::SliceCols { x, start } => {
                    let vx = self.value(*x);
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let part = Matrix::from_fn(g.rows(), c, |i, j| g[(i, off + j)]);
                        acc(&mut grads, p, part);
                        off += c;
                    }
                }
                Op::CausalSoftmax(x) => {
                    let p = &node.value;
                    let mut dx = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let dot: T = (0..p.cols()).map(|j| p[(i, j)] * g[(i, j)]).sum();
                        for j in 0..p.cols() {
                            dx[(i, j)] = p[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::FakeQuant(saved) => {
                    self.fake_quant_backward(saved, &g, &mut |v, m| acc(&mut grads, v, m))
                }
                Op::Dlc { q, fp, fp_star } => {
                    let scale = g.as_slice()[0];
                    let dq = loss::dlc_grad(self.value(*q), fp, fp_star).map(|v| v * scale);
                    acc(&mut grads, *q, dq);
                }
                Op::Akl { q, fp } => {
                    let scale = g.as_slice()[0];
                    let maps: Vec<Matrix<T>> = q.iter().map(|&v| self.value(v).clone()).collect();
                    for (&v, d) in q.iter().zip(loss::akl_grad(&maps, fp)) {
                        acc(&mut grads, v, d.map(|x| x * scale));
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn fake_quant_backward(
        &self,
        s: &FqSaved<T>,
        g: &Matrix<T>,
        acc: &mut dyn FnMut(Var, Matrix<T>),
    ) {
        let vx = self.value(s.x);
        let (rows, cols) = vx.shape();
        let groups = s.vals.len();
        let l = T::of(f64::from(max_code(s.bits, s.scheme)));
        let half = T::of(f64::from(1u32 << (s.bits - 1)));
        let mut dx = Matrix::zeros(rows, cols);
        let mut d_step = vec![T::zero(); groups];
        let mut d_lo = vec![T::zero(); groups];
        for r in 0..rows {
            let gi = s.group_of_row[r];
            let gr = &s.record.groups[gi];
            let zero = s.vals[gi].zero;
            let zc = match s.scheme {
                Scheme::Asymmetric => gr.zero_offset,
                _ => zero,
            };
            for c in 0..cols {
                let e = r * cols + c;
                let up = g.as_slice()[e];
                match s.record.elems[e] {
                    ElemKind::Inside(off) => {
                        dx.as_mut_slice()[e] += up;
                        d_step[gi] += up * off;
                    }
                    ElemKind::Low => {
                        d_step[gi] -= up * zc;
                        if s.scheme == Scheme::Asymmetric {
                            d_lo[gi] += up;
                        }
                    }
                    ElemKind::High => {
                        d_step[gi] += up * (l - zc);
                        if s.scheme == Scheme::Asymmetric {
                            d_lo[gi] += up;
                        }
                    }
                }
            }
        }
        let mut d_alpha = vec![T::zero(); groups];
        let mut d_beta = vec![T::zero(); groups];
        for gi in 0..groups {
            let gr = &s.record.groups[gi];
            if gr.degenerate {
                continue;
            }
            let v = &s.vals[gi];
            let (d_hi, d_lo_total) = match s.scheme {
                Scheme::Asymmetric => (d_step[gi] / l, d_lo[gi] - d_step[gi] / l),
                _ => {
                    let k = match s.scheme {
                        Scheme::Symmetric => T::of(2.0) / l,
                        _ => T::one() / half,
                    };
                    let d_amax = d_step[gi] * k;
                    if gr.hi_wins {
                        (d_amax * v.hi.signum(), T::zero())
                    } else {
                        (T::zero(), d_amax * v.lo.signum())
                    }
                }
            };
            d_alpha[gi] = d_hi * v.mx;
            d_beta[gi] = d_lo_total * v.mn;
            dx.as_mut_slice()[gr.argmax] += d_hi * v.alpha;
            dx.as_mut_slice()[gr.argmin] += d_lo_total * v.beta;
        }
        acc(s.x, dx);
        if let Some(a) = s.alpha {
            acc(a, Matrix::from_vec(groups, 1, d_alpha).expect("groups"));
        }
        if let Some(b) = s.beta {
            acc(b, Matrix::from_vec(groups, 1, d_beta).expect("groups"));
        }
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// `1 / sqrt(mean(x²) + eps)` per row.
pub fn rms_inverse<T: Scalar>(x: &Matrix<T>) -> Vec<T> {
    let n = T::of(x.cols().max(1) as f64);
    (0..x.rows())
        .map(|i| {
            let ms: T = x.row(i).iter().map(|&v| v * v).sum::<T>() / n;
            T::one() / (ms + T::of(RMS_EPS)).sqrt()
        })
        .collect()
}

pub fn causal_softmax<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let live = (i + 1).min(x.cols());
        let row = &x.row(i)[..live];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[(i, j)] = e;
            total += e;
        }
        for j in 0..live {
            out[(i, j)] /= total;
        }
    }
    out
}
