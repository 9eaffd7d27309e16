//! A single pre-norm transformer block: causal multi-head attention with
//! q/k/v/o projections and a SiLU-gated MLP, each sublayer behind an RMS norm.
//!
//! Three evaluations share one layer order:
//! * [`forward_fp`]: real arithmetic.
//! * [`forward_quant`]: every linear runs ReQuant → BitPacking → integer GEMM →
//!   DeQuant through the bit engine; K and V are fake-quantized per token.
//! * [`build_graph`]: the same quantized computation on a [`Tape`], with the
//!   integer GEMM replaced by fake-quant so gradients reach the parameters.

use std::fmt;

use rand::Rng;

use crate::bitkernel::{pack_tensor, quantized_matmul};
use crate::error::{AbqError, Result};
use crate::matrix::Matrix;
use crate::quantizer::{dequantize, quantize, Compensation, Granularity, QuantSpec, Scheme};
use crate::scalar::Scalar;
use crate::tape::{self, Tape, Var};

/// Bit widths at or above this mean "leave in full precision".
pub const PASSTHROUGH_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Linear {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Linear {
    pub const ALL: [Linear; 7] = [
        Linear::Q,
        Linear::K,
        Linear::V,
        Linear::O,
        Linear::Gate,
        Linear::Up,
        Linear::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Linear::Q => "q_proj",
            Linear::K => "k_proj",
            Linear::V => "v_proj",
            Linear::O => "o_proj",
            Linear::Gate => "gate_proj",
            Linear::Up => "up_proj",
            Linear::Down => "down_proj",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }

    /// Which balance vector scales this layer's input.
    pub fn balance_group(self) -> BalanceGroup {
        match self {
            Linear::Q | Linear::K | Linear::V => BalanceGroup::Qkv,
            Linear::O => BalanceGroup::O,
            Linear::Gate | Linear::Up => BalanceGroup::UpGate,
            Linear::Down => BalanceGroup::Down,
        }
    }
}

impl fmt::Display for Linear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Layers sharing one input share one balance vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BalanceGroup {
    Qkv,
    O,
    UpGate,
    Down,
}

impl BalanceGroup {
    pub const ALL: [BalanceGroup; 4] = [
        BalanceGroup::Qkv,
        BalanceGroup::O,
        BalanceGroup::UpGate,
        BalanceGroup::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BalanceGroup::Qkv => "s_qkv",
            BalanceGroup::O => "s_o",
            BalanceGroup::UpGate => "s_upgate",
            BalanceGroup::Down => "s_down",
        }
    }

    pub fn members(self) -> &'static [Linear] {
        match self {
            BalanceGroup::Qkv => &[Linear::Q, Linear::K, Linear::V],
            BalanceGroup::O => &[Linear::O],
            BalanceGroup::UpGate => &[Linear::Gate, Linear::Up],
            BalanceGroup::Down => &[Linear::Down],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            hidden: 86,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(AbqError::Config("block sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(AbqError::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `(out, in)` of a projection.
    pub fn shape_of(&self, l: Linear) -> (usize, usize) {
        match l {
            Linear::Q | Linear::K | Linear::V | Linear::O => (self.dim, self.dim),
            Linear::Gate | Linear::Up => (self.hidden, self.dim),
            Linear::Down => (self.dim, self.hidden),
        }
    }

    /// Width of the input a balance vector scales.
    pub fn balance_len(&self, g: BalanceGroup) -> usize {
        match g {
            BalanceGroup::Down => self.hidden,
            _ => self.dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBlock<T> {
    pub config: BlockConfig,
    /// Projection weights `(out, in)`, indexed by [`Linear::index`].
    pub weights: Vec<Matrix<T>>,
    pub attn_norm: Vec<T>,
    pub mlp_norm: Vec<T>,
}

impl<T: Scalar> ToyBlock<T> {
    /// Gaussian weights scaled by `1/sqrt(dim)`, unit norm gains.
    pub fn random<R: Rng + ?Sized>(config: BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let scale = 1.0 / (config.dim as f64).sqrt();
        let weights = Linear::ALL
            .iter()
            .map(|&l| {
                let (o, i) = config.shape_of(l);
                Matrix::randn(o, i, scale, rng)
            })
            .collect();
        Ok(Self {
            config,
            weights,
            attn_norm: vec![T::one(); config.dim],
            mlp_norm: vec![T::one(); config.dim],
        })
    }

    pub fn weight(&self, l: Linear) -> &Matrix<T> {
        &self.weights[l.index()]
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.weights.len() != Linear::ALL.len() {
            return Err(AbqError::Shape(format!(
                "{} weight tensors",
                self.weights.len()
            )));
        }
        for l in Linear::ALL {
            let w = self.weight(l);
            if w.shape() != self.config.shape_of(l) {
                return Err(AbqError::Shape(format!(
                    "{l} is {}x{}, expected {:?}",
                    w.rows(),
                    w.cols(),
                    self.config.shape_of(l)
                )));
            }
        }
        if self.attn_norm.len() != self.config.dim || self.mlp_norm.len() != self.config.dim {
            return Err(AbqError::Shape("norm gain length".into()));
        }
        Ok(())
    }
}

/// Quantization of every operand in the block; `None` is full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpecs<T> {
    /// Per-channel weight specs, indexed by [`Linear::index`].
    pub weights: Vec<Option<QuantSpec<T>>>,
    /// Per-token activation spec used before every linear.
    pub act: Option<QuantSpec<T>>,
    /// Per-token spec for the key and value tensors.
    pub kv: Option<QuantSpec<T>>,
}

impl<T: Scalar> LayerSpecs<T> {
    pub fn passthrough() -> Self {
        Self {
            weights: vec![None; Linear::ALL.len()],
            act: None,
            kv: None,
        }
    }

    /// Same weight bits everywhere; activations and KV share `bits_a`.
    /// Widths ≥ [`PASSTHROUGH_BITS`] disable that operand.
    pub fn uniform(bits_w: u32, bits_a: u32, weight_scheme: Scheme) -> Result<Self> {
        let make = |bits: u32, scheme: Scheme, g: Granularity| -> Result<Option<QuantSpec<T>>> {
            if bits >= PASSTHROUGH_BITS {
                return Ok(None);
            }
            let b =
                u8::try_from(bits).map_err(|_| AbqError::InvalidSpec(format!("{bits} bits")))?;
            let spec = QuantSpec::new(b, scheme, g);
            spec.validate()?;
            Ok(Some(spec))
        };
        let w = make(bits_w, weight_scheme, Granularity::PerChannel)?;
        let a = make(bits_a, Scheme::Asymmetric, Granularity::PerToken)?;
        Ok(Self {
            weights: vec![w; Linear::ALL.len()],
            act: a.clone(),
            kv: a,
        })
    }

    pub fn weight(&self, l: Linear) -> Option<&QuantSpec<T>> {
        self.weights[l.index()].as_ref()
    }

    pub fn is_passthrough(&self) -> bool {
        self.act.is_none() && self.kv.is_none() && self.weights.iter().all(Option::is_none)
    }

    /// Whether a linear quantizes anything, which is when balancing applies.
    pub fn quantizes(&self, l: Linear) -> bool {
        self.act.is_some() || self.weight(l).is_some()
    }
}

/// Learnable quantities applied in the quantized forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    /// Balance vectors, indexed by [`BalanceGroup::index`].
    pub balance: Vec<Vec<T>>,
    /// Per-channel clip factors of every linear.
    pub alpha: Vec<Vec<T>>,
    pub beta: Vec<Vec<T>>,
    /// Compensation on `down_proj` (γ = 1) or none (γ = 0).
    pub compensation: Option<Compensation<T>>,
}

impl<T: Scalar> BlockParams<T> {
    /// `s = 1`, `α = β = 1`, `a = 1`, `b = 0` when `gamma`.
    pub fn identity(config: &BlockConfig, gamma: bool) -> Self {
        let balance = BalanceGroup::ALL
            .iter()
            .map(|&g| vec![T::one(); config.balance_len(g)])
            .collect();
        let clip = || {
            Linear::ALL
                .iter()
                .map(|&l| vec![T::one(); config.shape_of(l).0])
                .collect::<Vec<_>>()
        };
        let (o, i) = config.shape_of(Linear::Down);
        Self {
            balance,
            alpha: clip(),
            beta: clip(),
            compensation: gamma.then(|| Compensation::identity(o, i)),
        }
    }

    pub fn balance_of(&self, l: Linear) -> &[T] {
        &self.balance[l.balance_group().index()]
    }

    /// `spec` with this layer's clip factors.
    pub fn clipped(&self, l: Linear, spec: &QuantSpec<T>) -> QuantSpec<T> {
        spec.clone()
            .with_clip(self.alpha[l.index()].clone(), self.beta[l.index()].clone())
    }

    /// Balanced (and, for `down_proj`, compensated) weight of a layer.
    pub fn effective_weight(&self, block: &ToyBlock<T>, l: Linear) -> Result<Matrix<T>> {
        let w = block.weight(l);
        let s = self.balance_of(l);
        let mut w = Matrix::from_fn(w.rows(), w.cols(), |i, k| w[(i, k)] * s[k]);
        if l == Linear::Down {
            if let Some(c) = &self.compensation {
                w = c.apply(&w)?;
            }
        }
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Online per-token quantization of a linear's input.
    ReQuant,
    /// Activation planes packed for the engine.
    BitPacking,
    /// Integer GEMM through the bit engine.
    Gemm,
    /// Accumulator rescaled to reals.
    DeQuant,
    /// Key or value tensor quantized per token.
    KvQuant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub layer: &'static str,
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    pub layer: Linear,
    pub input: Matrix<T>,
    pub output: Matrix<T>,
    /// Scale counts seen by the engine: (activation, weight).
    pub scale_counts: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
    /// One `tokens × tokens` probability map per head.
    pub attention: Vec<Matrix<T>>,
    pub events: Vec<Event>,
}

impl<T> Default for ForwardTrace<T> {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            attention: Vec::new(),
            events: Vec::new(),
        }
    }
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn count(&self, layer: &str, kind: EventKind) -> usize {
        self.events
            .iter()
            .filter(|e| e.layer == layer && e.kind == kind)
            .count()
    }

    pub fn layer(&self, l: Linear) -> Option<&LayerTrace<T>> {
        self.layers.iter().find(|t| t.layer == l)
    }
}

fn check_input<T: Scalar>(block: &ToyBlock<T>, x: &Matrix<T>) -> Result<()> {
    block.validate()?;
    if x.cols() != block.config.dim || x.rows() == 0 {
        return Err(AbqError::Shape(format!(
            "input {}x{} for a block of width {}",
            x.rows(),
            x.cols(),
            block.config.dim
        )));
    }
    Ok(())
}

pub fn rmsnorm<T: Scalar>(x: &Matrix<T>, gain: &[T]) -> Matrix<T> {
    let inv = tape::rms_inverse(x);
    Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] * inv[i] * gain[j])
}

fn head_cols<T: Scalar>(x: &Matrix<T>, h: usize, hd: usize) -> Matrix<T> {
    Matrix::from_fn(x.rows(), hd, |i, j| x[(i, h * hd + j)])
}

/// Block forward with a pluggable linear and KV map.
fn eager<T: Scalar>(
    block: &ToyBlock<T>,
    x: &Matrix<T>,
    trace: &mut ForwardTrace<T>,
    linear: &mut dyn FnMut(
        Linear,
        &Matrix<T>,
        &mut Vec<Event>,
    ) -> Result<(Matrix<T>, Option<(usize, usize)>)>,
    kv: &dyn Fn(&Matrix<T>) -> Result<Option<Matrix<T>>>,
) -> Result<Matrix<T>> {
    let cfg = block.config;
    let hd = cfg.head_dim();
    let mut run =
        |l: Linear, input: &Matrix<T>, trace: &mut ForwardTrace<T>| -> Result<Matrix<T>> {
            let (out, scale_counts) = linear(l, input, &mut trace.events)?;
            trace.layers.push(LayerTrace {
                layer: l,
                input: input.clone(),
                output: out.clone(),
                scale_counts,
            });
            Ok(out)
        };
    let n1 = rmsnorm(x, &block.attn_norm);
    let q = run(Linear::Q, &n1, trace)?;
    let mut k = run(Linear::K, &n1, trace)?;
    let mut v = run(Linear::V, &n1, trace)?;
    for (name, t) in [("k_cache", &mut k), ("v_cache", &mut v)] {
        if let Some(qt) = kv(t)? {
            *t = qt;
            trace.events.push(Event {
                layer: name,
                kind: EventKind::KvQuant,
            });
        }
    }
    let inv_sqrt = T::one() / T::of(hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    trace.attention.clear();
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (
            head_cols(&q, h, hd),
            head_cols(&k, h, hd),
            head_cols(&v, h, hd),
        );
        let p = tape::causal_softmax(&qh.matmul_t(&kh)?.map(|s| s * inv_sqrt));
        heads.push(p.matmul(&vh)?);
        trace.attention.push(p);
    }
    let attn = Matrix::from_fn(x.rows(), cfg.dim, |i, j| heads[j / hd][(i, j % hd)]);
    let h1 = x.add(&run(Linear::O, &attn, trace)?);
    let n2 = rmsnorm(&h1, &block.mlp_norm);
    let gate = run(Linear::Gate, &n2, trace)?;
    let up = run(Linear::Up, &n2, trace)?;
    let act = gate.zip_map(&up, |g, u| tape::silu(g) * u);
    Ok(h1.add(&run(Linear::Down, &act, trace)?))
}

/// Full-precision forward of `x` (tokens × dim).
pub fn forward_fp<T: Scalar>(
    block: &ToyBlock<T>,
    x: &Matrix<T>,
) -> Result<(Matrix<T>, ForwardTrace<T>)> {
    check_input(block, x)?;
    let mut trace = ForwardTrace::default();
    let out = eager(
        block,
        x,
        &mut trace,
        &mut |l, input, _| Ok((input.matmul_t(block.weight(l))?, None)),
        &|_| Ok(None),
    )?;
    Ok((out, trace))
}

fn fake_quant<T: Scalar>(x: &Matrix<T>, spec: &QuantSpec<T>) -> Result<Matrix<T>> {
    Ok(dequantize(&quantize(x, spec, None)?))
}

/// Quantized forward through the bit engine.
///
/// Linears that quantize neither operand run in real arithmetic with no
/// balancing; linears that quantize only one operand fake-quantize it.
pub fn forward_quant<T: Scalar>(
    block: &ToyBlock<T>,
    x: &Matrix<T>,
    specs: &LayerSpecs<T>,
    params: &BlockParams<T>,
) -> Result<(Matrix<T>, ForwardTrace<T>)> {
    check_input(block, x)?;
    let mut trace = ForwardTrace::default();
    let mut linear = |l: Linear,
                      input: &Matrix<T>,
                      events: &mut Vec<Event>|
     -> Result<(Matrix<T>, Option<(usize, usize)>)> {
        if !specs.quantizes(l) {
            return Ok((input.matmul_t(block.weight(l))?, None));
        }
        let xs = Matrix::from_fn(input.rows(), input.cols(), |i, k| {
            input[(i, k)] / params.balance_of(l)[k]
        });
        let ws = params.effective_weight(block, l)?;
        let ev = |kind| Event {
            layer: l.name(),
            kind,
        };
        match (specs.act.as_ref(), specs.weight(l)) {
            (Some(a_spec), Some(w_spec)) => {
                let qa = quantize(&xs, a_spec, None)?;
                events.push(ev(EventKind::ReQuant));
                let qw = quantize(&ws, &params.clipped(l, w_spec), None)?;
                let pa = pack_tensor(&qa)?;
                events.push(ev(EventKind::BitPacking));
                // weight planes are prepared offline in deployment
                let pw = pack_tensor(&qw)?;
                let out = quantized_matmul(&qa, &pa, &qw, &pw, None)?;
                events.push(ev(EventKind::Gemm));
                events.push(ev(EventKind::DeQuant));
                Ok((out.dequant, Some((qa.scales.len(), qw.scales.len()))))
            }
            (a, w) => {
                let xq = match a {
                    Some(spec) => {
                        events.push(ev(EventKind::ReQuant));
                        fake_quant(&xs, spec)?
                    }
                    None => xs,
                };
                let wq = match w {
                    Some(spec) => fake_quant(&ws, &params.clipped(l, spec))?,
                    None => ws,
                };
                Ok((xq.matmul_t(&wq)?, None))
            }
        }
    };
    let kv = |t: &Matrix<T>| -> Result<Option<Matrix<T>>> {
        specs.kv.as_ref().map(|s| fake_quant(t, s)).transpose()
    };
    let out = eager(block, x, &mut trace, &mut linear, &kv)?;
    Ok((out, trace))
}

/// Mean attention mass on key 0 over heads and queries.
pub fn first_token_attention_share<T: Scalar>(trace: &ForwardTrace<T>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for m in &trace.attention {
        for i in 0..m.rows() {
            if m.cols() > 0 {
                total += m[(i, 0)].as_f64();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Tape handles of the learnable parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub balance: Vec<Var>,
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
    /// `(a, b)` when compensation is on.
    pub compensation: Option<(Var, Var)>,
}

impl ParamVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, p: &BlockParams<T>) -> Self {
        Self {
            balance: p.balance.iter().map(|s| tape.row_leaf(s)).collect(),
            alpha: p.alpha.iter().map(|a| tape.col_leaf(a)).collect(),
            beta: p.beta.iter().map(|b| tape.col_leaf(b)).collect(),
            compensation: p
                .compensation
                .as_ref()
                .map(|c| (tape.col_leaf(&c.a), tape.row_leaf(&c.b))),
        }
    }
}

/// Output and per-head attention nodes of a block on a tape.
#[derive(Clone, Debug)]
pub struct Graph {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// Record the block on `tape`. With `quant` absent this is the full-precision
/// block; with it, every quantized operand goes through fake-quant.
pub fn build_graph<T: Scalar>(
    tape: &mut Tape<T>,
    block: &ToyBlock<T>,
    x: &Matrix<T>,
    quant: Option<(&LayerSpecs<T>, &ParamVars)>,
) -> Result<Graph> {
    check_input(block, x)?;
    let cfg = block.config;
    let hd = cfg.head_dim();
    let xv = tape.leaf(x.clone());
    let linear = |tape: &mut Tape<T>, l: Linear, input: Var| -> Result<Var> {
        let w = tape.leaf(block.weight(l).clone());
        let Some((specs, pv)) = quant.filter(|(s, _)| s.quantizes(l)) else {
            return tape.matmul_t(input, w);
        };
        let s = pv.balance[l.balance_group().index()];
        let mut xs = tape.scale_cols(input, s, true)?;
        let mut ws = tape.scale_cols(w, s, false)?;
        if l == Linear::Down {
            if let Some((a, b)) = pv.compensation {
                ws = tape.add_outer(ws, a, b)?;
            }
        }
        if let Some(a_spec) = &specs.act {
            xs = tape.fake_quant(xs, a_spec, None, None)?;
        }
        if let Some(w_spec) = specs.weight(l) {
            ws = tape.fake_quant(
                ws,
                w_spec,
                Some(pv.alpha[l.index()]),
                Some(pv.beta[l.index()]),
            )?;
        }
        tape.matmul_t(xs, ws)
    };
    let n1 = tape.rmsnorm(xv, &block.attn_norm)?;
    let q = linear(tape, Linear::Q, n1)?;
    let mut k = linear(tape, Linear::K, n1)?;
    let mut v = linear(tape, Linear::V, n1)?;
    if let Some(kv) = quant.and_then(|(s, _)| s.kv.as_ref()) {
        k = tape.fake_quant(k, kv, None, None)?;
        v = tape.fake_quant(v, kv, None, None)?;
    }
    let inv_sqrt = T::one() / T::of(hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt);
        let p = tape.causal_softmax(scores);
        heads.push(tape.matmul(p, vh)?);
        attention.push(p);
    }
    let attn = tape.concat_cols(&heads)?;
    let o = linear(tape, Linear::O, attn)?;
    let h1 = tape.add(xv, o)?;
    let n2 = tape.rmsnorm(h1, &block.mlp_norm)?;
    let gate = linear(tape, Linear::Gate, n2)?;
    let up = linear(tape, Linear::Up, n2)?;
    let g = tape.silu(gate);
    let act = tape.mul(g, up)?;
    let down = linear(tape, Linear::Down, act)?;
    let out = tape.add(h1, down)?;
    Ok(Graph { out, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, tokens: usize) -> (ToyBlock<f64>, Matrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = ToyBlock::random(BlockConfig::default(), &mut rng).unwrap();
        let x = Matrix::randn(tokens, 32, 1.0, &mut rng);
        (block, x)
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (block, x) = setup(1, 12);
        let (_, trace) = forward_fp(&block, &x).unwrap();
        assert_eq!(trace.attention.len(), 4);
        for m in &trace.attention {
            for i in 0..m.rows() {
                let s: f64 = m.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(m.row(i)[i + 1..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (block, x) = setup(2, 1);
        let (_, trace) = forward_fp(&block, &x).unwrap();
        for m in &trace.attention {
            assert_eq!(m.as_slice(), &[1.0]);
        }
        assert_eq!(first_token_attention_share(&trace), 1.0);
    }

    #[test]
    fn forward_is_deterministic_under_a_seed() {
        let (b1, x1) = setup(3, 5);
        let (b2, x2) = setup(3, 5);
        assert_eq!(
            forward_fp(&b1, &x1).unwrap().0,
            forward_fp(&b2, &x2).unwrap().0
        );
    }

    #[test]
    fn tape_graph_matches_eager_fp() {
        let (block, x) = setup(4, 9);
        let (out, trace) = forward_fp(&block, &x).unwrap();
        let mut tape = Tape::new();
        let g = build_graph(&mut tape, &block, &x, None).unwrap();
        assert!(tape.value(g.out).rel_err(&out) < 1e-13);
        for (h, &p) in g.attention.iter().enumerate() {
            assert!(tape.value(p).rel_err(&trace.attention[h]) < 1e-13);
        }
    }

    #[test]
    fn passthrough_quant_equals_fp() {
        let (block, x) = setup(5, 7);
        let specs = LayerSpecs::uniform(16, 16, Scheme::Asymmetric).unwrap();
        assert!(specs.is_passthrough());
        let params = BlockParams::identity(&block.config, true);
        let (fp, _) = forward_fp(&block, &x).unwrap();
        let (q, trace) = forward_quant(&block, &x, &specs, &params).unwrap();
        assert_eq!(fp, q);
        assert!(trace.events.is_empty());
    }

    #[test]
    fn engine_path_matches_tape_fake_quant() {
        let (block, x) = setup(6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut params = BlockParams::identity(&block.config, true);
        for s in &mut params.balance {
            for v in s.iter_mut() {
                *v = rng.random_range(0.5..2.0);
            }
        }
        for a in &mut params.alpha {
            for v in a.iter_mut() {
                *v = rng.random_range(0.8..1.0);
            }
        }
        for (bits_w, scheme) in [
            (4, Scheme::Asymmetric),
            (2, Scheme::Balanced),
            (8, Scheme::Asymmetric),
        ] {
            let specs = LayerSpecs::uniform(bits_w, 8, scheme).unwrap();
            let (engine, trace) = forward_quant(&block, &x, &specs, &params).unwrap();
            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &params);
            let g = build_graph(&mut tape, &block, &x, Some((&specs, &pv))).unwrap();
            assert!(tape.value(g.out).rel_err(&engine) < 1e-9, "w{bits_w}");
            for l in Linear::ALL {
                assert_eq!(trace.count(l.name(), EventKind::BitPacking), 1);
                let (a, w) = trace.layer(l).unwrap().scale_counts.unwrap();
                assert_eq!((a, w), (10, block.config.shape_of(l).0));
            }
        }
    }

    #[test]
    fn w8a8_is_close_to_fp() {
        let (block, x) = setup(7, 16);
        let specs = LayerSpecs::uniform(8, 8, Scheme::Asymmetric).unwrap();
        let params = BlockParams::identity(&block.config, false);
        let (fp, _) = forward_fp(&block, &x).unwrap();
        let (q, _) = forward_quant(&block, &x, &specs, &params).unwrap();
        assert!(q.rel_err(&fp) < 5e-2, "{}", q.rel_err(&fp));
    }

    #[test]
    fn balance_leaves_fp_product_unchanged() {
        use crate::quantizer::apply_balance;
        let (block, x) = setup(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let s: Vec<Vec<f64>> = BalanceGroup::ALL
            .iter()
            .map(|&g| {
                (0..block.config.balance_len(g))
                    .map(|_| rng.random_range(0.1..10.0))
                    .collect()
            })
            .collect();
        let mut trace = ForwardTrace::default();
        let balanced = eager(
            &block,
            &x,
            &mut trace,
            &mut |l, input, _| {
                let (w, xt) = apply_balance(
                    block.weight(l),
                    &input.transpose(),
                    &s[l.balance_group().index()],
                )?;
                Ok((w.matmul(&xt)?.transpose(), None))
            },
            &|_| Ok(None),
        )
        .unwrap();
        let (fp, _) = forward_fp(&block, &x).unwrap();
        assert!(balanced.rel_err(&fp) < 1e-8);
    }

    #[test]
    fn share_of_uniform_and_one_hot_maps() {
        let t = 5;
        let mut trace = ForwardTrace::<f64>::default();
        trace.attention.push(Matrix::filled(t, t, 1.0 / t as f64));
        assert!((first_token_attention_share(&trace) - 0.2).abs() < 1e-15);
        trace.attention[0] = Matrix::from_fn(t, t, |_, j| if j == 0 { 1.0 } else { 0.0 });
        assert_eq!(first_token_attention_share(&trace), 1.0);
    }
}
