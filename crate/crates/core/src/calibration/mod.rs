//! Block-wise calibration of balance vectors, clip factors and compensation
//! vectors against the DLC + AKL objective.
//!
//! Gradients come from the tape with a straight-through estimator through
//! rounding; parameters move with bias-corrected Adam and no weight decay.

pub mod loss;
pub mod options;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use loss::{akl_loss, dlc_loss, total_loss, BlockOutputs};
pub use options::CalibOptions;

use crate::error::{AbqError, Result};
use crate::matrix::Matrix;
use crate::quantizer::{dequantize, quantize};
use crate::scalar::Scalar;
use crate::tape::{FqRecord, Tape};
use crate::toymodel::{
    build_graph, forward_fp, BalanceGroup, BlockParams, LayerSpecs, Linear, ParamVars, ToyBlock,
};

/// Smallest balance entry kept after a step.
pub const S_MIN: f64 = 1e-5;
/// Clip factors are projected into `[CLIP_MIN, 1]`.
pub const CLIP_MIN: f64 = 1e-3;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Balance,
    Alpha,
    Beta,
    CompA,
    CompB,
}

impl ParamKind {
    pub fn uses_balance_lr(self) -> bool {
        self == ParamKind::Balance
    }
}

/// `(name, kind)` of every parameter tensor, in storage order.
pub fn param_layout<T: Scalar>(p: &BlockParams<T>) -> Vec<(String, ParamKind)> {
    let mut out: Vec<(String, ParamKind)> = BalanceGroup::ALL
        .iter()
        .map(|g| (g.name().to_string(), ParamKind::Balance))
        .collect();
    out.extend(
        Linear::ALL
            .iter()
            .map(|l| (format!("alpha.{l}"), ParamKind::Alpha)),
    );
    out.extend(
        Linear::ALL
            .iter()
            .map(|l| (format!("beta.{l}"), ParamKind::Beta)),
    );
    if p.compensation.is_some() {
        out.push(("comp_a.down_proj".into(), ParamKind::CompA));
        out.push(("comp_b.down_proj".into(), ParamKind::CompB));
    }
    out
}

/// Parameter tensors in [`param_layout`] order.
pub fn param_tensors<T: Scalar>(p: &BlockParams<T>) -> Vec<&Vec<T>> {
    let mut out: Vec<&Vec<T>> = p.balance.iter().collect();
    out.extend(p.alpha.iter());
    out.extend(p.beta.iter());
    if let Some(c) = &p.compensation {
        out.push(&c.a);
        out.push(&c.b);
    }
    out
}

pub fn param_tensors_mut<T: Scalar>(p: &mut BlockParams<T>) -> Vec<&mut Vec<T>> {
    let mut out: Vec<&mut Vec<T>> = p.balance.iter_mut().collect();
    out.extend(p.alpha.iter_mut());
    out.extend(p.beta.iter_mut());
    if let Some(c) = &mut p.compensation {
        out.push(&mut c.a);
        out.push(&mut c.b);
    }
    out
}

/// Keep `s` positive and the clip factors inside `[CLIP_MIN, 1]`.
pub fn project<T: Scalar>(p: &mut BlockParams<T>) {
    for s in p.balance.iter_mut().flatten() {
        *s = s.max(T::of(S_MIN));
    }
    for c in p.alpha.iter_mut().chain(p.beta.iter_mut()).flatten() {
        *c = c.max(T::of(CLIP_MIN)).min(T::one());
    }
}

/// Loss of one evaluation and its two components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub total: T,
    pub dlc: T,
    pub akl: T,
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub dlc: f64,
    pub akl: f64,
}

/// Learned parameters, optimizer moments and the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibState<T> {
    pub params: BlockParams<T>,
    pub gamma: bool,
    /// First and second moments, aligned with [`param_tensors`].
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: usize,
    pub loss_history: Vec<LossRecord>,
    pub initial_loss: Option<LossRecord>,
    pub final_loss: Option<LossRecord>,
}

impl<T: Scalar> CalibState<T> {
    pub fn new(params: BlockParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = param_tensors(&params)
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        Self {
            gamma: params.compensation.is_some(),
            params,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            loss_history: Vec::new(),
            initial_loss: None,
            final_loss: None,
        }
    }

    /// One bias-corrected Adam update followed by projection.
    pub fn adam_step(&mut self, grads: &BlockParams<T>, lr_s: f64, lr_clip: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let layout = param_layout(&self.params);
        let g_all = param_tensors(grads);
        for (((p, (_, kind)), g), (m, v)) in param_tensors_mut(&mut self.params)
            .into_iter()
            .zip(layout)
            .zip(g_all)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let lr = if kind.uses_balance_lr() {
                lr_s
            } else {
                lr_clip
            };
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = T::of(b1) * m[i] + T::of(1.0 - b1) * gi;
                v[i] = T::of(b2) * v[i] + T::of(1.0 - b2) * gi * gi;
                let m_hat = m[i].as_f64() / c1;
                let v_hat = v[i].as_f64() / c2;
                p[i] -= T::of(lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
            }
        }
        project(&mut self.params);
    }
}

/// Seeded Gaussian token embeddings standing in for text segments.
pub fn synthetic_segments<T: Scalar>(
    segments: usize,
    tokens: usize,
    dim: usize,
    seed: u64,
) -> Vec<Matrix<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..segments)
        .map(|_| Matrix::randn(tokens, dim, 1.0, &mut rng))
        .collect()
}

/// Balance vectors from activation and weight ranges:
/// `s_j = sqrt(max|X_j|) / sqrt(max|W_j|)`, with `W` the layers sharing the input.
pub fn init_balance<T: Scalar>(
    block: &ToyBlock<T>,
    data: &[Matrix<T>],
    specs: &LayerSpecs<T>,
) -> Result<Vec<Vec<T>>> {
    let cfg = block.config;
    let mut act_max: Vec<Vec<f64>> = BalanceGroup::ALL
        .iter()
        .map(|&g| vec![0.0; cfg.balance_len(g)])
        .collect();
    for x in data {
        let (_, trace) = forward_fp(block, x)?;
        for lt in &trace.layers {
            let g = lt.layer.balance_group().index();
            for i in 0..lt.input.rows() {
                for (j, v) in lt.input.row(i).iter().enumerate() {
                    act_max[g][j] = act_max[g][j].max(v.as_f64().abs());
                }
            }
        }
    }
    Ok(BalanceGroup::ALL
        .iter()
        .map(|&g| {
            let quantized = g.members().iter().any(|&l| specs.quantizes(l));
            (0..cfg.balance_len(g))
                .map(|j| {
                    let w_max = g
                        .members()
                        .iter()
                        .map(|&l| {
                            let w = block.weight(l);
                            (0..w.rows())
                                .map(|i| w[(i, j)].as_f64().abs())
                                .fold(0.0, f64::max)
                        })
                        .fold(0.0, f64::max);
                    let s = (act_max[g.index()][j].sqrt() / w_max.sqrt()).max(S_MIN);
                    if quantized && s.is_finite() {
                        T::of(s)
                    } else {
                        T::one()
                    }
                })
                .collect()
        })
        .collect())
}

/// Everything the objective needs about one calibration segment.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    /// Input of the quantized block.
    pub x_q: Matrix<T>,
    pub d_fp: Matrix<T>,
    pub d_fp_star: Matrix<T>,
    pub attn_fp: Vec<Matrix<T>>,
}

/// The calibration objective over a fixed set of segments.
pub struct Objective<'a, T> {
    pub block: &'a ToyBlock<T>,
    pub specs: &'a LayerSpecs<T>,
    pub samples: Vec<Sample<T>>,
}

fn fp_graph<T: Scalar>(block: &ToyBlock<T>, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, block, x, None)?;
    let attn = g.attention.iter().map(|&p| tape.value(p).clone()).collect();
    Ok((tape.value(g.out).clone(), attn))
}

impl<'a, T: Scalar> Objective<'a, T> {
    /// `x_q` is the segment after per-token activation quantization, the stand-in
    /// for the previous quantized block's output.
    pub fn new(
        block: &'a ToyBlock<T>,
        specs: &'a LayerSpecs<T>,
        data: &[Matrix<T>],
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(AbqError::Config("no calibration segments".into()));
        }
        let samples = data
            .iter()
            .map(|x| {
                let x_q = match &specs.act {
                    Some(spec) => dequantize(&quantize(x, spec, None)?),
                    None => x.clone(),
                };
                let (d_fp, attn_fp) = fp_graph(block, x)?;
                let (d_fp_star, _) = fp_graph(block, &x_q)?;
                Ok(Sample {
                    x_q,
                    d_fp,
                    d_fp_star,
                    attn_fp,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            block,
            specs,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loss of one segment on `tape`; returns `(total, dlc, akl)` nodes.
    fn record(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        s: &Sample<T>,
    ) -> Result<(crate::tape::Var, crate::tape::Var, crate::tape::Var)> {
        let g = build_graph(tape, self.block, &s.x_q, Some((self.specs, pv)))?;
        let dlc = tape.dlc(g.out, &s.d_fp, &s.d_fp_star)?;
        let akl = tape.akl(&g.attention, &s.attn_fp)?;
        let total = tape.sum(&[dlc, akl])?;
        Ok((total, dlc, akl))
    }

    fn run(
        &self,
        mut tape: Tape<T>,
        params: &BlockParams<T>,
        idx: &[usize],
    ) -> Result<(
        LossParts<T>,
        Option<BlockParams<T>>,
        Vec<FqRecord<T>>,
        Tape<T>,
    )> {
        if idx.is_empty() {
            return Err(AbqError::Config("empty segment batch".into()));
        }
        let pv = ParamVars::register(&mut tape, params);
        let mut totals = Vec::with_capacity(idx.len());
        let (mut dlc, mut akl) = (T::zero(), T::zero());
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| AbqError::Config(format!("segment {i} out of range")))?;
            let (t, d, a) = self.record(&mut tape, &pv, s)?;
            totals.push(t);
            dlc += tape.scalar(d);
            akl += tape.scalar(a);
        }
        let sum = tape.sum(&totals)?;
        let n = T::of(idx.len() as f64);
        let mean = tape.scale(sum, T::one() / n);
        let parts = LossParts {
            total: tape.scalar(mean),
            dlc: dlc / n,
            akl: akl / n,
        };
        let grads = {
            let g = tape.backward(mean);
            let mut out = params.clone();
            for (dst, &v) in out.balance.iter_mut().zip(&pv.balance) {
                *dst = g.of(v).into_vec();
            }
            for (dst, &v) in out.alpha.iter_mut().zip(&pv.alpha) {
                *dst = g.of(v).into_vec();
            }
            for (dst, &v) in out.beta.iter_mut().zip(&pv.beta) {
                *dst = g.of(v).into_vec();
            }
            if let (Some(c), Some((a, b))) = (&mut out.compensation, pv.compensation) {
                c.a = g.of(a).into_vec();
                c.b = g.of(b).into_vec();
            }
            Some(out)
        };
        let records = tape.records().to_vec();
        Ok((parts, grads, records, tape))
    }

    /// Mean loss over the segments in `idx`.
    pub fn evaluate(&self, params: &BlockParams<T>, idx: &[usize]) -> Result<LossParts<T>> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, params);
        let mut acc = LossParts {
            total: T::zero(),
            dlc: T::zero(),
            akl: T::zero(),
        };
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| AbqError::Config(format!("segment {i} out of range")))?;
            let (t, d, a) = self.record(&mut tape, &pv, s)?;
            acc.total += tape.scalar(t);
            acc.dlc += tape.scalar(d);
            acc.akl += tape.scalar(a);
        }
        let n = T::of(idx.len().max(1) as f64);
        Ok(LossParts {
            total: acc.total / n,
            dlc: acc.dlc / n,
            akl: acc.akl / n,
        })
    }

    pub fn evaluate_all(&self, params: &BlockParams<T>) -> Result<LossParts<T>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.evaluate(params, &idx)
    }

    /// Loss, STE gradients and the rounding decisions they were taken under.
    pub fn gradient(
        &self,
        params: &BlockParams<T>,
        idx: &[usize],
    ) -> Result<(LossParts<T>, BlockParams<T>, Vec<FqRecord<T>>)> {
        let (parts, grads, records, _) = self.run(Tape::new(), params, idx)?;
        Ok((parts, grads.expect("gradients"), records))
    }

    /// Loss with every rounding, clamp and range decision frozen to `records`.
    pub fn evaluate_frozen(
        &self,
        params: &BlockParams<T>,
        idx: &[usize],
        records: &[FqRecord<T>],
    ) -> Result<T> {
        let (parts, _, _, _) = self.run(Tape::replay(records.to_vec()), params, idx)?;
        Ok(parts.total)
    }
}

fn to_record<T: Scalar>(step: usize, p: &LossParts<T>) -> LossRecord {
    LossRecord {
        step,
        loss: p.total.as_f64(),
        dlc: p.dlc.as_f64(),
        akl: p.akl.as_f64(),
    }
}

fn snapshot<T: Scalar>(p: &BlockParams<T>) -> String {
    param_layout(p)
        .iter()
        .zip(param_tensors(p))
        .map(|((name, _), t)| {
            let (lo, hi) = t
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v.as_f64()), hi.max(v.as_f64()))
                });
            format!("{name}=[{lo:.4e}, {hi:.4e}]")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Starting parameters: identity clip and compensation, range-balanced `s`.
pub fn initial_params<T: Scalar>(
    block: &ToyBlock<T>,
    data: &[Matrix<T>],
    specs: &LayerSpecs<T>,
    gamma: bool,
) -> Result<BlockParams<T>> {
    let mut p = BlockParams::identity(&block.config, gamma);
    if !specs.is_passthrough() {
        p.balance = init_balance(block, data, specs)?;
    }
    Ok(p)
}

/// Run the full calibration loop on one block.
pub fn calibrate_block<T: Scalar>(
    block: &ToyBlock<T>,
    data: &[Matrix<T>],
    specs: &LayerSpecs<T>,
    opts: &CalibOptions,
) -> Result<CalibState<T>> {
    opts.validate()?;
    let params = initial_params(block, data, specs, opts.gamma())?;
    calibrate_from(block, data, specs, opts, params)
}

/// Calibration starting from given parameters.
pub fn calibrate_from<T: Scalar>(
    block: &ToyBlock<T>,
    data: &[Matrix<T>],
    specs: &LayerSpecs<T>,
    opts: &CalibOptions,
    params: BlockParams<T>,
) -> Result<CalibState<T>> {
    let objective = Objective::new(block, specs, data)?;
    let mut state = CalibState::new(params);
    let initial = objective.evaluate_all(&state.params)?;
    if !initial.total.is_finite() {
        return Err(AbqError::Diverged {
            step: 0,
            snapshot: snapshot(&state.params),
        });
    }
    state.initial_loss = Some(to_record(0, &initial));
    log::info!("initial loss {:.6e}", initial.total.as_f64());
    if specs.is_passthrough() {
        state.final_loss = state.initial_loss;
        return Ok(state);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..objective.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch) {
            let (parts, grads, _) = objective.gradient(&state.params, chunk)?;
            let finite = parts.total.is_finite()
                && param_tensors(&grads)
                    .iter()
                    .all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(AbqError::Diverged {
                    step: state.step,
                    snapshot: snapshot(&state.params),
                });
            }
            state.loss_history.push(to_record(state.step, &parts));
            state.adam_step(&grads, opts.lr_s, opts.lr_clip);
        }
        log::debug!(
            "epoch {epoch}: last batch loss {:.6e}",
            state.loss_history.last().map_or(0.0, |r| r.loss)
        );
    }
    let fin = objective.evaluate_all(&state.params)?;
    if !fin.total.is_finite() {
        return Err(AbqError::Diverged {
            step: state.step,
            snapshot: snapshot(&state.params),
        });
    }
    state.final_loss = Some(to_record(state.step, &fin));
    log::info!("final loss {:.6e}", fin.total.as_f64());
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::Scheme;
    use crate::toymodel::BlockConfig;

    fn small() -> (ToyBlock<f64>, Vec<Matrix<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ToyBlock::random(BlockConfig::default(), &mut rng).unwrap();
        (block, synthetic_segments(4, 8, 32, 4))
    }

    #[test]
    fn passthrough_has_zero_loss_and_does_not_move() {
        let (block, data) = small();
        let specs = LayerSpecs::uniform(16, 16, Scheme::Asymmetric).unwrap();
        let opts = CalibOptions {
            epochs: 2,
            ..CalibOptions::default()
        };
        let st = calibrate_block(&block, &data, &specs, &opts).unwrap();
        assert_eq!(st.initial_loss.unwrap().loss, 0.0);
        assert_eq!(st.params, BlockParams::identity(&block.config, true));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = BlockConfig::default();
        let mut st = CalibState::new(BlockParams::<f64>::identity(&cfg, true));
        let mut g = BlockParams::identity(&cfg, true);
        for t in param_tensors_mut(&mut g) {
            t.iter_mut().for_each(|v| *v = 0.5);
        }
        st.adam_step(&g, 5e-3, 1e-2);
        assert!((st.params.balance[0][0] - (1.0 - 5e-3)).abs() < 1e-9);
        assert!((st.params.alpha[0][0] - (1.0 - 1e-2)).abs() < 1e-9);
        let c = st.params.compensation.unwrap();
        assert!((c.b[0] + 1e-2).abs() < 1e-9);
    }

    #[test]
    fn projection_keeps_parameters_in_range() {
        let cfg = BlockConfig::default();
        let mut p = BlockParams::<f64>::identity(&cfg, false);
        p.balance[1][3] = -2.0;
        p.alpha[2][0] = 3.0;
        p.beta[4][1] = -1.0;
        project(&mut p);
        assert_eq!(p.balance[1][3], S_MIN);
        assert_eq!(p.alpha[2][0], 1.0);
        assert_eq!(p.beta[4][1], CLIP_MIN);
    }

    #[test]
    fn frozen_replay_reproduces_the_loss() {
        let (block, data) = small();
        let specs = LayerSpecs::uniform(4, 4, Scheme::Asymmetric).unwrap();
        let p = initial_params(&block, &data, &specs, true).unwrap();
        let obj = Objective::new(&block, &specs, &data).unwrap();
        let (parts, _, rec) = obj.gradient(&p, &[0, 1]).unwrap();
        let frozen = obj.evaluate_frozen(&p, &[0, 1], &rec).unwrap();
        assert!((parts.total - frozen).abs() <= 1e-10 * parts.total.abs());
    }

    #[test]
    fn layout_matches_tensors() {
        let p = BlockParams::<f64>::identity(&BlockConfig::default(), true);
        assert_eq!(param_layout(&p).len(), param_tensors(&p).len());
        assert_eq!(param_layout(&p).len(), 4 + 7 + 7 + 2);
    }
}
