//! Attention decoder: additive attention over the encoder features, a GRU
//! whose state starts at the initial embedding, and greedy or beam search.

use crate::autograd::{Tape, Var};
use crate::charset::{Charset, EOS, NUM_CLASSES, PAD};
use crate::error::{Error, Result};
use crate::model::{DecIds, Model};
use crate::rectifier;
use crate::tensor::{Real, Tensor};
use crate::tfe::{self, SkipMode};

/// Per-image decoder inputs on a tape.
pub(crate) struct DecoderCtx {
    /// `[N, D]`
    pub features: Var,
    /// `V_d f_i + b` for every feature, `[N, A]`.
    pub keys: Var,
    /// Rows of the GRU input matrix that multiply the glimpse, `[D, 3D]`.
    pub wi_glimpse: Var,
}

pub(crate) fn prepare_on<T: Real>(tape: &mut Tape<'_, T>, model: &Model<T>, features: Var) -> DecoderCtx {
    let ids = &model.ids.dec;
    let (vd, b) = (tape.param(ids.vd), tape.param(ids.b));
    let keys = tape.matmul(features, vd);
    let keys = tape.add_row(keys, b);
    let wi = tape.param(ids.wi);
    let wi_glimpse = tape.slice_rows(wi, 0, model.config.dim);
    DecoderCtx {
        features,
        keys,
        wi_glimpse,
    }
}

pub(crate) struct AttentionVars {
    /// `[1, N]`
    pub scores: Var,
    pub alpha: Var,
    /// `[1, D]`
    pub glimpse: Var,
}

/// `e_i = wᵀ tanh(W_d s + V_d f_i + b)`, `α = softmax(e)`, `g = Σ α_i f_i`.
pub(crate) fn attention_on<T: Real>(tape: &mut Tape<'_, T>, ids: &DecIds, ctx: &DecoderCtx, s_prev: Var) -> AttentionVars {
    let wd = tape.param(ids.wd);
    let query = tape.matmul(s_prev, wd);
    let pre = tape.add_row(ctx.keys, query);
    let act = tape.tanh(pre);
    let w = tape.param(ids.w);
    let e = tape.matmul(act, w);
    let n = tape.shape(e)[0];
    let scores = tape.reshape(e, &[1, n]);
    let alpha = tape.softmax_rows(scores);
    let glimpse = tape.matmul(alpha, ctx.features);
    AttentionVars { scores, alpha, glimpse }
}

/// GRU update on input `concat(g, onehot(y_prev))`; gate order r, z, n.
pub(crate) fn gru_on<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    ctx: &DecoderCtx,
    s_prev: Var,
    glimpse: Var,
    y_prev: usize,
) -> Var {
    let ids = &model.ids.dec;
    let d = model.config.dim;
    let wi = tape.param(ids.wi);
    let onehot_rows = tape.slice_rows(wi, d + y_prev, 1);
    let gi = tape.matmul(glimpse, ctx.wi_glimpse);
    let gi = tape.add(gi, onehot_rows);
    let bi = tape.param(ids.bi);
    let gi = tape.add_row(gi, bi);
    let wh = tape.param(ids.wh);
    let gh = tape.matmul(s_prev, wh);
    let bh = tape.param(ids.bh);
    let gh = tape.add_row(gh, bh);

    let part = |tape: &mut Tape<'_, T>, v: Var, k: usize| tape.slice_cols(v, k * d, d);
    let (ir, iz, in_) = (part(tape, gi, 0), part(tape, gi, 1), part(tape, gi, 2));
    let (hr, hz, hn) = (part(tape, gh, 0), part(tape, gh, 1), part(tape, gh, 2));
    let r = tape.add(ir, hr);
    let r = tape.sigmoid(r);
    let z = tape.add(iz, hz);
    let z = tape.sigmoid(z);
    let rn = tape.mul(r, hn);
    let n = tape.add(in_, rn);
    let n = tape.tanh(n);
    // (1 − z)·n + z·s, so that z = 1 reproduces s exactly.
    let keep = tape.affine(z, -T::one(), T::one());
    let a = tape.mul(keep, n);
    let b = tape.mul(z, s_prev);
    tape.add(a, b)
}

pub(crate) fn logits_on<T: Real>(tape: &mut Tape<'_, T>, ids: &DecIds, s: Var) -> Var {
    let (w, b) = (tape.param(ids.out_w), tape.param(ids.out_b));
    let y = tape.matmul(s, w);
    tape.add_row(y, b)
}

pub(crate) fn initial_state<T: Real>(tape: &mut Tape<'_, T>, model: &Model<T>, f_init: Var) -> Var {
    if model.config.initial_guidance {
        f_init
    } else {
        tape.input(Tensor::zeros(&[1, model.config.dim]))
    }
}

/// Feeds `pad, y_1, …, y_{T−1}` and returns the `[steps, classes]` logits.
pub(crate) fn teacher_forced_on<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    f_init: Var,
    features: Var,
    targets: &[usize],
) -> Var {
    let ctx = prepare_on(tape, model, features);
    let mut s = initial_state(tape, model, f_init);
    let mut logits = Vec::with_capacity(targets.len());
    let mut prev = PAD;
    for &y in targets {
        let att = attention_on(tape, &model.ids.dec, &ctx, s);
        s = gru_on(tape, model, &ctx, s, att.glimpse, prev);
        logits.push(logits_on(tape, &model.ids.dec, s));
        prev = y;
    }
    tape.concat_rows(&logits)
}

/// Softmax, with the same `-inf` handling as the encoder.
pub fn softmax<T: Real>(e: &[T]) -> Vec<T> {
    let mut v = e.to_vec();
    crate::autograd::softmax_in_place(&mut v);
    v
}

/// `Σ α_i f_i` for `features: [N, D]`.
pub fn glimpse<T: Real>(alpha: &[T], features: &Tensor<T>) -> Tensor<T> {
    let a = Tensor::new(&[1, alpha.len()], alpha.to_vec());
    a.matmul(features)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStep<T> {
    pub scores: Vec<T>,
    pub alpha: Vec<T>,
    /// `[1, D]`
    pub glimpse: Tensor<T>,
}

fn check_features<T: Real>(model: &Model<T>, features: &Tensor<T>) -> Result<()> {
    if features.shape().len() != 2 || features.cols() != model.config.dim || features.rows() == 0 {
        return Err(Error::Shape(format!(
            "features {:?} do not match dim {}",
            features.shape(),
            model.config.dim
        )));
    }
    Ok(())
}

pub fn attention_step<T: Real>(model: &Model<T>, s_prev: &Tensor<T>, features: &Tensor<T>) -> Result<AttentionStep<T>> {
    check_features(model, features)?;
    let mut tape = Tape::with_params(&model.params);
    let f = tape.input(features.clone());
    let s = tape.input(s_prev.clone().reshape(&[1, model.config.dim]));
    let ctx = prepare_on(&mut tape, model, f);
    let att = attention_on(&mut tape, &model.ids.dec, &ctx, s);
    Ok(AttentionStep {
        scores: tape.value(att.scores).data().to_vec(),
        alpha: tape.value(att.alpha).data().to_vec(),
        glimpse: tape.value(att.glimpse).clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    /// GRU output, equal to the new state.
    pub x: Tensor<T>,
    pub s: Tensor<T>,
    pub prob: Vec<T>,
}

pub fn decode_step<T: Real>(model: &Model<T>, s_prev: &Tensor<T>, glimpse: &Tensor<T>, y_prev: usize) -> Result<StepOutput<T>> {
    let d = model.config.dim;
    if s_prev.len() != d || glimpse.len() != d || y_prev >= NUM_CLASSES {
        return Err(Error::Shape("decode_step operands do not match the model".into()));
    }
    let mut tape = Tape::with_params(&model.params);
    // The glimpse is given directly, so the attention keys are unused.
    let dummy = tape.input(Tensor::zeros(&[1, d]));
    let wi = tape.param(model.ids.dec.wi);
    let ctx = DecoderCtx {
        features: dummy,
        keys: dummy,
        wi_glimpse: tape.slice_rows(wi, 0, d),
    };
    let s = tape.input(s_prev.clone().reshape(&[1, d]));
    let g = tape.input(glimpse.clone().reshape(&[1, d]));
    let s_new = gru_on(&mut tape, model, &ctx, s, g, y_prev);
    let logits = logits_on(&mut tape, &model.ids.dec, s_new);
    let s = tape.value(s_new).clone();
    Ok(StepOutput {
        x: s.clone(),
        s,
        prob: softmax(tape.value(logits).data()),
    })
}

/// Per-step probability vectors under teacher forcing, `[steps, classes]`.
pub fn teacher_forced_probs<T: Real>(
    model: &Model<T>,
    f_init: &Tensor<T>,
    features: &Tensor<T>,
    targets: &[usize],
) -> Result<Tensor<T>> {
    check_features(model, features)?;
    let mut tape = Tape::with_params(&model.params);
    let fi = tape.input(f_init.clone().reshape(&[1, model.config.dim]));
    let f = tape.input(features.clone());
    let tf = teacher_forced_on(&mut tape, model, fi, f, targets);
    let mut out = tape.value(tf).clone();
    for row in out.data_mut().chunks_mut(NUM_CLASSES) {
        crate::autograd::softmax_in_place(row);
    }
    Ok(out)
}

/// One step of a left-to-right sequence model, as seen by the searches.
pub trait StepScorer {
    type State: Clone;

    fn num_classes(&self) -> usize;

    fn eos(&self) -> usize;

    /// Token fed at the first step.
    fn start_token(&self) -> usize;

    fn initial(&self) -> Self::State;

    /// Log-probabilities of the next token and the advanced state.
    fn step(&self, state: &Self::State, prev: usize) -> (Vec<f64>, Self::State);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<S> {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct GreedyResult<S> {
    pub best: Hypothesis<S>,
    /// Full log-probability vector and resulting state of every step.
    pub steps: Vec<(Vec<f64>, S)>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax feedback until `eos` or `max_len` tokens; ties go to the lower id.
pub fn greedy_search<S: StepScorer>(scorer: &S, max_len: usize) -> GreedyResult<S::State> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: scorer.initial(),
        finished: false,
    };
    let mut steps = Vec::new();
    while !hyp.finished && hyp.tokens.len() < max_len {
        let prev = hyp.tokens.last().copied().unwrap_or(scorer.start_token());
        let (lp, state) = scorer.step(&hyp.state, prev);
        let c = argmax(&lp);
        hyp.log_prob += lp[c];
        hyp.tokens.push(c);
        hyp.state = state.clone();
        hyp.finished = c == scorer.eos() || hyp.tokens.len() == max_len;
        steps.push((lp, state));
    }
    GreedyResult { best: hyp, steps }
}

/// Beam search over accumulated log-probabilities.
///
/// Finished hypotheses stay in the beam and compete on raw score; equal
/// scores are ordered by token sequence. Stops when every kept hypothesis
/// is finished.
pub fn beam_search<S: StepScorer>(scorer: &S, max_len: usize, width: usize) -> Hypothesis<S::State> {
    assert!(width >= 1, "beam width must be at least 1");
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: scorer.initial(),
        finished: max_len == 0,
    }];
    while beam.iter().any(|h| !h.finished) {
        let mut pool = Vec::with_capacity(beam.len() * scorer.num_classes());
        for h in beam {
            if h.finished {
                pool.push(h);
                continue;
            }
            let prev = h.tokens.last().copied().unwrap_or(scorer.start_token());
            let (lp, state) = scorer.step(&h.state, prev);
            for (c, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                let finished = c == scorer.eos() || tokens.len() == max_len;
                pool.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    state: state.clone(),
                    finished,
                });
            }
        }
        pool.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
        pool.truncate(width);
        beam = pool;
    }
    beam.into_iter().next().expect("beam is never empty")
}

/// Decoder state during inference.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    /// `[1, D]`
    pub s: Tensor<T>,
    /// Attention weights of the step that produced `s`.
    pub alpha: Vec<f64>,
}

/// Drives the trained decoder for one image.
pub struct ModelScorer<'m, T: Real> {
    model: &'m Model<T>,
    f_init: Tensor<T>,
    features: Tensor<T>,
    keys: Tensor<T>,
}

impl<'m, T: Real> ModelScorer<'m, T> {
    pub fn new(model: &'m Model<T>, f_init: &Tensor<T>, features: &Tensor<T>) -> Result<Self> {
        check_features(model, features)?;
        let mut tape = Tape::with_params(&model.params);
        let f = tape.input(features.clone());
        let ctx = prepare_on(&mut tape, model, f);
        Ok(Self {
            model,
            f_init: f_init.clone().reshape(&[1, model.config.dim]),
            features: features.clone(),
            keys: tape.value(ctx.keys).clone(),
        })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    type State = DecoderState<T>;

    fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn start_token(&self) -> usize {
        PAD
    }

    fn initial(&self) -> DecoderState<T> {
        let s = if self.model.config.initial_guidance {
            self.f_init.clone()
        } else {
            Tensor::zeros(&[1, self.model.config.dim])
        };
        DecoderState { s, alpha: Vec::new() }
    }

    fn step(&self, state: &DecoderState<T>, prev: usize) -> (Vec<f64>, DecoderState<T>) {
        let model = self.model;
        let mut tape = Tape::with_params(&model.params);
        let features = tape.input(self.features.clone());
        let keys = tape.input(self.keys.clone());
        let wi = tape.param(model.ids.dec.wi);
        let ctx = DecoderCtx {
            features,
            keys,
            wi_glimpse: tape.slice_rows(wi, 0, model.config.dim),
        };
        let s_prev = tape.input(state.s.clone());
        let att = attention_on(&mut tape, &model.ids.dec, &ctx, s_prev);
        let s = gru_on(&mut tape, model, &ctx, s_prev, att.glimpse, prev);
        let logits = logits_on(&mut tape, &model.ids.dec, s);
        let row: Vec<f64> = tape.value(logits).data().iter().map(|v| v.f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let lp = row.iter().map(|v| v - lse).collect();
        let next = DecoderState {
            s: tape.value(s).clone(),
            alpha: tape.value(att.alpha).data().iter().map(|v| v.f64()).collect(),
        };
        (lp, next)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub text: String,
    pub tokens: Vec<usize>,
    pub score: f64,
    /// Attention weights over the `N` features, one row per emitted token.
    pub alphas: Vec<Vec<f64>>,
}

/// Full pipeline on one `[3, input_h, input_w]` image.
pub fn recognize<T: Real>(model: &Model<T>, image: &Tensor<T>, mode: DecodeMode) -> Result<Recognition> {
    let (f_init, features) = encode_image(model, image)?;
    decode_features(model, &f_init, &features, mode)
}

/// Rectifies and encodes; returns `(f_init, features)`.
pub fn encode_image<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    rectifier::check_input(model, image)?;
    let mut tape = Tape::with_params(&model.params);
    let img = tape.input(image.clone());
    let rect = rectifier::rectify_on(&mut tape, model, img);
    let enc = tfe::encode_on(&mut tape, model, rect, SkipMode::from_flag(model.config.skip_attention));
    Ok((tape.value(enc.f_init).clone(), tape.value(enc.features).clone()))
}

pub fn decode_features<T: Real>(
    model: &Model<T>,
    f_init: &Tensor<T>,
    features: &Tensor<T>,
    mode: DecodeMode,
) -> Result<Recognition> {
    let scorer = ModelScorer::new(model, f_init, features)?;
    let max_len = model.config.max_len;
    let charset = Charset::new();
    match mode {
        DecodeMode::Greedy => {
            let r = greedy_search(&scorer, max_len);
            Ok(Recognition {
                text: charset.decode(&r.best.tokens),
                score: r.best.log_prob,
                alphas: r.steps.into_iter().map(|(_, s)| s.alpha).collect(),
                tokens: r.best.tokens,
            })
        }
        DecodeMode::Beam(width) => {
            if width == 0 {
                return Err(Error::Config("beam width must be at least 1".into()));
            }
            let best = beam_search(&scorer, max_len, width);
            // Replay the winning sequence to recover its attention maps.
            let mut state = scorer.initial();
            let mut alphas = Vec::with_capacity(best.tokens.len());
            let mut prev = PAD;
            for &t in &best.tokens {
                state = scorer.step(&state, prev).1;
                alphas.push(state.alpha.clone());
                prev = t;
            }
            Ok(Recognition {
                text: charset.decode(&best.tokens),
                tokens: best.tokens,
                score: best.log_prob,
                alphas,
            })
        }
    }
}
