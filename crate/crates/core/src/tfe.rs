//! Transformer feature extractor.
//!
//! The rectified image is cut into `h × w` patches, projected to width `D`,
//! prefixed with a learned initial token and offset by learned positions.
//! `L` pre-LN blocks follow. With residual attention enabled, each head adds
//! the previous block's raw (pre-mask) scores to its fresh scores; the first
//! block adds nothing.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BlockIds, Model};
use crate::tensor::{Real, Tensor};

const LN_EPS: f64 = 1e-5;

/// Source offset in a `[3, H, W]` image of every element of the
/// `[N, 3·h·w]` patch matrix. Patches are row-major over the patch grid and
/// each is flattened channel-major, then row-major.
pub fn patch_index(big_h: usize, big_w: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    if h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0 {
        return Err(Error::Shape(format!("patch {h}x{w} does not tile a {big_h}x{big_w} image")));
    }
    let mut index = Vec::with_capacity(3 * big_h * big_w);
    for pr in 0..big_h / h {
        for pc in 0..big_w / w {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        index.push(c * big_h * big_w + (pr * h + y) * big_w + pc * w + x);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// `[3, H, W]` image to the `[N, 3·h·w]` patch matrix.
pub fn split_1d<T: Real>(image: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [c, big_h, big_w] = match *image.shape() {
        [c, a, b] => [c, a, b],
        _ => return Err(Error::Shape(format!("expected [3, H, W], got {:?}", image.shape()))),
    };
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let index = patch_index(big_h, big_w, h, w)?;
    let n = (big_h / h) * (big_w / w);
    let data = index.iter().map(|&i| image.data()[i]).collect();
    Ok(Tensor::new(&[n, 3 * h * w], data))
}

/// Inverse of [`split_1d`].
pub fn merge_patches<T: Real>(patches: &Tensor<T>, big_h: usize, big_w: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let index = patch_index(big_h, big_w, h, w)?;
    if patches.len() != index.len() {
        return Err(Error::Shape(format!(
            "{} patch values for a {big_h}x{big_w} image",
            patches.len()
        )));
    }
    let mut out = Tensor::zeros(&[3, big_h, big_w]);
    for (&i, &v) in index.iter().zip(patches.data()) {
        out.data_mut()[i] = v;
    }
    Ok(out)
}

/// `E = X_s · W_E`.
pub fn embed_patches<T: Real>(patches: &Tensor<T>, w_e: &Tensor<T>) -> Result<Tensor<T>> {
    if patches.cols() != w_e.rows() {
        return Err(Error::Shape(format!(
            "patch width {} against embedding rows {}",
            patches.cols(),
            w_e.rows()
        )));
    }
    Ok(patches.matmul(w_e))
}

/// `F_0 = concat(E_init, E) + E_pos`.
pub fn assemble_input<T: Real>(e: &Tensor<T>, e_init: &Tensor<T>, e_pos: &Tensor<T>) -> Result<Tensor<T>> {
    let d = e.cols();
    if e_init.len() != d || e_pos.cols() != d || e_pos.rows() != e.rows() + 1 {
        return Err(Error::Shape(format!(
            "E {:?}, E_init {:?}, E_pos {:?}",
            e.shape(),
            e_init.shape(),
            e_pos.shape()
        )));
    }
    let mut data = e_init.data().to_vec();
    data.extend_from_slice(e.data());
    data.iter_mut().zip(e_pos.data()).for_each(|(v, &p)| *v += p);
    Ok(Tensor::new(&[e.rows() + 1, d], data))
}

/// Token visibility; token 0 is the initial embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowMask {
    pub tokens: usize,
    pub radius: usize,
    visible: Vec<bool>,
}

impl WindowMask {
    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.tokens + col]
    }

    /// `0` where visible and `-inf` elsewhere, `[tokens, tokens]`.
    pub fn additive<T: Real>(&self) -> Tensor<T> {
        let data = self
            .visible
            .iter()
            .map(|&v| if v { T::zero() } else { T::neg_infinity() })
            .collect();
        Tensor::new(&[self.tokens, self.tokens], data)
    }
}

/// Row 0 sees everything; feature row `i` sees feature columns within
/// `radius` and, when `sees_init`, column 0.
pub fn build_window_mask(tokens: usize, radius: usize, sees_init: bool) -> WindowMask {
    let mut visible = vec![false; tokens * tokens];
    for i in 0..tokens {
        for j in 0..tokens {
            visible[i * tokens + j] = i == 0 || (j == 0 && sees_init) || (j > 0 && i.abs_diff(j) <= radius);
        }
    }
    WindowMask {
        tokens,
        radius,
        visible,
    }
}

/// Residual-score behaviour of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    /// Plain attention.
    Disabled,
    /// Raw scores of block `l−1` are added to the fresh scores of block `l`.
    Enabled,
    /// The residual path is present but carries zeros.
    ZeroForced,
}

impl SkipMode {
    pub fn from_flag(enabled: bool) -> Self {
        if enabled {
            SkipMode::Enabled
        } else {
            SkipMode::Disabled
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadVars {
    pub fresh: Var,
    pub raw: Var,
    pub weights: Var,
}

/// Per-head `[T, T]` matrices of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRecord<T> {
    /// `QK^T/sqrt(d_k)` of this block alone.
    pub fresh: Tensor<T>,
    /// Fresh scores plus the carried residual, before the mask.
    pub raw: Tensor<T>,
    /// Softmax of the masked raw scores.
    pub weights: Tensor<T>,
}

/// `blocks[l][head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub blocks: Vec<Vec<HeadRecord<T>>>,
}

impl<T: Real> AttentionRecord<T> {
    pub(crate) fn from_tape(tape: &Tape<'_, T>, heads: &[Vec<HeadVars>]) -> Self {
        Self {
            blocks: heads
                .iter()
                .map(|block| {
                    block
                        .iter()
                        .map(|h| HeadRecord {
                            fresh: tape.value(h.fresh).clone(),
                            raw: tape.value(h.raw).clone(),
                            weights: tape.value(h.weights).clone(),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

fn linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: crate::params::ParamId, b: crate::params::ParamId) -> Var {
    let (w, b) = (tape.param(w), tape.param(b));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn encoder_block_on<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    ids: &BlockIds,
    x: Var,
    prev: Option<&[HeadVars]>,
    mask: Option<Var>,
    skip: SkipMode,
) -> (Var, Vec<HeadVars>) {
    let cfg = &model.config;
    let dk = cfg.head_dim();
    let tokens = tape.shape(x)[0];
    let (g1, b1) = (tape.param(ids.ln1_g), tape.param(ids.ln1_b));
    let h = tape.layer_norm(x, Some(g1), Some(b1), LN_EPS);
    let q = linear(tape, h, ids.q_w, ids.q_b);
    let k = linear(tape, h, ids.k_w, ids.k_b);
    let v = linear(tape, h, ids.v_w, ids.v_b);
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let zeros = (skip == SkipMode::ZeroForced).then(|| tape.input(Tensor::zeros(&[tokens, tokens])));

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut outs = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qi = tape.slice_cols(q, i * dk, dk);
        let ki = tape.slice_cols(k, i * dk, dk);
        let vi = tape.slice_cols(v, i * dk, dk);
        let scores = tape.matmul_nt(qi, ki);
        let fresh = tape.scale(scores, scale);
        let raw = match (skip, prev) {
            (SkipMode::Enabled, Some(p)) => tape.add(fresh, p[i].raw),
            (SkipMode::ZeroForced, _) => tape.add(fresh, zeros.expect("zero residual")),
            _ => fresh,
        };
        let masked = match mask {
            Some(m) => tape.add(raw, m),
            None => raw,
        };
        let weights = tape.softmax_rows(masked);
        outs.push(tape.matmul(weights, vi));
        heads.push(HeadVars { fresh, raw, weights });
    }
    let attn = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let attn = linear(tape, attn, ids.o_w, ids.o_b);
    let x1 = tape.add(attn, x);

    let (g2, b2) = (tape.param(ids.ln2_g), tape.param(ids.ln2_b));
    let h2 = tape.layer_norm(x1, Some(g2), Some(b2), LN_EPS);
    let m = linear(tape, h2, ids.fc1_w, ids.fc1_b);
    let m = tape.gelu(m);
    let m = linear(tape, m, ids.fc2_w, ids.fc2_b);
    (tape.add(m, x1), heads)
}

/// Runs the block stack on `F_0`.
pub(crate) fn blocks_on<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    f0: Var,
    skip: SkipMode,
) -> (Var, Vec<Vec<HeadVars>>) {
    let mask = model.consts.mask.as_ref().map(|m| tape.input(m.clone()));
    let mut x = f0;
    let mut record: Vec<Vec<HeadVars>> = Vec::with_capacity(model.config.blocks);
    for ids in &model.ids.blocks {
        let (y, heads) = encoder_block_on(tape, model, ids, x, record.last().map(Vec::as_slice), mask, skip);
        x = y;
        record.push(heads);
    }
    (x, record)
}

pub(crate) struct EncoderVars {
    /// `[1, D]`
    pub f_init: Var,
    /// `[N, D]`
    pub features: Var,
    pub heads: Vec<Vec<HeadVars>>,
}

/// Patch split, embedding, assembly and the block stack.
pub(crate) fn encode_on<T: Real>(tape: &mut Tape<'_, T>, model: &Model<T>, rect: Var, skip: SkipMode) -> EncoderVars {
    let cfg = &model.config;
    let n = cfg.num_patches();
    let patches = tape.gather(rect, model.consts.patch_index.clone(), &[n, cfg.patch_dim()]);
    let we = tape.param(model.ids.embed);
    let e = tape.matmul(patches, we);
    let init = tape.param(model.ids.init);
    let tokens = tape.concat_rows(&[init, e]);
    let pos = tape.param(model.ids.pos);
    let f0 = tape.add(tokens, pos);
    let (out, heads) = blocks_on(tape, model, f0, skip);
    EncoderVars {
        f_init: tape.slice_rows(out, 0, 1),
        features: tape.slice_rows(out, 1, n),
        heads,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    /// `[1, D]`
    pub f_init: Tensor<T>,
    /// `[N, D]`
    pub features: Tensor<T>,
    pub record: AttentionRecord<T>,
}

/// Encodes a rectified `[3, rect_h, rect_w]` image.
pub fn encode<T: Real>(model: &Model<T>, rectified: &Tensor<T>) -> Result<EncoderOutput<T>> {
    encode_with(model, rectified, SkipMode::from_flag(model.config.skip_attention))
}

pub fn encode_with<T: Real>(model: &Model<T>, rectified: &Tensor<T>, skip: SkipMode) -> Result<EncoderOutput<T>> {
    let cfg = &model.config;
    if rectified.shape() != [3, cfg.rect_h, cfg.rect_w] {
        return Err(Error::Shape(format!(
            "rectified image is {:?}, expected [3, {}, {}]",
            rectified.shape(),
            cfg.rect_h,
            cfg.rect_w
        )));
    }
    let mut tape = Tape::with_params(&model.params);
    let rect = tape.input(rectified.clone());
    let vars = encode_on(&mut tape, model, rect, skip);
    Ok(EncoderOutput {
        f_init: tape.value(vars.f_init).clone(),
        features: tape.value(vars.features).clone(),
        record: AttentionRecord::from_tape(&tape, &vars.heads),
    })
}

/// Applies the block stack to an assembled `[T, D]` token matrix.
pub fn run_blocks<T: Real>(model: &Model<T>, f0: &Tensor<T>, skip: SkipMode) -> Result<(Tensor<T>, AttentionRecord<T>)> {
    let cfg = &model.config;
    if f0.shape() != [cfg.tokens(), cfg.dim] {
        return Err(Error::Shape(format!(
            "tokens are {:?}, expected [{}, {}]",
            f0.shape(),
            cfg.tokens(),
            cfg.dim
        )));
    }
    let mut tape = Tape::with_params(&model.params);
    let x = tape.input(f0.clone());
    let (out, heads) = blocks_on(&mut tape, model, x, skip);
    Ok((tape.value(out).clone(), AttentionRecord::from_tape(&tape, &heads)))
}
