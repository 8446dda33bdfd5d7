//! Thin-plate-spline rectification.
//!
//! A small CNN predicts `K` control points in the normalized input frame.
//! The TPS that carries the fixed canonical points (two rows along the top
//! and bottom of the rectified frame) onto the predicted ones is evaluated at
//! every rectified pixel, and the input is bilinearly sampled there.
//!
//! Coordinates are `(x, y)` in `[-1, 1]`, with ±1 at the centers of the
//! border pixels.

use nalgebra::{DMatrix, DVector};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// Canonical points sit this far inside the frame edges.
pub const CANONICAL_EXTENT: f64 = 0.9;
const TPS_RIDGE: f64 = 1e-6;
const LN_EPS: f64 = 1e-5;

/// Top row left to right, then bottom row left to right.
pub fn canonical_points(k: usize) -> Vec<[f64; 2]> {
    let per_row = k / 2;
    let xs: Vec<f64> = (0..per_row)
        .map(|i| -CANONICAL_EXTENT + 2.0 * CANONICAL_EXTENT * i as f64 / (per_row - 1) as f64)
        .collect();
    [-CANONICAL_EXTENT, CANONICAL_EXTENT]
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
        .collect()
}

/// Normalized `(x, y)` of every pixel center of an `h × w` frame, row-major.
pub fn identity_grid(h: usize, w: usize) -> Vec<[f64; 2]> {
    let norm = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    (0..h)
        .flat_map(|y| (0..w).map(move |x| [norm(x, w), norm(y, h)]))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlPoints {
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub h: usize,
    pub w: usize,
    /// Source coordinate for each output pixel, row-major.
    pub coords: Vec<[f64; 2]>,
}

/// `U(r) = r² ln r²`, with `U(0) = 0`.
pub fn tps_kernel(a: [f64; 2], b: [f64; 2]) -> f64 {
    let r2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Precomputed TPS system for a fixed set of target points.
#[derive(Clone, Debug)]
pub struct TpsSolver {
    targets: Vec<[f64; 2]>,
    /// First `K` columns of the inverse system matrix, `(K+3) × K`.
    inverse: DMatrix<f64>,
}

impl TpsSolver {
    /// Factors the system; a singular system is retried with `1e-6` added
    /// to the diagonal before reporting [`Error::SingularTps`].
    pub fn new(targets: &[[f64; 2]]) -> Result<Self> {
        let k = targets.len();
        if k < 3 || targets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::SingularTps);
        }
        let n = k + 3;
        let mut l = DMatrix::<f64>::zeros(n, n);
        for i in 0..k {
            for j in 0..k {
                l[(i, j)] = tps_kernel(targets[i], targets[j]);
            }
            for (c, v) in [1.0, targets[i][0], targets[i][1]].into_iter().enumerate() {
                l[(i, k + c)] = v;
                l[(k + c, i)] = v;
            }
        }
        let rhs = DMatrix::<f64>::identity(n, k);
        let solve = |m: DMatrix<f64>| {
            m.lu()
                .solve(&rhs)
                .filter(|x| x.iter().all(|v| v.is_finite()) && x.iter().any(|v| *v != 0.0))
        };
        let inverse = match solve(l.clone()) {
            Some(x) => x,
            None => {
                let mut reg = l;
                for i in 0..n {
                    reg[(i, i)] += TPS_RIDGE;
                }
                solve(reg).ok_or(Error::SingularTps)?
            }
        };
        Ok(Self {
            targets: targets.to_vec(),
            inverse,
        })
    }

    pub fn targets(&self) -> &[[f64; 2]] {
        &self.targets
    }

    /// Row-major `[h·w, K]` matrix `B` with `grid = B · points`.
    pub fn basis(&self, h: usize, w: usize) -> Vec<f64> {
        let k = self.targets.len();
        let mut out = Vec::with_capacity(h * w * k);
        let mut row = DVector::<f64>::zeros(k + 3);
        for p in identity_grid(h, w) {
            for (i, &t) in self.targets.iter().enumerate() {
                row[i] = tps_kernel(p, t);
            }
            row[k] = 1.0;
            row[k + 1] = p[0];
            row[k + 2] = p[1];
            let b = self.inverse.tr_mul(&row);
            out.extend(b.iter());
        }
        out
    }

    /// Warp of the rectified frame into the input frame.
    pub fn grid(&self, points: &ControlPoints, h: usize, w: usize) -> Result<SamplingGrid> {
        let k = self.targets.len();
        if points.points.len() != k {
            return Err(Error::Shape(format!(
                "{} control points for a {k}-point TPS",
                points.points.len()
            )));
        }
        let basis = self.basis(h, w);
        let coords = basis
            .chunks(k)
            .map(|b| {
                let mut xy = [0.0; 2];
                for (bi, p) in b.iter().zip(&points.points) {
                    xy[0] += bi * p[0];
                    xy[1] += bi * p[1];
                }
                xy
            })
            .collect();
        Ok(SamplingGrid { h, w, coords })
    }
}

/// TPS grid mapping the canonical points onto `points`.
pub fn tps_grid(points: &ControlPoints, out_h: usize, out_w: usize) -> Result<SamplingGrid> {
    TpsSolver::new(&canonical_points(points.points.len()))?.grid(points, out_h, out_w)
}

/// Bilinear sampling of a `[3, h, w]` image at every grid coordinate.
pub fn sample<T: Real>(image: &Tensor<T>, grid: &SamplingGrid) -> Result<Tensor<T>> {
    if image.shape().len() != 3 {
        return Err(Error::Shape(format!("expected [c, h, w], got {:?}", image.shape())));
    }
    let mut tape = Tape::new();
    let img = tape.input(image.clone());
    let flat: Vec<T> = grid.coords.iter().flatten().map(|&v| T::lit(v)).collect();
    let g = tape.input(Tensor::new(&[grid.coords.len(), 2], flat));
    let out = tape.grid_sample(img, g);
    let c = image.shape()[0];
    Ok(tape.value(out).clone().reshape(&[c, grid.h, grid.w]))
}

pub(crate) fn check_input<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<()> {
    let cfg = &model.config;
    if image.shape() != [3, cfg.input_h, cfg.input_w] {
        return Err(Error::Shape(format!(
            "image is {:?}, model expects [3, {}, {}]",
            image.shape(),
            cfg.input_h,
            cfg.input_w
        )));
    }
    Ok(())
}

/// Localization network on the tape; returns `[K, 2]` control points.
pub(crate) fn localize_on<T: Real>(tape: &mut Tape<'_, T>, model: &Model<T>, img: Var) -> Var {
    let cfg = &model.config;
    let ids = model.ids.loc.as_ref().expect("localization network requires tps");
    let grid = tape.input(model.consts.loc_grid.clone());
    let small = tape.grid_sample(img, grid);
    let (mut h, mut w) = (cfg.loc_h, cfg.loc_w);
    let mut x = tape.reshape(small, &[3, h, w]);
    for (conv, &c) in ids.convs.iter().zip(&cfg.loc_channels) {
        let (cw, cb) = (tape.param(conv.w), tape.param(conv.b));
        let y = tape.conv3x3(x, cw, cb);
        // Single-group normalization: standardize the whole map, then a
        // per-channel scale and shift.
        let flat = tape.reshape(y, &[1, c * h * w]);
        let normed = tape.layer_norm(flat, None, None, LN_EPS);
        let rows = tape.reshape(normed, &[c, h * w]);
        let (g, b) = (tape.param(conv.g), tape.param(conv.beta));
        let affine = tape.scale_shift_rows(rows, g, b);
        let act = tape.relu(affine);
        let act = tape.reshape(act, &[c, h, w]);
        x = tape.max_pool2(act);
        h /= 2;
        w /= 2;
    }
    let c = *cfg.loc_channels.last().expect("non-empty");
    let rows = tape.reshape(x, &[c, h * w]);
    let pooled = tape.mean_cols(rows);
    let pooled = tape.reshape(pooled, &[1, c]);
    let (w1, b1) = (tape.param(ids.fc1_w), tape.param(ids.fc1_b));
    let hidden = tape.matmul(pooled, w1);
    let hidden = tape.add_row(hidden, b1);
    let hidden = tape.relu(hidden);
    let (w2, b2) = (tape.param(ids.fc2_w), tape.param(ids.fc2_b));
    let out = tape.matmul(hidden, w2);
    let out = tape.add_row(out, b2);
    let out = tape.tanh(out);
    tape.reshape(out, &[cfg.fiducial, 2])
}

/// Returns the `[3, rect_h, rect_w]` rectified image.
pub(crate) fn rectify_on<T: Real>(tape: &mut Tape<'_, T>, model: &Model<T>, img: Var) -> Var {
    let cfg = &model.config;
    let grid = match &model.consts.tps_basis {
        Some(basis) => {
            let points = localize_on(tape, model, img);
            let basis = tape.input(basis.clone());
            tape.matmul(basis, points)
        }
        None => tape.input(model.consts.resize_grid.clone()),
    };
    let sampled = tape.grid_sample(img, grid);
    tape.reshape(sampled, &[3, cfg.rect_h, cfg.rect_w])
}

/// Predicted control points for one `[3, input_h, input_w]` image.
pub fn localize<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<ControlPoints> {
    check_input(model, image)?;
    if !model.config.tps {
        return Err(Error::Config("rectification is disabled for this model".into()));
    }
    let mut tape = Tape::with_params(&model.params);
    let img = tape.input(image.clone());
    let pts = localize_on(&mut tape, model, img);
    let points = tape
        .value(pts)
        .data()
        .chunks(2)
        .map(|p| [p[0].f64(), p[1].f64()])
        .collect();
    Ok(ControlPoints { points })
}

/// Rectified `[3, rect_h, rect_w]` image.
pub fn rectify<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    check_input(model, image)?;
    let mut tape = Tape::with_params(&model.params);
    let img = tape.input(image.clone());
    let r = rectify_on(&mut tape, model, img);
    Ok(tape.value(r).clone())
}
