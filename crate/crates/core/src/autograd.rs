//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and
//! returns gradients for parameters and for leaves created with
//! [`Tape::input_grad`]. Parameters are read in place from a borrowed
//! [`ParamStore`], so building a tape per sample costs no parameter copies.
//!
//! Matrices are row-major `[rows, cols]`; images are `[channels, h, w]`.

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor};

/// Log-probability floor applied by [`Tape::cross_entropy`].
pub const LOG_PROB_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ScaleShiftRows { x: Var, gain: Var, bias: Var },
    Gather { x: Var, index: Arc<[usize]> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    MeanCols(Var),
    Conv3x3 { x: Var, w: Var, b: Var, cols: Vec<T> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GridSample { img: Var, grid: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        active: Vec<bool>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Affine(x, _) | Tanh(x) | Sigmoid(x) | Relu(x) | Gelu(x) | SoftmaxRows(x) => vec![*x],
            LayerNorm { x, gain, bias, .. } => {
                let mut v = vec![*x];
                v.extend(gain.iter().chain(bias.iter()).copied());
                v
            }
            ScaleShiftRows { x, gain, bias } => vec![*x, *gain, *bias],
            Gather { x, .. } | SliceCols { x, .. } | SliceRows { x, .. } => vec![*x],
            ConcatRows(vs) | ConcatCols(vs) => vs.clone(),
            Reshape(x) | Sum(x) | MeanCols(x) => vec![*x],
            Conv3x3 { x, w, b, .. } => vec![*x, *w, *b],
            MaxPool2 { x, .. } => vec![*x],
            GridSample { img, grid } => vec![*img, *grid],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    params: Vec<Option<Vec<T>>>,
    leaves: HashMap<Var, Vec<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a parameter, `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a leaf created by [`Tape::input_grad`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    /// Dense per-parameter gradients, zero-filled where absent.
    pub fn into_dense(self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut params = self.params;
        params.resize_with(store.len(), || None);
        params
            .into_iter()
            .zip(store.ids())
            .map(|(g, id)| g.unwrap_or_else(|| vec![T::zero(); store.get(id).len()]))
            .collect()
    }
}

pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape without parameters, for differentiating plain inputs.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("parameter node on a tape without parameters")
                .get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Grads::wrt`].
    pub fn input_grad(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let n = if trans_b {
            assert_eq!(bv.cols(), k, "matmul_nt inner dimension");
            bv.rows()
        } else {
            assert_eq!(bv.rows(), k, "matmul inner dimension");
            bv.cols()
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, trans_b })
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise operands differ in size");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(&shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        assert_eq!(rv.len(), c, "add_row width");
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv.data()[i % c])
            .collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::AddRow(a, row))
    }

    /// `x·scale + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| v * scale + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise softmax; `-inf` entries become exact zeros.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let c = xv.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let eps = T::lit(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        let inv_c = T::one() / T::lit(c as f64);
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.value(g).data();
            assert_eq!(gv.len(), c, "layer_norm gain width");
            out.iter_mut().enumerate().for_each(|(i, v)| *v *= gv[i % c]);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), c, "layer_norm bias width");
            out.iter_mut().enumerate().for_each(|(i, v)| *v += bv[i % c]);
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(&shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// `x[r, :]·gain[r] + bias[r]` for a `[rows, cols]` tensor.
    pub fn scale_shift_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(gv.len(), r, "scale_shift_rows gain");
        assert_eq!(bv.len(), r, "scale_shift_rows bias");
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i / c] + bv[i / c])
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::ScaleShiftRows { x, gain, bias })
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Var {
        let xv = self.value(x).data();
        let data = index.iter().map(|&i| xv[i]).collect();
        self.push(Tensor::new(shape, data), Op::Gather { x, index })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows width");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::new(&[rows, c], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), r, "concat_cols height");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(&[r, total], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        self.push(Tensor::new(&[r, len], data), Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::new(&[len, c], data), Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::new(&[1], vec![s]), Op::Sum(x))
    }

    /// `[rows, cols] -> [rows, 1]` column mean.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let inv = T::one() / T::lit(c as f64);
        let data: Vec<T> = xv
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let r = data.len();
        self.push(Tensor::new(&[r, 1], data), Op::MeanCols(x))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    ///
    /// `x: [c_in, h, w]`, `weight: [c_out, c_in·9]`, `bias: [c_out]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let [c_in, h, w] = dims3(xv.shape());
        let wv = self.value(weight);
        let c_out = wv.rows();
        assert_eq!(wv.cols(), c_in * 9, "conv3x3 weight shape");
        let cols = im2col(xv.data(), c_in, h, w);
        let mut out = vec![T::zero(); c_out * h * w];
        gemm(c_out, c_in * 9, h * w, wv.data(), false, &cols, false, &mut out, false);
        let bv = self.value(bias).data();
        assert_eq!(bv.len(), c_out, "conv3x3 bias");
        for (o, chunk) in out.chunks_mut(h * w).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[o]);
        }
        self.push(
            Tensor::new(&[c_out, h, w], out),
            Op::Conv3x3 {
                x,
                w: weight,
                b: bias,
                cols,
            },
        )
    }

    /// 2×2 max pooling with stride 2 over `[c, h, w]`.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, h, w] = dims3(xv.shape());
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        let d = xv.data();
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = ch * h * w + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::new(&[c, oh, ow], out), Op::MaxPool2 { x, argmax })
    }

    /// Bilinear sampling of `img: [c, h, w]` at `grid: [p, 2]` normalized
    /// `(x, y)` coordinates (−1 and 1 are the centers of the border pixels);
    /// coordinates outside `[−1, 1]` clamp to the border. Output `[c, p]`.
    pub fn grid_sample(&mut self, img: Var, grid: Var) -> Var {
        let iv = self.value(img);
        let [c, h, w] = dims3(iv.shape());
        let gv = self.value(grid);
        assert_eq!(gv.cols(), 2, "grid must be [points, 2]");
        let p = gv.rows();
        let mut out = vec![T::zero(); c * p];
        for (k, xy) in gv.data().chunks(2).enumerate() {
            let sx = axis_sample(xy[0], w);
            let sy = axis_sample(xy[1], h);
            for ch in 0..c {
                let plane = &iv.data()[ch * h * w..(ch + 1) * h * w];
                out[ch * p + k] = bilinear(plane, w, &sx, &sy);
            }
        }
        self.push(Tensor::new(&[c, p], out), Op::GridSample { img, grid })
    }

    /// Summed cross-entropy of `logits: [steps, classes]` against one
    /// target class per step, with each log-probability floored at
    /// [`LOG_PROB_FLOOR`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "cross_entropy step count");
        let mut probs = lv.data().to_vec();
        let mut active = Vec::with_capacity(targets.len());
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            let lp = log_softmax_at(row, y);
            let floor = T::lit(LOG_PROB_FLOOR);
            active.push(lp > floor);
            loss -= if lp > floor { lp } else { floor };
            softmax_in_place(row);
        }
        self.push(
            Tensor::new(&[1], vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                active,
            },
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads {
            params: Vec::new(),
            leaves: HashMap::new(),
        };
        if let Some(store) = self.params {
            out.params = (0..store.len()).map(|_| None).collect();
        }
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => match &mut out.params[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                },
                op => self.backward_op(op, Var(i), &g, &mut grads),
            }
        }
        out
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_op(&self, op: &Op<T>, me: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = self.value(me);
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                if let Some(da) = self.grad_buf(grads, *a) {
                    // dA = G · op(B)ᵀ
                    gemm(m, n, k, g, false, bv.data(), !trans_b, da, true);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    if *trans_b {
                        // B is [n, k]: dB = Gᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, db, true);
                    } else {
                        // dB = Aᵀ · G
                        gemm(k, m, n, av.data(), true, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    axpy(db, g, T::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    axpy(db, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.grad_buf(grads, *a) {
                    da.iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (&gi, &bi))| *d += gi * bi);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    db.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (&gi, &ai))| *d += gi * ai);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    axpy(da, g, T::one());
                }
                let c = y.cols();
                if let Some(dr) = self.grad_buf(grads, *row) {
                    for chunk in g.chunks(c) {
                        axpy(dr, chunk, T::one());
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    axpy(dx, g, *s);
                }
            }
            Op::Tanh(x) => self.unary_back(grads, *x, y, g, |_, yv| T::one() - yv * yv),
            Op::Sigmoid(x) => self.unary_back(grads, *x, y, g, |_, yv| yv * (T::one() - yv)),
            Op::Relu(x) => self.unary_back(grads, *x, y, g, |_, yv| {
                if yv > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Gelu(x) => {
                let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::lit(0.3989422804014327);
                let half = T::lit(0.5);
                self.unary_back(grads, *x, y, g, |xv, _| {
                    let cdf = half * (T::one() + (xv * inv_sqrt2).erf());
                    cdf + xv * inv_sqrt_2pi * (-half * xv * xv).exp()
                })
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = y.cols();
                let inv_c = T::one() / T::lit(c as f64);
                let gain_v = gain.map(|gv| self.value(gv).data());
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let mut dxhat = vec![T::zero(); c];
                    for (r, ((dxr, gr), xr)) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gain_v.map_or(T::one(), |gv| gv[j]);
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_c;
                        let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        for j in 0..c {
                            dxr[j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
                if let Some(gv) = gain {
                    if let Some(dg) = self.grad_buf(grads, *gv) {
                        for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                            dg.iter_mut()
                                .zip(gr.iter().zip(xr))
                                .for_each(|(d, (&a, &b))| *d += a * b);
                        }
                    }
                }
                if let Some(bv) = bias {
                    if let Some(db) = self.grad_buf(grads, *bv) {
                        for gr in g.chunks(c) {
                            axpy(db, gr, T::one());
                        }
                    }
                }
            }
            Op::ScaleShiftRows { x, gain, bias } => {
                let c = y.cols();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * gv[i / c];
                    }
                }
                if let Some(dg) = self.grad_buf(grads, *gain) {
                    for (r, (gr, xr)) in g.chunks(c).zip(xv.chunks(c)).enumerate() {
                        dg[r] += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
                if let Some(db) = self.grad_buf(grads, *bias) {
                    for (r, gr) in g.chunks(c).enumerate() {
                        db[r] += gr.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (&i, &gi) in index.iter().zip(g) {
                        dx[i] += gi;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.grad_buf(grads, p) {
                        axpy(dp, &g[offset..offset + len], T::one());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.grad_buf(grads, p) {
                        for (dr, gr) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(dr, &gr[start..start + w], T::one());
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = y.cols();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(len)) {
                        axpy(&mut dr[*start..start + len], gr, T::one());
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    axpy(&mut dx[start * c..start * c + g.len()], g, T::one());
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    axpy(dx, g, T::one());
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanCols(x) => {
                let c = self.value(*x).cols();
                let inv = T::one() / T::lit(c as f64);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (r, dr) in dx.chunks_mut(c).enumerate() {
                        dr.iter_mut().for_each(|d| *d += g[r] * inv);
                    }
                }
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let [c_in, h, wd] = dims3(self.value(*x).shape());
                let wv = self.value(*w);
                let c_out = wv.rows();
                let hw = h * wd;
                if let Some(dw) = self.grad_buf(grads, *w) {
                    gemm(c_out, hw, c_in * 9, g, false, cols, true, dw, true);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (o, gr) in g.chunks(hw).enumerate() {
                        db[o] += gr.iter().copied().sum::<T>();
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); c_in * 9 * hw];
                    gemm(c_in * 9, c_out, hw, wv.data(), true, g, false, &mut dcols, false);
                    let dx = self.grad_buf(grads, *x).expect("needs grad");
                    col2im(&dcols, c_in, h, wd, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (&i, &gi) in argmax.iter().zip(g) {
                        dx[i] += gi;
                    }
                }
            }
            Op::GridSample { img, grid } => {
                let iv = self.value(*img);
                let [c, h, w] = dims3(iv.shape());
                let gv = self.value(*grid);
                let p = gv.rows();
                if self.nodes[img.0].needs_grad {
                    let di = self.grad_buf(grads, *img).expect("needs grad");
                    for (k, xy) in gv.data().chunks(2).enumerate() {
                        let sx = axis_sample(xy[0], w);
                        let sy = axis_sample(xy[1], h);
                        for ch in 0..c {
                            let gk = g[ch * p + k];
                            let plane = &mut di[ch * h * w..(ch + 1) * h * w];
                            plane[sy.i0 * w + sx.i0] += gk * (T::one() - sy.frac) * (T::one() - sx.frac);
                            plane[sy.i0 * w + sx.i1] += gk * (T::one() - sy.frac) * sx.frac;
                            plane[sy.i1 * w + sx.i0] += gk * sy.frac * (T::one() - sx.frac);
                            plane[sy.i1 * w + sx.i1] += gk * sy.frac * sx.frac;
                        }
                    }
                }
                if let Some(dg) = self.grad_buf(grads, *grid) {
                    for (k, xy) in gv.data().chunks(2).enumerate() {
                        let sx = axis_sample(xy[0], w);
                        let sy = axis_sample(xy[1], h);
                        let (mut gx, mut gy) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let plane = &iv.data()[ch * h * w..(ch + 1) * h * w];
                            let v00 = plane[sy.i0 * w + sx.i0];
                            let v01 = plane[sy.i0 * w + sx.i1];
                            let v10 = plane[sy.i1 * w + sx.i0];
                            let v11 = plane[sy.i1 * w + sx.i1];
                            let gk = g[ch * p + k];
                            gx += gk * ((T::one() - sy.frac) * (v01 - v00) + sy.frac * (v11 - v10));
                            gy += gk * ((T::one() - sx.frac) * (v10 - v00) + sx.frac * (v11 - v01));
                        }
                        dg[2 * k] += gx * sx.dpos;
                        dg[2 * k + 1] += gy * sy.dpos;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                active,
            } => {
                let c = self.value(*logits).cols();
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    for (t, (dr, pr)) in dl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        if !active[t] {
                            continue;
                        }
                        for j in 0..c {
                            dr[j] += g[0] * pr[j];
                        }
                        dr[targets[t]] -= g[0];
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<T>>],
        x: Var,
        y: &Tensor<T>,
        g: &[T],
        deriv: impl Fn(T, T) -> T,
    ) {
        let xv = self.value(x).data();
        if let Some(dx) = self.grad_buf(grads, x) {
            for (i, d) in dx.iter_mut().enumerate() {
                *d += g[i] * deriv(xv[i], y.data()[i]);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    match *shape {
        [c, h, w] => [c, h, w],
        _ => panic!("expected a [channels, height, width] tensor, got {shape:?}"),
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += alpha * s);
}

/// Softmax of one row, max-shifted; `-inf` entries map to exact zeros.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn log_softmax_at<T: Real>(row: &[T], y: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[y] - lse
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row + y * w + xx] = x[ch * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[ch * hw + sy as usize * w + sx as usize] += cols[row + y * w + xx];
                    }
                }
            }
        }
    }
}

/// Interpolation cell along one axis.
pub(crate) struct AxisSample<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
    /// d(pixel position)/d(normalized coordinate); zero when clamped.
    pub dpos: T,
}

pub(crate) fn axis_sample<T: Real>(v: T, size: usize) -> AxisSample<T> {
    if size == 1 {
        return AxisSample {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            dpos: T::zero(),
        };
    }
    let span = T::lit((size - 1) as f64);
    let half = T::lit(0.5);
    let mut pos = (v + T::one()) * half * span;
    let inside = pos >= T::zero() && pos <= span;
    pos = pos.max(T::zero()).min(span);
    // Coordinates generated from pixel indices land within rounding error of
    // an integer; snap them so pixel centers reproduce exactly.
    let nearest = pos.round();
    if (pos - nearest).abs() <= T::epsilon() * T::lit(16.0) * span {
        pos = nearest;
    }
    let mut i0 = pos.floor().to_usize().unwrap_or(0);
    if i0 >= size - 1 {
        i0 = size - 2;
    }
    AxisSample {
        i0,
        i1: i0 + 1,
        frac: pos - T::lit(i0 as f64),
        dpos: if inside { half * span } else { T::zero() },
    }
}

pub(crate) fn bilinear<T: Real>(plane: &[T], w: usize, sx: &AxisSample<T>, sy: &AxisSample<T>) -> T {
    let v00 = plane[sy.i0 * w + sx.i0];
    let v01 = plane[sy.i0 * w + sx.i1];
    let v10 = plane[sy.i1 * w + sx.i0];
    let v11 = plane[sy.i1 * w + sx.i1];
    lerp(lerp(v00, v01, sx.frac), lerp(v10, v11, sx.frac), sy.frac)
}

/// Linear interpolation that is exact at both ends.
#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    if t == T::one() {
        b
    } else {
        a + t * (b - a)
    }
}
