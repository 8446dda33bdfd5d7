//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use trig::charset::{NUM_CLASSES, PAD};
use trig::rectifier::{canonical_points, identity_grid, TpsSolver};
use trig::tfe::{build_window_mask, patch_index};
use trig::{Model, Tensor};

/// Scalar arithmetic that counts every multiply-accumulate.
#[derive(Default)]
pub struct Counter {
    pub macs: u64,
}

impl Counter {
    fn mac(&mut self, acc: &mut f64, a: f64, b: f64) {
        *acc += a * b;
        self.macs += 1;
    }

    /// `x[m, k] · w[k, n] + bias`
    fn linear(&mut self, x: &[f64], m: usize, k: usize, w: &[f64], n: usize, bias: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = bias.map_or(0.0, |b| b[j]);
                for t in 0..k {
                    self.mac(&mut acc, x[i * k + t], w[t * n + j]);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    /// Bilinear sample of every channel of `img: [c, h, w]` at normalized `(x, y)`.
    fn bilinear(&mut self, img: &[f64], c: usize, h: usize, w: usize, xy: [f64; 2]) -> Vec<f64> {
        let axis = |v: f64, n: usize| {
            let pos = ((v + 1.0) * 0.5 * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i0 = (pos.floor() as usize).min(n - 2);
            (i0, pos - i0 as f64)
        };
        let (x0, fx) = axis(xy[0], w);
        let (y0, fy) = axis(xy[1], h);
        let taps = [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x0 + 1, fx * (1.0 - fy)),
            (y0 + 1, x0, (1.0 - fx) * fy),
            (y0 + 1, x0 + 1, fx * fy),
        ];
        (0..c)
            .map(|ch| {
                let mut acc = 0.0;
                for &(y, x, wt) in &taps {
                    self.mac(&mut acc, wt, img[ch * h * w + y * w + x]);
                }
                acc
            })
            .collect()
    }

    fn conv3x3(&mut self, x: &[f64], c_in: usize, h: usize, w: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
        let c_out = b.len();
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[o];
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    0.0
                                } else {
                                    x[ci * h * w + sy as usize * w + sx as usize]
                                };
                                self.mac(&mut acc, wt[o * c_in * 9 + ci * 9 + ky * 3 + kx], v);
                            }
                        }
                    }
                    out[o * h * w + y * w + xx] = acc;
                }
            }
        }
        out
    }
}

fn param<'m>(model: &'m Model<f64>, name: &str) -> &'m [f64] {
    model.params.by_name(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

fn layer_norm_rows(x: &mut [f64], cols: usize, g: Option<&[f64]>, b: Option<&[f64]>) {
    for row in x.chunks_mut(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let r = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * r * g.map_or(1.0, |g| g[j]) + b.map_or(0.0, |b| b[j]);
        }
    }
}

fn softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub struct OracleOutput {
    /// `[3, rect_h, rect_w]`
    pub rectified: Vec<f64>,
    pub f_init: Vec<f64>,
    /// `[N, D]`
    pub features: Vec<f64>,
    /// Teacher-forced logits, one row per step.
    pub logits: Vec<Vec<f64>>,
    pub macs: u64,
}

/// Straight-line scalar forward pass of the whole recognizer, teacher-forced
/// on `targets`. Every product inside a dot product, convolution tap,
/// bilinear tap or TPS grid evaluation is counted. The GRU input is the
/// dense `concat(glimpse, onehot)` vector and the attention keys are
/// recomputed at every step.
pub fn scalar_forward(model: &Model<f64>, image: &Tensor<f64>, targets: &[usize]) -> OracleOutput {
    let cfg = &model.config;
    let mut c = Counter::default();
    let img = image.data();
    let (ih, iw) = (cfg.input_h, cfg.input_w);
    let p_count = cfg.rect_h * cfg.rect_w;

    let grid: Vec<[f64; 2]> = if cfg.tps {
        let mut x: Vec<f64> = vec![0.0; 3 * cfg.loc_h * cfg.loc_w];
        for (k, xy) in identity_grid(cfg.loc_h, cfg.loc_w).into_iter().enumerate() {
            for (ch, v) in c.bilinear(img, 3, ih, iw, xy).into_iter().enumerate() {
                x[ch * cfg.loc_h * cfg.loc_w + k] = v;
            }
        }
        let (mut h, mut w, mut c_in) = (cfg.loc_h, cfg.loc_w, 3);
        for (i, &c_out) in cfg.loc_channels.iter().enumerate() {
            let mut y = c.conv3x3(&x, c_in, h, w, param(model, &format!("loc.conv{i}.w")), param(model, &format!("loc.conv{i}.b")));
            layer_norm_rows(&mut y, c_out * h * w, None, None);
            let (g, b) = (param(model, &format!("loc.norm{i}.g")), param(model, &format!("loc.norm{i}.b")));
            for (j, v) in y.iter_mut().enumerate() {
                *v = (*v * g[j / (h * w)] + b[j / (h * w)]).max(0.0);
            }
            let (oh, ow) = (h / 2, w / 2);
            x = (0..c_out * oh * ow)
                .map(|j| {
                    let (ch, yy, xx) = (j / (oh * ow), (j / ow) % oh, j % ow);
                    let at = |dy: usize, dx: usize| y[ch * h * w + (2 * yy + dy) * w + 2 * xx + dx];
                    at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1))
                })
                .collect();
            h = oh;
            w = ow;
            c_in = c_out;
        }
        let pooled: Vec<f64> = x.chunks(h * w).map(|ch| ch.iter().sum::<f64>() / (h * w) as f64).collect();
        let hidden: Vec<f64> = c
            .linear(&pooled, 1, c_in, param(model, "loc.fc1.w"), cfg.loc_hidden, Some(param(model, "loc.fc1.b")))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let pts: Vec<f64> = c
            .linear(&hidden, 1, cfg.loc_hidden, param(model, "loc.fc2.w"), 2 * cfg.fiducial, Some(param(model, "loc.fc2.b")))
            .into_iter()
            .map(f64::tanh)
            .collect();
        let k = cfg.fiducial;
        let basis = TpsSolver::new(&canonical_points(k)).unwrap().basis(cfg.rect_h, cfg.rect_w);
        (0..p_count)
            .map(|p| {
                let mut xy = [0.0; 2];
                for j in 0..k {
                    c.mac(&mut xy[0], basis[p * k + j], pts[2 * j]);
                    c.mac(&mut xy[1], basis[p * k + j], pts[2 * j + 1]);
                }
                xy
            })
            .collect()
    } else {
        identity_grid(cfg.rect_h, cfg.rect_w)
    };
    let mut rect = vec![0.0; 3 * p_count];
    for (k, &xy) in grid.iter().enumerate() {
        for (ch, v) in c.bilinear(img, 3, ih, iw, xy).into_iter().enumerate() {
            rect[ch * p_count + k] = v;
        }
    }

    let (n, t, d) = (cfg.num_patches(), cfg.tokens(), cfg.dim);
    let (heads, dk) = (cfg.heads, cfg.head_dim());
    let index = patch_index(cfg.rect_h, cfg.rect_w, cfg.patch_h, cfg.patch_w).unwrap();
    let patches: Vec<f64> = index.iter().map(|&i| rect[i]).collect();
    let e = c.linear(&patches, n, cfg.patch_dim(), param(model, "tfe.embed.w"), d, None);
    let mut x: Vec<f64> = param(model, "tfe.init").iter().chain(&e).copied().collect();
    for (v, p) in x.iter_mut().zip(param(model, "tfe.pos")) {
        *v += p;
    }
    let mask = cfg.window.map(|r| build_window_mask(t, r, cfg.mask_sees_init));
    let mut prev_raw: Option<Vec<Vec<f64>>> = None;
    for l in 0..cfg.blocks {
        let name = |s: &str| format!("tfe.block{l}.{s}");
        let mut h = x.clone();
        layer_norm_rows(&mut h, d, Some(param(model, &name("ln1.g"))), Some(param(model, &name("ln1.b"))));
        let proj = |c: &mut Counter, which: &str| {
            c.linear(&h, t, d, param(model, &name(&format!("attn.{which}.w"))), d, Some(param(model, &name(&format!("attn.{which}.b")))))
        };
        let (q, k, v) = (proj(&mut c, "q"), proj(&mut c, "k"), proj(&mut c, "v"));
        let mut joined = vec![0.0; t * d];
        let mut raws = Vec::with_capacity(heads);
        for hd in 0..heads {
            let mut raw = vec![0.0; t * t];
            for i in 0..t {
                for j in 0..t {
                    let mut acc = 0.0;
                    for a in 0..dk {
                        c.mac(&mut acc, q[i * d + hd * dk + a], k[j * d + hd * dk + a]);
                    }
                    raw[i * t + j] = acc / (dk as f64).sqrt();
                }
            }
            if cfg.skip_attention {
                if let Some(prev) = &prev_raw {
                    raw.iter_mut().zip(&prev[hd]).for_each(|(r, p)| *r += p);
                }
            }
            let mut wts = raw.clone();
            if let Some(m) = &mask {
                for i in 0..t {
                    for j in 0..t {
                        if !m.is_visible(i, j) {
                            wts[i * t + j] = f64::NEG_INFINITY;
                        }
                    }
                }
            }
            for row in wts.chunks_mut(t) {
                softmax(row);
            }
            for i in 0..t {
                for a in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..t {
                        c.mac(&mut acc, wts[i * t + j], v[j * d + hd * dk + a]);
                    }
                    joined[i * d + hd * dk + a] = acc;
                }
            }
            raws.push(raw);
        }
        prev_raw = Some(raws);
        let o = c.linear(&joined, t, d, param(model, &name("attn.o.w")), d, Some(param(model, &name("attn.o.b"))));
        let x1: Vec<f64> = o.iter().zip(&x).map(|(a, b)| a + b).collect();
        let mut h2 = x1.clone();
        layer_norm_rows(&mut h2, d, Some(param(model, &name("ln2.g"))), Some(param(model, &name("ln2.b"))));
        let m = cfg.mlp_dim();
        let hidden: Vec<f64> = c
            .linear(&h2, t, d, param(model, &name("mlp.fc1.w")), m, Some(param(model, &name("mlp.fc1.b"))))
            .into_iter()
            .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            .collect();
        let y = c.linear(&hidden, t, m, param(model, &name("mlp.fc2.w")), d, Some(param(model, &name("mlp.fc2.b"))));
        x = y.iter().zip(&x1).map(|(a, b)| a + b).collect();
    }
    let f_init = x[..d].to_vec();
    let features = x[d..].to_vec();

    let (wd, vd, ab, aw) = (
        param(model, "dec.attn.wd"),
        param(model, "dec.attn.vd"),
        param(model, "dec.attn.b"),
        param(model, "dec.attn.w"),
    );
    let (wi, bi, wh, bh) = (
        param(model, "dec.gru.wi"),
        param(model, "dec.gru.bi"),
        param(model, "dec.gru.wh"),
        param(model, "dec.gru.bh"),
    );
    let mut s = if cfg.initial_guidance { f_init.clone() } else { vec![0.0; d] };
    let mut prev = PAD;
    let mut logits = Vec::with_capacity(targets.len());
    for &y in targets {
        let query = c.linear(&s, 1, d, wd, d, None);
        let keys = c.linear(&features, n, d, vd, d, Some(ab));
        let mut e = vec![0.0; n];
        for i in 0..n {
            for a in 0..d {
                c.mac(&mut e[i], (keys[i * d + a] + query[a]).tanh(), aw[a]);
            }
        }
        softmax(&mut e);
        let mut g = vec![0.0; d];
        for i in 0..n {
            for a in 0..d {
                c.mac(&mut g[a], e[i], features[i * d + a]);
            }
        }
        let mut input = g;
        input.extend((0..NUM_CLASSES).map(|k| if k == prev { 1.0 } else { 0.0 }));
        let gi = c.linear(&input, 1, d + NUM_CLASSES, wi, 3 * d, Some(bi));
        let gh = c.linear(&s, 1, d, wh, 3 * d, Some(bh));
        s = (0..d)
            .map(|j| {
                let r = sigmoid(gi[j] + gh[j]);
                let z = sigmoid(gi[d + j] + gh[d + j]);
                let nn = (gi[2 * d + j] + r * gh[2 * d + j]).tanh();
                (1.0 - z) * nn + z * s[j]
            })
            .collect();
        logits.push(c.linear(&s, 1, d, param(model, "dec.out.w"), NUM_CLASSES, Some(param(model, "dec.out.b"))));
        prev = y;
    }
    OracleOutput {
        rectified: rect,
        f_init,
        features,
        logits,
        macs: c.macs,
    }
}

fn kernel(a: [f64; 2], b: [f64; 2]) -> f64 {
    let r2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    if r2 > 0.0 {
        r2 * r2.ln()
    } else {
        0.0
    }
}

/// TPS carrying `sources` onto `targets`, fitted by SVD and evaluated by
/// direct radial-basis summation at every pixel center of an `h × w` frame.
pub fn dense_tps(sources: &[[f64; 2]], targets: &[[f64; 2]], h: usize, w: usize) -> Vec<[f64; 2]> {
    let k = sources.len();
    let n = k + 3;
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, 2);
    for i in 0..k {
        for j in 0..k {
            l[(i, j)] = kernel(sources[i], sources[j]);
        }
        let poly = [1.0, sources[i][0], sources[i][1]];
        for (c, v) in poly.into_iter().enumerate() {
            l[(i, k + c)] = v;
            l[(k + c, i)] = v;
        }
        rhs[(i, 0)] = targets[i][0];
        rhs[(i, 1)] = targets[i][1];
    }
    let coef = l.svd(true, true).solve(&rhs, 1e-14).expect("svd solve");
    identity_grid(h, w)
        .into_iter()
        .map(|p| {
            let mut phi = DVector::<f64>::zeros(n);
            for (i, &s) in sources.iter().enumerate() {
                phi[i] = kernel(p, s);
            }
            phi[k] = 1.0;
            phi[k + 1] = p[0];
            phi[k + 2] = p[1];
            [phi.dot(&coef.column(0)), phi.dot(&coef.column(1))]
        })
        .collect()
}

/// Deterministic pseudo-random tensor in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Adds `N(0, std)` noise to every parameter.
pub fn perturb(model: &mut Model<f64>, seed: u64, std: f64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += dist.sample(&mut rng);
        }
    }
}
