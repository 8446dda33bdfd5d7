//! Model configuration, presets, parameter layout and initialization.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::charset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rectifier::{self, TpsSolver};
use crate::tensor::{Real, Tensor};
use crate::tfe;

/// Random stream ids derived from the single run seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
}

/// Every architectural knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Network input size (the dataset canvas).
    pub input_h: usize,
    pub input_w: usize,
    /// Rectified image size fed to the feature extractor.
    pub rect_h: usize,
    pub rect_w: usize,
    /// TPS rectification; when off the input is bilinearly resized.
    pub tps: bool,
    /// Localization network input size.
    pub loc_h: usize,
    pub loc_w: usize,
    /// Output channels of the localization conv blocks.
    pub loc_channels: Vec<usize>,
    pub loc_hidden: usize,
    /// Total number of control points, half on each horizontal edge.
    pub fiducial: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Residual attention: add the previous block's raw scores.
    pub skip_attention: bool,
    /// Window mask radius among feature tokens; `None` disables the mask.
    pub window: Option<usize>,
    /// Whether masked feature rows may still attend to the initial token.
    pub mask_sees_init: bool,
    /// `s0 = f_init` when on, `s0 = 0` when off.
    pub initial_guidance: bool,
    /// Decoding steps, the final `eos` included.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn paper_1d() -> Self {
        Self {
            input_h: 64,
            input_w: 256,
            rect_h: 32,
            rect_w: 100,
            tps: true,
            loc_h: 32,
            loc_w: 64,
            loc_channels: vec![32, 64, 128, 256],
            loc_hidden: 256,
            fiducial: 20,
            patch_h: 32,
            patch_w: 4,
            dim: 512,
            heads: 16,
            blocks: 12,
            mlp_ratio: 4,
            skip_attention: true,
            window: None,
            mask_sees_init: true,
            initial_guidance: true,
            max_len: 26,
        }
    }

    pub fn paper_2d() -> Self {
        Self {
            tps: false,
            patch_h: 4,
            patch_w: 4,
            ..Self::paper_1d()
        }
    }

    pub fn toy() -> Self {
        Self {
            loc_channels: vec![8, 16, 32, 64],
            loc_hidden: 64,
            dim: 64,
            heads: 4,
            blocks: 2,
            max_len: 8,
            ..Self::paper_1d()
        }
    }

    /// Smallest configuration that still exercises every stage.
    pub fn tiny() -> Self {
        Self {
            input_h: 8,
            input_w: 16,
            rect_h: 4,
            rect_w: 8,
            tps: true,
            loc_h: 4,
            loc_w: 8,
            loc_channels: vec![2, 2],
            loc_hidden: 4,
            fiducial: 6,
            patch_h: 4,
            patch_w: 2,
            dim: 4,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            skip_attention: true,
            window: None,
            mask_sees_init: true,
            initial_guidance: true,
            max_len: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-1d" => Ok(Self::paper_1d()),
            "paper-2d" => Ok(Self::paper_2d()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected paper-1d, paper-2d, toy or tiny)"
            ))),
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.rect_h / self.patch_h) * (self.rect_w / self.patch_w)
    }

    /// Sequence length including the initial embedding.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_h * self.patch_w
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("rect_h", self.rect_h),
            ("rect_w", self.rect_w),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.rect_h % self.patch_h != 0 || self.rect_w % self.patch_w != 0 {
            return fail(format!(
                "patch {}x{} does not divide the rectified size {}x{}",
                self.patch_h, self.patch_w, self.rect_h, self.rect_w
            ));
        }
        if self.dim % self.heads != 0 {
            return fail(format!("{} heads do not divide dim {}", self.heads, self.dim));
        }
        if self.tps {
            if self.fiducial < 6 || self.fiducial % 2 != 0 {
                return fail(format!("fiducial count {} must be even and at least 6", self.fiducial));
            }
            if self.loc_channels.is_empty() || self.loc_channels.contains(&0) || self.loc_hidden == 0 {
                return fail("localization network needs positive channel widths".into());
            }
            let shrink = 1usize << self.loc_channels.len();
            if self.loc_h % shrink != 0 || self.loc_w % shrink != 0 {
                return fail(format!(
                    "localization input {}x{} is not divisible by 2^{}",
                    self.loc_h,
                    self.loc_w,
                    self.loc_channels.len()
                ));
            }
        }
        Ok(())
    }
}

/// How a parameter tensor is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

const TFE_STD: f64 = 0.02;

/// Every parameter of the model, in registration order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });

    if cfg.tps {
        let mut c_in = 3;
        for (i, &c_out) in cfg.loc_channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            add(format!("loc.conv{i}.w"), vec![c_out, c_in * 9], Init::Normal((2.0 / fan_in).sqrt()));
            add(format!("loc.conv{i}.b"), vec![c_out], Init::Zeros);
            add(format!("loc.norm{i}.g"), vec![c_out], Init::Ones);
            add(format!("loc.norm{i}.b"), vec![c_out], Init::Zeros);
            c_in = c_out;
        }
        let h = cfg.loc_hidden;
        add("loc.fc1.w".into(), vec![c_in, h], Init::Normal((2.0 / c_in as f64).sqrt()));
        add("loc.fc1.b".into(), vec![h], Init::Zeros);
        add("loc.fc2.w".into(), vec![h, 2 * cfg.fiducial], Init::Zeros);
        let bias = rectifier::canonical_points(cfg.fiducial)
            .iter()
            .flat_map(|p| [p[0].atanh(), p[1].atanh()])
            .collect();
        add("loc.fc2.b".into(), vec![2 * cfg.fiducial], Init::Values(bias));
    }

    let d = cfg.dim;
    add("tfe.embed.w".into(), vec![cfg.patch_dim(), d], Init::Normal(TFE_STD));
    add("tfe.init".into(), vec![1, d], Init::Normal(TFE_STD));
    add("tfe.pos".into(), vec![cfg.tokens(), d], Init::Normal(TFE_STD));
    for l in 0..cfg.blocks {
        let p = format!("tfe.block{l}");
        add(format!("{p}.ln1.g"), vec![d], Init::Ones);
        add(format!("{p}.ln1.b"), vec![d], Init::Zeros);
        for proj in ["q", "k", "v", "o"] {
            add(format!("{p}.attn.{proj}.w"), vec![d, d], Init::Normal(TFE_STD));
            add(format!("{p}.attn.{proj}.b"), vec![d], Init::Zeros);
        }
        add(format!("{p}.ln2.g"), vec![d], Init::Ones);
        add(format!("{p}.ln2.b"), vec![d], Init::Zeros);
        add(format!("{p}.mlp.fc1.w"), vec![d, cfg.mlp_dim()], Init::Normal(TFE_STD));
        add(format!("{p}.mlp.fc1.b"), vec![cfg.mlp_dim()], Init::Zeros);
        add(format!("{p}.mlp.fc2.w"), vec![cfg.mlp_dim(), d], Init::Normal(TFE_STD));
        add(format!("{p}.mlp.fc2.b"), vec![d], Init::Zeros);
    }

    // Recurrent side: uniform ±1/sqrt(hidden), the usual GRU default.
    let a = 1.0 / (d as f64).sqrt();
    add("dec.attn.wd".into(), vec![d, d], Init::Uniform(a));
    add("dec.attn.vd".into(), vec![d, d], Init::Uniform(a));
    add("dec.attn.b".into(), vec![d], Init::Zeros);
    add("dec.attn.w".into(), vec![d, 1], Init::Uniform(a));
    add("dec.gru.wi".into(), vec![d + NUM_CLASSES, 3 * d], Init::Uniform(a));
    add("dec.gru.bi".into(), vec![3 * d], Init::Uniform(a));
    add("dec.gru.wh".into(), vec![d, 3 * d], Init::Uniform(a));
    add("dec.gru.bh".into(), vec![3 * d], Init::Uniform(a));
    add("dec.out.w".into(), vec![d, NUM_CLASSES], Init::Uniform(a));
    add("dec.out.b".into(), vec![NUM_CLASSES], Init::Zeros);
    out
}

pub fn build_params<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::INIT);
    let mut store = ParamStore::new();
    for spec in layout(cfg) {
        let n = spec.numel();
        let data: Vec<T> = match &spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, *std).expect("finite std");
                (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
            }
            Init::Uniform(a) => {
                let dist = Uniform::new_inclusive(-a, *a).expect("finite bound");
                (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
            }
            Init::Values(v) => v.iter().map(|&x| T::lit(x)).collect(),
        };
        store.add(spec.name, Tensor::new(&spec.shape, data));
    }
    store
}

pub(crate) struct LocConvIds {
    pub w: ParamId,
    pub b: ParamId,
    pub g: ParamId,
    pub beta: ParamId,
}

pub(crate) struct LocIds {
    pub convs: Vec<LocConvIds>,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

pub(crate) struct DecIds {
    pub wd: ParamId,
    pub vd: ParamId,
    pub b: ParamId,
    pub w: ParamId,
    pub wi: ParamId,
    pub bi: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub(crate) struct Ids {
    pub loc: Option<LocIds>,
    pub embed: ParamId,
    pub init: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub dec: DecIds,
}

impl Ids {
    fn resolve<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let id = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let loc = if cfg.tps {
            Some(LocIds {
                convs: (0..cfg.loc_channels.len())
                    .map(|i| {
                        Ok(LocConvIds {
                            w: id(format!("loc.conv{i}.w"))?,
                            b: id(format!("loc.conv{i}.b"))?,
                            g: id(format!("loc.norm{i}.g"))?,
                            beta: id(format!("loc.norm{i}.b"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
                fc1_w: id("loc.fc1.w".into())?,
                fc1_b: id("loc.fc1.b".into())?,
                fc2_w: id("loc.fc2.w".into())?,
                fc2_b: id("loc.fc2.b".into())?,
            })
        } else {
            None
        };
        let blocks = (0..cfg.blocks)
            .map(|l| {
                let n = |s: &str| id(format!("tfe.block{l}.{s}"));
                Ok(BlockIds {
                    ln1_g: n("ln1.g")?,
                    ln1_b: n("ln1.b")?,
                    q_w: n("attn.q.w")?,
                    q_b: n("attn.q.b")?,
                    k_w: n("attn.k.w")?,
                    k_b: n("attn.k.b")?,
                    v_w: n("attn.v.w")?,
                    v_b: n("attn.v.b")?,
                    o_w: n("attn.o.w")?,
                    o_b: n("attn.o.b")?,
                    ln2_g: n("ln2.g")?,
                    ln2_b: n("ln2.b")?,
                    fc1_w: n("mlp.fc1.w")?,
                    fc1_b: n("mlp.fc1.b")?,
                    fc2_w: n("mlp.fc2.w")?,
                    fc2_b: n("mlp.fc2.b")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            loc,
            embed: id("tfe.embed.w".into())?,
            init: id("tfe.init".into())?,
            pos: id("tfe.pos".into())?,
            blocks,
            dec: DecIds {
                wd: id("dec.attn.wd".into())?,
                vd: id("dec.attn.vd".into())?,
                b: id("dec.attn.b".into())?,
                w: id("dec.attn.w".into())?,
                wi: id("dec.gru.wi".into())?,
                bi: id("dec.gru.bi".into())?,
                wh: id("dec.gru.wh".into())?,
                bh: id("dec.gru.bh".into())?,
                out_w: id("dec.out.w".into())?,
                out_b: id("dec.out.b".into())?,
            },
        })
    }
}

/// Configuration-derived constants shared by every forward pass.
pub(crate) struct Constants<T> {
    /// `[rect_h·rect_w, K]` map from control points to the sampling grid.
    pub tps_basis: Option<Tensor<T>>,
    /// `[rect_h·rect_w, 2]` align-corners resize grid.
    pub resize_grid: Tensor<T>,
    /// `[loc_h·loc_w, 2]` grid resizing the input for the localization net.
    pub loc_grid: Tensor<T>,
    pub patch_index: Arc<[usize]>,
    /// Additive `0 / -inf` window mask.
    pub mask: Option<Tensor<T>>,
}

impl<T: Real> Constants<T> {
    fn new(cfg: &ModelConfig) -> Result<Self> {
        let cast = |v: Vec<f64>, shape: &[usize]| Tensor::new(shape, v.into_iter().map(T::lit).collect());
        let p = cfg.rect_h * cfg.rect_w;
        let tps_basis = if cfg.tps {
            let solver = TpsSolver::new(&rectifier::canonical_points(cfg.fiducial))?;
            Some(cast(solver.basis(cfg.rect_h, cfg.rect_w), &[p, cfg.fiducial]))
        } else {
            None
        };
        let flat = |g: Vec<[f64; 2]>| g.into_iter().flatten().collect::<Vec<f64>>();
        Ok(Self {
            tps_basis,
            resize_grid: cast(flat(rectifier::identity_grid(cfg.rect_h, cfg.rect_w)), &[p, 2]),
            loc_grid: cast(
                flat(rectifier::identity_grid(cfg.loc_h, cfg.loc_w)),
                &[cfg.loc_h * cfg.loc_w, 2],
            ),
            patch_index: tfe::patch_index(cfg.rect_h, cfg.rect_w, cfg.patch_h, cfg.patch_w)?.into(),
            mask: cfg
                .window
                .map(|r| tfe::build_window_mask(cfg.tokens(), r, cfg.mask_sees_init).additive()),
        })
    }
}

/// Parameters plus everything derived from the configuration.
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub(crate) ids: Ids,
    pub(crate) consts: Constants<T>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("valid model")
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config, seed);
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking names and shapes against the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .by_name(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        let ids = Ids::resolve(&config, &params)?;
        let consts = Constants::new(&config)?;
        Ok(Self {
            config,
            params,
            ids,
            consts,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model::from_params(self.config.clone(), self.params.cast()).expect("valid model")
    }

    /// Same parameters under a different configuration; only toggles that
    /// leave the parameter layout unchanged are accepted.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        Model::from_params(config, self.params.clone())
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(ParamSpec::numel).sum()
}
