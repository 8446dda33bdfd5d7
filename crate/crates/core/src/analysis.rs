//! Closed-form MACs and parameter accounting, and attention rollout.
//!
//! One multiply-accumulate counts as one MAC. Biases, normalization,
//! softmax and pointwise nonlinearities are not counted. Bilinear sampling
//! counts four MACs per channel per output pixel.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::charset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::{self, ModelConfig};
use crate::tensor::{Real, Tensor};
use crate::tfe::AttentionRecord;

/// Default decode steps, one per token of the 1-D split geometry.
pub const DEFAULT_DECODE_STEPS: usize = 26;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TraMacs {
    /// Resize of the input to the localization resolution.
    pub resize: u64,
    pub conv: u64,
    pub fc: u64,
    /// Control points to sampling grid.
    pub grid: u64,
    /// Bilinear sampling of the rectified image.
    pub sample: u64,
    pub total: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TfeMacs {
    pub embedding: u64,
    /// Q, K, V and output projections.
    pub projection: u64,
    /// `QKᵀ` over all heads.
    pub scores: u64,
    /// Attention-weighted sum of values.
    pub weighted_sum: u64,
    /// `projection + scores + weighted_sum`.
    pub attention: u64,
    pub mlp: u64,
    pub total: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AdMacs {
    /// Query and key projections, scores and glimpse, over all steps.
    pub attention: u64,
    pub gru: u64,
    pub output: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacsReport {
    pub tokens: usize,
    pub patches: usize,
    pub decode_steps: usize,
    pub tra: TraMacs,
    pub tfe: TfeMacs,
    pub ad: AdMacs,
    pub total: u64,
    pub params: usize,
}

pub fn count_macs(cfg: &ModelConfig, decode_steps: usize) -> Result<MacsReport> {
    cfg.validate()?;
    let u = |v: usize| v as u64;
    let p = u(cfg.rect_h * cfg.rect_w);

    let mut tra = TraMacs {
        sample: 4 * 3 * p,
        ..Default::default()
    };
    if cfg.tps {
        tra.resize = 4 * 3 * u(cfg.loc_h * cfg.loc_w);
        let (mut h, mut w, mut c_in) = (cfg.loc_h, cfg.loc_w, 3);
        for &c_out in &cfg.loc_channels {
            tra.conv += u(h * w * c_out * c_in * 9);
            h /= 2;
            w /= 2;
            c_in = c_out;
        }
        tra.fc = u(c_in * cfg.loc_hidden + cfg.loc_hidden * 2 * cfg.fiducial);
        tra.grid = p * u(cfg.fiducial) * 2;
    }
    tra.total = tra.resize + tra.conv + tra.fc + tra.grid + tra.sample;

    let (n, t, d, l) = (u(cfg.num_patches()), u(cfg.tokens()), u(cfg.dim), u(cfg.blocks));
    let mut tfe = TfeMacs {
        embedding: n * u(cfg.patch_dim()) * d,
        projection: l * 4 * t * d * d,
        scores: l * t * t * d,
        weighted_sum: l * t * t * d,
        mlp: l * 2 * t * d * u(cfg.mlp_dim()),
        ..Default::default()
    };
    tfe.attention = tfe.projection + tfe.scores + tfe.weighted_sum;
    tfe.total = tfe.embedding + tfe.attention + tfe.mlp;

    // Attention width equals the model width.
    let a = d;
    let s = u(decode_steps);
    let classes = u(NUM_CLASSES);
    let mut ad = AdMacs {
        attention: s * (d * a + n * d * a + n * a + n * d),
        gru: s * (3 * (d + classes) * d + 3 * d * d),
        output: s * d * classes,
        ..Default::default()
    };
    ad.total = ad.attention + ad.gru + ad.output;

    Ok(MacsReport {
        tokens: cfg.tokens(),
        patches: cfg.num_patches(),
        decode_steps,
        total: tra.total + tfe.total + ad.total,
        tra,
        tfe,
        ad,
        params: count_params(cfg),
    })
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    model::count_params(cfg)
}

/// Human-readable table.
pub fn format_report(r: &MacsReport) -> String {
    let g = |v: u64| format!("{:>10.4} G", v as f64 / 1e9);
    let mut s = String::new();
    let _ = writeln!(s, "tokens          {}", r.tokens);
    let _ = writeln!(s, "decode steps    {}", r.decode_steps);
    let _ = writeln!(s, "TRA             {}", g(r.tra.total));
    let _ = writeln!(s, "  conv          {}", g(r.tra.conv));
    let _ = writeln!(s, "  sample        {}", g(r.tra.sample + r.tra.resize + r.tra.grid));
    let _ = writeln!(s, "TFE             {}", g(r.tfe.total));
    let _ = writeln!(s, "  embedding     {}", g(r.tfe.embedding));
    let _ = writeln!(s, "  attention     {}", g(r.tfe.attention));
    let _ = writeln!(s, "  mlp           {}", g(r.tfe.mlp));
    let _ = writeln!(s, "AD              {}", g(r.ad.total));
    let _ = writeln!(s, "  attention     {}", g(r.ad.attention));
    let _ = writeln!(s, "  gru           {}", g(r.ad.gru));
    let _ = writeln!(s, "  output        {}", g(r.ad.output));
    let _ = writeln!(s, "total           {}", g(r.total));
    let _ = writeln!(s, "params          {:>10.3} M", r.params as f64 / 1e6);
    s
}

/// Per-token attribution over the `N` input patches.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    /// `rows[k][j]`: weight of patch `j` for token `k` (token 0 is the
    /// initial embedding).
    pub rows: Vec<Vec<f64>>,
}

impl RolloutMap {
    pub fn tokens(&self) -> usize {
        self.rows.len()
    }

    pub fn patches(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    crate::tensor::gemm(n, n, n, a, false, b, false, &mut out, false);
    out
}

/// Head-averaged, identity-augmented, row-normalized attention chained
/// over the blocks, then restricted to the patch columns and renormalized.
/// A token with no patch mass gets a uniform row.
pub fn attention_rollout<T: Real>(record: &AttentionRecord<T>) -> Result<RolloutMap> {
    let first = record
        .blocks
        .first()
        .and_then(|b| b.first())
        .ok_or_else(|| Error::Data("attention record has no blocks".into()))?;
    let t = first.weights.rows();
    if t < 2 {
        return Err(Error::Data("rollout needs at least one patch token".into()));
    }
    let mut rollout = Tensor::<f64>::eye(t).into_data();
    for block in &record.blocks {
        let mut a = vec![0.0; t * t];
        for head in block {
            for (acc, w) in a.iter_mut().zip(head.weights.data()) {
                *acc += w.f64();
            }
        }
        let inv = 1.0 / block.len() as f64;
        for (i, row) in a.chunks_mut(t).enumerate() {
            row.iter_mut().for_each(|v| *v *= inv);
            row[i] += 1.0;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        rollout = matmul(&a, &rollout, t);
    }
    let rows = rollout
        .chunks(t)
        .map(|row| {
            let patch = &row[1..];
            let s: f64 = patch.iter().sum();
            if s > 0.0 {
                patch.iter().map(|v| v / s).collect()
            } else {
                vec![1.0 / (t - 1) as f64; t - 1]
            }
        })
        .collect();
    Ok(RolloutMap { rows })
}

/// Mass center `(x, y)` of a rollout row in `[0, 1]` image coordinates.
pub fn mass_center(row: &[f64], grid_h: usize, grid_w: usize) -> (f64, f64) {
    let (mut x, mut y) = (0.0, 0.0);
    for (j, &w) in row.iter().enumerate() {
        x += w * ((j % grid_w) as f64 + 0.5) / grid_w as f64;
        y += w * ((j / grid_w) as f64 + 0.5) / grid_h as f64;
    }
    (x, y)
}

pub const ROLLOUT_CSV: &str = "rollout.csv";

/// Writes one heat-map PPM per token over `rectified` plus a CSV of the
/// raw weights. Returns the written paths, CSV last.
pub fn export_maps(
    rollout: &RolloutMap,
    rectified: &RgbImage,
    patch_h: usize,
    patch_w: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let (h, w) = (rectified.height(), rectified.width());
    if patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0 {
        return Err(Error::Shape(format!("patch {patch_h}x{patch_w} does not tile {h}x{w}")));
    }
    let grid_w = w / patch_w;
    if rollout.patches() != (h / patch_h) * grid_w {
        return Err(Error::Shape(format!(
            "{} rollout columns for a {}x{} patch grid",
            rollout.patches(),
            h / patch_h,
            grid_w
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(rollout.tokens() + 1);
    for (k, row) in rollout.rows.iter().enumerate() {
        let peak = row.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let heat = row[(y / patch_h) * grid_w + x / patch_w] / peak;
                let [r, g, b] = rectified.pixel(x, y);
                let gray = (r as f64 + g as f64 + b as f64) / 3.0;
                let mix = |c: f64| (0.4 * gray + 0.6 * 255.0 * c).round().clamp(0.0, 255.0) as u8;
                img.set_pixel(x, y, [mix(heat), mix(heat * 0.3), mix(1.0 - heat)]);
            }
        }
        let path = out_dir.join(format!("token_{k:03}.ppm"));
        img.save_ppm(&path)?;
        paths.push(path);
    }
    let mut csv = String::from("token");
    for j in 0..rollout.patches() {
        let _ = write!(csv, ",p{j}");
    }
    csv.push('\n');
    for (k, row) in rollout.rows.iter().enumerate() {
        let _ = write!(csv, "{k}");
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let path = out_dir.join(ROLLOUT_CSV);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    paths.push(path);
    Ok(paths)
}

pub fn read_rollout_csv(path: impl AsRef<Path>) -> Result<RolloutMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = text
        .lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .skip(1)
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Manifest {
                        line: i + 2,
                        msg: format!("bad weight {v:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutMap { rows })
}
