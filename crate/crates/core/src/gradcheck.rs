//! Finite-difference verification of the full pipeline gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::charset::Charset;
use crate::error::Result;
use crate::model::{streams, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{loss_and_grads, loss_only};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Groups whose analytic and numeric norms are both below this count as
/// exactly zero. Central differences at `STEP` on a loss of order 10 carry
/// roundoff of about `1e-10` per entry, so a structurally zero gradient
/// (the attention key bias, which shifts every score in a row equally)
/// reads as noise of that size.
pub const ZERO_NORM: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub variant: String,
    pub loss: f64,
    pub groups: Vec<GroupError>,
    pub worst: f64,
    pub worst_group: String,
}

impl GradCheckReport {
    /// Names of groups with a nonzero analytic gradient.
    pub fn nonzero_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.analytic_norm > ZERO_NORM)
            .map(|g| g.name.as_str())
            .collect()
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both norms vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < ZERO_NORM {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A model and one labelled input drawn from `seed`. Every parameter is
/// perturbed away from its initialization: at init the encoder features are
/// nearly identical across tokens, so the decoder attention gradients are
/// too small for central differences to resolve.
pub fn probe(cfg: &ModelConfig, seed: u64) -> Result<(Model<f64>, Tensor<f64>, Vec<usize>)> {
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::DATA);
    let jitter = Normal::new(0.0, 0.3).expect("finite std");
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let image = Tensor::from_fn(&[3, cfg.input_h, cfg.input_w], |_| rng.random::<f64>());
    let charset = Charset::new();
    let len = rng.random_range(1..cfg.max_len);
    let text: String = (0..len)
        .map(|_| charset.symbols()[rng.random_range(0..charset.symbols().len())])
        .collect();
    Ok((model, image, charset.encode_unpadded(&text)))
}

/// Compares analytic and central-difference gradients for every parameter.
pub fn check_model(model: &Model<f64>, image: &Tensor<f64>, targets: &[usize], variant: &str) -> GradCheckReport {
    let (loss, analytic) = loss_and_grads(model, image, targets);
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(analytic.len());
    let ids: Vec<_> = model.params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let len = model.params.get(id).len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = orig + STEP;
            let up = loss_only(&probe, image, targets);
            probe.params.get_mut(id).data_mut()[i] = orig - STEP;
            let down = loss_only(&probe, image, targets);
            probe.params.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        groups.push(GroupError {
            name: model.params.name(id).to_owned(),
            analytic_norm: norm(&analytic[k]),
            numeric_norm: norm(&numeric),
            rel_error: relative_error(&analytic[k], &numeric),
        });
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("model has parameters");
    GradCheckReport {
        variant: variant.to_owned(),
        loss,
        worst: worst.rel_error,
        worst_group: worst.name.clone(),
        groups,
    }
}

/// The tiny configuration with residual attention and the window mask each
/// on and off.
pub fn variants() -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    for skip in [true, false] {
        for window in [None, Some(1)] {
            let cfg = ModelConfig {
                skip_attention: skip,
                window,
                ..ModelConfig::tiny()
            };
            let name = format!(
                "skip={} mask={}",
                if skip { "on" } else { "off" },
                window.map_or("off".to_owned(), |r| format!("r{r}"))
            );
            out.push((name, cfg));
        }
    }
    out
}

pub fn grad_check(seed: u64) -> Result<Vec<GradCheckReport>> {
    variants()
        .into_iter()
        .map(|(name, cfg)| {
            let (model, image, targets) = probe(&cfg, seed)?;
            Ok(check_model(&model, &image, &targets, &name))
        })
        .collect()
}
