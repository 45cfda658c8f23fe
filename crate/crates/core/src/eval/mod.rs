//! Sample- and pixel-level AUC, heatmap normalization, the gradient baseline
//! and rendering.

mod auc;
mod heatmap;

pub use auc::{pixel_auc, roc_auc, PixelAucMode};
pub use heatmap::{
    balanced_reference, colormap, gradient_heatmap, normalize_heatmaps, percentile, render, NORMALIZATION_GUARD,
};

use std::fmt::Display;
use std::fs;
use std::path::Path;

use crate::data::{normalize, ChannelStats, Dataset, Sample};
use crate::error::{config_err, FcddError, Result};
use crate::loss::{anomaly_scores, heatmap_a};
use crate::model::FcnModel;
use crate::numerics::{Element, Mode, Tensor};
use crate::upsample::UpsamplePlan;

/// Ordered `key=value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    entries: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| FcddError::io(path, e))
    }
}

/// Per-sample scores as CSV `id,label,score`.
pub fn write_scores_csv(path: &Path, samples: &[Sample], scores: &[f64]) -> Result<()> {
    let mut text = String::from("id,label,score\n");
    for (s, score) in samples.iter().zip(scores) {
        text.push_str(&format!("{},{},{score}\n", s.id, u8::from(s.label)));
    }
    fs::write(path, text).map_err(|e| FcddError::io(path, e))
}

/// Stacks (and optionally normalizes) sample images into a model-ready batch.
pub fn prepare_batch<T: Element>(samples: &[Sample], stats: Option<&ChannelStats>) -> Result<Tensor<T>> {
    let parts = samples
        .iter()
        .map(|s| match stats {
            Some(st) => normalize(&s.image, st),
            None => Ok(s.image.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts)?.cast())
}

/// Low-resolution heatmaps `A` (`[n,1,u,v]`) in eval mode.
pub fn infer<T: Element>(
    model: &mut FcnModel<T>,
    samples: &[Sample],
    stats: Option<&ChannelStats>,
    batch_size: usize,
) -> Result<Tensor<T>> {
    if samples.is_empty() {
        return Err(config_err!("nothing to evaluate"));
    }
    let mut parts = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = prepare_batch(chunk, stats)?;
        let phi = model.forward(&x, Mode::Eval)?;
        let a = heatmap_a(&phi)?;
        for i in 0..chunk.len() {
            parts.push(a.select(i));
        }
    }
    Tensor::concat(&parts)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub stats: Option<ChannelStats>,
    pub sigma: f64,
    pub batch_size: usize,
    pub pixel_mode: PixelAucMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            stats: None,
            sigma: 1.2,
            batch_size: 32,
            pixel_mode: PixelAucMode::Pooled,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub sample_auc: f64,
    /// Present when the test set has ground-truth maps.
    pub pixel_auc: Option<f64>,
    /// `‖A‖₁` per sample.
    pub scores: Vec<f64>,
    /// Full-resolution heatmaps `A′`, `[n,1,h,w]`.
    pub heatmaps: Tensor<f32>,
}

impl Evaluation {
    pub fn report(&self) -> MetricsReport {
        let mut r = MetricsReport::new();
        r.push("samples", self.scores.len());
        r.push("sample_auc", format!("{:.6}", self.sample_auc));
        if let Some(p) = self.pixel_auc {
            r.push("pixel_auc", format!("{p:.6}"));
        }
        r
    }
}

/// Scores every test sample, upsamples its heatmap and computes AUCs. Pixel
/// AUC uses only samples carrying a ground-truth map.
pub fn evaluate<T: Element>(model: &mut FcnModel<T>, test: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let a = infer(model, &test.samples, opts.stats.as_ref(), opts.batch_size)?;
    let scores: Vec<f64> = anomaly_scores(&a).into_iter().map(|v| v.as_f64()).collect();
    let sample_auc = roc_auc(&scores, &test.labels())?;
    let [_, _, u, v] = a.dims4()?;
    let [_, h, w] = test.image_shape()?.expect("nonempty test set");
    let plan = UpsamplePlan::new(&model.receptive_field(), opts.sigma, (u, v), (h, w))?;
    let heatmaps: Tensor<f32> = plan.apply(&a)?.cast();
    let pixel_auc = if test.has_masks() {
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for (i, s) in test.samples.iter().enumerate() {
            if let Some(m) = &s.mask {
                maps.push(heatmaps.select(i).data().iter().map(|&x| f64::from(x)).collect());
                masks.push(m.data().iter().map(|&x| x == 1.0).collect());
            }
        }
        Some(pixel_auc(&maps, &masks, opts.pixel_mode)?)
    } else {
        None
    };
    Ok(Evaluation {
        sample_auc,
        pixel_auc,
        scores,
        heatmaps,
    })
}
