//! Training, evaluation, inference output and checkpoints.

mod checkpoint;
mod metrics;
mod optim;
mod train;

use diffcore::{ParamStore, Real};

use crate::error::{Error, Result};
use crate::model::{InstanceResult, TextFormer};
use crate::synth::{GrayImage, SceneSample};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use metrics::{greedy_match, levenshtein, one_minus_ned, score, Metrics, IOU_THRESHOLD};
pub use optim::{clip_grad_norm, poly_lr, AdamW};
pub use train::{Pools, StepLog, TrainConfig, Trainer};

/// Runs the model over fully annotated samples and scores the results.
pub fn evaluate<T: Real>(
    model: &TextFormer,
    params: &ParamStore<T>,
    samples: &[SceneSample],
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        if s.instances().is_none() {
            return Err(Error::Config(
                "evaluation needs fully annotated samples".into(),
            ));
        }
        results.push(model.infer(params, &s.image)?);
    }
    Ok(score(results.iter().zip(samples).map(|(r, s)| {
        (r.as_slice(), s.instances().expect("checked above"))
    })))
}

/// The image at half brightness with each instance painted at its own gray
/// level.
pub fn render_overlay(image: &GrayImage, instances: &[InstanceResult]) -> GrayImage {
    let mut pixels: Vec<u8> = image.pixels().iter().map(|&p| p / 2).collect();
    let n = instances.len().max(1);
    for (i, inst) in instances.iter().enumerate() {
        let level = 255 - (i * 100 / n) as u8;
        for (px, &on) in pixels.iter_mut().zip(inst.mask.bits()) {
            if on {
                *px = level;
            }
        }
    }
    GrayImage::new(image.height(), image.width(), pixels)
}

/// One `score<TAB>transcription` line per instance.
pub fn format_instances(instances: &[InstanceResult]) -> String {
    instances
        .iter()
        .map(|i| format!("{:.4}\t{}\n", i.score, i.transcription))
        .collect()
}
