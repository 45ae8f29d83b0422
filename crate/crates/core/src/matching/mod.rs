//! Set matching between queries and ground truth, and the training loss.

mod hungarian;
mod loss;

use diffcore::sigmoid;

use crate::charset::Charset;
use crate::error::{Error, Result};
use crate::model::{PredictionValues, TEXT_CLASS};
use crate::synth::{Annotation, Mask, SceneSample, SupervisionKind};

pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use loss::{dice_loss, focal_loss, total_loss, LossReport, LossWeights, QueryOutputs};

/// Probability clamp used by the focal loss and the mask cost.
pub const PROB_EPS: f64 = 1e-7;

/// One real ground-truth instance; unmatched queries implicitly target "no text".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetInstance {
    /// Mask at the prediction scale, present for full supervision only.
    pub mask: Option<Mask>,
    /// Character classes padded with `[PAD]` to the query count `K`.
    pub text: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSet {
    pub kind: SupervisionKind,
    pub instances: Vec<TargetInstance>,
}

impl TargetSet {
    /// Targets for `sample` with masks reduced by `scale` (see
    /// [`Mask::downsample_best_iou`]) and text padded to `slots` positions.
    pub fn from_sample(
        sample: &SceneSample,
        charset: &Charset,
        slots: usize,
        scale: usize,
    ) -> Result<Self> {
        let text = |t: &str| charset.encode_padded(t, slots);
        let instances = match &sample.annotation {
            Annotation::Full(labels) => labels
                .iter()
                .map(|l| {
                    Ok(TargetInstance {
                        mask: Some(l.mask.downsample_best_iou(scale)),
                        text: text(&l.transcription)?,
                    })
                })
                .collect::<Result<_>>()?,
            Annotation::TextOnly(texts) => texts
                .iter()
                .map(|t| {
                    Ok(TargetInstance {
                        mask: None,
                        text: text(t)?,
                    })
                })
                .collect::<Result<_>>()?,
            Annotation::Weak(t) => vec![TargetInstance {
                mask: None,
                text: text(t)?,
            }],
        };
        Ok(Self {
            kind: sample.kind(),
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Mean over positions of the predicted probability of the target class.
pub fn recognition_cost(target: &[usize], logits: &[f64], classes: usize) -> f64 {
    let k = target.len();
    debug_assert_eq!(logits.len(), k * classes);
    let mut total = 0.0;
    for (pos, &t) in target.iter().enumerate() {
        let row = &logits[pos * classes..(pos + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += (row[t] - max).exp() / z;
    }
    total / k as f64
}

/// Dice loss plus mean binary cross-entropy between `sigmoid(logits)` and `target`.
pub fn mask_cost(target: &Mask, logits: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), target.bits().len());
    let probs: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
    let mut bce = 0.0;
    for (&p, &g) in probs.iter().zip(target.bits()) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        bce -= if g { p.ln() } else { (1.0 - p).ln() };
    }
    dice_value(&probs, target.bits()) + bce / probs.len() as f64
}

pub(crate) fn dice_value(probs: &[f64], target: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&p, &g) in probs.iter().zip(target) {
        let g = if g { 1.0 } else { 0.0 };
        inter += p * g;
        sp += p;
        sg += g;
    }
    1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// Probability of the text class.
pub fn classification_cost(probs: &[f64]) -> f64 {
    probs[TEXT_CLASS]
}

/// `cost[q, j]` between target `q` and query `j`.
pub fn cost_matrix(targets: &TargetSet, preds: &PredictionValues) -> Result<CostMatrix> {
    let n = preds.class_probs.shape()[0];
    let rs = preds.rec_logits.shape();
    let (k, c) = (rs[1], rs[2]);
    let ms = preds.mask_logits.shape();
    let hw = ms[1] * ms[2];
    let mut data = Vec::with_capacity(targets.len() * n);
    for t in &targets.instances {
        if t.text.len() != k {
            return Err(Error::Config(format!(
                "target text has {} slots, model reads {k}",
                t.text.len()
            )));
        }
        for j in 0..n {
            let rec = recognition_cost(
                &t.text,
                &preds.rec_logits.data()[j * k * c..(j + 1) * k * c],
                c,
            );
            let cls = classification_cost(&preds.class_probs.data()[j * 3..(j + 1) * 3]);
            let mut cost = -rec - cls;
            if targets.kind == SupervisionKind::Full {
                let mask = t
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::Config("full target without a mask".into()))?;
                if mask.bits().len() != hw {
                    return Err(Error::Config(format!(
                        "target mask is {}x{}, predictions are {}x{}",
                        mask.height(),
                        mask.width(),
                        ms[1],
                        ms[2]
                    )));
                }
                cost += mask_cost(mask, &preds.mask_logits.data()[j * hw..(j + 1) * hw]);
            }
            data.push(cost);
        }
    }
    CostMatrix::new(targets.len(), n, data)
}

/// Convenience: match `targets` against prediction values.
pub fn match_targets(targets: &TargetSet, preds: &PredictionValues) -> Result<Assignment> {
    if targets.kind == SupervisionKind::Weak && targets.len() != 1 {
        return Err(Error::Config(
            "weak targets hold exactly one transcription".into(),
        ));
    }
    hungarian(&cost_matrix(targets, preds)?)
}
