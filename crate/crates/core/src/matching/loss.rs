//! Classification, mask and recognition losses under a fixed assignment.

use diffcore::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{Assignment, TargetSet, PROB_EPS};
use crate::error::{Error, Result};
use crate::model::{NO_TEXT_CLASS, TEXT_CLASS};
use crate::synth::SupervisionKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_rec: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Skip recognition positions after the first `[PAD]`.
    pub ignore_pad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mask: 5.0,
            lambda_rec: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            ignore_pad: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_mask,
            self.lambda_rec,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.focal_alpha > 1.0 {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Head outputs on the graph: class logits `[N, 3]`, mask logits
/// `[N, h, w]`, recognition logits `[N, K, C]`.
#[derive(Clone, Copy, Debug)]
pub struct QueryOutputs {
    pub class_logits: Var,
    pub mask_logits: Var,
    pub rec_logits: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub cls: f64,
    pub dice: f64,
    pub focal: f64,
    pub rec: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.dice, self.focal, self.rec]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total {:.5} cls {:.5} dice {:.5} focal {:.5} rec {:.5}",
            self.total, self.cls, self.dice, self.focal, self.rec
        )
    }
}

/// Mean over rows of `1 − (2Σpg + 1)/(Σp + Σg + 1)` for `probs` `[G, P]`.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, probs: Var, target: &[bool]) -> Result<Var> {
    let (rows, _) = rows_cols(g, probs, target.len(), "dice")?;
    let gt = g.constant(bool_tensor(g.shape(probs), target)?);
    let inter = g.mul(probs, gt)?;
    let inter = g.sum(inter, &[1], false)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, 1.0)?;
    let sp = g.sum(probs, &[1], false)?;
    let per_row = target.len() / rows;
    let sg: Vec<f64> = target
        .chunks(per_row)
        .map(|c| c.iter().filter(|&&b| b).count() as f64 + 1.0)
        .collect();
    let sg = g.constant(Tensor::from_f64([rows], &sg)?);
    let den = g.add(sp, sg)?;
    let ratio = g.div(num, den)?;
    let m = g.mean_all(ratio)?;
    let m = g.neg(m)?;
    Ok(g.add_scalar(m, 1.0)?)
}

/// Mean over all pixels of `−α_t (1 − p_t)^γ log p_t`.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    target: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    rows_cols(g, probs, target.len(), "focal")?;
    let shape = g.shape(probs).to_vec();
    let pick = |on: f64, off: f64| -> Vec<f64> {
        target.iter().map(|&b| if b { on } else { off }).collect()
    };
    let offset = g.constant(Tensor::from_f64(shape.clone(), &pick(0.0, 1.0))?);
    let sign = g.constant(Tensor::from_f64(shape.clone(), &pick(1.0, -1.0))?);
    let alpha_t = g.constant(Tensor::from_f64(shape, &pick(alpha, 1.0 - alpha))?);
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let pt = g.mul(p, sign)?;
    let pt = g.add(pt, offset)?;
    let rest = g.neg(pt)?;
    let rest = g.add_scalar(rest, 1.0)?;
    let modulator = g.powf(rest, gamma)?;
    let logpt = g.log(pt)?;
    let term = g.mul(modulator, logpt)?;
    let term = g.mul(term, alpha_t)?;
    let m = g.mean_all(term)?;
    Ok(g.neg(m)?)
}

fn rows_cols<T: Real>(g: &Graph<T>, probs: Var, n: usize, op: &str) -> Result<(usize, usize)> {
    let s = g.shape(probs);
    if s.len() != 2 || s[0] * s[1] != n {
        return Err(Error::Config(format!(
            "{op} loss: probabilities {s:?} vs {n} targets"
        )));
    }
    Ok((s[0], s[1]))
}

fn bool_tensor<T: Real>(shape: &[usize], bits: &[bool]) -> Result<Tensor<T>> {
    Ok(Tensor::from_fn(shape.to_vec(), |i| {
        if bits[i] {
            T::one()
        } else {
            T::zero()
        }
    })?)
}

/// The training loss for one image under assignment `sigma`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    out: &QueryOutputs,
    targets: &TargetSet,
    sigma: &Assignment,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let n = g.shape(out.class_logits)[0];
    let rs = g.shape(out.rec_logits).to_vec();
    let (k, c) = (rs[1], rs[2]);
    let matched = &sigma.sigma;
    if matched.len() != targets.len() {
        return Err(Error::Config(format!(
            "assignment covers {} of {} targets",
            matched.len(),
            targets.len()
        )));
    }
    let owner = sigma.inverse(n.max(matched.iter().map(|&q| q + 1).max().unwrap_or(0)));
    if owner.len() > n || owner.iter().flatten().count() != matched.len() {
        return Err(Error::Config(format!(
            "assignment {matched:?} is not injective into {n} queries"
        )));
    }

    // Classification: cross-entropy against a per-query target weight matrix.
    let mut weights = vec![0.0; n * 3];
    match targets.kind {
        SupervisionKind::Full | SupervisionKind::TextOnly => {
            for (q, t) in owner.iter().enumerate() {
                let class = if t.is_some() {
                    TEXT_CLASS
                } else {
                    NO_TEXT_CLASS
                };
                weights[q * 3 + class] = 1.0 / n as f64;
            }
        }
        SupervisionKind::Weak => {
            for &q in matched {
                weights[q * 3 + TEXT_CLASS] = 1.0 / matched.len() as f64;
            }
        }
    }
    let logp = g.log_softmax(out.class_logits, 1)?;
    let wt = g.constant(Tensor::from_f64([n, 3], &weights)?);
    let cls = g.mul(logp, wt)?;
    let cls = g.sum_all(cls)?;
    let cls = g.neg(cls)?;
    let mut total = cls;
    let mut report = LossReport {
        cls: g.value(cls).data()[0].to_f64_lossy(),
        ..LossReport::default()
    };

    if matched.is_empty() {
        report.total = report.cls;
        return Ok((total, report));
    }

    if targets.kind == SupervisionKind::Full {
        let ms = g.shape(out.mask_logits).to_vec();
        let hw = ms[1] * ms[2];
        let mut bits = Vec::with_capacity(matched.len() * hw);
        for t in &targets.instances {
            let mask = t
                .mask
                .as_ref()
                .ok_or_else(|| Error::Config("full target without a mask".into()))?;
            if mask.bits().len() != hw {
                return Err(Error::Config(
                    "target mask does not match the prediction grid".into(),
                ));
            }
            bits.extend_from_slice(mask.bits());
        }
        let flat = g.reshape(out.mask_logits, &[n, hw])?;
        let rows = g.embedding(flat, matched)?;
        let probs = g.sigmoid(rows)?;
        let dice = dice_loss(g, probs, &bits)?;
        let focal = focal_loss(g, probs, &bits, w.focal_alpha, w.focal_gamma)?;
        report.dice = g.value(dice).data()[0].to_f64_lossy();
        report.focal = g.value(focal).data()[0].to_f64_lossy();
        let mask_term = g.add(focal, dice)?;
        let mask_term = g.scale(mask_term, w.lambda_mask)?;
        total = g.add(total, mask_term)?;
    }

    let pad = c - 1;
    let mut rec_w = vec![0.0; matched.len() * k * c];
    for (i, t) in targets.instances.iter().enumerate() {
        if t.text.len() != k {
            return Err(Error::Config(format!(
                "target text has {} slots, model reads {k}",
                t.text.len()
            )));
        }
        let counted = if w.ignore_pad {
            t.text
                .iter()
                .position(|&s| s == pad)
                .map_or(k, |first| first + 1)
        } else {
            k
        };
        for (pos, &s) in t.text.iter().enumerate().take(counted) {
            rec_w[(i * k + pos) * c + s] = 1.0 / (matched.len() * counted) as f64;
        }
    }
    let flat = g.reshape(out.rec_logits, &[n, k * c])?;
    let rows = g.embedding(flat, matched)?;
    let rows = g.reshape(rows, &[matched.len(), k, c])?;
    let logp = g.log_softmax(rows, 2)?;
    let wt = g.constant(Tensor::from_f64([matched.len(), k, c], &rec_w)?);
    let rec = g.mul(logp, wt)?;
    let rec = g.sum_all(rec)?;
    let rec = g.neg(rec)?;
    report.rec = g.value(rec).data()[0].to_f64_lossy();
    let rec_term = g.scale(rec, w.lambda_rec)?;
    total = g.add(total, rec_term)?;
    report.total = g.value(total).data()[0].to_f64_lossy();
    Ok((total, report))
}
