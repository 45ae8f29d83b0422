//! Detection and recognition metrics over full-resolution instance masks.

use crate::model::InstanceResult;
use crate::synth::InstanceLabel;

/// IoU a prediction needs to count as a detection.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub det_precision: f64,
    pub det_recall: f64,
    pub det_f: f64,
    /// Mean over ground-truth instances; unmatched instances score 0.
    pub one_minus_ned: f64,
    pub e2e_f: f64,
    /// Fraction of ground-truth instances detected and read exactly.
    pub exact_rate: f64,
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn one_minus_ned(pred: &str, gt: &str) -> f64 {
    let longest = pred.chars().count().max(gt.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, gt) as f64 / longest as f64
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Greedy IoU matching per image; returns `(gt, pred)` pairs.
pub fn greedy_match(preds: &[InstanceResult], gts: &[InstanceLabel]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            let iou = gt.mask.iou(&p.mask);
            if iou >= IOU_THRESHOLD {
                pairs.push((iou, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut out = Vec::new();
    for (_, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            out.push((gi, pi));
        }
    }
    out
}

/// Metrics over images given as (predictions, ground truth) pairs.
pub fn score<'a, I>(images: I) -> Metrics
where
    I: IntoIterator<Item = (&'a [InstanceResult], &'a [InstanceLabel])>,
{
    let (mut n_pred, mut n_gt, mut tp, mut tp_e2e) = (0, 0, 0, 0);
    let mut ned_sum = 0.0;
    for (preds, gts) in images {
        n_pred += preds.len();
        n_gt += gts.len();
        let pairs = greedy_match(preds, gts);
        tp += pairs.len();
        for &(gi, pi) in &pairs {
            let (p, g) = (&preds[pi].transcription, &gts[gi].transcription);
            ned_sum += one_minus_ned(p, g);
            if p == g {
                tp_e2e += 1;
            }
        }
    }
    let det_precision = ratio(tp, n_pred);
    let det_recall = ratio(tp, n_gt);
    let e2e_p = ratio(tp_e2e, n_pred);
    let e2e_r = ratio(tp_e2e, n_gt);
    Metrics {
        det_precision,
        det_recall,
        det_f: f_measure(det_precision, det_recall),
        one_minus_ned: if n_gt == 0 {
            0.0
        } else {
            ned_sum / n_gt as f64
        },
        e2e_f: f_measure(e2e_p, e2e_r),
        exact_rate: e2e_r,
    }
}
