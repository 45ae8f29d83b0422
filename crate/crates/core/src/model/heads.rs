//! Classification, segmentation and recognition branches over the shared
//! semantic features, and instance assembly.

use diffcore::{Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

use super::nn::{
    normal_like, sine_table, AttentionBlock, Conv, FeedForwardBlock, LayerNorm, Linear,
};
use super::ModelConfig;
use crate::charset::Charset;
use crate::error::{Error, Result};
use crate::synth::Mask;

/// Index of the text class in the classifier output.
pub const TEXT_CLASS: usize = 0;
pub const BACKGROUND_CLASS: usize = 1;
pub const NO_TEXT_CLASS: usize = 2;

/// Stabiliser in the AGG weighted mean.
pub const AGG_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
struct RecognizerLayer {
    selfattn: AttentionBlock,
    cross: AttentionBlock,
    ffn: FeedForwardBlock,
}

#[derive(Clone, Debug)]
pub struct Heads {
    cls: [Linear; 3],
    seg: [Conv; 2],
    seg_out: Linear,
    pub agg: Linear,
    pub direction_embed: ParamId,
    pub char_queries: ParamId,
    rec_layers: Vec<RecognizerLayer>,
    rec_norm: LayerNorm,
    rec_out: Linear,
}

impl Heads {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        let ch = cfg.cls_hidden;
        let sh = cfg.seg_hidden;
        let classes = Charset::new(&cfg.charset)?.num_classes();
        let rec_layers = (0..cfg.recognizer_layers)
            .map(|i| {
                let name = format!("recognizer.{i}");
                Ok(RecognizerLayer {
                    selfattn: AttentionBlock::new(
                        store,
                        &format!("{name}.self"),
                        d,
                        cfg.heads,
                        rng,
                    )?,
                    cross: AttentionBlock::new(store, &format!("{name}.cross"), d, cfg.heads, rng)?,
                    ffn: FeedForwardBlock::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cls: [
                Linear::new(store, "cls.fc1", d, ch, rng)?,
                Linear::new(store, "cls.fc2", ch, ch, rng)?,
                Linear::new(store, "cls.fc3", ch, 3, rng)?,
            ],
            seg: [
                Conv::new(store, "seg.conv1", d, sh, 3, 1, rng)?,
                Conv::new(store, "seg.conv2", sh, sh, 3, 1, rng)?,
            ],
            seg_out: Linear::new(store, "seg.out", sh, 1, rng)?,
            agg: Linear::new(store, "agg.attention", d, d, rng)?,
            direction_embed: store.add("agg.direction_embed", normal_like(rng, &[2, d], 0.02)?)?,
            char_queries: store.add(
                "recognizer.char_queries",
                normal_like(rng, &[cfg.char_queries, d], 1.0)?,
            )?,
            rec_layers,
            rec_norm: LayerNorm::new(store, "recognizer.norm", d)?,
            rec_out: Linear::new(store, "recognizer.out", d, classes, rng)?,
        })
    }

    /// Class logits `[N, 3]` from the spatial mean of `S` `[N, h, w, d]`.
    pub fn classify_logits<T: Real>(&self, g: &mut Graph<T>, p: &Bound, s: Var) -> Result<Var> {
        let mut x = g.mean(s, &[1, 2], false)?;
        for (i, fc) in self.cls.iter().enumerate() {
            x = fc.forward(g, p, x)?;
            if i < 2 {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Class probabilities `[N, 3]` ordered text, background, no-text.
    pub fn classify<T: Real>(&self, g: &mut Graph<T>, p: &Bound, s: Var) -> Result<Var> {
        let logits = self.classify_logits(g, p, s)?;
        Ok(g.softmax(logits, 1)?)
    }

    /// Mask logits `[N, h, w]`.
    pub fn segment<T: Real>(&self, g: &mut Graph<T>, p: &Bound, s: Var) -> Result<Var> {
        let shape = g.shape(s).to_vec();
        let mut x = s;
        for conv in &self.seg {
            x = conv.forward(g, p, x)?;
            x = g.relu(x)?;
        }
        let y = self.seg_out.forward(g, p, x)?;
        Ok(g.reshape(y, &shape[..3])?)
    }

    /// Attention mask `M = sigmoid(W·S + b)`, same shape as `S`.
    pub fn agg_attention<T: Real>(&self, g: &mut Graph<T>, p: &Bound, s: Var) -> Result<Var> {
        let y = self.agg.forward(g, p, s)?;
        Ok(g.sigmoid(y)?)
    }

    /// Recognition logits `[N, K, C]` from sequences `[N, L, d]`.
    pub fn recognize<T: Real>(&self, g: &mut Graph<T>, p: &Bound, seq: Var) -> Result<Var> {
        let n = g.shape(seq)[0];
        let q = p[self.char_queries];
        let qs = g.shape(q).to_vec();
        let mut x = g.broadcast_to(q, &[n, qs[0], qs[1]])?;
        for layer in &self.rec_layers {
            x = layer.selfattn.forward(g, p, x, None, None)?;
            x = layer.cross.forward(g, p, x, Some(seq), None)?;
            x = layer.ffn.forward(g, p, x)?;
        }
        let x = self.rec_norm.forward(g, p, x)?;
        self.rec_out.forward(g, p, x)
    }

    /// AGG and recognition: `S` `[N, h, w, d]` to logits `[N, K, C]`.
    pub fn read<T: Real>(&self, g: &mut Graph<T>, p: &Bound, s: Var) -> Result<Var> {
        let m = self.agg_attention(g, p, s)?;
        let (fh, fv) = agg_directional(g, s, m)?;
        let seq = assemble_sequence(g, fh, fv, p[self.direction_embed])?;
        self.recognize(g, p, seq)
    }
}

/// Attention-weighted means of `S` `[N, h, w, d]` along columns (`F_h`,
/// `[N, w, d]`) and rows (`F_v`, `[N, h, d]`).
pub fn agg_directional<T: Real>(g: &mut Graph<T>, s: Var, m: Var) -> Result<(Var, Var)> {
    if g.shape(s) != g.shape(m) {
        return Err(Error::Config(format!(
            "features {:?} and attention {:?} differ in shape",
            g.shape(s),
            g.shape(m)
        )));
    }
    let weighted = g.mul(s, m)?;
    let mut out = [s; 2];
    for (slot, axis) in [(0, 1), (1, 2)] {
        let num = g.sum(weighted, &[axis], false)?;
        let den = g.sum(m, &[axis], false)?;
        let den = g.add_scalar(den, AGG_EPS)?;
        out[slot] = g.div(num, den)?;
    }
    Ok((out[0], out[1]))
}

/// `concat(F_h + e_h, F_v + e_v)` along the sequence axis plus the direction
/// embedding row (0 for the horizontal block, 1 for the vertical block).
pub fn assemble_sequence<T: Real>(
    g: &mut Graph<T>,
    fh: Var,
    fv: Var,
    direction: Var,
) -> Result<Var> {
    let hs = g.shape(fh).to_vec();
    let vs = g.shape(fv).to_vec();
    let (w, h, d) = (hs[1], vs[1], hs[2]);
    let eh = g.constant(Tensor::from_f64([w, d], &sine_table(w, d))?);
    let ev = g.constant(Tensor::from_f64([h, d], &sine_table(h, d))?);
    assemble_sequence_with(g, fh, fv, eh, ev, direction)
}

/// [`assemble_sequence`] with explicit positional tables.
pub fn assemble_sequence_with<T: Real>(
    g: &mut Graph<T>,
    fh: Var,
    fv: Var,
    eh: Var,
    ev: Var,
    direction: Var,
) -> Result<Var> {
    let (w, h) = (g.shape(fh)[1], g.shape(fv)[1]);
    let a = g.add(fh, eh)?;
    let b = g.add(fv, ev)?;
    let seq = g.concat(&[a, b], 1)?;
    let rows: Vec<usize> = std::iter::repeat_n(0, w)
        .chain(std::iter::repeat_n(1, h))
        .collect();
    let dir = g.embedding(direction, &rows)?;
    Ok(g.add(seq, dir)?)
}

/// One detected text instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub mask: Mask,
    pub transcription: String,
    pub score: f64,
}

/// Turns per-query outputs into disjoint full-resolution instances.
///
/// `class_probs` is `[N, 3]`, `mask_logits` `[N, h, w]`, `rec_logits`
/// `[N, K, C]`; masks are upsampled by `scale`. Instances are ordered by
/// descending score.
pub fn assemble_instances(
    class_probs: &Tensor<f64>,
    mask_logits: &Tensor<f64>,
    rec_logits: &Tensor<f64>,
    charset: &Charset,
    score_thresh: f64,
    scale: usize,
) -> Result<Vec<InstanceResult>> {
    let ms = mask_logits.shape();
    let rs = rec_logits.shape();
    let n = class_probs.shape()[0];
    if ms.len() != 3 || ms[0] != n || rs.len() != 3 || rs[0] != n || rs[2] != charset.num_classes()
    {
        return Err(Error::Config(format!(
            "inconsistent prediction shapes {:?}, {ms:?}, {rs:?}",
            class_probs.shape()
        )));
    }
    let (h, w) = (ms[1], ms[2]);
    let kept: Vec<usize> = (0..n)
        .filter(|&q| class_probs.at(&[q, TEXT_CLASS]) >= score_thresh)
        .collect();
    let mut owner = vec![usize::MAX; h * w];
    for (px, slot) in owner.iter_mut().enumerate() {
        let mut best = 0.5;
        for &q in &kept {
            let prob = diffcore::sigmoid(mask_logits.data()[q * h * w + px]);
            if prob >= best && (*slot == usize::MAX || prob > best) {
                best = prob;
                *slot = q;
            }
        }
    }
    let (k, c) = (rs[1], rs[2]);
    let mut out = Vec::new();
    for &q in &kept {
        let bits = owner.iter().map(|&o| o == q).collect();
        let mask = Mask::from_bits(h, w, bits)
            .upsample_nearest(scale)
            .largest_component();
        if mask.is_empty() {
            continue;
        }
        let indices: Vec<usize> = (0..k)
            .map(|pos| {
                let row = &rec_logits.data()[(q * k + pos) * c..(q * k + pos + 1) * c];
                argmax(row)
            })
            .collect();
        out.push(InstanceResult {
            mask,
            transcription: charset.decode(&indices),
            score: class_probs.at(&[q, TEXT_CLASS]),
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
