//! Convolutional backbone with top-down fusion and the token encoder.

use std::f64::consts::TAU;

use diffcore::{Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

use super::nn::{normal_like, AttentionBlock, Conv, FeedForwardBlock, LayerNorm, Linear};
use super::ModelConfig;
use crate::error::{Error, Result};

/// P2–P5 feature maps, each `[1, h, w, d]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
}

/// Flattened encoder tokens `[L, d]` in the order P5, P4, P3.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub level_offsets: [usize; 3],
    /// `(h, w)` of P5, P4, P3.
    pub level_sizes: [(usize, usize); 3],
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        let (h, w) = self.level_sizes[2];
        self.level_offsets[2] + h * w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: [Conv; 2],
    stages: [Conv; 3],
    laterals: [Linear; 4],
}

impl Backbone {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = &cfg.backbone_channels;
        let conv = |store: &mut ParamStore<T>, name: &str, i, o, rng: &mut R| {
            Conv::new(store, name, i, o, 3, 2, rng)
        };
        let stem = [
            conv(store, "backbone.stem1", 1, c[0], rng)?,
            conv(store, "backbone.stem2", c[0], c[1], rng)?,
        ];
        let stages = [
            conv(store, "backbone.stage3", c[1], c[2], rng)?,
            conv(store, "backbone.stage4", c[2], c[3], rng)?,
            conv(store, "backbone.stage5", c[3], c[4], rng)?,
        ];
        let d = cfg.dim;
        let laterals = [
            Linear::new(store, "fpn.lateral2", c[1], d, rng)?,
            Linear::new(store, "fpn.lateral3", c[2], d, rng)?,
            Linear::new(store, "fpn.lateral4", c[3], d, rng)?,
            Linear::new(store, "fpn.lateral5", c[4], d, rng)?,
        ];
        Ok(Self {
            stem,
            stages,
            laterals,
        })
    }

    /// `image` is `[1, H, W, 1]` with H and W multiples of 32.
    pub fn extract_pyramid<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
    ) -> Result<FeaturePyramid> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[0] != 1 || s[3] != 1 {
            return Err(Error::Config(format!(
                "expected a [1, H, W, 1] image, got {s:?}"
            )));
        }
        check_size(s[1], s[2])?;
        let mut x = image;
        for conv in &self.stem {
            x = conv.forward(g, p, x)?;
            x = g.relu(x)?;
        }
        let mut c = vec![x];
        for conv in &self.stages {
            x = conv.forward(g, p, x)?;
            x = g.relu(x)?;
            c.push(x);
        }
        let mut top = self.laterals[3].forward(g, p, c[3])?;
        let mut levels = vec![top];
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(g, p, c[i])?;
            let up = g.upsample_nearest(top, 2)?;
            top = g.add(lat, up)?;
            levels.push(top);
        }
        Ok(FeaturePyramid {
            p5: levels[0],
            p4: levels[1],
            p3: levels[2],
            p2: levels[3],
        })
    }
}

pub(crate) fn check_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::ImageSize { height, width });
    }
    Ok(())
}

/// 2D sine positional embedding `[h, w, d]`: the first half of the channels
/// encodes the row, the second half the column, each as interleaved sin/cos.
pub fn pos2d(h: usize, w: usize, d: usize) -> Result<Tensor<f64>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional width {d} is not a multiple of 4"
        )));
    }
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * d;
            for (offset, coord, extent) in [(0, y, h), (half, x, w)] {
                let pos = (coord as f64 + 0.5) / extent as f64 * TAU;
                for i in 0..half {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                    let a = pos / freq;
                    out[base + offset + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
                }
            }
        }
    }
    Ok(Tensor::new([h, w, d], out)?)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttentionBlock,
    ffn: FeedForwardBlock,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    level_embed: ParamId,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        let level_embed = store.add("encoder.level_embed", normal_like(rng, &[3, d], 0.02)?)?;
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                Ok(EncoderLayer {
                    attn: AttentionBlock::new(
                        store,
                        &format!("encoder.{i}.self"),
                        d,
                        cfg.heads,
                        rng,
                    )?,
                    ffn: FeedForwardBlock::new(
                        store,
                        &format!("encoder.{i}.ffn"),
                        d,
                        cfg.ffn_dim,
                        rng,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            level_embed,
            layers,
            norm: LayerNorm::new(store, "encoder.norm", d)?,
        })
    }

    /// Flattens P5, P4, P3, adds positions and level embeddings, and refines
    /// the tokens.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
    ) -> Result<TokenSequence> {
        let mut parts = Vec::with_capacity(3);
        let mut offsets = [0; 3];
        let mut sizes = [(0, 0); 3];
        let mut offset = 0;
        for (level, map) in [pyramid.p5, pyramid.p4, pyramid.p3].into_iter().enumerate() {
            let s = g.shape(map).to_vec();
            let (h, w, d) = (s[1], s[2], s[3]);
            let flat = g.reshape(map, &[h * w, d])?;
            let pos = g.constant(pos2d(h, w, d)?.cast::<T>().reshape([h * w, d])?);
            let lvl = g.embedding(p[self.level_embed], &[level])?;
            let x = g.add(flat, pos)?;
            parts.push(g.add(x, lvl)?);
            offsets[level] = offset;
            sizes[level] = (h, w);
            offset += h * w;
        }
        if offset > 4096 {
            return Err(Error::Config(format!(
                "{offset} encoder tokens exceed the bound of 4096"
            )));
        }
        let x = g.concat(&parts, 0)?;
        let tokens = self.refine(g, p, x)?;
        Ok(TokenSequence {
            tokens,
            level_offsets: offsets,
            level_sizes: sizes,
        })
    }

    /// The transformer stack on already position-tagged tokens `[L, d]`.
    pub fn refine<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.attn.forward(g, p, x, None, None)?;
            x = layer.ffn.forward(g, p, x)?;
        }
        self.norm.forward(g, p, x)
    }
}
