//! Text-query decoder with masked cross-attention, and the pixel embedding.

use diffcore::{Bound, Graph, ParamId, ParamStore, Real, Var};
use rand::Rng;

use super::encoder::TokenSequence;
use super::heads::Heads;
use super::nn::{normal_like, AttentionBlock, FeedForwardBlock, LayerNorm, Linear};
use super::ModelConfig;
use crate::error::{Error, Result};

/// Where the cross-attention masks of layers after the first come from.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum MaskPolicy {
    /// Auxiliary mask prediction from the previous layer's queries.
    #[default]
    Predicted,
    /// Every layer attends to every token.
    Unmasked,
    /// A fixed `[N, h/4, w/4]` foreground raster used for every masked layer.
    Fixed(Vec<bool>),
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    cross: AttentionBlock,
    selfattn: AttentionBlock,
    ffn: FeedForwardBlock,
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub queries: ParamId,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    pub pixel: Linear,
}

impl QueryDecoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        let queries = store.add(
            "decoder.queries",
            normal_like(rng, &[cfg.num_queries, d], 1.0)?,
        )?;
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                Ok(DecoderLayer {
                    cross: AttentionBlock::new(store, &format!("{name}.cross"), d, cfg.heads, rng)?,
                    selfattn: AttentionBlock::new(
                        store,
                        &format!("{name}.self"),
                        d,
                        cfg.heads,
                        rng,
                    )?,
                    ffn: FeedForwardBlock::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            layers,
            norm: LayerNorm::new(store, "decoder.norm", d)?,
            pixel: Linear::new(store, "decoder.pixel", d, d, rng)?,
        })
    }

    /// Projects P2 `[1, h, w, d]` to the pixel embedding `[h, w, d]`.
    pub fn pixel_embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, p2: Var) -> Result<Var> {
        let s = g.shape(p2).to_vec();
        let y = self.pixel.forward(g, p, p2)?;
        Ok(g.reshape(y, &s[s.len() - 3..])?)
    }

    /// Runs the decoder and returns the text embeddings `[N, d]`.
    ///
    /// `pixel` is the pixel embedding; `heads` supplies the segmentation branch
    /// used for auxiliary masks.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: &TokenSequence,
        pixel: Var,
        heads: &Heads,
        policy: &MaskPolicy,
    ) -> Result<Var> {
        let ps = g.shape(pixel).to_vec();
        let (h4, w4) = (ps[0], ps[1]);
        let mut x = p[self.queries];
        let n = g.shape(x)[0];
        for (l, layer) in self.layers.iter().enumerate() {
            let blocked = if l == 0 {
                None
            } else {
                match policy {
                    MaskPolicy::Unmasked => None,
                    MaskPolicy::Fixed(fg) => {
                        Some(build_cross_attention_mask(fg, n, h4, w4, tokens)?)
                    }
                    MaskPolicy::Predicted => {
                        let e = self.norm.forward(g, p, x)?;
                        let s = semantic_features(g, e, pixel)?;
                        let logits = heads.segment(g, p, s)?;
                        let fg: Vec<bool> = g
                            .value(logits)
                            .data()
                            .iter()
                            .map(|&v| v >= T::zero())
                            .collect();
                        Some(build_cross_attention_mask(&fg, n, h4, w4, tokens)?)
                    }
                }
            };
            x = layer
                .cross
                .forward(g, p, x, Some(tokens.tokens), blocked.as_deref())?;
            x = layer.selfattn.forward(g, p, x, None, None)?;
            x = layer.ffn.forward(g, p, x)?;
        }
        self.norm.forward(g, p, x)
    }
}

/// Cross-attention mask `[N, L]` (true = blocked) from a foreground raster
/// `[N, h4, w4]` at 1/4 scale.
///
/// A token is open to a query when any 1/4-scale pixel under it is
/// foreground for that query. Queries with no foreground attend everywhere.
pub fn build_cross_attention_mask(
    foreground: &[bool],
    n: usize,
    h4: usize,
    w4: usize,
    tokens: &TokenSequence,
) -> Result<Vec<bool>> {
    if foreground.len() != n * h4 * w4 {
        return Err(Error::Config(format!(
            "foreground raster has {} entries, expected {}",
            foreground.len(),
            n * h4 * w4
        )));
    }
    let total = tokens.len();
    let mut blocked = vec![false; n * total];
    for q in 0..n {
        let fg = &foreground[q * h4 * w4..(q + 1) * h4 * w4];
        if !fg.iter().any(|&b| b) {
            continue;
        }
        let row = &mut blocked[q * total..(q + 1) * total];
        for (level, &(lh, lw)) in tokens.level_sizes.iter().enumerate() {
            let fy = h4 / lh;
            let fx = w4 / lw;
            for ty in 0..lh {
                for tx in 0..lw {
                    let open = (ty * fy..(ty + 1) * fy)
                        .any(|y| (tx * fx..(tx + 1) * fx).any(|x| fg[y * w4 + x]));
                    row[tokens.level_offsets[level] + ty * lw + tx] = !open;
                }
            }
        }
    }
    Ok(blocked)
}

/// `S[i, y, x, c] = text[i, c] · pixel[y, x, c]`, giving `[N, h, w, d]`.
pub fn semantic_features<T: Real>(g: &mut Graph<T>, text: Var, pixel: Var) -> Result<Var> {
    let ts = g.shape(text).to_vec();
    let ps = g.shape(pixel).to_vec();
    if ts.len() != 2 || ps.len() != 3 || ts[1] != ps[2] {
        return Err(Error::Config(format!(
            "text embeddings {ts:?} and pixel embedding {ps:?} do not share a channel width"
        )));
    }
    let t = g.reshape(text, &[ts[0], 1, 1, ts[1]])?;
    let px = g.reshape(pixel, &[1, ps[0], ps[1], ps[2]])?;
    Ok(g.mul(t, px)?)
}
