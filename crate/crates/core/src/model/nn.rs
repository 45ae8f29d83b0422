//! Parameterised building blocks. Each block stores the ids of its parameters
//! in a [`ParamStore`] and runs on a [`Graph`] against a [`Bound`] copy.

use diffcore::{Bound, Graph, ParamId, ParamStore, Real, Tensor, Var, MASK_FILL};
use rand::Rng;

use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn xavier<T: Real, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Result<Tensor<T>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        T::lit(rng.gen_range(-limit..limit))
    })?)
}

pub(crate) fn normal_like<T: Real, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    std: f64,
) -> Result<Tensor<T>> {
    // Sum of uniforms is close enough to Gaussian for initialisation.
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        let s: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum();
        T::lit(s * std * (3.0f64 / 4.0).sqrt())
    })?)
}

/// Affine map over the last axis, weights `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                xavier(rng, &[input, output], input, output)?,
            )?,
            bias: Some(store.add(format!("{name}.bias"), Tensor::zeros([output])?)?),
        })
    }

    pub fn without_bias<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                xavier(rng, &[input, output], input, output)?,
            )?,
            bias: None,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => Ok(g.add(y, p[b])?),
            None => Ok(y),
        }
    }
}

/// Channels-last convolution, weights `[k, k, in, out]`, same padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = xavier(
            rng,
            &[kernel, kernel, input, output],
            kernel * kernel * input,
            kernel * kernel * output,
        )?;
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([output])?)?,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight], self.stride, self.pad)?;
        Ok(g.add(y, p[self.bias])?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])?)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)?)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        Ok(Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            // A key bias shifts every score of a query equally; softmax ignores it.
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
        })
    }

    /// `query` is `[Lq, d]` or `[B, Lq, d]`, `memory` likewise with `Lk` rows.
    ///
    /// `blocked` (true = not attended) has length `Lq·Lk`, shared across the
    /// batch, or `B·Lq·Lk`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        memory: Var,
        blocked: Option<&[bool]>,
    ) -> Result<Var> {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(memory).to_vec();
        let unbatched = qs.len() == 2;
        let (b, lq, d) = if unbatched {
            (1, qs[0], qs[1])
        } else {
            (qs[0], qs[1], qs[2])
        };
        let lk = ks[ks.len() - 2];
        let h = self.heads;
        let dh = d / h;

        let split = |g: &mut Graph<T>, x: Var, len: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, len, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            Ok(g.reshape(x, &[b * h, len, dh])?)
        };
        let q = self.q.forward(g, p, query)?;
        let q = split(g, q, lq)?;
        let k = self.k.forward(g, p, memory)?;
        let k = split(g, k, lk)?;
        let v = self.v.forward(g, p, memory)?;
        let v = split(g, v, lk)?;

        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = blocked {
            let full = expand_mask(m, b, h, lq * lk)?;
            scores = g.masked_fill(scores, &full, MASK_FILL)?;
        }
        let attn = g.softmax(scores, 2)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[b, h, lq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let shape: Vec<usize> = if unbatched {
            vec![lq, d]
        } else {
            vec![b, lq, d]
        };
        let ctx = g.reshape(ctx, &shape)?;
        self.out.forward(g, p, ctx)
    }
}

fn expand_mask(m: &[bool], batch: usize, heads: usize, per: usize) -> Result<Vec<bool>> {
    let per_batch = if m.len() == per {
        false
    } else if m.len() == batch * per {
        true
    } else {
        return Err(Error::Config(format!(
            "attention mask has {} entries, expected {per} or {}",
            m.len(),
            batch * per
        )));
    };
    let mut out = Vec::with_capacity(batch * heads * per);
    for bi in 0..batch {
        let src = if per_batch {
            &m[bi * per..(bi + 1) * per]
        } else {
            m
        };
        for _ in 0..heads {
            out.extend_from_slice(src);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.up.forward(g, p, x)?;
        let y = g.relu(y)?;
        self.down.forward(g, p, y)
    }
}

/// Pre-norm residual attention: `x + attn(LN(x), memory)`.
/// With `memory = None` the block is self-attention.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub attn: Attention,
}

impl AttentionBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        memory: Option<Var>,
        blocked: Option<&[bool]>,
    ) -> Result<Var> {
        let n = self.norm.forward(g, p, x)?;
        let y = self.attn.forward(g, p, n, memory.unwrap_or(n), blocked)?;
        Ok(g.add(x, y)?)
    }
}

/// Pre-norm residual feed-forward: `x + ffn(LN(x))`.
#[derive(Clone, Debug)]
pub struct FeedForwardBlock {
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

impl FeedForwardBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, p, x)?;
        let y = self.ffn.forward(g, p, n)?;
        Ok(g.add(x, y)?)
    }
}

/// Interleaved sine/cosine table over integer positions, `[len, dim]`.
pub fn sine_table(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 / freq;
            out[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}
