//! The spotter network: backbone and encoder, text-query decoder, and the
//! three heads over shared per-query features.

pub mod decoder;
pub mod encoder;
pub mod heads;
pub mod nn;

use diffcore::{Bound, Graph, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charset::Charset;
use crate::error::{Error, Result};
use crate::synth::GrayImage;

pub use decoder::{build_cross_attention_mask, semantic_features, MaskPolicy, QueryDecoder};
pub use encoder::{pos2d, Backbone, Encoder, FeaturePyramid, TokenSequence};
pub use heads::{
    agg_directional, assemble_instances, assemble_sequence, assemble_sequence_with, Heads,
    InstanceResult, AGG_EPS, BACKGROUND_CLASS, NO_TEXT_CLASS, TEXT_CLASS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channel width `d` shared by the pyramid, tokens and queries.
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Stem and stage widths, five entries.
    pub backbone_channels: Vec<usize>,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub recognizer_layers: usize,
    /// Text queries `N`.
    pub num_queries: usize,
    /// Character queries `K`, the longest readable word.
    pub char_queries: usize,
    pub cls_hidden: usize,
    pub seg_hidden: usize,
    pub charset: String,
    pub score_thresh: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            backbone_channels: vec![16, 32, 48, 64, 64],
            encoder_layers: 2,
            decoder_layers: 2,
            recognizer_layers: 2,
            num_queries: 8,
            char_queries: 8,
            cls_hidden: 64,
            seg_hidden: 32,
            charset: crate::charset::DESK_SYMBOLS.to_string(),
            score_thresh: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        encoder::check_size(self.height, self.width)?;
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("decoder_layers", self.decoder_layers),
            ("num_queries", self.num_queries),
            ("char_queries", self.char_queries),
            ("cls_hidden", self.cls_hidden),
            ("seg_hidden", self.seg_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(4) || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a multiple of 4 and of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.backbone_channels.len() != 5 || self.backbone_channels.contains(&0) {
            return Err(Error::Config(
                "backbone_channels needs five positive widths".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::Config("score_thresh must lie in [0, 1]".into()));
        }
        Charset::new(&self.charset)?;
        Ok(())
    }
}

/// Parameter layout of the network. Holds parameter ids only, so one
/// layout serves stores of any precision created from the same config.
#[derive(Clone, Debug)]
pub struct TextFormer {
    pub config: ModelConfig,
    pub charset: Charset,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub decoder: QueryDecoder,
    pub heads: Heads,
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub tokens: TokenSequence,
    pub pixel: Var,
    /// `[N, d]`.
    pub text_embeddings: Var,
    /// `[N, h/4, w/4, d]`.
    pub semantic: Var,
    /// `[N, 3]`.
    pub class_logits: Var,
    pub class_probs: Var,
    /// `[N, h/4, w/4]`.
    pub mask_logits: Var,
    /// `[N, K, C]`.
    pub rec_logits: Var,
}

/// Plain values of [`Predictions`] heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionValues {
    pub class_probs: Tensor<f64>,
    pub mask_logits: Tensor<f64>,
    pub rec_logits: Tensor<f64>,
}

impl TextFormer {
    /// Builds the layout and a freshly initialised parameter store.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Self {
            charset: Charset::new(&config.charset)?,
            backbone: Backbone::new(&mut store, &config, &mut rng)?,
            encoder: Encoder::new(&mut store, &config, &mut rng)?,
            decoder: QueryDecoder::new(&mut store, &config, &mut rng)?,
            heads: Heads::new(&mut store, &config, &mut rng)?,
            config,
        };
        Ok((model, store))
    }

    pub fn image_input<T: Real>(&self, g: &mut Graph<T>, image: &GrayImage) -> Result<Var> {
        if (image.height(), image.width()) != (self.config.height, self.config.width) {
            return Err(Error::ImageSize {
                height: image.height(),
                width: image.width(),
            });
        }
        let t = Tensor::from_f64([1, image.height(), image.width(), 1], &image.unit_values())?;
        Ok(g.constant(t))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &GrayImage,
    ) -> Result<Predictions> {
        self.forward_with(g, p, image, &MaskPolicy::Predicted)
    }

    pub fn forward_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &GrayImage,
        policy: &MaskPolicy,
    ) -> Result<Predictions> {
        let x = self.image_input(g, image)?;
        let pyramid = self.backbone.extract_pyramid(g, p, x)?;
        let tokens = self.encoder.encode(g, p, &pyramid)?;
        let pixel = self.decoder.pixel_embed(g, p, pyramid.p2)?;
        let text = self
            .decoder
            .decode(g, p, &tokens, pixel, &self.heads, policy)?;
        let semantic = semantic_features(g, text, pixel)?;
        let class_logits = self.heads.classify_logits(g, p, semantic)?;
        let class_probs = g.softmax(class_logits, 1)?;
        let mask_logits = self.heads.segment(g, p, semantic)?;
        let rec_logits = self.heads.read(g, p, semantic)?;
        Ok(Predictions {
            tokens,
            pixel,
            text_embeddings: text,
            semantic,
            class_logits,
            class_probs,
            mask_logits,
            rec_logits,
        })
    }

    /// Forward pass without gradients, returning the head outputs.
    pub fn predict<T: Real>(
        &self,
        params: &ParamStore<T>,
        image: &GrayImage,
    ) -> Result<PredictionValues> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, image)?;
        Ok(PredictionValues {
            class_probs: g.value(out.class_probs).cast(),
            mask_logits: g.value(out.mask_logits).cast(),
            rec_logits: g.value(out.rec_logits).cast(),
        })
    }

    /// Detected instances at input resolution.
    pub fn infer<T: Real>(
        &self,
        params: &ParamStore<T>,
        image: &GrayImage,
    ) -> Result<Vec<InstanceResult>> {
        let v = self.predict(params, image)?;
        assemble_instances(
            &v.class_probs,
            &v.mask_logits,
            &v.rec_logits,
            &self.charset,
            self.config.score_thresh,
            4,
        )
    }
}
