//! Deterministic synthetic scene-text samples at three annotation levels.

mod dataset;
pub mod font;
mod pgm;
mod raster;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charset::Charset;
use crate::error::{Error, Result};
use font::{glyph, inked, GLYPH_HEIGHT, GLYPH_WIDTH};

pub use dataset::{read_dataset, write_dataset, ANNOTATIONS_FILE, IMAGES_DIR};
pub use pgm::{read_pgm, write_pgm};
pub use raster::{GrayImage, Mask};

const PLACEMENT_TRIES: usize = 50;
const VERTICAL_PROBABILITY: f64 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Supervision level of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SupervisionKind {
    /// Instance masks and transcriptions.
    #[serde(rename = "full")]
    Full,
    /// Instance transcriptions only.
    #[serde(rename = "text")]
    TextOnly,
    /// A single transcription for the whole image.
    #[serde(rename = "weak")]
    Weak,
}

impl SupervisionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::TextOnly => "text",
            Self::Weak => "weak",
        }
    }
}

impl std::str::FromStr for SupervisionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "text" => Ok(Self::TextOnly),
            "weak" => Ok(Self::Weak),
            other => Err(Error::Config(format!("unknown supervision kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabel {
    pub mask: Mask,
    pub transcription: String,
    pub orientation: Orientation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Annotation {
    Full(Vec<InstanceLabel>),
    TextOnly(Vec<String>),
    Weak(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSample {
    pub image: GrayImage,
    pub annotation: Annotation,
    pub seed: u64,
}

impl SceneSample {
    pub fn kind(&self) -> SupervisionKind {
        match self.annotation {
            Annotation::Full(_) => SupervisionKind::Full,
            Annotation::TextOnly(_) => SupervisionKind::TextOnly,
            Annotation::Weak(_) => SupervisionKind::Weak,
        }
    }

    pub fn transcriptions(&self) -> Vec<&str> {
        match &self.annotation {
            Annotation::Full(inst) => inst.iter().map(|i| i.transcription.as_str()).collect(),
            Annotation::TextOnly(t) => t.iter().map(String::as_str).collect(),
            Annotation::Weak(t) => vec![t.as_str()],
        }
    }

    pub fn instances(&self) -> Option<&[InstanceLabel]> {
        match &self.annotation {
            Annotation::Full(inst) => Some(inst),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub max_instances: usize,
    pub charset: Charset,
    /// Amplitude of uniform background noise.
    pub noise_level: f64,
    pub max_word_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            max_instances: 2,
            charset: Charset::desk(),
            noise_level: 0.05,
            max_word_len: 5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

impl Rect {
    fn overlaps(&self, other: &Rect) -> bool {
        self.y0 < other.y1 && other.y0 < self.y1 && self.x0 < other.x1 && other.x0 < self.x1
    }
}

/// Renders a fully annotated sample; identical `(config, seed)` gives identical output.
pub fn generate_sample(config: &GenConfig, seed: u64) -> Result<SceneSample> {
    let (h, w) = (config.height, config.width);
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::ImageSize {
            height: h,
            width: w,
        });
    }
    if config.max_instances == 0 || config.max_word_len == 0 {
        return Err(Error::Config(
            "max_instances and max_word_len must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.noise_level) {
        return Err(Error::Config(format!(
            "noise level {} outside [0, 1]",
            config.noise_level
        )));
    }
    let symbols = config.charset.symbols();
    if let Some(&c) = symbols.iter().find(|&&c| glyph(c).is_none()) {
        return Err(Error::Config(format!("no glyph for symbol {c:?}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = rng.gen_range(0.0..=0.3);
    let target = rng.gen_range(1..=config.max_instances);
    let mut canvas = vec![background; h * w];
    let mut ink = vec![false; h * w];
    let mut reserved: Vec<Rect> = Vec::new();
    let mut instances = Vec::new();

    for _ in 0..target {
        for _ in 0..PLACEMENT_TRIES {
            let orientation = if rng.gen_bool(VERTICAL_PROBABILITY) {
                Orientation::Vertical
            } else {
                Orientation::Horizontal
            };
            let scale = rng.gen_range(1..=2usize);
            let (gw, gh) = (GLYPH_WIDTH * scale, GLYPH_HEIGHT * scale);
            // One pixel of margin on each side keeps the dilated mask inside the image.
            let fit = match orientation {
                Orientation::Horizontal => (w - 2 + scale) / (gw + scale),
                Orientation::Vertical => (h - 2 + scale) / (gh + scale),
            };
            let max_len = fit.min(config.max_word_len);
            if max_len == 0 {
                continue;
            }
            let len = rng.gen_range(1..=max_len);
            let text: String = (0..len)
                .map(|_| symbols[rng.gen_range(0..symbols.len())])
                .collect();
            let (bw, bh) = match orientation {
                Orientation::Horizontal => (len * gw + (len - 1) * scale, gh),
                Orientation::Vertical => (gw, len * gh + (len - 1) * scale),
            };
            let y0 = rng.gen_range(1..=h - bh - 1);
            let x0 = rng.gen_range(1..=w - bw - 1);
            // Dilation reaches one pixel out; one more pixel keeps masks apart.
            let zone = Rect {
                y0: y0.saturating_sub(2),
                x0: x0.saturating_sub(2),
                y1: y0 + bh + 2,
                x1: x0 + bw + 2,
            };
            if reserved.iter().any(|r| r.overlaps(&zone)) {
                continue;
            }
            reserved.push(zone);
            let intensity = rng.gen_range(0.7..=1.0);
            let mut word = Mask::empty(h, w);
            for (k, c) in text.chars().enumerate() {
                let rows = glyph(c).expect("checked above");
                let (oy, ox) = match orientation {
                    Orientation::Horizontal => (y0, x0 + k * (gw + scale)),
                    Orientation::Vertical => (y0 + k * (gh + scale), x0),
                };
                for gy in 0..GLYPH_HEIGHT {
                    for gx in 0..GLYPH_WIDTH {
                        if !inked(rows, gy, gx) {
                            continue;
                        }
                        for sy in 0..scale {
                            for sx in 0..scale {
                                let (py, px) = (oy + gy * scale + sy, ox + gx * scale + sx);
                                canvas[py * w + px] = intensity;
                                ink[py * w + px] = true;
                                word.set(py, px, true);
                            }
                        }
                    }
                }
            }
            instances.push(InstanceLabel {
                mask: word.dilate(1),
                transcription: text,
                orientation,
            });
            break;
        }
    }

    if config.noise_level > 0.0 {
        let a = config.noise_level;
        for (v, &fg) in canvas.iter_mut().zip(&ink) {
            if !fg {
                *v = (*v + rng.gen_range(-a..=a)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(SceneSample {
        image: GrayImage::from_unit(h, w, &canvas),
        annotation: Annotation::Full(instances),
        seed,
    })
}

/// Drops annotation detail from a fully annotated sample.
///
/// `TextOnly` keeps every transcription; `Weak` keeps the transcription of the
/// instance with the largest mask area, breaking ties with `seed`.
pub fn degrade_annotation(
    sample: &SceneSample,
    target: SupervisionKind,
    seed: u64,
) -> Result<SceneSample> {
    let Annotation::Full(instances) = &sample.annotation else {
        return Err(Error::Config(
            "only fully annotated samples can be degraded".into(),
        ));
    };
    let annotation = match target {
        SupervisionKind::Full => Annotation::Full(instances.clone()),
        SupervisionKind::TextOnly => {
            Annotation::TextOnly(instances.iter().map(|i| i.transcription.clone()).collect())
        }
        SupervisionKind::Weak => {
            let best = instances.iter().map(|i| i.mask.area()).max().unwrap_or(0);
            let tied: Vec<&InstanceLabel> =
                instances.iter().filter(|i| i.mask.area() == best).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chosen = tied
                .choose(&mut rng)
                .ok_or_else(|| Error::Config("sample has no instances".into()))?;
            Annotation::Weak(chosen.transcription.clone())
        }
    };
    Ok(SceneSample {
        image: sample.image.clone(),
        annotation,
        seed: sample.seed,
    })
}
