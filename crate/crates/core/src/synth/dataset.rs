//! On-disk dataset layout: `images/<id>.pgm` plus one JSON record per line in
//! `annotations.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    read_pgm, write_pgm, Annotation, InstanceLabel, Mask, Orientation, SceneSample, SupervisionKind,
};
use crate::error::{io_err, Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    kind: SupervisionKind,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(default)]
    seed: u64,
    instances: Vec<RecordInstance>,
}

#[derive(Serialize, Deserialize)]
struct RecordInstance {
    transcription: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    orientation: Option<Orientation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rle: Option<Vec<usize>>,
}

pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut out = BufWriter::new(file);
    for (i, sample) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        write_pgm(&sample.image, &images.join(format!("{id}.pgm")))?;
        let instances = match &sample.annotation {
            Annotation::Full(inst) => inst
                .iter()
                .map(|l| RecordInstance {
                    transcription: l.transcription.clone(),
                    orientation: Some(l.orientation),
                    rle: Some(l.mask.to_rle()),
                })
                .collect(),
            Annotation::TextOnly(texts) => texts.iter().map(|t| text_only(t)).collect(),
            Annotation::Weak(t) => vec![text_only(t)],
        };
        let record = Record {
            id,
            kind: sample.kind(),
            height: sample.image.height(),
            width: sample.image.width(),
            seed: sample.seed,
            instances,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Config(format!("serialising record {i}: {e}")))?;
        writeln!(out, "{line}").map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))
}

fn text_only(t: &str) -> RecordInstance {
    RecordInstance {
        transcription: t.to_string(),
        orientation: None,
        rle: None,
    }
}

/// Reads a dataset written by [`write_dataset`]. A directory without an
/// annotation file is an empty dataset.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let path = dir.join(ANNOTATIONS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Malformed {
            file: path.clone(),
            line: n + 1,
            reason,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        samples.push(parse_record(dir, record).map_err(malformed)?);
    }
    Ok(samples)
}

fn parse_record(dir: &Path, r: Record) -> std::result::Result<SceneSample, String> {
    if r.id.is_empty() || r.id.contains(['/', '\\']) || r.id.starts_with('.') {
        return Err(format!("invalid id {:?}", r.id));
    }
    let image_path = dir.join(IMAGES_DIR).join(format!("{}.pgm", r.id));
    let image = read_pgm(&image_path).map_err(|e| e.to_string())?;
    if (image.height(), image.width()) != (r.height, r.width) {
        return Err(format!(
            "image is {}x{} but record says {}x{}",
            image.height(),
            image.width(),
            r.height,
            r.width
        ));
    }
    if r.instances.is_empty() {
        return Err("record has no instances".into());
    }
    if r.instances.iter().any(|i| i.transcription.is_empty()) {
        return Err("empty transcription".into());
    }
    let annotation = match r.kind {
        SupervisionKind::Full => {
            let mut labels: Vec<InstanceLabel> = Vec::with_capacity(r.instances.len());
            for (k, inst) in r.instances.into_iter().enumerate() {
                let rle = inst.rle.ok_or_else(|| format!("instance {k} has no rle"))?;
                let orientation = inst
                    .orientation
                    .ok_or_else(|| format!("instance {k} has no orientation"))?;
                let mask = Mask::from_rle(r.height, r.width, &rle)
                    .map_err(|e| format!("instance {k}: {e}"))?;
                if mask.is_empty() {
                    return Err(format!("instance {k} has an empty mask"));
                }
                if labels.iter().any(|l| !l.mask.is_disjoint(&mask)) {
                    return Err(format!("instance {k} overlaps an earlier instance"));
                }
                labels.push(InstanceLabel {
                    mask,
                    transcription: inst.transcription,
                    orientation,
                });
            }
            Annotation::Full(labels)
        }
        SupervisionKind::TextOnly | SupervisionKind::Weak => {
            if r.instances.iter().any(|i| i.rle.is_some()) {
                return Err(format!("{} record carries a mask", r.kind.as_str()));
            }
            let texts: Vec<String> = r.instances.into_iter().map(|i| i.transcription).collect();
            if r.kind == SupervisionKind::Weak {
                let [text]: [String; 1] = texts
                    .try_into()
                    .map_err(|_| "weak record must have exactly one instance".to_string())?;
                Annotation::Weak(text)
            } else {
                Annotation::TextOnly(texts)
            }
        }
    };
    Ok(SceneSample {
        image,
        annotation,
        seed: r.seed,
    })
}
