//! Dataset container: `manifest.json` describing every utterance, frames as
//! little-endian `f32` in `frames.f32`, labels as little-endian `i32` in
//! `labels.i32`. Offsets are counted in values, not bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{decode_f32, decode_i32, encode_f32, encode_i32};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Utterance;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.f32";
pub const LABELS_FILE: &str = "labels.i32";
const FORMAT: &str = "dln-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceEntry {
    pub id: String,
    pub speaker: String,
    /// `[T, D]`.
    pub shape: [usize; 2],
    pub frame_offset: usize,
    pub label_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub utterances: Vec<UtteranceEntry>,
}

pub fn save_dataset(dataset: &[Utterance], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (mut frame_offset, mut label_offset) = (0, 0);
    let mut entries = Vec::with_capacity(dataset.len());
    for u in dataset {
        u.validate()?;
        entries.push(UtteranceEntry {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            shape: [u.len(), u.dim()],
            frame_offset,
            label_offset,
        });
        frame_offset += u.frames.len();
        label_offset += u.len();
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: 1,
        utterances: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(
        dir.join(FRAMES_FILE),
        encode_f32(dataset.iter().flat_map(|u| u.frames.data().iter().copied())),
    )?;
    let labels = dataset
        .iter()
        .flat_map(|u| u.labels.iter().map(|&l| i32::try_from(l)))
        .collect::<std::result::Result<Vec<i32>, _>>()
        .map_err(|_| Error::InvalidArgument("label does not fit in i32".into()))?;
    fs::write(dir.join(LABELS_FILE), encode_i32(labels))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptContainer(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::CorruptContainer(format!("unknown format {:?}", manifest.format)));
    }
    let frames = fs::read(dir.join(FRAMES_FILE))?;
    let labels = fs::read(dir.join(LABELS_FILE))?;
    manifest
        .utterances
        .iter()
        .map(|e| {
            let [t, d] = e.shape;
            if t == 0 || d == 0 {
                return Err(Error::CorruptContainer(format!("{}: empty shape {:?}", e.id, e.shape)));
            }
            let data = decode_f32(&frames, e.frame_offset, t * d, &e.id)?;
            let labs = decode_i32(&labels, e.label_offset, t, &e.id)?
                .into_iter()
                .map(|l| usize::try_from(l).map_err(|_| Error::CorruptContainer(format!("{}: negative label", e.id))))
                .collect::<Result<Vec<usize>>>()?;
            Utterance::new(e.id.clone(), e.speaker.clone(), Tensor::matrix(t, d, data)?, labs)
                .map_err(|err| Error::CorruptContainer(format!("{}: {err}", e.id)))
        })
        .collect()
}
