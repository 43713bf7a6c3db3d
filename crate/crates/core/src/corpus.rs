//! On-disk corpus layout:
//!
//! ```text
//! <root>/index.json
//! <root>/<sequence>/frames/00000.ppm   P6, 8-bit RGB
//! <root>/<sequence>/masks/00000.pgm    P5, values 0 or 255
//! ```
//!
//! `index.json` lists every sequence with its split (`train`, `test`, or
//! `static` for independent saliency images) and its frame count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm::{self, GrayImage};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";
pub const INDEX_FORMAT: &str = "covseg-corpus/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Static,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub name: String,
    pub split: Split,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusIndex {
    pub format: String,
    /// `[width, height]` of every frame.
    pub frame_size: [usize; 2],
    pub sequences: Vec<SequenceEntry>,
}

impl CorpusIndex {
    pub fn new(frame_size: [usize; 2]) -> Self {
        Self {
            format: INDEX_FORMAT.to_string(),
            frame_size,
            sequences: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SequenceEntry> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    pub fn find(&self, name: &str) -> Option<&SequenceEntry> {
        self.sequences.iter().find(|s| s.name == name)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CorpusIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if index.format != INDEX_FORMAT {
            return Err(Error::data(format!(
                "{}: unsupported corpus format {:?}",
                path.display(),
                index.format
            )));
        }
        Ok(index)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn frame_path(root: &Path, sequence: &str, index: usize) -> PathBuf {
    root.join(sequence).join("frames").join(format!("{index:05}.ppm"))
}

pub fn mask_path(root: &Path, sequence: &str, index: usize) -> PathBuf {
    root.join(sequence).join("masks").join(format!("{index:05}.pgm"))
}

pub fn create_sequence_dirs(root: &Path, sequence: &str) -> Result<()> {
    for sub in ["frames", "masks"] {
        let dir = root.join(sequence).join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(())
}

pub fn create_mask_dir(root: &Path, sequence: &str) -> Result<()> {
    let dir = root.join(sequence).join("masks");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))
}

pub fn write_mask(root: &Path, sequence: &str, index: usize, mask: &Tensor) -> Result<()> {
    netpbm::write_pgm(&mask_path(root, sequence, index), &GrayImage::from_mask(mask)?)
}

pub fn read_mask(root: &Path, sequence: &str, index: usize) -> Result<Tensor> {
    netpbm::read_pgm(&mask_path(root, sequence, index))?.to_mask()
}

pub fn read_frame(root: &Path, sequence: &str, index: usize) -> Result<Tensor> {
    Ok(netpbm::read_ppm(&frame_path(root, sequence, index))?.to_tensor())
}

/// Frames (`[H, W, 3]` in `[0, 1]`) and masks (`[H, W]` of 0/1) of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load(root: &Path, entry: &SequenceEntry, frame_size: [usize; 2]) -> Result<Self> {
        let [w, h] = frame_size;
        let mut frames = Vec::with_capacity(entry.length);
        let mut masks = Vec::with_capacity(entry.length);
        for i in 0..entry.length {
            let frame = read_frame(root, &entry.name, i)?;
            let mask = read_mask(root, &entry.name, i)?;
            if frame.shape() != [h, w, 3] || mask.shape() != [h, w] {
                return Err(Error::data(format!(
                    "{}: frame {i} is not {w}x{h}",
                    entry.name
                )));
            }
            frames.push(frame);
            masks.push(mask);
        }
        Ok(Self {
            name: entry.name.clone(),
            frames,
            masks,
        })
    }
}

/// Every sequence of a corpus, grouped by split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub index: CorpusIndex,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
    pub statics: Vec<Sequence>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let index = CorpusIndex::load(root)?;
        let load = |split| {
            index
                .split(split)
                .map(|e| Sequence::load(root, e, index.frame_size))
                .collect::<Result<Vec<_>>>()
        };
        let train = load(Split::Train)?;
        let test = load(Split::Test)?;
        let statics = load(Split::Static)?;
        Ok(Self {
            index,
            train,
            test,
            statics,
        })
    }

    /// Static images, flattened across every static sequence.
    pub fn static_samples(&self) -> Vec<(&Tensor, &Tensor)> {
        self.statics
            .iter()
            .flat_map(|s| s.frames.iter().zip(&s.masks))
            .collect()
    }
}
