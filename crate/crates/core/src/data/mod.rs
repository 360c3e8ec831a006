//! Corpus handling: manifests, WAV I/O, waveform preprocessing, the procedural
//! synthetic-vocoder corpus and real/fake pair sampling.

mod corpus;
mod manifest;
mod sampler;
mod synth;
mod wav;

use std::fmt;
use std::str::FromStr;

pub use corpus::{generate_corpus, CorpusConfig, CorpusSummary};
pub use manifest::{load_manifest, parse_manifest, Manifest, ManifestRow};
pub use sampler::{sample_pairs, PairBatch, PairSampler};
pub use synth::{apply_vocoder_artifact, quantize_uniform, synth_clean_voice, SyntheticVocoderSpec, VocoderFamily};
pub use wav::{decode_wav, read_wav, write_wav};

use crate::error::{Error, Result};

pub const REAL_DOMAIN: &str = "real";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index for the authenticity head; index 1 is "fake".
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(format!("label must be `real` or `fake`, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(format!("split must be train, dev or test, got `{s}`")),
        }
    }
}

/// A fixed-length waveform with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub label: Label,
    pub domain: String,
    pub clip_id: String,
}

impl AudioClip {
    /// Reads and preprocesses the clip behind a manifest row. Samples outside
    /// [-1, 1] are clamped.
    pub fn load(manifest: &Manifest, row: &ManifestRow, target_len: usize) -> Result<Self> {
        let path = manifest.resolve(row);
        let (raw, sample_rate) = read_wav(&path)?;
        if raw.is_empty() {
            return Err(Error::Wav {
                path,
                msg: "no samples".into(),
            });
        }
        let mut samples = preprocess_waveform(&raw, target_len)?;
        for s in &mut samples {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Self {
            samples,
            sample_rate,
            label: row.label,
            domain: row.domain.clone(),
            clip_id: row.path.clone(),
        })
    }
}

/// Cuts or tile-repeats `raw` to exactly `target_len` samples.
pub fn preprocess_waveform<T: Copy>(raw: &[T], target_len: usize) -> Result<Vec<T>> {
    if raw.is_empty() {
        return Err(Error::Validation("cannot preprocess an empty waveform".into()));
    }
    Ok(raw.iter().copied().cycle().take(target_len).collect())
}

/// Loads every clip of `split`, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split, target_len: usize) -> Result<Vec<AudioClip>> {
    manifest
        .rows
        .iter()
        .filter(|r| r.split == split)
        .map(|r| AudioClip::load(manifest, r, target_len))
        .collect()
}
