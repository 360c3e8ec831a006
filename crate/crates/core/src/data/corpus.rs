use std::path::{Path, PathBuf};

use super::synth::{apply_vocoder_artifact, synth_clean_voice, SyntheticVocoderSpec, VocoderFamily};
use super::{write_wav, Label, Manifest, ManifestRow, Split, REAL_DOMAIN};
use crate::config::{fmt_f64, join_list, parse_list, parse_value, Settings};
use crate::error::{Error, Result};
use crate::seed;

/// Settings for the procedural corpus.
///
/// Each seen family gets `clips_per_domain` fakes split 40/10/50 into
/// train/dev/test; each unseen family contributes only the test half. Every
/// split holds as many real clips as fakes.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub clip_len: usize,
    pub clips_per_domain: usize,
    pub seen_families: Vec<VocoderFamily>,
    pub unseen_families: Vec<VocoderFamily>,
    pub strength: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            sample_rate: 16_000,
            clip_len: 16_384,
            clips_per_domain: 200,
            seen_families: vec![
                VocoderFamily::CombNotch,
                VocoderFamily::AliasResample,
                VocoderFamily::HarmonicHum,
                VocoderFamily::BandPhaseScramble,
            ],
            unseen_families: vec![VocoderFamily::Quantize, VocoderFamily::FrameSmear],
            strength: 0.5,
        }
    }
}

impl Settings for CorpusConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "sample_rate" => self.sample_rate = parse_value(key, value)?,
            "clip_len" => self.clip_len = parse_value(key, value)?,
            "clips_per_domain" => self.clips_per_domain = parse_value(key, value)?,
            "seen_families" => self.seen_families = parse_list(key, value)?,
            "unseen_families" => self.unseen_families = parse_list(key, value)?,
            "strength" => self.strength = parse_value(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("seed".into(), self.seed.to_string()),
            ("sample_rate".into(), self.sample_rate.to_string()),
            ("clip_len".into(), self.clip_len.to_string()),
            ("clips_per_domain".into(), self.clips_per_domain.to_string()),
            ("seen_families".into(), join_list(&self.seen_families)),
            ("unseen_families".into(), join_list(&self.unseen_families)),
            ("strength".into(), fmt_f64(self.strength)),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.seen_families.is_empty() {
            return Err(Error::Validation("at least one seen family is required".into()));
        }
        for (i, f) in self.seen_families.iter().enumerate() {
            if self.seen_families[..i].contains(f) {
                return Err(Error::Validation(format!("`{f}` listed twice in seen_families")));
            }
            if self.unseen_families.contains(f) {
                return Err(Error::Validation(format!("`{f}` is listed as both seen and unseen")));
            }
        }
        for (i, f) in self.unseen_families.iter().enumerate() {
            if self.unseen_families[..i].contains(f) {
                return Err(Error::Validation(format!("`{f}` listed twice in unseen_families")));
            }
        }
        if self.clips_per_domain < 10 {
            return Err(Error::bad_value("clips_per_domain", "must be at least 10"));
        }
        if self.clip_len == 0 || self.sample_rate == 0 {
            return Err(Error::Validation("clip_len and sample_rate must be positive".into()));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::bad_value("strength", "must be in (0, 1]"));
        }
        Ok(())
    }
}

impl CorpusConfig {
    /// Fake clips per seen family in each split.
    pub fn seen_counts(&self) -> [(Split, usize); 3] {
        let test = self.clips_per_domain / 2;
        let dev = self.clips_per_domain / 10;
        [
            (Split::Train, self.clips_per_domain - test - dev),
            (Split::Dev, dev),
            (Split::Test, test),
        ]
    }

    pub fn total_clips(&self) -> usize {
        let fakes =
            self.seen_families.len() * self.clips_per_domain + self.unseen_families.len() * (self.clips_per_domain / 2);
        2 * fakes
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSummary {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

fn clip_path(split: Split, domain: &str, index: usize) -> String {
    format!("{split}/{domain}/{index:04}.wav")
}

/// Writes all clips and `manifest.csv` under `out_dir`. Output is a pure
/// function of the config.
pub fn generate_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<CorpusSummary> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.total_clips());
    let write = |rel: &str, samples: &[f64]| -> Result<()> {
        let path = out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let s32: Vec<f32> = samples.iter().map(|&v| v as f32).collect();
        write_wav(&path, &s32, config.sample_rate)
    };

    for (split, per_seen) in config.seen_counts() {
        let mut fakes: Vec<(VocoderFamily, bool, usize)> =
            config.seen_families.iter().map(|&f| (f, true, per_seen)).collect();
        if split == Split::Test {
            fakes.extend(config.unseen_families.iter().map(|&f| (f, false, per_seen)));
        }
        let flag = |seen: bool| (split == Split::Test).then_some(seen);

        let n_real: usize = fakes.iter().map(|f| f.2).sum();
        for i in 0..n_real {
            let rel = clip_path(split, REAL_DOMAIN, i);
            let s = seed::derive(&[config.seed, seed::hash_str(REAL_DOMAIN), split as u64, i as u64]);
            write(&rel, &synth_clean_voice(s, config.clip_len, config.sample_rate))?;
            rows.push(ManifestRow {
                path: rel,
                label: Label::Real,
                domain: REAL_DOMAIN.into(),
                split,
                seen: flag(true),
            });
        }
        for &(family, seen, count) in &fakes {
            let tag = seed::hash_str(family.name());
            for i in 0..count {
                let rel = clip_path(split, family.name(), i);
                let base = seed::derive(&[config.seed, tag, split as u64, i as u64]);
                let clean = synth_clean_voice(base, config.clip_len, config.sample_rate);
                let spec = SyntheticVocoderSpec {
                    family,
                    strength: config.strength,
                    seed: seed::derive(&[base, 1]),
                };
                write(&rel, &apply_vocoder_artifact(&clean, &spec, config.sample_rate)?)?;
                rows.push(ManifestRow {
                    path: rel,
                    label: Label::Fake,
                    domain: family.name().into(),
                    split,
                    seen: flag(seen),
                });
            }
        }
    }

    let manifest = Manifest::new(rows, out_dir.to_path_buf())?;
    let manifest_path = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest.to_csv()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(CorpusSummary {
        manifest_path,
        manifest,
    })
}
