use rand::seq::SliceRandom;
use rand::Rng;

use super::{load_split, AudioClip, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::seed;

/// `B` real/fake pairs. Element `b` of `x_i` and `x_j` always has opposite
/// labels; which side holds the real clip is random.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_i: Vec<f32>,
    pub x_j: Vec<f32>,
    pub labels_i: Vec<Label>,
    pub labels_j: Vec<Label>,
    pub domains_i: Vec<usize>,
    pub domains_j: Vec<usize>,
    pub clip_len: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels_i.is_empty()
    }
}

/// Pairs every real training clip once per epoch with a fake whose domain is
/// drawn uniformly over the fake domains. The shuffle for epoch `e` depends
/// only on `(seed, e)`, so any batch can be regenerated on resume.
pub struct PairSampler {
    clips: Vec<AudioClip>,
    domain_of: Vec<usize>,
    reals: Vec<usize>,
    fakes_by_domain: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
}

impl PairSampler {
    pub fn new(clips: Vec<AudioClip>, vocabulary: &[String], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        let mut domain_of = Vec::with_capacity(clips.len());
        let mut reals = Vec::new();
        let mut fakes_by_domain: Vec<Vec<usize>> = vec![Vec::new(); vocabulary.len()];
        for (i, c) in clips.iter().enumerate() {
            let d = vocabulary
                .iter()
                .position(|v| *v == c.domain)
                .ok_or_else(|| Error::Validation(format!("domain `{}` not in vocabulary", c.domain)))?;
            domain_of.push(d);
            match c.label {
                Label::Real => reals.push(i),
                Label::Fake => fakes_by_domain[d].push(i),
            }
        }
        fakes_by_domain.retain(|v| !v.is_empty());
        if reals.is_empty() || fakes_by_domain.is_empty() {
            return Err(Error::Validation("pair sampling needs both real and fake clips".into()));
        }
        if reals.len() < batch_size {
            return Err(Error::Validation(format!(
                "{} real clips cannot fill a batch of {batch_size}",
                reals.len()
            )));
        }
        Ok(Self {
            clips,
            domain_of,
            reals,
            fakes_by_domain,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.reals.len() / self.batch_size
    }

    pub fn clips(&self) -> &[AudioClip] {
        &self.clips
    }

    /// Domain index of clip `i` in the vocabulary.
    pub fn domain_of(&self, i: usize) -> usize {
        self.domain_of[i]
    }

    /// Clip-index pairs `(i, j)` of every full batch of `epoch`.
    pub fn epoch_pairs(&self, epoch: u64) -> Vec<Vec<(usize, usize)>> {
        let plan = self.plan(epoch);
        plan.chunks_exact(self.batch_size).map(<[_]>::to_vec).collect()
    }

    /// Clip-index pairs `(i, j)` for one epoch, in batch order.
    fn plan(&self, epoch: u64) -> Vec<(usize, usize)> {
        let mut rng = seed::rng(&[self.seed, epoch, 0x7061_6972]);
        let mut order = self.reals.clone();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|real| {
                let pool = &self.fakes_by_domain[rng.random_range(0..self.fakes_by_domain.len())];
                let fake = pool[rng.random_range(0..pool.len())];
                if rng.random_bool(0.5) {
                    (real, fake)
                } else {
                    (fake, real)
                }
            })
            .collect()
    }

    fn assemble(&self, pairs: &[(usize, usize)]) -> PairBatch {
        let clip_len = self.clips[pairs[0].0].samples.len();
        let mut b = PairBatch {
            x_i: Vec::with_capacity(pairs.len() * clip_len),
            x_j: Vec::with_capacity(pairs.len() * clip_len),
            labels_i: Vec::new(),
            labels_j: Vec::new(),
            domains_i: Vec::new(),
            domains_j: Vec::new(),
            clip_len,
        };
        for &(i, j) in pairs {
            b.x_i.extend_from_slice(&self.clips[i].samples);
            b.x_j.extend_from_slice(&self.clips[j].samples);
            b.labels_i.push(self.clips[i].label);
            b.labels_j.push(self.clips[j].label);
            b.domains_i.push(self.domain_of[i]);
            b.domains_j.push(self.domain_of[j]);
        }
        b
    }

    /// Full batches of `epoch`; a trailing partial batch is dropped.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = PairBatch> + '_ {
        let plan = self.plan(epoch);
        let n = self.batches_per_epoch();
        (0..n).map(move |k| self.assemble(&plan[k * self.batch_size..(k + 1) * self.batch_size]))
    }
}

/// Loads the training split of `manifest` and builds a sampler over it.
pub fn sample_pairs(manifest: &Manifest, target_len: usize, batch_size: usize, rng_seed: u64) -> Result<PairSampler> {
    let clips = load_split(manifest, Split::Train, target_len)?;
    PairSampler::new(clips, &manifest.domain_vocabulary, batch_size, rng_seed)
}
