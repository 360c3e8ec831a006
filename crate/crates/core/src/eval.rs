//! Detection metrics, per-domain reports, feature export and loss-landscape
//! slices.
//!
//! Scores are `P(fake)`. A clip is accepted as real when its score is below
//! the threshold, so FAR is the share of fakes scored below it and FRR the
//! share of reals at or above it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use vocoguard_tape::Real;

use crate::backbone::{encode_frontend, predict_frontend, FrontendCache};
use crate::data::{load_split, AudioClip, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::params::ParamStore;
use crate::pipeline::Precision;
use crate::seed;

/// Clips per forward pass when scoring.
const SCORE_CHUNK: usize = 32;

fn check_scores(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let fakes = labels.iter().filter(|&&l| l == Label::Fake).count();
    let reals = labels.len() - fakes;
    if fakes == 0 || reals == 0 {
        return Err(Error::Validation("error rates need both real and fake clips".into()));
    }
    Ok((reals, fakes))
}

/// Equal error rate and the threshold where FAR and FRR cross.
///
/// Candidate thresholds are `−∞`, the midpoints between consecutive distinct
/// scores, and `+∞`. Between the two candidates that bracket the crossing,
/// both rates are interpolated linearly. For the reported threshold the
/// infinite candidates stand in as the lowest and highest score.
pub fn compute_eer(scores: &[f64], labels: &[Label]) -> Result<(f64, f64)> {
    let (reals, fakes) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk the distinct scores upwards. Candidate k sits just above the k-th
    // distinct score, so it has every clip with a score up to it below.
    let mut thresholds = vec![scores[order[0]]];
    let mut far = vec![0.0];
    let mut frr = vec![1.0];
    let (mut fakes_below, mut reals_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            match labels[order[i]] {
                Label::Fake => fakes_below += 1,
                Label::Real => reals_below += 1,
            }
            i += 1;
        }
        let t = if i < order.len() {
            0.5 * (s + scores[order[i]])
        } else {
            s
        };
        thresholds.push(t);
        far.push(fakes_below as f64 / fakes as f64);
        frr.push((reals - reals_below) as f64 / reals as f64);
    }

    let k = (1..far.len())
        .find(|&k| far[k] >= frr[k])
        .expect("the last candidate has FAR 1 and FRR 0");
    let d1 = far[k] - frr[k];
    if d1 == 0.0 {
        return Ok((far[k], thresholds[k]));
    }
    let d0 = far[k - 1] - frr[k - 1];
    let a = -d0 / (d1 - d0);
    let eer = far[k - 1] + a * (far[k] - far[k - 1]);
    let threshold = thresholds[k - 1] + a * (thresholds[k] - thresholds[k - 1]);
    Ok((eer, threshold))
}

/// `(FAR, FRR)` at threshold `t`.
pub fn error_rates(scores: &[f64], labels: &[Label], t: f64) -> Result<(f64, f64)> {
    let (reals, fakes) = check_scores(scores, labels)?;
    let mut fa = 0usize;
    let mut fr = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        match l {
            Label::Fake if s < t => fa += 1,
            Label::Real if s >= t => fr += 1,
            _ => {}
        }
    }
    Ok((fa as f64 / fakes as f64, fr as f64 / reals as f64))
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random fake outscores a random real, ties counting one half.
pub fn compute_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (reals, fakes) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut fake_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        let tied_fakes = order[i..j].iter().filter(|&&o| labels[o] == Label::Fake).count();
        fake_rank_sum += avg * tied_fakes as f64;
        i = j;
    }
    let nf = fakes as f64;
    Ok((fake_rank_sum - nf * (nf + 1.0) / 2.0) / (nf * reals as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer_overall: f64,
    pub auc: f64,
    pub per_domain_eer: BTreeMap<String, f64>,
    pub seen_avg_eer: Option<f64>,
    pub unseen_avg_eer: Option<f64>,
    pub threshold_at_eer: f64,
    pub far_at_eer: f64,
    pub frr_at_eer: f64,
    pub split: String,
    pub num_clips: usize,
    pub warnings: Vec<String>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds the report for `clips` of `split` scored by `scores`. Each fake
/// domain is scored against all real clips of the split.
pub fn report_from_scores(
    manifest: &Manifest,
    split: Split,
    clips: &[AudioClip],
    scores: &[f64],
) -> Result<EvalReport> {
    let labels: Vec<Label> = clips.iter().map(|c| c.label).collect();
    let (eer, threshold) = compute_eer(scores, &labels)?;
    let auc = compute_auc(scores, &labels)?;
    let (far, frr) = error_rates(scores, &labels, threshold)?;

    let real_scores: Vec<f64> = clips
        .iter()
        .zip(scores)
        .filter(|(c, _)| c.label == Label::Real)
        .map(|(_, &s)| s)
        .collect();
    let mut per_domain = BTreeMap::new();
    let mut warnings = Vec::new();
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for domain in &manifest.domain_vocabulary {
        if domain == crate::data::REAL_DOMAIN {
            continue;
        }
        let fake_scores: Vec<f64> = clips
            .iter()
            .zip(scores)
            .filter(|(c, _)| c.label == Label::Fake && &c.domain == domain)
            .map(|(_, &s)| s)
            .collect();
        if fake_scores.is_empty() {
            warnings.push(format!("domain `{domain}` has no clips in the {split} split; skipped"));
            continue;
        }
        let mut s = real_scores.clone();
        let mut l = vec![Label::Real; s.len()];
        s.extend_from_slice(&fake_scores);
        l.resize(s.len(), Label::Fake);
        let (e, _) = compute_eer(&s, &l)?;
        per_domain.insert(domain.clone(), e);
        if manifest.domain_is_seen(domain, split) {
            seen.push(e);
        } else {
            unseen.push(e);
        }
    }
    Ok(EvalReport {
        eer_overall: eer,
        auc,
        per_domain_eer: per_domain,
        seen_avg_eer: mean(&seen),
        unseen_avg_eer: mean(&unseen),
        threshold_at_eer: threshold,
        far_at_eer: far,
        frr_at_eer: frr,
        split: split.to_string(),
        num_clips: clips.len(),
        warnings,
    })
}

/// Fake-probabilities for precomputed frontend features.
pub fn score_cache<T: Real>(state: &ModelState, cache: &FrontendCache) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..cache.len()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(SCORE_CHUNK) {
        out.extend(predict_frontend::<T>(state, cache.artifact::<T>(chunk))?);
    }
    Ok(out)
}

fn waves(clips: &[AudioClip]) -> Vec<&[f32]> {
    clips.iter().map(|c| c.samples.as_slice()).collect()
}

pub fn score_clips(state: &ModelState, clips: &[AudioClip], precision: Precision) -> Result<Vec<f64>> {
    match precision {
        Precision::F32 => score_cache::<f32>(state, &FrontendCache::build::<f32>(state, &waves(clips), false)?),
        Precision::F64 => score_cache::<f64>(state, &FrontendCache::build::<f64>(state, &waves(clips), false)?),
    }
}

pub fn evaluate(state: &ModelState, manifest: &Manifest, split: Split, precision: Precision) -> Result<EvalReport> {
    let clips = load_split(manifest, split, state.config.backbone.input_len)?;
    if clips.is_empty() {
        return Err(Error::Validation(format!("the manifest has no {split} clips")));
    }
    let scores = score_clips(state, &clips, precision)?;
    report_from_scores(manifest, split, &clips, &scores)
}

fn export_impl<T: Real>(state: &ModelState, clips: &[AudioClip], out_path: &Path) -> Result<()> {
    let cfg = &state.config.backbone;
    let cache = FrontendCache::build::<T>(state, &waves(clips), true)?;
    let io = |e: csv::Error| Error::io(out_path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(out_path).map_err(io)?;
    let mut header = vec!["clip_id".to_string(), "label".into(), "domain".into()];
    header.extend((0..cfg.embed_dim).map(|i| format!("c{i}")));
    header.extend((0..cfg.artifact_proj_dim).map(|i| format!("a_s{i}")));
    header.extend((0..cfg.artifact_proj_dim).map(|i| format!("a_g{i}")));
    w.write_record(&header).map_err(io)?;
    let idx: Vec<usize> = (0..clips.len()).collect();
    for chunk in idx.chunks(SCORE_CHUNK) {
        let f = encode_frontend::<T>(state, cache.content::<T>(chunk), cache.artifact::<T>(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            let c = &clips[i];
            let mut rec = vec![c.clip_id.clone(), c.label.to_string(), c.domain.clone()];
            for t in [&f.c, &f.a_s, &f.a_g] {
                rec.extend(t.row(r).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(out_path, e))
}

/// Writes `clip_id, label, domain, c…, a_s…, a_g…` for every clip of `split`
/// in manifest order.
pub fn export_features(
    state: &ModelState,
    manifest: &Manifest,
    split: Split,
    out_path: &Path,
    precision: Precision,
) -> Result<usize> {
    let clips = load_split(manifest, split, state.config.backbone.input_len)?;
    match precision {
        Precision::F32 => export_impl::<f32>(state, &clips, out_path)?,
        Precision::F64 => export_impl::<f64>(state, &clips, out_path)?,
    }
    Ok(clips.len())
}

/// Loss on a `(2k+1)²` grid around `θ` along two random directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    /// `values[i][j]` is the loss at `θ + α_i·d1 + α_j·d2`.
    pub values: Vec<Vec<f64>>,
    pub radius: f64,
    pub grid_k: usize,
    pub direction_seed: u64,
}

impl LandscapeGrid {
    /// Offset of row or column `i`, from `−radius` to `radius`.
    pub fn alpha(&self, i: usize) -> f64 {
        (i as f64 - self.grid_k as f64) / self.grid_k as f64 * self.radius
    }

    pub fn center(&self) -> f64 {
        self.values[self.grid_k][self.grid_k]
    }

    /// `max − min` over the grid; infinite if any cell is.
    pub fn value_range(&self) -> f64 {
        let all = self.values.iter().flatten();
        let max = all.clone().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let min = all.fold(f64::INFINITY, |m, &v| m.min(v));
        max - min
    }

    pub fn to_csv(&self) -> String {
        self.values
            .iter()
            .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    /// Writes the matrix to `csv_path` and a JSON sidecar next to it.
    /// Returns the sidecar path.
    pub fn write(&self, csv_path: &Path) -> Result<PathBuf> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let sidecar = csv_path.with_extension("json");
        let range = self.value_range();
        let meta = serde_json::json!({
            "radius": self.radius,
            "grid_k": self.grid_k,
            "direction_seed": self.direction_seed,
            "center": self.center(),
            "value_range": if range.is_finite() { Some(range) } else { None },
        });
        let text = serde_json::to_string_pretty(&meta).expect("json value");
        fs::write(&sidecar, text + "\n").map_err(|e| Error::io(&sidecar, e))?;
        Ok(sidecar)
    }
}

/// Random direction over the trainable parameters, rescaled block by block
/// to the norm of the parameter block it perturbs.
fn direction(params: &ParamStore, seed_value: u64, which: u64) -> BTreeMap<String, Vec<f64>> {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(name, p)| {
            let mut rng = seed::rng(&[seed_value, which, seed::hash_str(name)]);
            let mut d: Vec<f64> = (0..p.data.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let pn = p.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if dn > 0.0 { pn / dn } else { 0.0 };
            d.iter_mut().for_each(|v| *v *= s);
            (name.clone(), d)
        })
        .collect()
}

/// Evaluates `loss_fn` on the grid. `params` is never modified; perturbed
/// points are evaluated on a copy. Non-finite losses are recorded as `+∞`.
pub fn landscape_slice(
    params: &ParamStore,
    mut loss_fn: impl FnMut(&ParamStore) -> Result<f64>,
    radius: f64,
    grid_k: usize,
    direction_seed: u64,
) -> Result<LandscapeGrid> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::bad_value("radius", "must be positive and finite"));
    }
    if grid_k == 0 {
        return Err(Error::bad_value("grid_k", "must be at least 1"));
    }
    let d1 = direction(params, direction_seed, 1);
    let d2 = direction(params, direction_seed, 2);
    let mut grid = LandscapeGrid {
        values: Vec::with_capacity(2 * grid_k + 1),
        radius,
        grid_k,
        direction_seed,
    };
    let mut probe = params.clone();
    let mut eval = |p: &ParamStore| match loss_fn(p) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) | Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    };
    for i in 0..=2 * grid_k {
        let mut row = Vec::with_capacity(2 * grid_k + 1);
        for j in 0..=2 * grid_k {
            if i == grid_k && j == grid_k {
                row.push(eval(params)?);
                continue;
            }
            let (a, b) = (grid.alpha(i), grid.alpha(j));
            for (name, p) in probe.iter_mut() {
                if let (Some(u), Some(v)) = (d1.get(name), d2.get(name)) {
                    let base = &params.get(name).expect("same names").data;
                    for (k, w) in p.data.iter_mut().enumerate() {
                        *w = base[k] + a * u[k] + b * v[k];
                    }
                }
            }
            row.push(eval(&probe)?);
        }
        grid.values.push(row);
    }
    Ok(grid)
}
