//! Training: configuration, the per-batch objective, and the loop with
//! evaluation, checkpointing and resume.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vocoguard_tape::{Real, Tensor, Var};

use crate::backbone::{artifact_projections, auth_logits, domain_logits, encoder_trunk, FrontendCache};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, RngState};
use crate::config::{fmt_f64, parse_bool, parse_key_values, parse_override, parse_value, Settings};
use crate::data::{load_manifest, load_split, AudioClip, Manifest, PairSampler, Split};
use crate::decoder::decoder_graph;
use crate::error::{Error, Result};
use crate::eval::{compute_auc, compute_eer, score_cache};
use crate::losses::{
    classification_graph, contrastive_graph, mi_critic_graph, mine_triplets, reconstruction_graph, total_graph,
    LossReport, LossWeights, Triplet,
};
use crate::model::{init_model, ModelConfig, ModelState, ARTIFACT_ENCODER, CONTENT_ENCODER};
use crate::params::{Binder, ParamGrads, ParamStore};
use crate::sam::{sam_step, Adam, PerturbationRule, SamConfig};
use crate::seed;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_SNAPSHOT: &str = "resolved_config.txt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            _ => Err(format!("precision must be 32 or 64, got `{s}`")),
        }
    }
}

/// Which parts of the method are active. With everything off, training is a
/// single artifact encoder with the real/fake head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub rec: bool,
    pub cls: bool,
    pub con: bool,
    pub mi: bool,
    pub sam: bool,
}

impl Toggles {
    pub fn all_on() -> Self {
        Self {
            rec: true,
            cls: true,
            con: true,
            mi: true,
            sam: true,
        }
    }

    pub fn baseline() -> Self {
        Self {
            rec: false,
            cls: false,
            con: false,
            mi: false,
            sam: false,
        }
    }

    fn needs_content(&self) -> bool {
        self.rec || self.mi
    }

    fn needs_specific(&self) -> bool {
        self.cls || self.con || self.rec
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all_on()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Its `enabled` flag is ignored; `toggles.sam` switches SAM.
    pub sam: SamConfig,
    pub toggles: Toggles,
    pub checkpoint_dir: PathBuf,
    /// Evaluate on the dev split every this many steps; 0 means at the end of
    /// every epoch.
    pub eval_every: u64,
    /// Keep a `step_NNNNNN.ckpt` every this many steps; 0 disables them.
    pub checkpoint_every: u64,
    pub precision: Precision,
    pub manifest: Option<PathBuf>,
    pub model_preset: String,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-4,
            seed: 0,
            weights: LossWeights::default(),
            sam: SamConfig::default(),
            toggles: Toggles::all_on(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            eval_every: 0,
            checkpoint_every: 0,
            precision: Precision::F32,
            manifest: None,
            model_preset: "desk".into(),
            model: ModelConfig::desk(),
        }
    }
}

impl Settings for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.weights.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.toggles;
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "sam.gamma" => self.sam.gamma = parse_value(key, value)?,
            "sam.rule" => self.sam.rule = parse_value::<PerturbationRule>(key, value)?,
            "sam.enabled" | "toggles.sam" => t.sam = parse_bool(key, value)?,
            "toggles.rec" => t.rec = parse_bool(key, value)?,
            "toggles.cls" => t.cls = parse_bool(key, value)?,
            "toggles.con" => t.con = parse_bool(key, value)?,
            "toggles.mi" => t.mi = parse_bool(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "precision" => self.precision = parse_value(key, value)?,
            "manifest" => self.manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
            "model.preset" => {
                self.model = ModelConfig::preset(value)?;
                self.model_preset = value.to_string();
            }
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let t = &self.toggles;
        let mut out: Vec<(String, String)> = vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), fmt_f64(self.learning_rate)),
            ("seed".into(), self.seed.to_string()),
            ("precision".into(), self.precision.to_string()),
            (
                "manifest".into(),
                self.manifest
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("checkpoint_dir".into(), self.checkpoint_dir.display().to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("toggles.rec".into(), t.rec.to_string()),
            ("toggles.cls".into(), t.cls.to_string()),
            ("toggles.con".into(), t.con.to_string()),
            ("toggles.mi".into(), t.mi.to_string()),
            ("toggles.sam".into(), t.sam.to_string()),
            ("sam.gamma".into(), fmt_f64(self.sam.gamma)),
            ("sam.rule".into(), self.sam.rule.to_string()),
        ];
        out.extend(self.weights.entries());
        out.push(("model.preset".into(), self.model_preset.clone()));
        out.extend(self.model.entries());
        out
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::bad_value("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::bad_value("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::bad_value("learning_rate", "must be positive and finite"));
        }
        if !(self.sam.gamma >= 0.0 && self.sam.gamma.is_finite()) {
            return Err(Error::bad_value("sam.gamma", "must be finite and non-negative"));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    fn leading_keys() -> &'static [&'static str] {
        &["model.preset"]
    }
}

impl TrainConfig {
    pub fn sam_config(&self) -> SamConfig {
        SamConfig {
            enabled: self.toggles.sam,
            ..self.sam
        }
    }
}

/// Everything one step's objective needs, with `2B` rows: the `x_i` side of
/// every pair followed by the `x_j` side.
#[derive(Clone, Debug)]
pub struct StepInputs<T: Real> {
    pub artifact: Tensor<T>,
    /// Content-encoder frontend features, when a term needs `c`.
    pub content: Option<Tensor<T>>,
    /// Waveforms `[2B, L]`, when reconstruction is on.
    pub waves: Option<Tensor<T>>,
    pub domains: Vec<usize>,
    pub labels: Vec<usize>,
    /// Row of each row's pair partner.
    pub partner: Vec<usize>,
    pub triplets_s: Vec<Triplet>,
    pub triplets_g: Vec<Triplet>,
}

impl<T: Real> StepInputs<T> {
    /// Pairs of rows `(r, r + B)`. Triplets are mined here, once per step, so
    /// both SAM passes see the same ones.
    pub fn new(
        artifact: Tensor<T>,
        content: Option<Tensor<T>>,
        waves: Option<Tensor<T>>,
        domains: Vec<usize>,
        labels: Vec<usize>,
        toggles: &Toggles,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = labels.len();
        let half = n / 2;
        let partner = (0..n).map(|r| (r + half) % n).collect();
        let (triplets_s, triplets_g) = if toggles.con {
            (mine_triplets(&domains, rng), mine_triplets(&labels, rng))
        } else {
            (Vec::new(), Vec::new())
        };
        Self {
            artifact,
            content,
            waves,
            domains,
            labels,
            partner,
            triplets_s,
            triplets_g,
        }
    }

    /// From raw waveforms, running the frontends directly.
    pub fn from_pairs(
        state: &ModelState,
        batch: &crate::data::PairBatch,
        toggles: &Toggles,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let b = batch.len();
        let mut waves = batch.x_i.clone();
        waves.extend_from_slice(&batch.x_j);
        let artifact = crate::backbone::frontend::<T>(state, ARTIFACT_ENCODER, &waves, 2 * b)?;
        let content = if toggles.needs_content() {
            Some(crate::backbone::frontend::<T>(state, CONTENT_ENCODER, &waves, 2 * b)?)
        } else {
            None
        };
        let wave_t = toggles.rec.then(|| {
            Tensor::new(
                &[2 * b, batch.clip_len],
                waves.iter().map(|&v| T::of(v as f64)).collect(),
            )
        });
        let domains = batch.domains_i.iter().chain(&batch.domains_j).copied().collect();
        let labels = batch
            .labels_i
            .iter()
            .chain(&batch.labels_j)
            .map(|l| l.index())
            .collect();
        Ok(Self::new(artifact, content, wave_t, domains, labels, toggles, rng))
    }
}

fn value<T: Real>(b: &Binder<T>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| b.g.scalar(v).f64())
}

/// Total loss of one batch, the gradient of every parameter it touches, and
/// the per-term breakdown. Only the subsystems the toggles need enter the
/// graph; the others get no gradient.
pub fn batch_objective<T: Real>(
    params: &ParamStore,
    cfg: &ModelConfig,
    inputs: &StepInputs<T>,
    weights: &LossWeights,
    toggles: &Toggles,
    with_grads: bool,
) -> Result<(f64, ParamGrads, LossReport)> {
    let bc = &cfg.backbone;
    let mut b = Binder::<T>::new(params);
    let xa = b.input(inputs.artifact.clone());
    let shared = encoder_trunk(&mut b, bc, ARTIFACT_ENCODER, xa);
    let (a_s, a_g) = if toggles.needs_specific() {
        let (s, g) = artifact_projections(&mut b, shared);
        (Some(s), g)
    } else {
        let (w, bias) = (b.p("proj_g/weight"), b.p("proj_g/bias"));
        (None, b.g.linear(shared, w, Some(bias)))
    };
    let auth = auth_logits(&mut b, a_g);
    let cls = if toggles.cls {
        let dom = domain_logits(&mut b, a_s.expect("projected"));
        classification_graph(&mut b.g, dom, &inputs.domains, auth, &inputs.labels, weights.lambda1)
    } else {
        b.g.cross_entropy(auth, &inputs.labels)
    };

    let (mut con_s, mut con_g) = (None, None);
    if toggles.con {
        con_s = contrastive_graph(&mut b.g, a_s.expect("projected"), &inputs.triplets_s, weights.margin_b);
        con_g = contrastive_graph(&mut b.g, a_g, &inputs.triplets_g, weights.margin_b);
    }
    let con = match (con_s, con_g) {
        (Some(s), Some(g)) => Some(b.g.add(s, g)),
        (s, g) => s.or(g),
    };

    let c = if toggles.needs_content() {
        let feats = inputs
            .content
            .clone()
            .ok_or_else(|| Error::Shape("content features missing".into()))?;
        let xc = b.input(feats);
        Some(encoder_trunk(&mut b, bc, CONTENT_ENCODER, xc))
    } else {
        None
    };
    let rec = if toggles.rec {
        let (c, a_s) = (c.expect("content"), a_s.expect("projected"));
        let x = b.input(
            inputs
                .waves
                .clone()
                .ok_or_else(|| Error::Shape("waveforms missing".into()))?,
        );
        let x_self = decoder_graph(&mut b, cfg, c, a_s, a_g);
        let s_sw = b.g.index_rows(a_s, &inputs.partner);
        let g_sw = b.g.index_rows(a_g, &inputs.partner);
        let x_cross = decoder_graph(&mut b, cfg, c, s_sw, g_sw);
        Some(reconstruction_graph(&mut b.g, x, x_self, x_cross))
    } else {
        None
    };
    let mi = if toggles.mi {
        Some(mi_critic_graph(&mut b, c.expect("content"), a_g))
    } else {
        None
    };

    let total = total_graph(&mut b.g, weights, cls, con, rec, mi);
    let report = LossReport {
        l_cls: value(&b, Some(cls)),
        l_con_s: value(&b, con_s),
        l_con_g: value(&b, con_g),
        l_rec: value(&b, rec),
        l_mi: value(&b, mi),
        total: value(&b, Some(total)),
    };
    if !report.total.is_finite() {
        crate::losses::total_loss(&report, weights)?;
        return Err(Error::NonFinite(format!("total loss ({})", report.total)));
    }
    let grads = if with_grads { b.grads(total) } else { ParamGrads::new() };
    Ok((report.total, grads, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Lowest-dev-EER checkpoint.
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub best_dev_eer: Option<f64>,
    pub steps: u64,
}

/// Owns the model, optimizer and data for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: ModelState,
    pub optimizer: Adam,
    sampler: PairSampler,
    train_cache: FrontendCache,
    dev_clips: Vec<AudioClip>,
    dev_cache: FrontendCache,
    mining: ChaCha8Rng,
    epoch: u64,
    batch: u64,
    step: u64,
    best_dev_eer: Option<f64>,
    metrics: File,
}

fn manifest_for(config: &TrainConfig, manifest: Option<Manifest>) -> Result<Manifest> {
    match (manifest, &config.manifest) {
        (Some(m), _) => Ok(m),
        (None, Some(p)) => load_manifest(p),
        (None, None) => Err(Error::Validation("no manifest given (set `manifest`)".into())),
    }
}

impl Trainer {
    /// Fresh run. `manifest` overrides the `manifest` key.
    pub fn new(mut config: TrainConfig, manifest: Option<Manifest>) -> Result<Self> {
        config.validate()?;
        let manifest = manifest_for(&config, manifest)?;
        config.model.backbone.num_domains = manifest.domain_vocabulary.len();
        let state = init_model(&config.model, config.seed)?;
        let optimizer = Adam::new(config.learning_rate);
        let mining = seed::rng(&[config.seed, 2]);
        fs::create_dir_all(&config.checkpoint_dir).map_err(|e| Error::io(&config.checkpoint_dir, e))?;
        let path = config.checkpoint_dir.join(METRICS_FILE);
        let metrics = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let snapshot = config.checkpoint_dir.join(CONFIG_SNAPSHOT);
        fs::write(&snapshot, config.to_text()).map_err(|e| Error::io(&snapshot, e))?;
        Self::assemble(config, manifest, state, optimizer, mining, metrics)
    }

    /// Continues from a checkpoint. `overrides` refine the configuration
    /// stored in it; they must not change the model layout.
    pub fn resume(checkpoint: &Path, overrides: &[String], manifest: Option<Manifest>) -> Result<Self> {
        let ckpt = load_checkpoint(checkpoint)?;
        let mut entries = parse_key_values(&ckpt.meta.train_config, &checkpoint.display().to_string())?;
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        let mut config = TrainConfig::from_entries(&entries)?;
        let manifest = manifest_for(&config, manifest)?;
        config.model.backbone.num_domains = manifest.domain_vocabulary.len();
        if config.model != ckpt.state.config {
            return Err(Error::Validation(
                "the resumed configuration describes a different model than the checkpoint".into(),
            ));
        }
        fs::create_dir_all(&config.checkpoint_dir).map_err(|e| Error::io(&config.checkpoint_dir, e))?;
        let path = config.checkpoint_dir.join(METRICS_FILE);
        let metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mining = match &ckpt.rng {
            Some(r) => r.restore(),
            None => return Err(Error::Validation("checkpoint carries no training RNG state".into())),
        };
        let mut optimizer = ckpt.optimizer;
        optimizer.lr = config.learning_rate;
        let mut t = Self::assemble(config, manifest, ckpt.state, optimizer, mining, metrics)?;
        t.epoch = ckpt.meta.epoch;
        t.batch = ckpt.meta.batch;
        t.step = ckpt.meta.step;
        t.best_dev_eer = ckpt.meta.best_dev_eer;
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        manifest: Manifest,
        state: ModelState,
        optimizer: Adam,
        mining: ChaCha8Rng,
        metrics: File,
    ) -> Result<Self> {
        let len = config.model.backbone.input_len;
        let train = load_split(&manifest, Split::Train, len)?;
        let dev_clips = load_split(&manifest, Split::Dev, len)?;
        if dev_clips.is_empty() {
            return Err(Error::Validation("the manifest has no dev clips".into()));
        }
        let sampler = PairSampler::new(
            train,
            &manifest.domain_vocabulary,
            config.batch_size,
            seed::derive(&[config.seed, 1]),
        )?;
        let waves = |clips: &[AudioClip]| clips.iter().map(|c| c.samples.clone()).collect::<Vec<_>>();
        let (tw, dw) = (waves(sampler.clips()), waves(&dev_clips));
        let tr: Vec<&[f32]> = tw.iter().map(Vec::as_slice).collect();
        let dv: Vec<&[f32]> = dw.iter().map(Vec::as_slice).collect();
        let content = config.toggles.needs_content();
        let (train_cache, dev_cache) = match config.precision {
            Precision::F32 => (
                FrontendCache::build::<f32>(&state, &tr, content)?,
                FrontendCache::build::<f32>(&state, &dv, false)?,
            ),
            Precision::F64 => (
                FrontendCache::build::<f64>(&state, &tr, content)?,
                FrontendCache::build::<f64>(&state, &dv, false)?,
            ),
        };
        Ok(Self {
            config,
            state,
            optimizer,
            sampler,
            train_cache,
            dev_clips,
            dev_cache,
            mining,
            epoch: 0,
            batch: 0,
            step: 0,
            best_dev_eer: None,
            metrics,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    fn log(&mut self, record: serde_json::Value) -> Result<()> {
        let path = self.config.checkpoint_dir.join(METRICS_FILE);
        writeln!(self.metrics, "{record}").map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, dev_eer: Option<f64>) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            optimizer: self.optimizer.clone(),
            meta: CheckpointMeta {
                epoch: self.epoch,
                batch: self.batch,
                step: self.step,
                dev_eer,
                best_dev_eer: self.best_dev_eer,
                train_config: self.config.to_text(),
            },
            rng: Some(RngState::capture(&self.mining)),
        }
    }

    fn save(&self, name: &str, dev_eer: Option<f64>) -> Result<PathBuf> {
        let path = self.config.checkpoint_dir.join(name);
        save_checkpoint(&path, &self.checkpoint(dev_eer))?;
        Ok(path)
    }

    /// Inputs of batch `pairs` from the cached frontend features.
    pub fn step_inputs<T: Real>(&mut self, pairs: &[(usize, usize)]) -> StepInputs<T> {
        let idx: Vec<usize> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
        let toggles = self.config.toggles;
        let clips = self.sampler.clips();
        let artifact = self.train_cache.artifact::<T>(&idx);
        let content = toggles.needs_content().then(|| self.train_cache.content::<T>(&idx));
        let waves = toggles.rec.then(|| {
            let len = clips[idx[0]].samples.len();
            let data = idx
                .iter()
                .flat_map(|&i| clips[i].samples.iter().map(|&v| T::of(v as f64)))
                .collect();
            Tensor::new(&[idx.len(), len], data)
        });
        let domains = idx.iter().map(|&i| self.sampler.domain_of(i)).collect();
        let labels = idx.iter().map(|&i| clips[i].label.index()).collect();
        StepInputs::new(artifact, content, waves, domains, labels, &toggles, &mut self.mining)
    }

    fn train_step<T: Real>(&mut self, pairs: &[(usize, usize)]) -> Result<LossReport> {
        let inputs = self.step_inputs::<T>(pairs);
        let (cfg, weights, toggles) = (self.config.model.clone(), self.config.weights, self.config.toggles);
        let sam = self.config.sam_config();
        let before = self.state.params.clone();
        let outcome = sam_step(
            &mut self.state.params,
            |p| batch_objective::<T>(p, &cfg, &inputs, &weights, &toggles, true),
            &mut self.optimizer,
            &sam,
        );
        let outcome = match outcome {
            Ok(o) => o,
            Err(Error::NonFinite(msg)) => return self.diverged(msg),
            Err(e) => return Err(e),
        };
        if !self.state.params.all_finite() {
            self.state.params = before;
            return self.diverged("parameters became non-finite".into());
        }
        let mut report = outcome.aux;
        report.total = outcome.loss;
        let perturbed = outcome.perturbed_loss;
        self.log(json!({
            "kind": "step",
            "epoch": self.epoch,
            "step": self.step + 1,
            "l_cls": report.l_cls,
            "l_con_s": report.l_con_s,
            "l_con_g": report.l_con_g,
            "l_rec": report.l_rec,
            "l_mi": report.l_mi,
            "total": report.total,
            "perturbed_total": perturbed,
        }))?;
        Ok(report)
    }

    /// Keeps the pre-step state as `last.ckpt` and reports the divergence.
    fn diverged<R>(&mut self, msg: String) -> Result<R> {
        self.save(LAST_CHECKPOINT, None)?;
        Err(Error::Diverged {
            step: self.step + 1,
            msg,
        })
    }

    /// Dev-split EER and AUC with the current parameters.
    pub fn dev_metrics(&self) -> Result<(f64, f64)> {
        let scores = match self.config.precision {
            Precision::F32 => score_cache::<f32>(&self.state, &self.dev_cache)?,
            Precision::F64 => score_cache::<f64>(&self.state, &self.dev_cache)?,
        };
        let labels: Vec<_> = self.dev_clips.iter().map(|c| c.label).collect();
        Ok((compute_eer(&scores, &labels)?.0, compute_auc(&scores, &labels)?))
    }

    fn evaluate_dev(&mut self) -> Result<()> {
        let (eer, auc) = self.dev_metrics()?;
        let improved = self.best_dev_eer.is_none_or(|b| eer < b);
        if improved {
            self.best_dev_eer = Some(eer);
            self.save(BEST_CHECKPOINT, Some(eer))?;
        }
        self.log(json!({
            "kind": "eval",
            "epoch": self.epoch,
            "step": self.step,
            "dev_eer": eer,
            "dev_auc": auc,
            "checkpoint": improved.then_some(BEST_CHECKPOINT),
        }))
    }

    fn run_impl<T: Real>(&mut self, max_steps: Option<u64>) -> Result<()> {
        let per_epoch = self.sampler.batches_per_epoch() as u64;
        if per_epoch == 0 {
            return Err(Error::Validation("not enough training clips for one batch".into()));
        }
        while self.epoch < self.config.epochs {
            if max_steps.is_some_and(|m| self.step >= m) {
                return Ok(());
            }
            let plan = self.sampler.epoch_pairs(self.epoch);
            let pairs = plan[self.batch as usize].clone();
            self.train_step::<T>(&pairs)?;
            self.step += 1;
            self.batch += 1;
            let epoch_done = self.batch == per_epoch;
            if epoch_done {
                self.epoch += 1;
                self.batch = 0;
            }
            let every = self.config.eval_every;
            let finished = epoch_done && self.epoch == self.config.epochs;
            let scheduled = if every == 0 {
                epoch_done
            } else {
                self.step.is_multiple_of(every)
            };
            if scheduled || finished {
                self.evaluate_dev()?;
            }
            let ce = self.config.checkpoint_every;
            if ce > 0 && self.step.is_multiple_of(ce) {
                self.save(&format!("step_{:06}.ckpt", self.step), None)?;
            }
            if epoch_done {
                self.save(LAST_CHECKPOINT, None)?;
            }
        }
        Ok(())
    }

    /// Trains until the configured number of epochs, or until `max_steps`
    /// steps in total when given.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<TrainOutcome> {
        match self.config.precision {
            Precision::F32 => self.run_impl::<f32>(max_steps)?,
            Precision::F64 => self.run_impl::<f64>(max_steps)?,
        }
        let last = self.save(LAST_CHECKPOINT, None)?;
        self.metrics
            .flush()
            .map_err(|e| Error::io(self.config.checkpoint_dir.join(METRICS_FILE), e))?;
        let best = self.config.checkpoint_dir.join(BEST_CHECKPOINT);
        Ok(TrainOutcome {
            best_checkpoint: best.exists().then_some(best),
            last_checkpoint: last,
            metrics_path: self.config.checkpoint_dir.join(METRICS_FILE),
            best_dev_eer: self.best_dev_eer,
            steps: self.step,
        })
    }
}

/// Trains from scratch and returns where the results went.
pub fn train(config: &TrainConfig, manifest: Option<Manifest>) -> Result<TrainOutcome> {
    Trainer::new(config.clone(), manifest)?.run(None)
}

/// The first training batch of epoch 0, with triplets from a fixed stream.
/// Landscape slices evaluate the loss on it.
pub fn probe_inputs<T: Real>(state: &ModelState, config: &TrainConfig, manifest: &Manifest) -> Result<StepInputs<T>> {
    let len = state.config.backbone.input_len;
    let train = load_split(manifest, Split::Train, len)?;
    let sampler = PairSampler::new(
        train,
        &manifest.domain_vocabulary,
        config.batch_size,
        seed::derive(&[config.seed, 1]),
    )?;
    let batch = sampler
        .epoch(0)
        .next()
        .ok_or_else(|| Error::Validation("not enough training clips for one batch".into()))?;
    StepInputs::from_pairs(state, &batch, &config.toggles, &mut seed::rng(&[config.seed, 3]))
}

/// Loss as a function of the parameters.
pub type LossProbe = Box<dyn FnMut(&ParamStore) -> Result<f64>>;

/// Loss of the probe batch as a function of the parameters, without SAM, in
/// the configured precision.
pub fn probe_loss(state: &ModelState, config: &TrainConfig, manifest: &Manifest) -> Result<LossProbe> {
    let (cfg, weights, toggles) = (state.config.clone(), config.weights, config.toggles);
    Ok(match config.precision {
        Precision::F32 => {
            let inputs = probe_inputs::<f32>(state, config, manifest)?;
            Box::new(move |p| batch_objective(p, &cfg, &inputs, &weights, &toggles, false).map(|r| r.0))
        }
        Precision::F64 => {
            let inputs = probe_inputs::<f64>(state, config, manifest)?;
            Box::new(move |p| batch_objective(p, &cfg, &inputs, &weights, &toggles, false).map(|r| r.0))
        }
    })
}
