//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or configuration, 2 for
//! failures while running.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::load_checkpoint;
use crate::config::{fmt_f64, parse_key_values, parse_value, Settings};
use crate::data::{generate_corpus, load_manifest, CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_features, landscape_slice};
use crate::pipeline::{probe_loss, Precision, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "vocoguard",
    version,
    about = "Synthetic voice detection with disentangled artifact features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural corpus and its manifest.
    GenData(Common),
    /// Train a detector, or resume one with --ckpt.
    Train(Common),
    /// Score a split and write an EER/AUC report.
    Eval(Common),
    /// Write per-clip content and artifact embeddings as CSV.
    ExportFeatures(Common),
    /// Evaluate the training loss on a 2-D slice around a checkpoint.
    Landscape(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to read, or to resume from when training.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Manifest CSV of the corpus.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// train, dev or test (default test).
    #[arg(long)]
    pub split: Option<String>,
    /// Corpus or training seed; the direction seed for landscape.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Settings of the commands that read a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct InspectConfig {
    pub precision: Precision,
    pub radius: f64,
    pub grid_k: usize,
    pub direction_seed: u64,
}

impl Default for InspectConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            radius: 1.0,
            grid_k: 5,
            direction_seed: 0,
        }
    }
}

impl Settings for InspectConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "precision" => self.precision = parse_value(key, value)?,
            "radius" => self.radius = parse_value(key, value)?,
            "grid_k" => self.grid_k = parse_value(key, value)?,
            "direction_seed" => self.direction_seed = parse_value(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("precision".into(), self.precision.to_string()),
            ("radius".into(), fmt_f64(self.radius)),
            ("grid_k".into(), self.grid_k.to_string()),
            ("direction_seed".into(), self.direction_seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::bad_value("radius", "must be positive and finite"));
        }
        if self.grid_k == 0 || self.grid_k > 100 {
            return Err(Error::bad_value("grid_k", "must be between 1 and 100"));
        }
        Ok(())
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Validation(format!("--{flag} is required for this command")))
}

fn out_dir(c: &Common) -> Result<&Path> {
    let out = require(&c.out, "out")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn split_of(c: &Common) -> Result<Split> {
    parse_value("--split", c.split.as_deref().unwrap_or("test"))
}

/// Config file entries followed by `--set` overrides, all as `key=value`.
fn override_strings(c: &Common) -> Result<Vec<String>> {
    let mut out = Vec::new();
    if let Some(p) = &c.config {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for e in parse_key_values(&text, &p.display().to_string())? {
            out.push(format!("{}={}", e.key, e.value));
        }
    }
    out.extend(c.overrides.iter().cloned());
    Ok(out)
}

fn gen_data(c: &Common) -> Result<serde_json::Value> {
    let mut sets = c.overrides.clone();
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    let cfg = CorpusConfig::resolve(c.config.as_deref(), &sets)?;
    let out = out_dir(c)?;
    let summary = generate_corpus(&cfg, out)?;
    write_text(&out.join("corpus_config.txt"), &cfg.to_text())?;
    Ok(json!({
        "manifest": summary.manifest_path,
        "clips": summary.manifest.rows.len(),
        "domains": summary.manifest.domain_vocabulary,
    }))
}

fn train(c: &Common) -> Result<serde_json::Value> {
    let mut sets = override_strings(c)?;
    if let Some(out) = &c.out {
        sets.push(format!("checkpoint_dir={}", out.display()));
    }
    if let Some(m) = &c.manifest {
        sets.push(format!("manifest={}", m.display()));
    }
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    let mut trainer = match &c.ckpt {
        Some(ckpt) => {
            let t = Trainer::resume(ckpt, &sets, None)?;
            let snapshot = t.config.checkpoint_dir.join(crate::pipeline::CONFIG_SNAPSHOT);
            write_text(&snapshot, &t.config.to_text())?;
            t
        }
        None => {
            let mut entries = Vec::new();
            for s in &sets {
                entries.push(crate::config::parse_override(s)?);
            }
            Trainer::new(TrainConfig::from_entries(&entries)?, None)?
        }
    };
    let res = trainer.run(None)?;
    Ok(json!({
        "best_checkpoint": res.best_checkpoint,
        "last_checkpoint": res.last_checkpoint,
        "metrics": res.metrics_path,
        "best_dev_eer": res.best_dev_eer,
        "steps": res.steps,
    }))
}

fn inspect_config(c: &Common) -> Result<InspectConfig> {
    let mut sets = c.overrides.clone();
    if let Some(s) = c.seed {
        sets.push(format!("direction_seed={s}"));
    }
    InspectConfig::resolve(c.config.as_deref(), &sets)
}

fn snapshot(c: &Common, cfg: &InspectConfig, split: Option<Split>) -> String {
    let mut text = cfg.to_text();
    if let Some(p) = &c.ckpt {
        text.push_str(&format!("# ckpt = {}\n", p.display()));
    }
    if let Some(p) = &c.manifest {
        text.push_str(&format!("# manifest = {}\n", p.display()));
    }
    if let Some(s) = split {
        text.push_str(&format!("# split = {s}\n"));
    }
    text
}

fn eval(c: &Common) -> Result<serde_json::Value> {
    let cfg = inspect_config(c)?;
    let split = split_of(c)?;
    let ckpt = load_checkpoint(require(&c.ckpt, "ckpt")?)?;
    let manifest = load_manifest(require(&c.manifest, "manifest")?)?;
    let report = evaluate(&ckpt.state, &manifest, split, cfg.precision)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    if c.out.is_some() {
        let out = out_dir(c)?;
        let text = serde_json::to_string_pretty(&value).expect("json value");
        write_text(&out.join(format!("eval_{split}.json")), &(text + "\n"))?;
        write_text(
            &out.join(format!("eval_{split}_config.txt")),
            &snapshot(c, &cfg, Some(split)),
        )?;
    }
    Ok(value)
}

fn export(c: &Common) -> Result<serde_json::Value> {
    let cfg = inspect_config(c)?;
    let split = split_of(c)?;
    let ckpt = load_checkpoint(require(&c.ckpt, "ckpt")?)?;
    let manifest = load_manifest(require(&c.manifest, "manifest")?)?;
    let out = out_dir(c)?;
    let path = out.join(format!("features_{split}.csv"));
    let rows = export_features(&ckpt.state, &manifest, split, &path, cfg.precision)?;
    write_text(
        &out.join(format!("features_{split}_config.txt")),
        &snapshot(c, &cfg, Some(split)),
    )?;
    Ok(json!({ "features": path, "rows": rows }))
}

fn landscape(c: &Common) -> Result<serde_json::Value> {
    let cfg = inspect_config(c)?;
    let ckpt = load_checkpoint(require(&c.ckpt, "ckpt")?)?;
    let manifest = load_manifest(require(&c.manifest, "manifest")?)?;
    let mut train_cfg = TrainConfig::from_text(&ckpt.meta.train_config, "checkpoint")?;
    train_cfg.precision = cfg.precision;
    let loss = probe_loss(&ckpt.state, &train_cfg, &manifest)?;
    let grid = landscape_slice(&ckpt.state.params, loss, cfg.radius, cfg.grid_k, cfg.direction_seed)?;
    let out = out_dir(c)?;
    let csv = out.join("landscape.csv");
    let sidecar = grid.write(&csv)?;
    write_text(&out.join("landscape_config.txt"), &snapshot(c, &cfg, None))?;
    let range = grid.value_range();
    Ok(json!({
        "grid": csv,
        "sidecar": sidecar,
        "center": grid.center(),
        "value_range": range.is_finite().then_some(range),
    }))
}

pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::ExportFeatures(c) => export(c),
        Command::Landscape(c) => landscape(c),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. The result summary goes to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
