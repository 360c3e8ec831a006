use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use super::{Label, Split, REAL_DOMAIN};
use crate::error::{Error, Result};

pub const HEADER: [&str; 5] = ["path", "label", "domain", "split", "seen"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: Label,
    pub domain: String,
    pub split: Split,
    /// Whether the domain was part of training; only meaningful on test rows.
    pub seen: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// `"real"` first, then the remaining domains in lexicographic order.
    pub domain_vocabulary: Vec<String>,
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Validates rows and derives the vocabulary.
    pub fn new(rows: Vec<ManifestRow>, base_dir: PathBuf) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation(
                "manifest has no rows, so its domain vocabulary would be empty".into(),
            ));
        }
        let mut paths = HashSet::new();
        let mut others = BTreeSet::new();
        for r in &rows {
            if !paths.insert(r.path.as_str()) {
                return Err(Error::Validation(format!("duplicate path `{}`", r.path)));
            }
            if (r.label == Label::Real) != (r.domain == REAL_DOMAIN) {
                return Err(Error::Validation(format!(
                    "`{}`: label {} does not match domain `{}`",
                    r.path, r.label, r.domain
                )));
            }
            if r.seen.is_some() && r.split != Split::Test {
                return Err(Error::Validation(format!(
                    "`{}`: seen flag is only allowed on test rows",
                    r.path
                )));
            }
            if r.domain != REAL_DOMAIN {
                others.insert(r.domain.clone());
            }
        }
        let mut domain_vocabulary = vec![REAL_DOMAIN.to_string()];
        domain_vocabulary.extend(others);
        Ok(Self {
            rows,
            domain_vocabulary,
            base_dir,
        })
    }

    pub fn domain_index(&self, domain: &str) -> Option<usize> {
        self.domain_vocabulary.iter().position(|d| d == domain)
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Whether a fake domain counts as seen in `split`. Domains without any
    /// flag count as seen.
    pub fn domain_is_seen(&self, domain: &str, split: Split) -> bool {
        self.rows_in(split)
            .filter(|r| r.domain == domain)
            .find_map(|r| r.seen)
            .unwrap_or(true)
    }

    /// CSV text that [`parse_manifest`] reads back to the same rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.rows {
            let seen = match r.seen {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            let (label, split) = (r.label.to_string(), r.split.to_string());
            w.write_record([r.path.as_str(), &label, &r.domain, &split, seen])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
    }
}

/// Parses manifest CSV text. `origin` names the source in error messages.
pub fn parse_manifest(text: &str, origin: &str, base_dir: PathBuf) -> Result<Manifest> {
    let perr = |line: usize, msg: String| Error::Parse {
        origin: origin.to_string(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| perr(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(perr(1, format!("header must be `{}`", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != HEADER.len() {
            return Err(perr(line, format!("expected 5 fields, found {}", rec.len())));
        }
        let path = rec[0].to_string();
        if path.is_empty() {
            return Err(perr(line, "empty path".into()));
        }
        let label: Label = rec[1].parse().map_err(|e| perr(line, e))?;
        let domain = rec[2].to_string();
        if domain.is_empty() {
            return Err(perr(line, "empty domain".into()));
        }
        let split: Split = rec[3]
            .parse()
            .map_err(|e: String| Error::Validation(format!("{origin}:{line}: {e}")))?;
        let seen = match &rec[4] {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => return Err(perr(line, format!("seen must be 0, 1 or empty, got `{other}`"))),
        };
        rows.push(ManifestRow {
            path,
            label,
            domain,
            split,
            seen,
        });
    }
    Manifest::new(rows, base_dir)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &path.display().to_string(), base)
}
