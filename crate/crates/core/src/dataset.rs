//! In-memory datasets, the feature file format and manifest loading.
//!
//! Feature files come in two equivalent encodings.
//!
//! Text: one header line, then one row per sample.
//!
//! ```text
//! # dynalign-features v1 n_samples=2 feature_dim=3 has_labels=1 classes=3
//! 0.5,1.25,-2,0
//! 0.125,3,1e-7,2
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! `f64`, so the text form round-trips bit-exactly. With `has_labels=1` the
//! last field of each row is the class id.
//!
//! Binary (little-endian): the 8-byte magic `DALFEAT1`, `n_samples: u64`,
//! `feature_dim: u64`, `has_labels: u8`, `classes: u64`, then for each row
//! `feature_dim` `f64` values followed by a `u64` label when labeled.
//!
//! Manifests are CSV files with a `subject,session,path` header (an optional
//! fourth `role` column is accepted and kept). Paths are relative to the
//! manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::Deserialize;

use crate::error::{Error, Result};

const BINARY_MAGIC: &[u8; 8] = b"DALFEAT1";
const TEXT_TAG: &str = "dynalign-features v1";

/// Features with class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != features.nrows() {
            return Err(Error::dim("labels", features.nrows(), labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Stacks sets row-wise.
    pub fn concat(parts: &[&LabeledSet]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("no labeled sets to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        for p in parts {
            if p.dim() != first.dim() {
                return Err(Error::dim(
                    "concatenated feature dimension",
                    first.dim(),
                    p.dim(),
                ));
            }
        }
        let features = ndarray::concatenate(Axis(0), &views).expect("checked columns");
        let labels = parts
            .iter()
            .flat_map(|p| p.labels.iter().copied())
            .collect();
        let classes = parts.iter().map(|p| p.classes).max().unwrap_or(0);
        Self::new(features, labels, classes)
    }

    /// Separates the labels so the features can be handed to training as unlabeled data.
    pub fn hide_labels(self) -> (UnlabeledSet, HiddenLabels) {
        (
            UnlabeledSet {
                features: self.features,
            },
            HiddenLabels {
                labels: self.labels,
                classes: self.classes,
            },
        )
    }
}

/// Features without labels; the only form of target data training accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Array2<f64>,
}

impl UnlabeledSet {
    pub fn new(features: Array2<f64>) -> Self {
        Self { features }
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Target labels kept aside for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLabels {
    labels: Vec<usize>,
    classes: usize,
}

impl HiddenLabels {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Rejoins features and labels for evaluation.
    pub fn reveal(&self, target: &UnlabeledSet) -> Result<LabeledSet> {
        LabeledSet::new(target.features.clone(), self.labels.clone(), self.classes)
    }
}

/// Contents of one feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub features: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
}

impl FeatureFile {
    pub fn labeled(set: &LabeledSet) -> Self {
        Self {
            features: set.features.clone(),
            labels: Some(set.labels.clone()),
            classes: set.classes,
        }
    }

    pub fn unlabeled(set: &UnlabeledSet) -> Self {
        Self {
            features: set.features.clone(),
            labels: None,
            classes: 0,
        }
    }

    pub fn into_labeled(self, path: &Path) -> Result<LabeledSet> {
        let labels = self
            .labels
            .ok_or_else(|| Error::format(path, "file has no labels"))?;
        LabeledSet::new(self.features, labels, self.classes)
    }

    pub fn to_text(&self) -> String {
        let (n, d) = self.features.dim();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {TEXT_TAG} n_samples={n} feature_dim={d} has_labels={} classes={}",
            u8::from(self.labels.is_some()),
            self.classes
        );
        for (i, row) in self.features.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:?}");
            }
            if let Some(labels) = &self.labels {
                if d > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", labels[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let (n, d) = self.features.dim();
        let mut out = Vec::with_capacity(33 + n * (d + 1) * 8);
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.push(u8::from(self.labels.is_some()));
        out.extend_from_slice(&(self.classes as u64).to_le_bytes());
        for (i, row) in self.features.rows().into_iter().enumerate() {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(labels) = &self.labels {
                out.extend_from_slice(&(labels[i] as u64).to_le_bytes());
            }
        }
        out
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let file = if bytes.starts_with(BINARY_MAGIC) {
            Self::parse_binary(bytes, path)?
        } else {
            let text = std::str::from_utf8(bytes)
                .map_err(|_| Error::format(path, "neither a binary feature file nor UTF-8 text"))?;
            Self::parse_text(text, path)?
        };
        if let Some(labels) = &file.labels {
            if let Some(&l) = labels.iter().find(|&&l| l >= file.classes) {
                return Err(Error::format(
                    path,
                    format!("label {l} out of range for {} classes", file.classes),
                ));
            }
        }
        Ok(file)
    }

    fn parse_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::format(path, "missing `#` header line"))?;
        let header = header
            .trim()
            .strip_prefix(TEXT_TAG)
            .ok_or_else(|| Error::format(path, format!("header must start with `{TEXT_TAG}`")))?;
        let (mut n, mut d, mut has_labels, mut classes) = (None, None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad header field `{field}`")))?;
            let parsed: usize = value
                .parse()
                .map_err(|_| Error::format(path, format!("bad value for `{key}`: `{value}`")))?;
            match key {
                "n_samples" => n = Some(parsed),
                "feature_dim" => d = Some(parsed),
                "has_labels" => has_labels = Some(parsed != 0),
                "classes" => classes = Some(parsed),
                _ => return Err(Error::format(path, format!("unknown header field `{key}`"))),
            }
        }
        let missing = |k: &str| Error::format(path, format!("header lacks `{k}`"));
        let n = n.ok_or_else(|| missing("n_samples"))?;
        let d = d.ok_or_else(|| missing("feature_dim"))?;
        let has_labels = has_labels.ok_or_else(|| missing("has_labels"))?;
        let classes = classes.ok_or_else(|| missing("classes"))?;

        let mut features = Array2::zeros((n, d));
        let mut labels = has_labels.then(|| Vec::with_capacity(n));
        let mut rows = 0;
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            if i >= n {
                return Err(Error::format(path, format!("more than {n} rows")));
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let expected = d + usize::from(has_labels);
            if fields.len() != expected {
                return Err(Error::format(
                    path,
                    format!("row {i}: expected {expected} fields, got {}", fields.len()),
                ));
            }
            for j in 0..d {
                features[[i, j]] = fields[j].parse().map_err(|_| {
                    Error::format(path, format!("row {i}: bad value `{}`", fields[j]))
                })?;
            }
            if let Some(labels) = &mut labels {
                labels.push(fields[d].parse().map_err(|_| {
                    Error::format(path, format!("row {i}: bad label `{}`", fields[d]))
                })?);
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::format(
                path,
                format!("header says {n} rows, found {rows}"),
            ));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    fn parse_binary(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = BINARY_MAGIC.len();
        let mut take = |len: usize| -> Result<&[u8]> {
            let chunk = bytes
                .get(pos..pos + len)
                .ok_or_else(|| Error::format(path, "truncated binary feature file"))?;
            pos += len;
            Ok(chunk)
        };
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let n = u64_at(take(8)?) as usize;
        let d = u64_at(take(8)?) as usize;
        let has_labels = take(1)?[0] != 0;
        let classes = u64_at(take(8)?) as usize;
        let mut features = Array2::zeros((n, d));
        let mut labels = has_labels.then(|| Vec::with_capacity(n));
        for i in 0..n {
            for j in 0..d {
                features[[i, j]] = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            }
            if let Some(labels) = &mut labels {
                labels.push(u64_at(take(8)?) as usize);
            }
        }
        if pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last row"));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }

    /// Writes the binary form for a `.bin` extension and text otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "bin") {
            self.to_binary()
        } else {
            self.to_text().into_bytes()
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject: String,
    pub session: String,
    pub path: PathBuf,
    pub role: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    subject: String,
    session: String,
    path: String,
    #[serde(default)]
    role: Option<String>,
}

impl Manifest {
    /// Reads a manifest, resolving each path against the manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for row in reader.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            if !seen.insert((row.subject.clone(), row.session.clone())) {
                return Err(Error::format(
                    path,
                    format!(
                        "duplicate subject/session `{}`/`{}`",
                        row.subject, row.session
                    ),
                ));
            }
            entries.push(ManifestEntry {
                subject: row.subject,
                session: row.session,
                path: base.join(row.path),
                role: row.role.filter(|r| !r.is_empty()),
            });
        }
        Ok(Self { entries })
    }

    /// Writes a manifest with paths relative to `dir`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let io = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["subject", "session", "path"]).map_err(io)?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            w.write_record([
                e.subject.as_str(),
                e.session.as_str(),
                &rel.to_string_lossy(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub data: LabeledSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub sessions: Vec<Session>,
}

/// Labeled recordings grouped by subject and session.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    pub subjects: Vec<Subject>,
    pub classes: usize,
    pub dim: usize,
}

impl SubjectDataset {
    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }
}

/// Loads every file named in the manifest; subjects and sessions keep manifest order.
pub fn load_dataset(manifest: &Manifest) -> Result<SubjectDataset> {
    if manifest.entries.is_empty() {
        return Err(Error::Empty("manifest lists no files".into()));
    }
    let mut subjects: Vec<Subject> = Vec::new();
    let mut dim: Option<(usize, PathBuf)> = None;
    let mut classes: Option<usize> = None;
    for entry in &manifest.entries {
        let file = FeatureFile::read(&entry.path)?;
        let d = file.features.ncols();
        match &dim {
            None => dim = Some((d, entry.path.clone())),
            Some((expected, first)) if *expected != d => {
                return Err(Error::format(
                    &entry.path,
                    format!(
                        "dimension mismatch: {d} features, but {} has {expected}",
                        first.display()
                    ),
                ))
            }
            _ => {}
        }
        match classes {
            None => classes = Some(file.classes),
            Some(c) if c != file.classes => {
                return Err(Error::format(
                    &entry.path,
                    format!(
                        "declares {} classes, earlier files declare {c}",
                        file.classes
                    ),
                ))
            }
            _ => {}
        }
        let data = file.into_labeled(&entry.path)?;
        let session = Session {
            id: entry.session.clone(),
            data,
        };
        match subjects.iter_mut().find(|s| s.id == entry.subject) {
            Some(s) => s.sessions.push(session),
            None => subjects.push(Subject {
                id: entry.subject.clone(),
                sessions: vec![session],
            }),
        }
    }
    Ok(SubjectDataset {
        subjects,
        classes: classes.unwrap_or(0),
        dim: dim.map(|(d, _)| d).unwrap_or(0),
    })
}

/// Writes each session to `dir/<subject>_<session>.csv` plus `dir/manifest.csv`.
pub fn save_dataset(dataset: &SubjectDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for s in &dataset.subjects {
        for sess in &s.sessions {
            let path = dir.join(format!("{}_{}.csv", s.id, sess.id));
            FeatureFile::labeled(&sess.data).write(&path)?;
            entries.push(ManifestEntry {
                subject: s.id.clone(),
                session: sess.id.clone(),
                path,
                role: None,
            });
        }
    }
    let manifest_path = dir.join("manifest.csv");
    Manifest { entries }.write(&manifest_path)?;
    Ok(manifest_path)
}
