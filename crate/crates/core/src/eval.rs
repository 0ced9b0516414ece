//! Leave-one-subject-out protocols, classification metrics and the ablation
//! variants.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{HiddenLabels, LabeledSet, SubjectDataset, UnlabeledSet};
use crate::error::{Error, Result};
use crate::net::{self, ModelParams};
use crate::trainer::{self, AblationFlags, TrainConfig};

/// The six ablation settings, from source-only training to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "EXP1")]
    Exp1,
    #[serde(rename = "EXP2")]
    Exp2,
    #[serde(rename = "EXP3")]
    Exp3,
    #[serde(rename = "EXP4")]
    Exp4,
    #[serde(rename = "EXP5")]
    Exp5,
    #[serde(rename = "EXP6")]
    Exp6,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Exp1,
        Variant::Exp2,
        Variant::Exp3,
        Variant::Exp4,
        Variant::Exp5,
        Variant::Exp6,
    ];

    pub fn flags(self) -> AblationFlags {
        let (use_mmd, use_cmmd, dynamic_weights, confidence_filter) = match self {
            Variant::Exp1 => (false, false, false, false),
            Variant::Exp2 => (true, false, false, false),
            Variant::Exp3 => (false, true, false, false),
            Variant::Exp4 => (true, true, false, false),
            Variant::Exp5 => (true, true, true, false),
            Variant::Exp6 => (true, true, true, true),
        };
        AblationFlags {
            use_mmd,
            use_cmmd,
            dynamic_weights,
            confidence_filter,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Exp1 => "EXP1",
            Variant::Exp2 => "EXP2",
            Variant::Exp3 => "EXP3",
            Variant::Exp4 => "EXP4",
            Variant::Exp5 => "EXP5",
            Variant::Exp6 => "EXP6",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::OutOfRange {
                key: "variant".into(),
                message: format!("expected one of EXP1..EXP6, got `{s}`"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// One session per subject on both sides of the split.
    #[default]
    SingleSession,
    /// Every session of the held-out subject is the target.
    CrossSession,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::SingleSession => "single-session",
            Protocol::CrossSession => "cross-session",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-session" | "single_session" => Ok(Protocol::SingleSession),
            "cross-session" | "cross_session" => Ok(Protocol::CrossSession),
            _ => Err(Error::OutOfRange {
                key: "protocol".into(),
                message: format!("expected single-session or cross-session, got `{s}`"),
            }),
        }
    }
}

/// One leave-one-subject-out split.
#[derive(Debug, Clone)]
pub struct Fold {
    pub subject: String,
    pub source: LabeledSet,
    pub target: UnlabeledSet,
    pub target_labels: HiddenLabels,
}

/// Holds out `subject` as the target and pools everyone else as the source.
/// `session_index` selects the session used by the single-session protocol.
pub fn loso_split(
    dataset: &SubjectDataset,
    subject: &str,
    protocol: Protocol,
    session_index: usize,
) -> Result<Fold> {
    if dataset.subject(subject).is_none() {
        return Err(Error::UnknownSubject(subject.to_string()));
    }
    if dataset.subjects.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two subjects for a split".into(),
        ));
    }
    let mut source_parts = Vec::new();
    let mut target_parts = Vec::new();
    for s in &dataset.subjects {
        let parts: Vec<&LabeledSet> = match protocol {
            Protocol::SingleSession => {
                let session =
                    s.sessions
                        .get(session_index)
                        .ok_or_else(|| Error::MissingSession {
                            subject: s.id.clone(),
                            index: session_index,
                        })?;
                vec![&session.data]
            }
            Protocol::CrossSession => s.sessions.iter().map(|x| &x.data).collect(),
        };
        if s.id == subject {
            target_parts.extend(parts);
        } else {
            source_parts.extend(parts);
        }
    }
    let source = LabeledSet::concat(&source_parts)?;
    let (target, target_labels) = LabeledSet::concat(&target_parts)?.hide_labels();
    Ok(Fold {
        subject: subject.to_string(),
        source,
        target,
        target_labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    /// `None` for classes absent from the evaluated set.
    pub recall: Vec<Option<f64>>,
}

impl Metrics {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::dim("prediction count", truth.len(), predicted.len()));
        }
        if truth.is_empty() {
            return Err(Error::Empty("evaluation set".into()));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            for label in [p, t] {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
            }
            confusion[t][p] += 1;
        }
        let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let recall = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Ok(Self {
            accuracy: trace as f64 / truth.len() as f64,
            confusion,
            recall,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Eval-mode accuracy and confusion matrix of `params` on a labeled set.
pub fn evaluate(params: &ModelParams, data: &LabeledSet) -> Result<Metrics> {
    let shape = params.shape();
    if data.dim() != shape.input_dim {
        return Err(Error::dim(
            "evaluation feature dimension",
            shape.input_dim,
            data.dim(),
        ));
    }
    if data.classes() != shape.classes {
        return Err(Error::dim(
            "evaluation class count",
            shape.classes,
            data.classes(),
        ));
    }
    let predicted = trainer::predict_labels(data.features(), params)?;
    Metrics::from_predictions(&predicted, data.labels(), shape.classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub subject: String,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub variant: Variant,
    pub protocol: Protocol,
    pub session_index: usize,
    pub config_hash: String,
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    /// Population standard deviation of the fold accuracies.
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ProtocolSummary {
    pub fn new(
        variant: Variant,
        protocol: Protocol,
        session_index: usize,
        config_hash: String,
        folds: Vec<FoldResult>,
    ) -> Self {
        let accs: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        Self {
            variant,
            protocol,
            session_index,
            config_hash,
            folds,
            mean,
            std,
        }
    }

    /// `mean±std` in percent with two decimals, std zero-padded to width 5.
    pub fn headline(&self) -> String {
        format!("{:.2}±{:05.2}", 100.0 * self.mean, 100.0 * self.std)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per fold plus a final `mean` row carrying mean and std.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record([
            "variant",
            "protocol",
            "fold",
            "seed",
            "accuracy",
            "std",
            "confusion",
            "config_hash",
        ])
        .map_err(io)?;
        for f in &self.folds {
            let confusion = f
                .metrics
                .confusion
                .iter()
                .map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                self.variant.name(),
                self.protocol.name(),
                &f.subject,
                &f.seed.to_string(),
                &format!("{:?}", f.metrics.accuracy),
                "",
                &confusion,
                &self.config_hash,
            ])
            .map_err(io)?;
        }
        w.write_record([
            self.variant.name(),
            self.protocol.name(),
            "mean",
            "",
            &format!("{:?}", self.mean),
            &format!("{:?}", self.std),
            "",
            &self.config_hash,
        ])
        .map_err(io)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Settings for a full protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub protocol: Protocol,
    pub session_index: usize,
    pub variant: Variant,
    /// Base config; the variant's flags replace `train.flags`.
    pub train: TrainConfig,
    pub jobs: usize,
    /// Per-fold histories go here as `<variant>_<subject>_history.csv`.
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
}

impl ProtocolRun {
    pub fn new(protocol: Protocol, variant: Variant, train: TrainConfig) -> Self {
        Self {
            protocol,
            session_index: 0,
            variant,
            train,
            jobs: 1,
            out_dir: None,
            config_hash: String::new(),
        }
    }
}

fn run_fold(dataset: &SubjectDataset, run: &ProtocolRun, index: usize) -> Result<FoldResult> {
    let subject = &dataset.subjects[index].id;
    let fold = loso_split(dataset, subject, run.protocol, run.session_index)?;
    let mut cfg = run.train.clone();
    cfg.flags = run.variant.flags();
    cfg.seed = run.train.seed.wrapping_add(index as u64);
    let outcome = trainer::train(&fold.source, &fold.target, &cfg)?;
    if let Some(dir) = &run.out_dir {
        let path = dir.join(format!("{}_{}_history.csv", run.variant, subject));
        trainer::write_history(&outcome.history, &path)?;
    }
    let metrics = evaluate(&outcome.params, &fold.target_labels.reveal(&fold.target)?)?;
    Ok(FoldResult {
        subject: subject.clone(),
        seed: cfg.seed,
        metrics,
    })
}

/// Trains and evaluates one model per held-out subject. Folds may run
/// concurrently; results come back in subject order.
pub fn run_protocol(dataset: &SubjectDataset, run: &ProtocolRun) -> Result<ProtocolSummary> {
    if dataset.subjects.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two subjects for a protocol".into(),
        ));
    }
    if let Some(dir) = &run.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<FoldResult>> = pool.install(|| {
        (0..dataset.subjects.len())
            .into_par_iter()
            .map(|i| run_fold(dataset, run, i))
            .collect()
    });
    let folds = results
        .into_iter()
        .zip(&dataset.subjects)
        .map(|(r, s)| {
            r.map_err(|e| Error::Fold {
                fold: s.id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolSummary::new(
        run.variant,
        run.protocol,
        run.session_index,
        run.config_hash.clone(),
        folds,
    ))
}

/// One block of rows for [`dump_embeddings`].
pub struct EmbeddingInput<'a> {
    pub domain: &'a str,
    pub features: ArrayView2<'a, f64>,
    pub labels: Option<&'a [usize]>,
}

/// Writes eval-mode extractor outputs as CSV: `domain,label,f0..`.
/// Missing labels are left blank.
pub fn dump_embeddings(
    params: &ModelParams,
    inputs: &[EmbeddingInput<'_>],
    path: &Path,
) -> Result<()> {
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let width = params.shape().hidden2;
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(io)?;
    for input in inputs {
        if let Some(l) = input.labels {
            if l.len() != input.features.nrows() {
                return Err(Error::dim(
                    "embedding labels",
                    input.features.nrows(),
                    l.len(),
                ));
            }
        }
        let z = net::embed(input.features, params)?;
        for (i, row) in z.rows().into_iter().enumerate() {
            let mut rec = Vec::with_capacity(width + 2);
            rec.push(input.domain.to_string());
            rec.push(input.labels.map(|l| l[i].to_string()).unwrap_or_default());
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
