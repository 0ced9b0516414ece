use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dynalign::checkpoint;
use dynalign::config::{parse_config, Preset, RunConfig};
use dynalign::dataset::{
    load_dataset, save_dataset, FeatureFile, LabeledSet, Manifest, SubjectDataset, UnlabeledSet,
};
use dynalign::eval::{
    dump_embeddings, evaluate, run_protocol, EmbeddingInput, Protocol, ProtocolRun,
    ProtocolSummary, Variant,
};
use dynalign::features::{read_recording, FeatureExtractor};
use dynalign::synth::{generate_synth_shift, generate_synth_subjects};
use dynalign::trainer::{train_with_progress, write_history};
use ndarray::Array2;

#[derive(Parser, Debug)]
#[command(
    name = "dynalign",
    version,
    about = "Domain-adaptive classification of feature vectors"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named base configuration applied before the file: default or short.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// EXP1..EXP6 (`ablate` also accepts `all`).
    #[arg(long, global = true)]
    variant: Option<String>,
    /// single-session or cross-session.
    #[arg(long, global = true)]
    protocol: Option<String>,
    /// Session used by the single-session protocol (0-based).
    #[arg(long, global = true)]
    session_index: Option<usize>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    tau_h: Option<f64>,
    #[arg(long, global = true)]
    tau_l: Option<f64>,
    #[arg(long, global = true)]
    rho0: Option<f64>,
    #[arg(long, global = true)]
    rho1: Option<f64>,
    #[arg(long, global = true)]
    conf1: Option<f64>,
    #[arg(long, global = true)]
    conf2: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Differential-entropy features from a raw recording.
    ExtractFeatures {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        window_secs: f64,
        /// Label attached to every window.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Fail on silent bands instead of flooring their variance.
        #[arg(long)]
        strict: bool,
    },
    /// Generate a synthetic multi-subject dataset with a manifest.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Train one model.
    Train {
        /// Labeled source feature file.
        #[arg(long, requires = "target")]
        source: Option<PathBuf>,
        /// Target feature file; labels, if present, are ignored for training.
        #[arg(long, requires = "source")]
        target: Option<PathBuf>,
    },
    /// Accuracy and confusion matrix of a checkpoint on a labeled feature file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Leave-one-subject-out protocol for one variant.
    Protocol {
        /// Manifest path or `synth`.
        #[arg(long, default_value = "synth")]
        data: String,
    },
    /// Leave-one-subject-out protocol for one or all variants.
    Ablate {
        /// Manifest path or `synth`.
        #[arg(long, default_value = "synth")]
        data: String,
    },
    /// Write extractor outputs for external projection tools.
    DumpEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
    },
}

/// Bad input detected by the front end itself.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.preset {
        Some(p) => RunConfig::preset(p.parse::<Preset>()?),
        None => RunConfig::default(),
    };
    if let Some(path) = &c.config {
        cfg = parse_config(path)?;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = c.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        seed,
        session_index,
        jobs,
        batch_size,
        epochs,
        tau_h,
        tau_l,
        rho0,
        rho1,
        conf1,
        conf2
    );
    if let Some(p) = &c.protocol {
        cfg.protocol = p.parse::<Protocol>()?;
    }
    if let Some(v) = &c.variant {
        if !v.eq_ignore_ascii_case("all") {
            cfg.variant = v.parse::<Variant>()?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_resolved(&out.join("config.resolved"))?;
    Ok(())
}

fn read_labeled(path: &Path) -> Result<LabeledSet> {
    Ok(FeatureFile::read(path)?.into_labeled(path)?)
}

fn load_subjects(data: &str, cfg: &RunConfig) -> Result<SubjectDataset> {
    if data == "synth" {
        Ok(generate_synth_subjects(
            &cfg.synth,
            cfg.synth_subjects,
            cfg.synth_sessions,
        )?)
    } else {
        Ok(load_dataset(&Manifest::read(Path::new(data))?)?)
    }
}

fn run_variant(
    ds: &SubjectDataset,
    cfg: &RunConfig,
    variant: Variant,
    out: &Path,
) -> Result<ProtocolSummary> {
    let run = ProtocolRun {
        session_index: cfg.session_index,
        jobs: cfg.jobs,
        out_dir: Some(out.to_path_buf()),
        config_hash: cfg.hash(),
        ..ProtocolRun::new(cfg.protocol, variant, cfg.train_config())
    };
    let summary = run_protocol(ds, &run)?;
    summary.write_json(&out.join(format!("{variant}_summary.json")))?;
    summary.write_csv(&out.join(format!("{variant}_summary.csv")))?;
    for f in &summary.folds {
        println!(
            "{variant} fold {} accuracy {:.4}",
            f.subject, f.metrics.accuracy
        );
    }
    println!("{variant} {} {}", summary.protocol, summary.headline());
    Ok(summary)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let out = cli.common.out.as_path();
    println!("seed: {}", cfg.seed);
    prepare_out(out, &cfg)?;

    match cli.command {
        Command::ExtractFeatures {
            input,
            window_secs,
            label,
            classes,
            strict,
        } => {
            if let Some(l) = label {
                if l >= classes {
                    return Err(invalid(format!(
                        "--label {l} out of range for {classes} classes"
                    )));
                }
            }
            let rec = read_recording(&input)?;
            let extractor = FeatureExtractor {
                variance_floor: if strict {
                    None
                } else {
                    FeatureExtractor::default().variance_floor
                },
                ..FeatureExtractor::default()
            };
            let mut rows = Vec::new();
            let mut dim = 0;
            let windows = rec.windows(window_secs)?;
            for (i, w) in windows.iter().enumerate() {
                let fv = extractor.extract(w)?;
                for (ch, band) in &fv.floored {
                    eprintln!(
                        "window {i}: channel {ch} band {} floored",
                        extractor.bands[*band].name
                    );
                }
                dim = fv.values.len();
                rows.extend(fv.values);
            }
            let features = Array2::from_shape_vec((windows.len(), dim), rows)?;
            let file = FeatureFile {
                labels: label.map(|l| vec![l; windows.len()]),
                features,
                classes,
            };
            let path = out.join("features.csv");
            file.write(&path)?;
            println!(
                "wrote {} windows x {dim} features to {}",
                windows.len(),
                path.display()
            );
        }
        Command::Synth { subjects, sessions } => {
            let ds = generate_synth_subjects(
                &cfg.synth,
                subjects.unwrap_or(cfg.synth_subjects),
                sessions.unwrap_or(cfg.synth_sessions),
            )?;
            let manifest = save_dataset(&ds, out)?;
            println!(
                "wrote {} subjects to {}",
                ds.subjects.len(),
                manifest.display()
            );
        }
        Command::Train { source, target } => {
            let (src, tgt, hidden) = match (source, target) {
                (Some(s), Some(t)) => {
                    let src = read_labeled(&s)?;
                    let tgt = UnlabeledSet::new(FeatureFile::read(&t)?.features);
                    (src, tgt, None)
                }
                _ => {
                    let task = generate_synth_shift(&cfg.synth)?;
                    (task.source, task.target, Some(task.target_labels))
                }
            };
            let mut last_epoch = usize::MAX;
            let outcome = train_with_progress(&src, &tgt, &cfg.train_config(), |r| {
                if r.epoch != last_epoch {
                    last_epoch = r.epoch;
                    if r.epoch % 10 == 0 || r.epoch + 1 == cfg.epochs {
                        println!(
                            "epoch {} l_ds {:.4} l_mmd {:.4} l_cmmd {:.4} alpha {:.3} beta {} tau {}",
                            r.epoch, r.l_ds, r.l_mmd, r.l_cmmd, r.alpha, r.beta, r.tau
                        );
                    }
                }
            })?;
            let ckpt = out.join("model.ckpt");
            checkpoint::save(&outcome.params, &ckpt)?;
            write_history(&outcome.history, &out.join("history.csv"))?;
            if let Some(labels) = hidden {
                let m = evaluate(&outcome.params, &labels.reveal(&tgt)?)?;
                println!("target accuracy {:.4}", m.accuracy);
            }
            println!(
                "checkpoint {} sha256 {}",
                ckpt.display(),
                checkpoint::digest(&outcome.params)
            );
        }
        Command::Evaluate { model, data } => {
            let params = checkpoint::load(&model)?;
            let set = read_labeled(&data)?;
            let m = evaluate(&params, &set)?;
            std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&m)?)?;
            println!("accuracy {:.4}", m.accuracy);
            for row in &m.confusion {
                println!(
                    "{}",
                    row.iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
        }
        Command::Protocol { data } => {
            let ds = load_subjects(&data, &cfg)?;
            run_variant(&ds, &cfg, cfg.variant, out)?;
        }
        Command::Ablate { data } => {
            let ds = load_subjects(&data, &cfg)?;
            let all = cli
                .common
                .variant
                .as_deref()
                .is_some_and(|v| v.eq_ignore_ascii_case("all"));
            let variants: Vec<Variant> = if all {
                Variant::ALL.to_vec()
            } else {
                vec![cfg.variant]
            };
            for v in variants {
                run_variant(&ds, &cfg, v, out)?;
            }
        }
        Command::DumpEmbeddings {
            model,
            source,
            target,
        } => {
            let params = checkpoint::load(&model)?;
            let src = FeatureFile::read(&source)?;
            let tgt = target.as_deref().map(FeatureFile::read).transpose()?;
            let mut inputs = vec![EmbeddingInput {
                domain: "source",
                features: src.features.view(),
                labels: src.labels.as_deref(),
            }];
            if let Some(t) = &tgt {
                inputs.push(EmbeddingInput {
                    domain: "target",
                    features: t.features.view(),
                    labels: t.labels.as_deref(),
                });
            }
            let path = out.join("embeddings.csv");
            dump_embeddings(&params, &inputs, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 3;
    }
    match err.downcast_ref::<dynalign::Error>() {
        Some(e) if e.is_validation() => 3,
        _ => 1,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "error: usage: {}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::from(exit_code(&e))
        }
    }
}
