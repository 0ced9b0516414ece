//! Run configuration file.
//!
//! A flat TOML document; every key is optional and unknown keys are
//! rejected. Synthetic-data settings live in an optional `[synth]` table.
//!
//! ```toml
//! batch_size = 128
//! epochs = 100
//! variant = "EXP6"
//! protocol = "single-session"
//!
//! [synth]
//! domain_shift = 2.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{Protocol, Variant};
use crate::kernel::{KernelConfig, SigmaMode};
use crate::schedule::{AlphaDecay, ScheduleConfig};
use crate::synth::SynthShiftConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dropout: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub lr_extractor: f64,
    pub lr_classifier: f64,
    pub tau_h: f64,
    pub tau_l: f64,
    pub alpha_decay: AlphaDecay,
    pub rho0: f64,
    pub rho1: f64,
    pub stage_epochs: [usize; 3],
    pub conf1: f64,
    pub conf2: f64,
    pub sigma_mode: SigmaMode,
    pub sigma: f64,
    pub variant: Variant,
    pub protocol: Protocol,
    pub session_index: usize,
    pub jobs: usize,
    pub synth_subjects: usize,
    pub synth_sessions: usize,
    pub synth: SynthShiftConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = &t.schedule;
        Self {
            batch_size: t.batch_size,
            epochs: s.total_epochs,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: t.seed,
            dropout: t.dropout,
            hidden1: t.hidden1,
            hidden2: t.hidden2,
            classes: None,
            lr_extractor: s.lr_extractor,
            lr_classifier: s.lr_classifier,
            tau_h: s.tau_h,
            tau_l: s.tau_l,
            alpha_decay: s.alpha_decay,
            rho0: s.rho0,
            rho1: s.rho1,
            stage_epochs: s.stage_epochs,
            conf1: s.conf1,
            conf2: s.conf2,
            sigma_mode: t.kernel.sigma_mode,
            sigma: t.kernel.sigma,
            variant: Variant::Exp6,
            protocol: Protocol::SingleSession,
            session_index: 0,
            jobs: 1,
            synth_subjects: 5,
            synth_sessions: 1,
            synth: SynthShiftConfig::default(),
        }
    }
}

/// Named starting points for a run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Batch 128, 100 epochs.
    Default,
    /// Batch 32, 10 epochs.
    Short,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "short" => Ok(Preset::Short),
            _ => Err(Error::OutOfRange {
                key: "preset".into(),
                message: format!("expected default or short, got `{s}`"),
            }),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Default => Self::default(),
            Preset::Short => Self {
                batch_size: 32,
                epochs: 10,
                ..Self::default()
            },
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            tau_h: self.tau_h,
            tau_l: self.tau_l,
            alpha_decay: self.alpha_decay,
            rho0: self.rho0,
            rho1: self.rho1,
            stage_epochs: self.stage_epochs,
            conf1: self.conf1,
            conf2: self.conf2,
            total_epochs: self.epochs,
            lr_extractor: self.lr_extractor,
            lr_classifier: self.lr_classifier,
        }
    }

    /// Training settings with the configured variant's ablation flags.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            dropout: self.dropout,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            classes: self.classes,
            kernel: KernelConfig {
                sigma_mode: self.sigma_mode,
                sigma: self.sigma,
            },
            schedule: self.schedule(),
            flags: self.variant.flags(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::OutOfRange {
                key: "epochs".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.jobs == 0 {
            return Err(Error::OutOfRange {
                key: "jobs".into(),
                message: "must be >= 1".into(),
            });
        }
        if let Some(c) = self.classes {
            if c < 2 {
                return Err(Error::OutOfRange {
                    key: "classes".into(),
                    message: format!("must be >= 2, got {c}"),
                });
            }
        }
        self.train_config().validate()?;
        self.synth.validate()
    }

    /// Canonical TOML text; parsing it back gives an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    /// SHA-256 of [`RunConfig::to_toml`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates config text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.batch_size, c.epochs), (128, 100));
        assert_eq!((c.momentum, c.weight_decay), (0.9, 5e-4));
        assert_eq!((c.tau_h, c.tau_l, c.rho0, c.rho1), (1.0, 0.01, 0.1, 0.15));
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn out_of_range_names_key() {
        let err = parse_config_str("momentum = 1.5").unwrap_err();
        assert!(
            matches!(&err, Error::OutOfRange { key, .. } if key == "momentum"),
            "{err}"
        );
        assert!(err.is_validation());
        let err = parse_config_str("[synth]\nnoise = -2.0").unwrap_err();
        assert!(err.to_string().contains("synth.noise"));
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(matches!(
            parse_config_str("learning_rate = 0.1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config_str("epochs = \"ten\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config_str("[synth]\nfoo = 1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn epoch_override_and_short_preset() {
        let c = parse_config_str("epochs = 10").unwrap();
        assert_eq!(c.epochs, 10);
        assert_eq!(c.train_config().epochs(), 10);
        let s = RunConfig::preset(Preset::Short);
        assert_eq!((s.batch_size, s.epochs), (32, 10));
    }

    #[test]
    fn enums_parse_from_text() {
        let c = parse_config_str(
            "variant = \"EXP3\"\nprotocol = \"cross-session\"\nsigma_mode = \"fixed\"\nsigma = 2.0",
        )
        .unwrap();
        assert_eq!(c.variant, Variant::Exp3);
        assert_eq!(c.protocol, Protocol::CrossSession);
        assert_eq!(c.train_config().kernel, KernelConfig::fixed(2.0));
        assert!(!c.train_config().flags.use_mmd);
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let c = parse_config_str(
            "epochs = 7\nclasses = 4\nseed = 11\n[synth]\nrotations = [0.1, 0.2, 0.3]",
        )
        .unwrap();
        let back = parse_config_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn file_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "epochs = [").unwrap();
        assert!(parse_config(&p)
            .unwrap_err()
            .to_string()
            .contains("bad.toml"));
        assert!(matches!(
            parse_config(&dir.path().join("none.toml")),
            Err(Error::Io { .. })
        ));
    }
}
