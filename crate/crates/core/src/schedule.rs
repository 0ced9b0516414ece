//! Per-epoch scalar schedules: the MMD weight α, the CMMD weight β, the
//! pseudo-label confidence threshold τ and the annealed learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the α decay between its two endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaDecay {
    #[default]
    Linear,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// α at the first epoch.
    pub tau_h: f64,
    /// α at the last epoch.
    pub tau_l: f64,
    pub alpha_decay: AlphaDecay,
    /// Below this source loss β = 1.
    pub rho0: f64,
    /// At or above this source loss β = 0.
    pub rho1: f64,
    /// Epochs at which the confidence threshold enters the middle, late and
    /// final stages.
    pub stage_epochs: [usize; 3],
    /// Middle-stage confidence threshold.
    pub conf1: f64,
    /// Late-stage confidence threshold.
    pub conf2: f64,
    pub total_epochs: usize,
    /// Base learning rate of the feature extractor.
    pub lr_extractor: f64,
    /// Base learning rate of the classifier head.
    pub lr_classifier: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            tau_h: 1.0,
            tau_l: 0.01,
            alpha_decay: AlphaDecay::Linear,
            rho0: 0.1,
            rho1: 0.15,
            stage_epochs: [10, 40, 85],
            conf1: 0.5,
            conf2: 0.75,
            total_epochs: 100,
            lr_extractor: 0.001,
            lr_classifier: 0.01,
        }
    }
}

fn out_of_range(key: &str, message: impl Into<String>) -> Error {
    Error::OutOfRange {
        key: key.to_string(),
        message: message.into(),
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_l > 0.0) {
            return Err(out_of_range(
                "tau_l",
                format!("must be > 0, got {}", self.tau_l),
            ));
        }
        if !(self.tau_h >= self.tau_l) || !self.tau_h.is_finite() {
            return Err(out_of_range(
                "tau_h",
                format!(
                    "must be finite and >= tau_l ({}), got {}",
                    self.tau_l, self.tau_h
                ),
            ));
        }
        if !(self.rho0 > 0.0) {
            return Err(out_of_range(
                "rho0",
                format!("must be > 0, got {}", self.rho0),
            ));
        }
        if !(self.rho1 > self.rho0) || !self.rho1.is_finite() {
            return Err(out_of_range(
                "rho1",
                format!(
                    "must be finite and > rho0 ({}), got {}",
                    self.rho0, self.rho1
                ),
            ));
        }
        let [e1, e2, e3] = self.stage_epochs;
        if !(e1 < e2 && e2 < e3) {
            return Err(out_of_range(
                "stage_epochs",
                format!("must be strictly increasing, got {:?}", self.stage_epochs),
            ));
        }
        if !(0.0..=1.0).contains(&self.conf1) {
            return Err(out_of_range(
                "conf1",
                format!("must lie in [0, 1], got {}", self.conf1),
            ));
        }
        if !(self.conf1..=1.0).contains(&self.conf2) {
            return Err(out_of_range(
                "conf2",
                format!("must lie in [conf1, 1], got {}", self.conf2),
            ));
        }
        if self.total_epochs == 0 {
            return Err(out_of_range("epochs", "must be >= 1"));
        }
        for (key, lr) in [
            ("lr_extractor", self.lr_extractor),
            ("lr_classifier", self.lr_classifier),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(out_of_range(
                    key,
                    format!("must be finite and > 0, got {lr}"),
                ));
            }
        }
        Ok(())
    }
}

/// Values of every schedule at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lr_extractor: f64,
    pub lr_classifier: f64,
}

/// MMD weight, decaying from `tau_h` at epoch 0 to `tau_l` at the final epoch.
pub fn alpha_at(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(out_of_range(
            "epoch",
            format!("{epoch} is outside 0..{}", cfg.total_epochs),
        ));
    }
    if cfg.total_epochs == 1 {
        return Ok(cfg.tau_h);
    }
    let last = cfg.total_epochs - 1;
    if epoch == last {
        return Ok(cfg.tau_l);
    }
    let t = epoch as f64 / last as f64;
    Ok(match cfg.alpha_decay {
        AlphaDecay::Linear => cfg.tau_h - (cfg.tau_h - cfg.tau_l) * t,
        AlphaDecay::Exponential => cfg.tau_h * (cfg.tau_l / cfg.tau_h).powf(t),
    })
}

/// CMMD weight as a step function of the current source classification loss.
///
/// Intervals are half-open: `[0, rho0)` gives 1, `[rho0, rho1)` gives 0.5 and
/// anything from `rho1` upward gives 0.
pub fn beta_of(l_ds: f64, cfg: &ScheduleConfig) -> f64 {
    if l_ds < cfg.rho0 {
        1.0
    } else if l_ds < cfg.rho1 {
        0.5
    } else {
        0.0
    }
}

/// Staged pseudo-label confidence threshold.
pub fn confidence_threshold(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let [e1, e2, e3] = cfg.stage_epochs;
    if epoch < e1 {
        0.0
    } else if epoch < e2 {
        cfg.conf1
    } else if epoch <= e3 {
        cfg.conf2
    } else {
        1.0
    }
}

/// Annealed learning rate `base / (1 + 10 p)^0.75` with `p = epoch / total_epochs`.
pub fn learning_rate(epoch: usize, base_lr: f64, total_epochs: usize) -> f64 {
    let p = epoch as f64 / total_epochs.max(1) as f64;
    base_lr / (1.0 + 10.0 * p).powf(0.75)
}

/// Every schedule except β, which depends on the step's source loss.
pub fn state_at(epoch: usize, cfg: &ScheduleConfig) -> Result<ScheduleState> {
    Ok(ScheduleState {
        epoch,
        alpha: alpha_at(epoch, cfg)?,
        beta: 0.0,
        tau: confidence_threshold(epoch, cfg),
        lr_extractor: learning_rate(epoch, cfg.lr_extractor, cfg.total_epochs),
        lr_classifier: learning_rate(epoch, cfg.lr_classifier, cfg.total_epochs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alpha_endpoints_and_midpoint() {
        let cfg = ScheduleConfig::default();
        assert_eq!(alpha_at(0, &cfg).unwrap(), 1.0);
        assert_eq!(alpha_at(99, &cfg).unwrap(), 0.01);
        let mid = alpha_at(49, &cfg).unwrap();
        assert!((mid - 0.51).abs() < 1e-12, "{mid}");
        assert!(alpha_at(100, &cfg).is_err());
    }

    #[test]
    fn alpha_exponential_endpoints() {
        let cfg = ScheduleConfig {
            alpha_decay: AlphaDecay::Exponential,
            ..Default::default()
        };
        assert_eq!(alpha_at(0, &cfg).unwrap(), 1.0);
        assert_eq!(alpha_at(99, &cfg).unwrap(), 0.01);
        // geometric midpoint of 1 and 0.01 at t = 0.5
        let cfg = ScheduleConfig {
            total_epochs: 3,
            ..cfg
        };
        assert!((alpha_at(1, &cfg).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_epoch_run_uses_tau_h() {
        let cfg = ScheduleConfig {
            total_epochs: 1,
            ..Default::default()
        };
        assert_eq!(alpha_at(0, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn beta_branches() {
        let cfg = ScheduleConfig::default();
        assert_eq!(beta_of(0.05, &cfg), 1.0);
        assert_eq!(beta_of(0.12, &cfg), 0.5);
        assert_eq!(beta_of(0.15, &cfg), 0.0);
        assert_eq!(beta_of(0.10, &cfg), 0.5);
        assert_eq!(beta_of(0.20, &cfg), 0.0);
    }

    #[test]
    fn confidence_stages() {
        let cfg = ScheduleConfig::default();
        assert_eq!(confidence_threshold(5, &cfg), 0.0);
        assert_eq!(confidence_threshold(9, &cfg), 0.0);
        assert_eq!(confidence_threshold(10, &cfg), 0.5);
        assert_eq!(confidence_threshold(20, &cfg), 0.5);
        assert_eq!(confidence_threshold(40, &cfg), 0.75);
        assert_eq!(confidence_threshold(50, &cfg), 0.75);
        assert_eq!(confidence_threshold(85, &cfg), 0.75);
        assert_eq!(confidence_threshold(86, &cfg), 1.0);
        assert_eq!(confidence_threshold(90, &cfg), 1.0);
    }

    #[test]
    fn learning_rate_values() {
        assert_eq!(learning_rate(0, 0.01, 100), 0.01);
        let end = learning_rate(100, 0.01, 100);
        assert!((end - 0.01 / 11f64.powf(0.75)).abs() < 1e-15);
        assert!((end - 0.001655).abs() < 1e-6, "{end}");
        let half = learning_rate(50, 0.001, 100);
        assert!((half - 0.000261).abs() < 1e-6, "{half}");
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = ScheduleConfig {
            tau_l: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ScheduleConfig {
            rho1: 0.05,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ScheduleConfig {
            stage_epochs: [10, 10, 85],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ScheduleConfig {
            conf1: 0.8,
            conf2: 0.7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(ScheduleConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn alpha_non_increasing(total in 2usize..300, decay in prop::bool::ANY) {
            let cfg = ScheduleConfig {
                total_epochs: total,
                alpha_decay: if decay { AlphaDecay::Linear } else { AlphaDecay::Exponential },
                ..Default::default()
            };
            let mut prev = f64::INFINITY;
            for e in 0..total {
                let a = alpha_at(e, &cfg).unwrap();
                prop_assert!(a <= prev);
                prop_assert!(a >= cfg.tau_l && a <= cfg.tau_h);
                prev = a;
            }
        }

        #[test]
        fn beta_non_increasing_step(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cfg = ScheduleConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(beta_of(lo, &cfg) >= beta_of(hi, &cfg));
            prop_assert!([0.0, 0.5, 1.0].contains(&beta_of(a, &cfg)));
        }

        #[test]
        fn threshold_non_decreasing(e in 0usize..200) {
            let cfg = ScheduleConfig::default();
            prop_assert!(confidence_threshold(e, &cfg) <= confidence_threshold(e + 1, &cfg));
        }

        #[test]
        fn lr_strictly_decreasing(e in 0usize..500, base in 1e-5f64..1.0) {
            prop_assert!(learning_rate(e + 1, base, 100) < learning_rate(e, base, 100));
        }
    }
}
