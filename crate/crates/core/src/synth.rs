//! Synthetic domain-shift generator.
//!
//! Class means sit on orthonormal directions `q_c` scaled so that any two
//! means are `class_sep` apart. The target domain adds a shared offset
//! `domain_shift * u` and rotates each class mean by its own angle in the
//! plane spanned by `q_c` and a direction orthogonal to every class axis.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{HiddenLabels, LabeledSet, Session, Subject, SubjectDataset, UnlabeledSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthShiftConfig {
    pub classes: usize,
    pub dim: usize,
    /// Samples per class in each domain.
    pub n_per_class: usize,
    pub class_sep: f64,
    pub domain_shift: f64,
    /// Rotation angle per class in radians; an empty list means no rotation.
    pub rotations: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthShiftConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            dim: 16,
            n_per_class: 100,
            class_sep: 3.0,
            domain_shift: 2.0,
            rotations: vec![0.0, 0.5, -0.5],
            noise: 1.0,
            seed: 3,
        }
    }
}

impl SynthShiftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::OutOfRange {
                key: key.into(),
                message,
            })
        };
        if self.classes < 2 {
            return bad(
                "synth.classes",
                format!("must be >= 2, got {}", self.classes),
            );
        }
        if self.dim < 2 {
            return bad("synth.dim", format!("must be >= 2, got {}", self.dim));
        }
        if self.dim < self.classes + 1 && self.rotations.iter().any(|&r| r != 0.0) {
            return bad(
                "synth.dim",
                format!(
                    "rotations need dim > classes, got dim {} for {} classes",
                    self.dim, self.classes
                ),
            );
        }
        if self.dim < self.classes {
            return bad(
                "synth.dim",
                format!("must be >= classes ({}), got {}", self.classes, self.dim),
            );
        }
        if self.n_per_class == 0 {
            return bad("synth.n_per_class", "must be >= 1".into());
        }
        for (key, v) in [
            ("synth.class_sep", self.class_sep),
            ("synth.domain_shift", self.domain_shift),
            ("synth.noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and >= 0, got {v}"));
            }
        }
        if !self.rotations.is_empty() && self.rotations.len() != self.classes {
            return bad(
                "synth.rotations",
                format!(
                    "expected {} angles, got {}",
                    self.classes,
                    self.rotations.len()
                ),
            );
        }
        if self.rotations.iter().any(|r| !r.is_finite()) {
            return bad("synth.rotations", "angles must be finite".into());
        }
        Ok(())
    }

    fn rotation(&self, c: usize) -> f64 {
        self.rotations.get(c).copied().unwrap_or(0.0)
    }
}

/// A generated source/target pair; target labels are kept apart.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub source: LabeledSet,
    pub target: UnlabeledSet,
    pub target_labels: HiddenLabels,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

/// Gram-Schmidt on random draws; returns `k` orthonormal vectors.
fn orthonormal(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    basis
}

struct Geometry {
    means: Vec<Array1<f64>>,
    /// Per-class unit vector orthogonal to every class axis.
    planes: Vec<Option<Array1<f64>>>,
    axes: Vec<Array1<f64>>,
}

impl Geometry {
    fn new(cfg: &SynthShiftConfig, rng: &mut ChaCha8Rng) -> Self {
        let extra = usize::from(cfg.dim > cfg.classes);
        let basis = orthonormal(rng, cfg.dim, cfg.classes + extra);
        let axes = basis[..cfg.classes].to_vec();
        let scale = cfg.class_sep / std::f64::consts::SQRT_2;
        let means = axes.iter().map(|q| q * scale).collect();
        let planes = (0..cfg.classes)
            .map(|_| basis.get(cfg.classes).cloned())
            .collect();
        Self {
            means,
            planes,
            axes,
        }
    }

    fn target_mean(&self, c: usize, theta: f64, offset: &Array1<f64>) -> Array1<f64> {
        let base = &self.means[c];
        let rotated = match &self.planes[c] {
            Some(p) if theta != 0.0 => {
                let r = base.dot(&self.axes[c]);
                &self.axes[c] * (r * theta.cos()) + p * (r * theta.sin())
            }
            _ => base.clone(),
        };
        rotated + offset
    }
}

fn sample_domain(
    means: &[Array1<f64>],
    n_per_class: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<usize>) {
    let d = means[0].len();
    let n = means.len() * n_per_class;
    let mut x = Array2::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % means.len();
        let z = gaussian_vec(rng, d);
        x.row_mut(i).assign(&(&means[c] + &(z * noise)));
        y.push(c);
    }
    (x, y)
}

fn generate_with(
    cfg: &SynthShiftConfig,
    geometry: &Geometry,
    offset: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(LabeledSet, LabeledSet)> {
    let (xs, ys) = sample_domain(&geometry.means, cfg.n_per_class, cfg.noise, rng);
    let target_means: Vec<_> = (0..cfg.classes)
        .map(|c| geometry.target_mean(c, cfg.rotation(c), offset))
        .collect();
    let (xt, yt) = sample_domain(&target_means, cfg.n_per_class, cfg.noise, rng);
    Ok((
        LabeledSet::new(xs, ys, cfg.classes)?,
        LabeledSet::new(xt, yt, cfg.classes)?,
    ))
}

/// Draws one source/target pair.
pub fn generate_synth_shift(cfg: &SynthShiftConfig) -> Result<SynthTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geometry = Geometry::new(cfg, &mut rng);
    let u = orthonormal(&mut rng, cfg.dim, 1).remove(0);
    let offset = u * cfg.domain_shift;
    let (source, target) = generate_with(cfg, &geometry, &offset, &mut rng)?;
    let (target, target_labels) = target.hide_labels();
    Ok(SynthTask {
        source,
        target,
        target_labels,
    })
}

/// A multi-subject dataset sharing one class geometry. Each subject gets its
/// own random offset of magnitude `domain_shift` and the configured rotations;
/// sessions of one subject differ only in sampling noise.
pub fn generate_synth_subjects(
    cfg: &SynthShiftConfig,
    n_subjects: usize,
    n_sessions: usize,
) -> Result<SubjectDataset> {
    cfg.validate()?;
    if n_subjects < 2 {
        return Err(Error::OutOfRange {
            key: "subjects".into(),
            message: format!("need at least 2 subjects, got {n_subjects}"),
        });
    }
    if n_sessions == 0 {
        return Err(Error::OutOfRange {
            key: "sessions".into(),
            message: "need at least 1 session".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geometry = Geometry::new(cfg, &mut rng);
    let mut subjects = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let offset = orthonormal(&mut rng, cfg.dim, 1).remove(0) * cfg.domain_shift;
        let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
        let target_means: Vec<_> = (0..cfg.classes)
            .map(|c| geometry.target_mean(c, sign * cfg.rotation(c), &offset))
            .collect();
        let sessions = (0..n_sessions)
            .map(|k| {
                let (x, y) = sample_domain(&target_means, cfg.n_per_class, cfg.noise, &mut rng);
                Ok(Session {
                    id: format!("{}", k + 1),
                    data: LabeledSet::new(x, y, cfg.classes)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        subjects.push(Subject {
            id: format!("s{:02}", s + 1),
            sessions,
        });
    }
    Ok(SubjectDataset {
        subjects,
        classes: cfg.classes,
        dim: cfg.dim,
    })
}
