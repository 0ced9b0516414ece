//! The training loop: paired source/target mini-batches, staged pseudo-label
//! filtering, scheduled loss weights and momentum SGD.

use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::net::{self, BetaRule, LossBreakdown, LossSettings, ModelParams, NetShape, ParamGroup};
use crate::schedule::{self, ScheduleConfig};

pub use crate::pseudo::{filter_pseudo_labels, generate_pseudo_labels, PseudoLabelSet};

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_mmd: bool,
    pub use_cmmd: bool,
    /// Scheduled α and loss-driven β; otherwise both are fixed at 1.
    pub dynamic_weights: bool,
    /// Staged confidence threshold; otherwise every pseudo-label is kept.
    pub confidence_filter: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self {
        use_mmd: true,
        use_cmmd: true,
        dynamic_weights: true,
        confidence_filter: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dropout: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Expected class count; `None` takes it from the source set.
    pub classes: Option<usize>,
    pub kernel: KernelConfig,
    pub schedule: ScheduleConfig,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 3,
            dropout: net::DEFAULT_DROPOUT,
            hidden1: 64,
            hidden2: 64,
            classes: None,
            kernel: KernelConfig::default(),
            schedule: ScheduleConfig::default(),
            flags: AblationFlags::FULL,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.schedule.total_epochs
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::OutOfRange {
                key: key.into(),
                message,
            })
        };
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                format!("must be >= 2, got {}", self.batch_size),
            );
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            );
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(
                "weight_decay",
                format!("must be finite and >= 0, got {}", self.weight_decay),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(
                "dropout",
                format!("must lie in [0, 1), got {}", self.dropout),
            );
        }
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return bad("hidden", "layer widths must be >= 1".into());
        }
        self.kernel.validate()?;
        self.schedule.validate()
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub extractor: f64,
    pub classifier: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            extractor: lr,
            classifier: lr,
        }
    }
}

/// `v <- momentum * v + (g + weight_decay * w)`, `w <- w - lr * v`.
/// Weight decay is skipped for biases.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: LearningRates,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for g in grads.tensors() {
        if let Some(i) = g.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at index {i}",
                g.name
            )));
        }
    }
    if params.shape() != grads.shape() || params.shape() != state.velocity.shape() {
        return Err(Error::dim(
            "optimizer parameter count",
            params.parameter_count(),
            grads.parameter_count(),
        ));
    }
    let grads = grads.tensors();
    let velocity = state.velocity.tensors_mut();
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.iter())
        .zip(velocity)
    {
        let rate = match p.group {
            ParamGroup::Extractor => lr.extractor,
            ParamGroup::Classifier => lr.classifier,
        };
        let decay = if p.is_bias { 0.0 } else { weight_decay };
        for ((w, &gi), vi) in p.values.iter_mut().zip(g.values).zip(v.values.iter_mut()) {
            *vi = momentum * *vi + (gi + decay * *w);
            *w -= rate * *vi;
        }
    }
    Ok(())
}

/// One optimisation step as recorded in the history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_ds: f64,
    pub l_mmd: f64,
    pub l_cmmd: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lr: f64,
    pub n_pseudo_retained: usize,
    pub total: f64,
    pub lr_classifier: f64,
    pub n_target: usize,
}

impl StepRecord {
    fn new(
        step: usize,
        epoch: usize,
        tau: f64,
        lr: LearningRates,
        b: &LossBreakdown,
        n_target: usize,
    ) -> Self {
        Self {
            step,
            epoch,
            l_ds: b.l_ds,
            l_mmd: b.l_mmd,
            l_cmmd: b.l_cmmd,
            alpha: b.alpha,
            beta: b.beta,
            tau,
            lr: lr.extractor,
            n_pseudo_retained: b.n_pseudo_retained,
            total: b.total,
            lr_classifier: lr.classifier,
            n_target,
        }
    }
}

/// Writes the per-step history as CSV.
pub fn write_history(history: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<StepRecord>,
}

/// Endless reshuffled pass over `0..n`.
struct IndexCycle {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl IndexCycle {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            cursor: n,
            rng,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains a freshly initialised model.
pub fn train(
    source: &LabeledSet,
    target: &UnlabeledSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(source, target, cfg, |_| {})
}

/// Like [`train`], calling `progress` after every step.
pub fn train_with_progress(
    source: &LabeledSet,
    target: &UnlabeledSet,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("source set".into()));
    }
    if target.is_empty() {
        return Err(Error::Empty("target set".into()));
    }
    if let Some(c) = cfg.classes {
        if c != source.classes() {
            return Err(Error::dim("class count", c, source.classes()));
        }
    }
    if target.dim() != source.dim() {
        return Err(Error::dim(
            "target feature dimension",
            source.dim(),
            target.dim(),
        ));
    }
    let shape = NetShape {
        input_dim: source.dim(),
        hidden1: cfg.hidden1,
        hidden2: cfg.hidden2,
        classes: source.classes(),
    };
    let mut params = ModelParams::init(shape, &mut stream(cfg.seed, 0));
    let mut opt = OptimizerState::new(&params);
    let mut source_rng = stream(cfg.seed, 1);
    let mut target_cycle = IndexCycle::new(target.len(), stream(cfg.seed, 2));
    let mut dropout_rng = stream(cfg.seed, 3);

    let sched = &cfg.schedule;
    let flags = cfg.flags;
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs() * source.len().div_ceil(cfg.batch_size));
    let mut step = 0;
    for epoch in 0..cfg.epochs() {
        let state = schedule::state_at(epoch, sched)?;
        let lr = LearningRates {
            extractor: state.lr_extractor,
            classifier: state.lr_classifier,
        };
        let tau = if flags.confidence_filter {
            state.tau
        } else {
            0.0
        };
        let settings = LossSettings {
            alpha: if flags.dynamic_weights {
                state.alpha
            } else {
                1.0
            },
            beta: if flags.dynamic_weights {
                BetaRule::Step {
                    rho0: sched.rho0,
                    rho1: sched.rho1,
                }
            } else {
                BetaRule::Fixed(1.0)
            },
            tau,
            use_mmd: flags.use_mmd,
            use_cmmd: flags.use_cmmd,
            dropout: cfg.dropout,
        };
        order.shuffle(&mut source_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xs = source.features().select(Axis(0), chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| source.labels()[i]).collect();
            let t_idx = target_cycle.take(chunk.len().min(target.len()));
            let xt = target.features().select(Axis(0), &t_idx);

            let (breakdown, trace) = net::total_loss(
                xs.view(),
                &ys,
                xt.view(),
                &params,
                &settings,
                &cfg.kernel,
                &mut dropout_rng,
            )
            .map_err(|e| Error::Diverged {
                step,
                message: e.to_string(),
            })?;
            let grads = net::backward(&trace, &params)?;
            sgd_step(
                &mut params,
                &grads,
                &mut opt,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )
            .map_err(|e| Error::Diverged {
                step,
                message: e.to_string(),
            })?;
            let record = StepRecord::new(step, epoch, tau, lr, &breakdown, xt.nrows());
            progress(&record);
            history.push(record);
            step += 1;
        }
    }
    Ok(TrainOutcome { params, history })
}

/// Predicted class per row in eval mode.
pub fn predict_labels(x: ArrayView2<f64>, params: &ModelParams) -> Result<Vec<usize>> {
    let probs = net::predict(x, params)?;
    Ok(crate::pseudo::pseudo_labels_from_probs(probs.view()).labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn small_params() -> ModelParams {
        let mut p = ModelParams::zeros(NetShape {
            input_dim: 2,
            hidden1: 2,
            hidden2: 2,
            classes: 2,
        });
        p.w1 = array![[0.5, -1.0], [2.0, 0.25]];
        p.b1 = array![0.1, -0.2];
        p
    }

    fn fill(p: &ModelParams, v: f64) -> ModelParams {
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.values.iter_mut().for_each(|x| *x = v);
        }
        g
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = small_params();
        let before = p.clone();
        let g = fill(&p, 0.3);
        let mut st = OptimizerState::new(&p);
        sgd_step(&mut p, &g, &mut st, LearningRates::uniform(0.1), 0.0, 0.0).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors().iter()) {
            for (x, y) in a.values.iter().zip(b.values) {
                assert_eq!(*x, y - 0.1 * 0.3);
            }
        }
    }

    #[test]
    fn momentum_only_step() {
        let mut p = small_params();
        let before = p.clone();
        let mut st = OptimizerState {
            velocity: fill(&p, 0.4),
        };
        let g = p.zeros_like();
        sgd_step(&mut p, &g, &mut st, LearningRates::uniform(0.1), 0.9, 0.0).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors().iter()) {
            for (x, y) in a.values.iter().zip(b.values) {
                assert!((x - (y - 0.1 * 0.9 * 0.4)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weight_decay_only_step_skips_biases() {
        let mut p = small_params();
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        let g = p.zeros_like();
        sgd_step(&mut p, &g, &mut st, LearningRates::uniform(0.1), 0.0, 0.05).unwrap();
        for (a, b) in p.w1.iter().zip(before.w1.iter()) {
            assert!((a - b * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
        }
        assert_eq!(p.b1, before.b1);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut p = small_params();
        let g = fill(&p, 1.0);
        let mut st = OptimizerState::new(&p);
        let lr = LearningRates {
            extractor: 0.001,
            classifier: 0.01,
        };
        sgd_step(&mut p, &g, &mut st, lr, 0.0, 0.0).unwrap();
        assert_eq!(p.bc[0], -0.01);
        assert_eq!(p.b2[0], -0.001);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = small_params();
        let mut g = p.zeros_like();
        g.wc[[1, 0]] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        let err = sgd_step(&mut p, &g, &mut st, LearningRates::uniform(0.1), 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("wc"), "{err}");
    }

    #[test]
    fn index_cycle_visits_everything_before_repeating() {
        let mut c = IndexCycle::new(5, stream(1, 2));
        let mut first = c.take(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.take(12).len(), 12);
    }

    fn toy_task(seed: u64) -> (LabeledSet, UnlabeledSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Array2::zeros((60, 4));
        let mut ys = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            for j in 0..4 {
                xs[[i, j]] = rng.random_range(-0.3..0.3) + if j == c { 1.5 } else { 0.0 };
            }
            ys.push(c);
        }
        let xt = xs.mapv(|v| v + 0.2);
        (LabeledSet::new(xs, ys, 3).unwrap(), UnlabeledSet::new(xt))
    }

    fn quick_cfg(flags: AblationFlags) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            flags,
            schedule: ScheduleConfig {
                total_epochs: 12,
                stage_epochs: [3, 6, 9],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn baseline_records_no_alignment_terms() {
        let (s, t) = toy_task(1);
        let flags = AblationFlags {
            use_mmd: false,
            use_cmmd: false,
            dynamic_weights: false,
            confidence_filter: false,
        };
        let out = train(&s, &t, &quick_cfg(flags)).unwrap();
        assert_eq!(out.history.len(), 12 * 4);
        assert!(out
            .history
            .iter()
            .all(|r| r.l_mmd == 0.0 && r.l_cmmd == 0.0));
    }

    #[test]
    fn history_invariants_hold() {
        let (s, t) = toy_task(2);
        let out = train(&s, &t, &quick_cfg(AblationFlags::FULL)).unwrap();
        for r in &out.history {
            assert!((r.total - (r.l_ds + r.alpha * r.l_mmd + r.beta * r.l_cmmd)).abs() < 1e-9);
            assert!(r.n_pseudo_retained <= r.n_target);
        }
        assert!(out.history.iter().all(|r| r.epoch <= 9 || r.tau == 1.0));

        let static_unfiltered = AblationFlags {
            dynamic_weights: false,
            confidence_filter: false,
            ..AblationFlags::FULL
        };
        let out = train(&s, &t, &quick_cfg(static_unfiltered)).unwrap();
        for r in &out.history {
            assert_eq!((r.alpha, r.beta), (1.0, 1.0));
            assert_eq!(r.n_pseudo_retained, r.n_target);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (s, t) = toy_task(3);
        let cfg = quick_cfg(AblationFlags::FULL);
        let a = train(&s, &t, &cfg).unwrap();
        let b = train(&s, &t, &cfg).unwrap();
        assert_eq!(
            crate::checkpoint::to_bytes(&a.params),
            crate::checkpoint::to_bytes(&b.params)
        );
        assert_eq!(a.history, b.history);
        let first = a.history.first().unwrap().l_ds;
        let last = a.history.last().unwrap().l_ds;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (s, _) = toy_task(4);
        let t = UnlabeledSet::new(Array2::zeros((5, 3)));
        assert!(train(&s, &t, &quick_cfg(AblationFlags::FULL)).is_err());
        let (s, t) = toy_task(4);
        let cfg = TrainConfig {
            classes: Some(4),
            ..quick_cfg(AblationFlags::FULL)
        };
        assert!(train(&s, &t, &cfg).is_err());
        let cfg = TrainConfig {
            momentum: 1.5,
            ..quick_cfg(AblationFlags::FULL)
        };
        assert!(
            matches!(train(&s, &t, &cfg), Err(Error::OutOfRange { key, .. }) if key == "momentum")
        );
    }

    #[test]
    fn history_csv_has_expected_columns() {
        let (s, t) = toy_task(5);
        let out = train(&s, &t, &quick_cfg(AblationFlags::FULL)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history(&out.history, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let header = text.lines().next().unwrap();
        assert!(
            header.starts_with("step,epoch,l_ds,l_mmd,l_cmmd,alpha,beta,tau,lr,n_pseudo_retained")
        );
        assert_eq!(text.lines().count(), out.history.len() + 1);
    }
}
