//! Two-layer ReLU feature extractor with a softmax classifier head, the
//! composite training loss and its exact reverse-mode gradient.

use std::hash::{DefaultHasher, Hasher};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelConfig, LabeledBatch};
use crate::pseudo::{self, PseudoLabelSet};

pub const DEFAULT_DROPOUT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
}

impl NetShape {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden1: 64,
            hidden2: 64,
            classes,
        }
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.input_dim * self.hidden1
            + self.hidden1
            + self.hidden1 * self.hidden2
            + self.hidden2
            + self.hidden2 * self.classes
            + self.classes
    }
}

/// Weights and biases. Also used as the container for gradients and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
}

/// Which update group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Classifier,
}

/// Borrowed view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub is_bias: bool,
    pub shape: (usize, usize),
    pub values: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub is_bias: bool,
    pub values: &'a mut [f64],
}

impl ModelParams {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            w1: Array2::zeros((shape.input_dim, shape.hidden1)),
            b1: Array1::zeros(shape.hidden1),
            w2: Array2::zeros((shape.hidden1, shape.hidden2)),
            b2: Array1::zeros(shape.hidden2),
            wc: Array2::zeros((shape.hidden2, shape.classes)),
            bc: Array1::zeros(shape.classes),
        }
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for w in [&mut p.w1, &mut p.w2, &mut p.wc] {
            let (fan_in, fan_out) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.iter_mut()
                .for_each(|v| *v = rng.random_range(-limit..=limit));
        }
        p
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            input_dim: self.w1.nrows(),
            hidden1: self.w1.ncols(),
            hidden2: self.w2.ncols(),
            classes: self.wc.ncols(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.values.len()).sum()
    }

    /// Checks that every tensor agrees with the shape implied by `w1`, `w2` and `wc`.
    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        let checks = [
            ("b1", s.hidden1, self.b1.len()),
            ("w2 rows", s.hidden1, self.w2.nrows()),
            ("b2", s.hidden2, self.b2.len()),
            ("wc rows", s.hidden2, self.wc.nrows()),
            ("bc", s.classes, self.bc.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::dim(format!("model params {what}"), expected, got));
            }
        }
        if !self
            .tensors()
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite("model params".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [TensorRef<'_>; 6] {
        fn r<'a>(
            name: &'static str,
            group: ParamGroup,
            is_bias: bool,
            shape: (usize, usize),
            values: &'a [f64],
        ) -> TensorRef<'a> {
            TensorRef {
                name,
                group,
                is_bias,
                shape,
                values,
            }
        }
        use ParamGroup::*;
        [
            r(
                "w1",
                Extractor,
                false,
                self.w1.dim(),
                self.w1.as_slice().expect("standard layout"),
            ),
            r(
                "b1",
                Extractor,
                true,
                (1, self.b1.len()),
                self.b1.as_slice().expect("contiguous"),
            ),
            r(
                "w2",
                Extractor,
                false,
                self.w2.dim(),
                self.w2.as_slice().expect("standard layout"),
            ),
            r(
                "b2",
                Extractor,
                true,
                (1, self.b2.len()),
                self.b2.as_slice().expect("contiguous"),
            ),
            r(
                "wc",
                Classifier,
                false,
                self.wc.dim(),
                self.wc.as_slice().expect("standard layout"),
            ),
            r(
                "bc",
                Classifier,
                true,
                (1, self.bc.len()),
                self.bc.as_slice().expect("contiguous"),
            ),
        ]
    }

    pub fn tensors_mut(&mut self) -> [TensorMut<'_>; 6] {
        use ParamGroup::*;
        [
            TensorMut {
                name: "w1",
                group: Extractor,
                is_bias: false,
                values: self.w1.as_slice_mut().expect("standard layout"),
            },
            TensorMut {
                name: "b1",
                group: Extractor,
                is_bias: true,
                values: self.b1.as_slice_mut().expect("contiguous"),
            },
            TensorMut {
                name: "w2",
                group: Extractor,
                is_bias: false,
                values: self.w2.as_slice_mut().expect("standard layout"),
            },
            TensorMut {
                name: "b2",
                group: Extractor,
                is_bias: true,
                values: self.b2.as_slice_mut().expect("contiguous"),
            },
            TensorMut {
                name: "wc",
                group: Classifier,
                is_bias: false,
                values: self.wc.as_slice_mut().expect("standard layout"),
            },
            TensorMut {
                name: "bc",
                group: Classifier,
                is_bias: true,
                values: self.bc.as_slice_mut().expect("contiguous"),
            },
        ]
    }

    /// Hash of the exact bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.tensors() {
            h.write_usize(t.values.len());
            for v in t.values {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

pub fn parameter_count(params: &ModelParams) -> usize {
    params.parameter_count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate values of one extractor pass.
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    pub input: Array2<f64>,
    pub z1: Array2<f64>,
    /// Entries are 0 or `1 / (1 - p)`; `None` when no dropout was applied.
    pub mask1: Option<Array2<f64>>,
    /// First layer output after activation and dropout.
    pub a1: Array2<f64>,
    pub z2: Array2<f64>,
    pub mask2: Option<Array2<f64>>,
    /// Extracted features after activation and dropout.
    pub features: Array2<f64>,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

fn dropout_mask<R: Rng + ?Sized>(dim: (usize, usize), p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    let mut m = Array2::zeros(dim);
    m.iter_mut()
        .for_each(|v| *v = if rng.random::<f64>() < p { 0.0 } else { keep });
    m
}

fn ensure_finite(a: &Array2<f64>, layer: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("layer {layer}")))
    }
}

/// Runs the extractor. `dropout` only applies in [`Mode::Train`].
pub fn forward_features<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &ModelParams,
    mode: Mode,
    dropout: f64,
    rng: &mut R,
) -> Result<FeatureTrace> {
    if x.ncols() != params.w1.nrows() {
        return Err(Error::dim("extractor input", params.w1.nrows(), x.ncols()));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::OutOfRange {
            key: "dropout".into(),
            message: format!("must lie in [0, 1), got {dropout}"),
        });
    }
    let active = mode == Mode::Train && dropout > 0.0;

    let z1 = x.dot(&params.w1) + &params.b1;
    ensure_finite(&z1, "fc1")?;
    let mut a1 = relu(&z1);
    let mask1 = active.then(|| dropout_mask(a1.dim(), dropout, rng));
    if let Some(m) = &mask1 {
        a1 *= m;
    }

    let z2 = a1.dot(&params.w2) + &params.b2;
    ensure_finite(&z2, "fc2")?;
    let mut features = relu(&z2);
    let mask2 = active.then(|| dropout_mask(features.dim(), dropout, rng));
    if let Some(m) = &mask2 {
        features *= m;
    }

    Ok(FeatureTrace {
        input: x.to_owned(),
        z1,
        mask1,
        a1,
        z2,
        mask2,
        features,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Class probabilities `softmax(h Wc + bc)`.
pub fn forward_logits(h: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    if h.ncols() != params.wc.nrows() {
        return Err(Error::dim("classifier input", params.wc.nrows(), h.ncols()));
    }
    let logits = h.dot(&params.wc) + &params.bc;
    ensure_finite(&logits, "classifier")?;
    Ok(softmax_rows(&logits))
}

fn eval_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

/// Eval-mode class probabilities.
pub fn predict(x: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    let trace = forward_features(x, params, Mode::Eval, 0.0, &mut eval_rng())?;
    forward_logits(trace.features.view(), params)
}

/// Eval-mode extracted features.
pub fn embed(x: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    Ok(forward_features(x, params, Mode::Eval, 0.0, &mut eval_rng())?.features)
}

/// Mean negative log-likelihood of the true class ids, with `log` clamped at 1e-12.
pub fn cross_entropy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.nrows() {
        return Err(Error::dim(
            "cross-entropy labels",
            probs.nrows(),
            labels.len(),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Empty("cross-entropy batch".into()));
    }
    let classes = probs.ncols();
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        total -= row[y].max(1e-12).ln();
    }
    Ok(total / labels.len() as f64)
}

/// How β is obtained for a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaRule {
    Fixed(f64),
    /// Step function of the step's own source loss.
    Step {
        rho0: f64,
        rho1: f64,
    },
}

impl BetaRule {
    pub fn resolve(&self, l_ds: f64) -> f64 {
        match *self {
            BetaRule::Fixed(b) => b,
            BetaRule::Step { rho0, rho1 } => {
                if l_ds < rho0 {
                    1.0
                } else if l_ds < rho1 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }
}

/// Everything a single loss evaluation needs besides data and parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub alpha: f64,
    pub beta: BetaRule,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    pub use_mmd: bool,
    pub use_cmmd: bool,
    pub dropout: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: BetaRule::Fixed(1.0),
            tau: 0.0,
            use_mmd: true,
            use_cmmd: true,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ds: f64,
    pub l_mmd: f64,
    pub l_cmmd: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Bandwidth used by the kernel terms (0 when none were evaluated).
    pub sigma: f64,
    /// Pseudo-labels that passed the confidence filter.
    pub n_pseudo_retained: usize,
    /// The target batch was empty, so both alignment terms are zero.
    pub target_empty: bool,
}

/// Forward state kept for [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub features: FeatureTrace,
    pub n_source: usize,
    pub source_labels: Vec<usize>,
    pub source_probs: Array2<f64>,
    pub pseudo_labels: PseudoLabelSet,
    /// `alpha * dMMD/dh + beta * dCMMD/dh` for every pooled row.
    align_grad: Array2<f64>,
    params_fingerprint: u64,
}

/// Evaluates `l_ds + alpha * l_mmd + beta * l_cmmd` on one source/target batch pair.
///
/// Source and target rows share one extractor pass. Pseudo-labels come
/// from a separate eval-mode pass and, together with the bandwidth, are
/// constants of the step.
pub fn total_loss<R: Rng + ?Sized>(
    source: ArrayView2<f64>,
    source_labels: &[usize],
    target: ArrayView2<f64>,
    params: &ModelParams,
    settings: &LossSettings,
    kernel_cfg: &KernelConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Trace)> {
    let n = source.nrows();
    if n == 0 {
        return Err(Error::Empty("source batch".into()));
    }
    if source_labels.len() != n {
        return Err(Error::dim("source labels", n, source_labels.len()));
    }
    if target.nrows() > 0 && target.ncols() != source.ncols() {
        return Err(Error::dim("target batch", source.ncols(), target.ncols()));
    }
    let classes = params.wc.ncols();
    let target_empty = target.nrows() == 0;
    let pooled = if target_empty {
        source.to_owned()
    } else {
        concatenate(Axis(0), &[source, target]).expect("matching columns")
    };

    let feats = forward_features(pooled.view(), params, Mode::Train, settings.dropout, rng)?;
    let h = &feats.features;
    let hs = h.slice(s![..n, ..]);
    let ht = h.slice(s![n.., ..]);
    let source_probs = forward_logits(hs, params)?;
    let l_ds = cross_entropy(source_probs.view(), source_labels)?;
    let beta = settings.beta.resolve(l_ds);
    let alpha = settings.alpha;

    let mut align_grad = Array2::zeros(h.raw_dim());
    let mut l_mmd = 0.0;
    let mut l_cmmd = 0.0;
    let mut sigma = 0.0;
    let mut pseudo_labels = PseudoLabelSet::default();

    if !target_empty && (settings.use_mmd || settings.use_cmmd) {
        sigma = kernel_cfg.resolve(hs, ht)?;
        if settings.use_mmd {
            let g = kernel::mmd_with_grad(hs, ht, sigma)?;
            l_mmd = g.value;
            if g.raw > 0.0 {
                align_grad
                    .slice_mut(s![..n, ..])
                    .scaled_add(alpha, &g.grad_source);
                align_grad
                    .slice_mut(s![n.., ..])
                    .scaled_add(alpha, &g.grad_target);
            }
        }
        if settings.use_cmmd {
            let all = pseudo::generate_pseudo_labels(target, params)?;
            pseudo_labels = pseudo::filter_pseudo_labels(&all, settings.tau);
            if !pseudo_labels.is_empty() {
                let retained = ht.select(Axis(0), &pseudo_labels.indices);
                let g = kernel::cmmd_with_grad(
                    LabeledBatch::new(hs, source_labels)?,
                    LabeledBatch::new(retained.view(), &pseudo_labels.labels)?,
                    sigma,
                    classes,
                )?;
                l_cmmd = g.value;
                if g.raw > 0.0 {
                    align_grad
                        .slice_mut(s![..n, ..])
                        .scaled_add(beta, &g.grad_source);
                    for (k, &row) in pseudo_labels.indices.iter().enumerate() {
                        let mut dst = align_grad.row_mut(n + row);
                        dst.scaled_add(beta, &g.grad_target.row(k));
                    }
                }
            }
        }
    }

    let total = l_ds + alpha * l_mmd + beta * l_cmmd;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let breakdown = LossBreakdown {
        l_ds,
        l_mmd,
        l_cmmd,
        total,
        alpha,
        beta,
        sigma,
        n_pseudo_retained: pseudo_labels.len(),
        target_empty,
    };
    let trace = Trace {
        features: feats,
        n_source: n,
        source_labels: source_labels.to_vec(),
        source_probs,
        pseudo_labels,
        align_grad,
        params_fingerprint: params.fingerprint(),
    };
    Ok((breakdown, trace))
}

/// Gradient of the traced total loss with respect to every parameter.
pub fn backward(trace: &Trace, params: &ModelParams) -> Result<ModelParams> {
    if params.fingerprint() != trace.params_fingerprint {
        return Err(Error::StaleTrace);
    }
    let f = &trace.features;
    let n = trace.n_source;
    let mut grads = params.zeros_like();

    // classifier head, source rows only
    let mut dlogits = trace.source_probs.clone();
    for (i, &y) in trace.source_labels.iter().enumerate() {
        dlogits[[i, y]] -= 1.0;
    }
    dlogits /= n as f64;
    let hs = f.features.slice(s![..n, ..]);
    grads.wc = hs.t().dot(&dlogits);
    grads.bc = dlogits.sum_axis(Axis(0));

    let mut dh = trace.align_grad.clone();
    {
        let mut top = dh.slice_mut(s![..n, ..]);
        top += &dlogits.dot(&params.wc.t());
    }

    // fc2
    if let Some(m) = &f.mask2 {
        dh *= m;
    }
    let dz2 = dh * &f.z2.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    grads.w2 = f.a1.t().dot(&dz2);
    grads.b2 = dz2.sum_axis(Axis(0));
    let mut da1 = dz2.dot(&params.w2.t());

    // fc1
    if let Some(m) = &f.mask1 {
        da1 *= m;
    }
    let dz1 = da1 * &f.z1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    grads.w1 = f.input.t().dot(&dz1);
    grads.b1 = dz1.sum_axis(Axis(0));
    Ok(grads)
}
