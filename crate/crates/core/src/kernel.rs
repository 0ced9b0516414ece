//! Gaussian kernel, bandwidth selection and the MMD / class-conditional MMD
//! statistics, with analytic gradients for training.
//!
//! The kernel is `k(u, v) = exp(-||u - v||^2 / sigma)`; note that `sigma`
//! divides the squared distance directly, with no factor of two.
//!
//! Both statistics are quadratic forms `c^T K c` over the pooled sample set:
//! MMD puts weight `1/n` on every source row and `-1/m` on every target row,
//! and each class term of CMMD does the same restricted to one class. The
//! values are evaluated from block sums of the Gram matrix and the gradients
//! from the quadratic form.

use ndarray::{concatenate, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    Fixed,
    /// Median pairwise squared distance of the pooled batch.
    #[default]
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub sigma_mode: SigmaMode,
    /// Bandwidth used in fixed mode.
    pub sigma: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma_mode: SigmaMode::Median,
            sigma: 1.0,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            sigma_mode: SigmaMode::Fixed,
            sigma,
        }
    }

    pub fn median() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_mode == SigmaMode::Fixed && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::OutOfRange {
                key: "sigma".into(),
                message: format!("must be finite and > 0, got {}", self.sigma),
            });
        }
        Ok(())
    }

    /// Resolves the bandwidth for a source/target pair.
    pub fn resolve(&self, xs: ArrayView2<f64>, xt: ArrayView2<f64>) -> Result<f64> {
        match self.sigma_mode {
            SigmaMode::Fixed => {
                self.validate()?;
                Ok(self.sigma)
            }
            SigmaMode::Median => {
                if xs.ncols() != xt.ncols() {
                    return Err(Error::dim("bandwidth pooling", xs.ncols(), xt.ncols()));
                }
                let pooled = concatenate(Axis(0), &[xs, xt]).expect("matching columns");
                median_bandwidth(pooled.view())
            }
        }
    }
}

/// Two feature sets with class ids, for the class-conditional statistic.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> LabeledBatch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if labels.len() != features.nrows() {
            return Err(Error::dim("batch labels", features.nrows(), labels.len()));
        }
        Ok(Self { features, labels })
    }
}

#[inline]
fn sq_dist(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    match (u.as_slice(), v.as_slice()) {
        (Some(a), Some(b)) => sq_dist_slice(a, b),
        _ => u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum(),
    }
}

fn sq_dist_slice(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

fn check_finite(x: ArrayView2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            key: "sigma".into(),
            message: format!("must be finite and > 0, got {sigma}"),
        })
    }
}

/// `exp(-||u - v||^2 / sigma)`.
pub fn gaussian_kernel(u: &[f64], v: &[f64], sigma: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("gaussian kernel", u.len(), v.len()));
    }
    check_sigma(sigma)?;
    if !u.iter().chain(v).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("gaussian kernel input".into()));
    }
    let d = sq_dist(ArrayView1::from(u), ArrayView1::from(v));
    Ok((-d / sigma).exp())
}

/// Gram matrix with entry `(i, j) = k(x_i, y_j)`.
pub fn kernel_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::dim("kernel matrix", x.ncols(), y.ncols()));
    }
    check_sigma(sigma)?;
    check_finite(x, "kernel matrix input")?;
    check_finite(y, "kernel matrix input")?;
    Ok(gram(x, y, sigma))
}

fn gram(x: ArrayView2<f64>, y: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let x = x.as_standard_layout();
    let y = y.as_standard_layout();
    let d = x.ncols();
    let (xs, ys) = (
        x.as_slice().expect("standard layout"),
        y.as_slice().expect("standard layout"),
    );
    let mut k = Array2::zeros((x.nrows(), y.nrows()));
    if d == 0 {
        k.fill(1.0);
        return k;
    }
    for (xi, out) in xs.chunks_exact(d).zip(k.rows_mut()) {
        for (yj, dst) in ys.chunks_exact(d).zip(out) {
            *dst = (-sq_dist_slice(xi, yj) / sigma).exp();
        }
    }
    k
}

/// Median of the pairwise squared distances over distinct pairs, or 1.0 when
/// that median is zero.
pub fn median_bandwidth(z: ArrayView2<f64>) -> Result<f64> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "median bandwidth needs at least 2 rows, got {n}"
        )));
    }
    check_finite(z, "median bandwidth input")?;
    let z = z.as_standard_layout();
    let rows: Vec<&[f64]> = match z.ncols() {
        0 => vec![&[][..]; n],
        dim => z
            .as_slice()
            .expect("standard layout")
            .chunks_exact(dim)
            .collect(),
    };
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist_slice(rows[i], rows[j]));
        }
    }
    let len = d.len();
    let mid = len / 2;
    let (lower, upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if len % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + upper)
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Block-sum MMD of two sets, unclamped.
fn block_mmd(xs: ArrayView2<f64>, xt: ArrayView2<f64>, sigma: f64) -> f64 {
    let n = xs.nrows() as f64;
    let m = xt.nrows() as f64;
    let kss = gram(xs, xs, sigma).sum();
    let ktt = gram(xt, xt, sigma).sum();
    let kst = gram(xs, xt, sigma).sum();
    kss / (n * n) + ktt / (m * m) - 2.0 * kst / (n * m)
}

fn validate_pair(xs: ArrayView2<f64>, xt: ArrayView2<f64>) -> Result<()> {
    if xs.nrows() == 0 {
        return Err(Error::Empty("source domain".into()));
    }
    if xt.nrows() == 0 {
        return Err(Error::Empty("target domain".into()));
    }
    if xs.ncols() != xt.ncols() {
        return Err(Error::dim("mmd feature dimension", xs.ncols(), xt.ncols()));
    }
    check_finite(xs, "mmd source")?;
    check_finite(xt, "mmd target")
}

/// Squared MMD between two sample sets, clamped at zero.
pub fn mmd(xs: ArrayView2<f64>, xt: ArrayView2<f64>, cfg: &KernelConfig) -> Result<f64> {
    validate_pair(xs, xt)?;
    let sigma = cfg.resolve(xs, xt)?;
    Ok(block_mmd(xs, xt, sigma).max(0.0))
}

fn validate_labels(batch: &LabeledBatch, classes: usize) -> Result<()> {
    if batch.labels.len() != batch.features.nrows() {
        return Err(Error::dim(
            "batch labels",
            batch.features.nrows(),
            batch.labels.len(),
        ));
    }
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn class_rows(labels: &[usize], class: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == class).then_some(i))
        .collect()
}

/// Class-conditional MMD averaged over the classes present in both batches.
///
/// Returns 0 when no class is shared.
pub fn cmmd(
    src: LabeledBatch,
    tgt: LabeledBatch,
    cfg: &KernelConfig,
    classes: usize,
) -> Result<f64> {
    if classes == 0 {
        return Err(Error::OutOfRange {
            key: "classes".into(),
            message: "must be >= 1".into(),
        });
    }
    validate_labels(&src, classes)?;
    validate_labels(&tgt, classes)?;
    if src.features.nrows() == 0 || tgt.features.nrows() == 0 {
        return Ok(0.0);
    }
    validate_pair(src.features, tgt.features)?;
    let sigma = cfg.resolve(src.features, tgt.features)?;
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        let s = class_rows(src.labels, c);
        let t = class_rows(tgt.labels, c);
        if s.is_empty() || t.is_empty() {
            continue;
        }
        let xs = src.features.select(Axis(0), &s);
        let xt = tgt.features.select(Axis(0), &t);
        total += block_mmd(xs.view(), xt.view(), sigma);
        present += 1;
    }
    if present == 0 {
        return Ok(0.0);
    }
    Ok((total / present as f64).max(0.0))
}

/// Statistic value together with its gradient with respect to every input row.
#[derive(Debug, Clone)]
pub struct KernelGrad {
    /// Clamped value.
    pub value: f64,
    /// Value before clamping at zero.
    pub raw: f64,
    pub grad_source: Array2<f64>,
    pub grad_target: Array2<f64>,
}

/// Adds `scale * d(c^T K c)/dz` to `grad`, where `K` is the Gram matrix of `z`.
///
/// Row `i` of the gradient is `-(4/sigma) c_i sum_k c_k K_ik (z_i - z_k)`,
/// evaluated as `-(4/sigma) c_i (s_i z_i - (W z)_i)` with `W_ik = c_k K_ik`
/// and `s_i = sum_k W_ik`.
fn accumulate_quad_grad(
    z: ArrayView2<f64>,
    k: &Array2<f64>,
    coef: &[f64],
    sigma: f64,
    scale: f64,
    grad: &mut Array2<f64>,
) {
    let c = ArrayView1::from(coef);
    let w = k * &c.broadcast(k.raw_dim()).expect("square gram");
    let wz = w.dot(&z);
    let s = w.sum_axis(Axis(1));
    let factor = -4.0 * scale / sigma;
    for (i, (mut g, (zi, wzi))) in grad
        .rows_mut()
        .into_iter()
        .zip(z.rows().into_iter().zip(wz.rows()))
        .enumerate()
    {
        let f = factor * coef[i];
        if f == 0.0 {
            continue;
        }
        for (dst, (a, b)) in g.iter_mut().zip(zi.iter().zip(wzi.iter())) {
            *dst += f * (s[i] * a - b);
        }
    }
}

fn split_grad(pooled: Array2<f64>, n: usize) -> (Array2<f64>, Array2<f64>) {
    let source = pooled.slice(ndarray::s![..n, ..]).to_owned();
    let target = pooled.slice(ndarray::s![n.., ..]).to_owned();
    (source, target)
}

/// MMD with its gradient at a fixed bandwidth.
pub fn mmd_with_grad(xs: ArrayView2<f64>, xt: ArrayView2<f64>, sigma: f64) -> Result<KernelGrad> {
    validate_pair(xs, xt)?;
    check_sigma(sigma)?;
    let n = xs.nrows();
    let m = xt.nrows();
    let z = concatenate(Axis(0), &[xs, xt]).expect("matching columns");
    let k = gram(z.view(), z.view(), sigma);
    let kss = k.slice(ndarray::s![..n, ..n]).sum();
    let ktt = k.slice(ndarray::s![n.., n..]).sum();
    let kst = k.slice(ndarray::s![..n, n..]).sum();
    let (nf, mf) = (n as f64, m as f64);
    let raw = kss / (nf * nf) + ktt / (mf * mf) - 2.0 * kst / (nf * mf);
    let coef: Vec<f64> = (0..n + m)
        .map(|i| if i < n { 1.0 / nf } else { -1.0 / mf })
        .collect();
    let mut grad = Array2::zeros(z.raw_dim());
    accumulate_quad_grad(z.view(), &k, &coef, sigma, 1.0, &mut grad);
    let (grad_source, grad_target) = split_grad(grad, n);
    Ok(KernelGrad {
        value: raw.max(0.0),
        raw,
        grad_source,
        grad_target,
    })
}

/// CMMD with its gradient at a fixed bandwidth. Class assignments are constants.
pub fn cmmd_with_grad(
    src: LabeledBatch,
    tgt: LabeledBatch,
    sigma: f64,
    classes: usize,
) -> Result<KernelGrad> {
    validate_labels(&src, classes)?;
    validate_labels(&tgt, classes)?;
    check_sigma(sigma)?;
    let n = src.features.nrows();
    let m = tgt.features.nrows();
    let d = src.features.ncols();
    let mut grad_source = Array2::zeros((n, d));
    let mut grad_target = Array2::zeros((m, tgt.features.ncols()));
    if n == 0 || m == 0 {
        return Ok(KernelGrad {
            value: 0.0,
            raw: 0.0,
            grad_source,
            grad_target,
        });
    }
    validate_pair(src.features, tgt.features)?;

    let groups: Vec<(Vec<usize>, Vec<usize>)> = (0..classes)
        .map(|c| (class_rows(src.labels, c), class_rows(tgt.labels, c)))
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .collect();
    if groups.is_empty() {
        return Ok(KernelGrad {
            value: 0.0,
            raw: 0.0,
            grad_source,
            grad_target,
        });
    }
    let scale = 1.0 / groups.len() as f64;
    let mut raw = 0.0;
    for (s, t) in &groups {
        let xs = src.features.select(Axis(0), s);
        let xt = tgt.features.select(Axis(0), t);
        let (ns, nt) = (s.len(), t.len());
        let z = concatenate(Axis(0), &[xs.view(), xt.view()]).expect("matching columns");
        let k = gram(z.view(), z.view(), sigma);
        let kss = k.slice(ndarray::s![..ns, ..ns]).sum();
        let ktt = k.slice(ndarray::s![ns.., ns..]).sum();
        let kst = k.slice(ndarray::s![..ns, ns..]).sum();
        let (nsf, ntf) = (ns as f64, nt as f64);
        raw += kss / (nsf * nsf) + ktt / (ntf * ntf) - 2.0 * kst / (nsf * ntf);

        let coef: Vec<f64> = (0..ns + nt)
            .map(|i| if i < ns { 1.0 / nsf } else { -1.0 / ntf })
            .collect();
        let mut g = Array2::zeros(z.raw_dim());
        accumulate_quad_grad(z.view(), &k, &coef, sigma, scale, &mut g);
        for (local, &row) in s.iter().enumerate() {
            let mut dst = grad_source.row_mut(row);
            dst += &g.row(local);
        }
        for (local, &row) in t.iter().enumerate() {
            let mut dst = grad_target.row_mut(row);
            dst += &g.row(ns + local);
        }
    }
    raw *= scale;
    Ok(KernelGrad {
        value: raw.max(0.0),
        raw,
        grad_source,
        grad_target,
    })
}
