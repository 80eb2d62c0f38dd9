//! Distribution self-rectification of the latent class means.
//!
//! The class means of the support anchors are optimized under a supervised
//! cross-entropy on the support anchors and a negative-entropy term on the
//! mean query relation vector; the resulting per-class shift is applied to
//! every anchor of that class.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UgdError};
use crate::optim::{AdamConfig, AdamState};

/// Floor applied inside `log` for the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RectifyConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub iters: usize,
    pub lr: f64,
    pub use_ce: bool,
    pub use_se: bool,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            temperature: 0.5,
            iters: 1000,
            lr: 1e-4,
            use_ce: true,
            use_se: true,
        }
    }
}

/// Mean of the columns of each class; returns `|C| × d`.
pub fn class_means(h: &ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Result<Array2<f64>> {
    if labels.len() != h.ncols() {
        return Err(UgdError::DimMismatch {
            expected: h.ncols(),
            actual: labels.len(),
        });
    }
    let mut sums = Array2::<f64>::zeros((n_classes, h.nrows()));
    let mut counts = vec![0usize; n_classes];
    for (col, &y) in h.columns().into_iter().zip(labels) {
        if y >= n_classes {
            return Err(UgdError::InvalidInput(format!("label {y} outside 0..{n_classes}")));
        }
        let mut row = sums.row_mut(y);
        row += &col;
        counts[y] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(UgdError::EmptyClass(c));
        }
        sums.row_mut(c).mapv_inplace(|x| x / n as f64);
    }
    Ok(sums)
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Numerically stable softmax of `-T · distances`.
pub(crate) fn softmax_neg(distances: &[f64], temperature: f64) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances
        .iter()
        .map(|&s| (-temperature * (s - min)).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `softmax(−T ‖h − μ_c‖²)` over the rows of `means`.
pub fn relation_scores(h: ArrayView1<f64>, means: &ArrayView2<f64>, temperature: f64) -> Array1<f64> {
    let d: Vec<f64> = means.rows().into_iter().map(|m| sq_dist(h, m)).collect();
    Array1::from(softmax_neg(&d, temperature))
}

/// Relation scores of every column of `h`: `n × |C|`.
pub fn relation_matrix(h: &ArrayView2<f64>, means: &ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let points = h.t().as_standard_layout().into_owned();
    let means = means.as_standard_layout();
    let mut out = Array2::zeros((h.ncols(), means.nrows()));
    for (x, mut row) in points.rows().into_iter().zip(out.rows_mut()) {
        for (r, m) in row.iter_mut().zip(means.rows()) {
            *r = sq_dist(x, m);
        }
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        row.mapv_inplace(|s| (-temperature * (s - min)).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// `−(1/M) Σ_n log α_{n, y_n}` with the log floored at [`LOG_FLOOR`].
pub fn ce_loss(alpha: &ArrayView2<f64>, labels: &[usize]) -> f64 {
    let m = labels.len().max(1) as f64;
    -alpha
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| row[y].max(LOG_FLOOR).ln())
        .sum::<f64>()
        / m
}

fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

/// `Σ_c ᾱ_c log ᾱ_c` of the mean query relation vector (0·log 0 = 0).
pub fn se_loss(alpha_query: &ArrayView2<f64>) -> f64 {
    let n = alpha_query.nrows().max(1) as f64;
    let mean: Vec<f64> = alpha_query.columns().into_iter().map(|c| c.sum() / n).collect();
    neg_entropy(&mean)
}

/// Turn `dL/dlogits` (`n × |C|`) into `dL/dmeans` (`|C| × d`), using
/// `∂logit_{n,c}/∂μ_c = 2T (h_n − μ_c)`.
fn logits_to_means(
    dlogits: &Array2<f64>,
    h: &ArrayView2<f64>,
    means: &ArrayView2<f64>,
    temperature: f64,
) -> Array2<f64> {
    // Σ_n G_{n,c} h_n − (Σ_n G_{n,c}) μ_c
    let mut grad = Array2::zeros((dlogits.ncols(), h.nrows()));
    ndarray::linalg::general_mat_mul(1.0, &dlogits.t(), &h.t(), 0.0, &mut grad);
    for (c, mut row) in grad.rows_mut().into_iter().enumerate() {
        let weight = dlogits.column(c).sum();
        row.scaled_add(-weight, &means.row(c));
    }
    grad * (2.0 * temperature)
}

/// Cross-entropy over the support anchors and its gradient w.r.t. the means.
pub fn ce_grad(
    h_support: &ArrayView2<f64>,
    labels: &[usize],
    means: &ArrayView2<f64>,
    temperature: f64,
) -> (f64, Array2<f64>) {
    let alpha = relation_matrix(h_support, means, temperature);
    let m = labels.len().max(1) as f64;
    let mut dlogits = Array2::zeros(alpha.raw_dim());
    for ((n, row), &y) in alpha.rows().into_iter().enumerate().zip(labels) {
        if row[y] < LOG_FLOOR {
            continue;
        }
        for (c, &a) in row.iter().enumerate() {
            dlogits[[n, c]] = (a - if c == y { 1.0 } else { 0.0 }) / m;
        }
    }
    let loss = ce_loss(&alpha.view(), labels);
    (loss, logits_to_means(&dlogits, h_support, means, temperature))
}

/// Negative entropy of the mean query relation and its gradient w.r.t. the
/// means.
pub fn se_grad(h_query: &ArrayView2<f64>, means: &ArrayView2<f64>, temperature: f64) -> (f64, Array2<f64>) {
    let alpha = relation_matrix(h_query, means, temperature);
    let n = alpha.nrows().max(1) as f64;
    let mean: Vec<f64> = alpha.columns().into_iter().map(|c| c.sum() / n).collect();
    let g: Vec<f64> = mean.iter().map(|&a| a.max(LOG_FLOOR).ln() + 1.0).collect();
    let mut dlogits = Array2::zeros(alpha.raw_dim());
    for (i, row) in alpha.rows().into_iter().enumerate() {
        let avg: f64 = row.iter().zip(&g).map(|(a, gc)| a * gc).sum();
        for (c, &a) in row.iter().enumerate() {
            dlogits[[i, c]] = a * (g[c] - avg) / n;
        }
    }
    (neg_entropy(&mean), logits_to_means(&dlogits, h_query, means, temperature))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifyTraceEntry {
    pub step: usize,
    pub l_ce: f64,
    pub l_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectificationResult {
    /// `|C| × d` initial class means.
    pub class_means: Array2<f64>,
    /// `|C| × d` optimized class means.
    pub rectified_means: Array2<f64>,
    /// `rectified_means − class_means`.
    pub offsets: Array2<f64>,
    /// `d × M` support anchors shifted by their class offset.
    pub rectified_anchors: Array2<f64>,
    /// Losses evaluated before each step.
    pub trace: Vec<RectifyTraceEntry>,
}

/// Objective value `λ·L_ce + L_se` restricted to the enabled terms.
pub fn rectify_objective(entry: &RectifyTraceEntry, config: &RectifyConfig) -> f64 {
    let ce = if config.use_ce { config.lambda * entry.l_ce } else { 0.0 };
    let se = if config.use_se { entry.l_se } else { 0.0 };
    ce + se
}

/// Optimize the class means with Adam, holding anchors and queries fixed,
/// then shift every anchor by its class offset.
pub fn rectify(
    h_support: &ArrayView2<f64>,
    h_query: &ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    config: &RectifyConfig,
) -> Result<RectificationResult> {
    if !(config.temperature > 0.0) {
        return Err(UgdError::InvalidInput("temperature must be positive".into()));
    }
    if h_query.nrows() != h_support.nrows() {
        return Err(UgdError::DimMismatch {
            expected: h_support.nrows(),
            actual: h_query.nrows(),
        });
    }
    let initial = class_means(h_support, labels, n_classes)?;
    let mut means = initial.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &[means.len()]);
    let mut trace = Vec::with_capacity(config.iters);
    let has_query = h_query.ncols() > 0;
    for step in 0..config.iters {
        let (l_ce, g_ce) = ce_grad(h_support, labels, &means.view(), config.temperature);
        let (l_se, g_se) = if has_query {
            se_grad(h_query, &means.view(), config.temperature)
        } else {
            (0.0, Array2::zeros(means.raw_dim()))
        };
        trace.push(RectifyTraceEntry { step, l_ce, l_se });
        let mut grad = Array2::<f64>::zeros(means.raw_dim());
        if config.use_ce {
            grad.scaled_add(config.lambda, &g_ce);
        }
        if config.use_se {
            grad += &g_se;
        }
        adam.step(
            &mut [means.as_slice_mut().expect("standard layout")],
            &[grad.as_slice().expect("standard layout")],
        )?;
    }
    let offsets = &means - &initial;
    let mut rectified = h_support.to_owned();
    for (mut col, &y) in rectified.columns_mut().into_iter().zip(labels) {
        col += &offsets.row(y);
    }
    Ok(RectificationResult {
        class_means: initial,
        rectified_means: means,
        offsets,
        rectified_anchors: rectified,
        trace,
    })
}
