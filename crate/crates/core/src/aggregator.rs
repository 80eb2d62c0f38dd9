//! Inverse anchor aggregation.
//!
//! A latent matrix `H` (one column per support anchor and per query) is fit
//! so that per-view linear evaluators `W_v H + b_v` reconstruct every view.
//! Optimization alternates between the evaluator parameters and `H`; the
//! latent step additionally penalizes support anchors whose inner-product
//! relations favour a foreign class.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dgai::AnchorBatch;
use crate::error::{Result, UgdError};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    /// Latent dimension; `None` means the largest view dimension.
    pub latent_dim: Option<usize>,
    pub iters: usize,
    pub evaluator_steps: usize,
    pub latent_steps: usize,
    pub lr_evaluator: f64,
    pub lr_latent: f64,
    pub use_constraint: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            latent_dim: None,
            iters: 30,
            evaluator_steps: 10,
            latent_steps: 10,
            lr_evaluator: 1e-2,
            lr_latent: 1e-2,
            use_constraint: true,
        }
    }
}

/// Latent matrix plus per-view evaluator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `d × (n_support + n_query)`.
    pub h: Array2<f64>,
    /// `W_v`: `d_v × d`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    n_support: usize,
}

impl LatentState {
    pub fn latent_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_support(&self) -> usize {
        self.n_support
    }

    pub fn support(&self) -> ArrayView2<'_, f64> {
        self.h.slice(s![.., ..self.n_support])
    }

    pub fn query(&self) -> ArrayView2<'_, f64> {
        self.h.slice(s![.., self.n_support..])
    }
}

fn uniform(shape: (usize, usize), bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

/// Xavier-uniform `H` and `W_v`, zero `b_v`.
pub fn init_latent(batch: &AnchorBatch, d: usize, seed: u64) -> Result<LatentState> {
    if d == 0 {
        return Err(UgdError::InvalidInput("latent dimension must be positive".into()));
    }
    let mut rng = rng::substream(seed, &[tag::LATENT]);
    let h = uniform((d, batch.n_columns()), (6.0 / (2 * d) as f64).sqrt(), &mut rng);
    let weights = batch
        .views
        .iter()
        .map(|g| uniform((g.nrows(), d), (6.0 / (d + g.nrows()) as f64).sqrt(), &mut rng))
        .collect();
    let biases = batch.views.iter().map(|g| Array1::zeros(g.nrows())).collect();
    Ok(LatentState {
        h,
        weights,
        biases,
        n_support: batch.n_support_anchors(),
    })
}

fn check_shapes(
    h: &ArrayView2<f64>,
    weights: &[Array2<f64>],
    biases: &[Array1<f64>],
    views: &[Array2<f64>],
) -> Result<()> {
    if weights.len() != views.len() || biases.len() != views.len() {
        return Err(UgdError::DimMismatch {
            expected: views.len(),
            actual: weights.len().min(biases.len()),
        });
    }
    for ((w, b), g) in weights.iter().zip(biases).zip(views) {
        let mismatch = |expected, actual| Err(UgdError::DimMismatch { expected, actual });
        if w.ncols() != h.nrows() {
            return mismatch(h.nrows(), w.ncols());
        }
        if w.nrows() != g.nrows() {
            return mismatch(g.nrows(), w.nrows());
        }
        if b.len() != g.nrows() {
            return mismatch(g.nrows(), b.len());
        }
        if g.ncols() != h.ncols() {
            return mismatch(h.ncols(), g.ncols());
        }
    }
    Ok(())
}

/// `W_v H + b_v 1ᵀ − Γ_v` for every view.
fn residuals(
    h: &ArrayView2<f64>,
    weights: &[Array2<f64>],
    biases: &[Array1<f64>],
    views: &[Array2<f64>],
) -> Vec<Array2<f64>> {
    weights
        .iter()
        .zip(biases)
        .zip(views)
        .map(|((w, b), g)| {
            let mut r = w.dot(h);
            r += &b.view().insert_axis(Axis(1));
            r -= g;
            r
        })
        .collect()
}

fn sq_norm(r: &Array2<f64>) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// `Σ_v ‖W_v H + b_v 1ᵀ − Γ_v‖²_F`, summed (not averaged) over columns.
pub fn aggregation_loss(
    h: &ArrayView2<f64>,
    weights: &[Array2<f64>],
    biases: &[Array1<f64>],
    views: &[Array2<f64>],
) -> Result<f64> {
    check_shapes(h, weights, biases, views)?;
    Ok(residuals(h, weights, biases, views).iter().map(sq_norm).sum())
}

/// Gradients of the aggregation loss.
#[derive(Debug, Clone)]
pub struct AggregationGrad {
    pub loss: f64,
    pub h: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

pub fn aggregation_grad(
    h: &ArrayView2<f64>,
    weights: &[Array2<f64>],
    biases: &[Array1<f64>],
    views: &[Array2<f64>],
) -> Result<AggregationGrad> {
    check_shapes(h, weights, biases, views)?;
    Ok(grad_parts(h, weights, biases, views, true, true))
}

/// Aggregation gradient restricted to the requested blocks; skipped blocks
/// are left empty.
fn grad_parts(
    h: &ArrayView2<f64>,
    weights: &[Array2<f64>],
    biases: &[Array1<f64>],
    views: &[Array2<f64>],
    want_latent: bool,
    want_evaluator: bool,
) -> AggregationGrad {
    let res = residuals(h, weights, biases, views);
    let mut gh = Array2::zeros(if want_latent { h.dim() } else { (0, 0) });
    if want_latent {
        for (w, r) in weights.iter().zip(&res) {
            ndarray::linalg::general_mat_mul(2.0, &w.t(), r, 1.0, &mut gh);
        }
    }
    let (gw, gb) = if want_evaluator {
        (
            res.iter().map(|r| r.dot(&h.t()) * 2.0).collect(),
            res.iter().map(|r| r.sum_axis(Axis(1)) * 2.0).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    AggregationGrad {
        loss: res.iter().map(sq_norm).sum(),
        h: gh,
        weights: gw,
        biases: gb,
    }
}

/// Class-relation scores `r_n` of every support anchor: the label-summed
/// inner products with all *other* anchors, divided by `(M − 1)/|C|`.
/// Returns an `M × |C|` matrix.
pub fn relation_matrix(
    h_support: &ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<Array2<f64>> {
    let m = h_support.ncols();
    check_constraint_input(m, labels, n_classes)?;
    let (sums, z) = class_sums(h_support, labels, n_classes);
    let mut r = h_support.t().dot(&sums);
    for (n, &y) in labels.iter().enumerate() {
        let col = h_support.column(n);
        r[[n, y]] -= col.dot(&col);
    }
    r /= z;
    Ok(r)
}

fn check_constraint_input(m: usize, labels: &[usize], n_classes: usize) -> Result<()> {
    if labels.len() != m {
        return Err(UgdError::DimMismatch {
            expected: m,
            actual: labels.len(),
        });
    }
    if m < 2 {
        return Err(UgdError::InvalidInput(
            "constraint term needs at least two support anchors".into(),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(UgdError::DimMismatch {
            expected: n_classes,
            actual: y + 1,
        });
    }
    Ok(())
}

fn class_sums(h: &ArrayView2<f64>, labels: &[usize], n_classes: usize) -> (Array2<f64>, f64) {
    let mut sums = Array2::zeros((h.nrows(), n_classes));
    for (col, &y) in h.columns().into_iter().zip(labels) {
        let mut dst = sums.column_mut(y);
        dst += &col;
    }
    let z = (h.ncols() as f64 - 1.0) / n_classes as f64;
    (sums, z)
}

/// First index attaining the maximum.
pub(crate) fn first_argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in row.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Per-anchor penalties `ReLU(max_c r_{n,c} − r_{n,y_n})`.
pub fn constraint_penalties(
    h_support: &ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<f64>> {
    let r = relation_matrix(h_support, labels, n_classes)?;
    Ok(r.rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let top = row[first_argmax(row.iter().copied())];
            (top - row[y]).max(0.0)
        })
        .collect())
}

pub fn constraint_loss(h_support: &ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Result<f64> {
    Ok(constraint_penalties(h_support, labels, n_classes)?.iter().sum())
}

/// Constraint loss and its gradient w.r.t. the support columns.
///
/// Subgradient conventions: ReLU contributes 0 at 0, and `max` routes to
/// the first maximizing class.
pub fn constraint_grad(
    h_support: &ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<(f64, Array2<f64>)> {
    let m = h_support.ncols();
    check_constraint_input(m, labels, n_classes)?;
    let (sums, z) = class_sums(h_support, labels, n_classes);
    let mut r = h_support.t().dot(&sums);
    let sq: Vec<f64> = h_support.columns().into_iter().map(|c| c.dot(&c)).collect();
    for (n, &y) in labels.iter().enumerate() {
        r[[n, y]] -= sq[n];
    }
    r /= z;

    // dL/dR, one +1/−1 pair per active anchor
    let mut dr = Array2::<f64>::zeros((m, n_classes));
    let mut loss = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let row = r.row(n);
        let top = first_argmax(row.iter().copied());
        let gap = row[top] - row[y];
        if gap > 0.0 {
            loss += gap;
            dr[[n, top]] += 1.0;
            dr[[n, y]] -= 1.0;
        }
    }
    if loss == 0.0 {
        return Ok((0.0, Array2::zeros(h_support.raw_dim())));
    }
    // grad_j = (S·D_jᵀ + T_{y_j} − 2 D_{j,y_j} h_j) / z with T = H D
    let mut grad = sums.dot(&dr.t());
    let t = h_support.dot(&dr);
    for (j, &y) in labels.iter().enumerate() {
        let self_weight = 2.0 * dr[[j, y]];
        let mut g = grad.column_mut(j);
        g += &t.column(y);
        if self_weight != 0.0 {
            g.scaled_add(-self_weight, &h_support.column(j));
        }
    }
    grad /= z;
    Ok((loss, grad))
}

/// Losses recorded after one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub l_agg: f64,
    pub l_cst: f64,
}

pub type AggregationTrace = Vec<TraceEntry>;

/// Optimizer state of one aggregation run. The evaluator group `(W, b)` and
/// the latent matrix keep separate Adam moments for the whole run.
#[derive(Debug, Clone)]
pub struct InverseAggregator {
    pub state: LatentState,
    evaluator_adam: AdamState,
    latent_adam: AdamState,
    use_constraint: bool,
}

impl InverseAggregator {
    pub fn new(state: LatentState, config: &AggregationConfig) -> Self {
        let mut sizes: Vec<usize> = state.weights.iter().map(|w| w.len()).collect();
        sizes.extend(state.biases.iter().map(|b| b.len()));
        let evaluator_adam = AdamState::new(AdamConfig::with_lr(config.lr_evaluator), &sizes);
        let latent_adam = AdamState::new(AdamConfig::with_lr(config.lr_latent), &[state.h.len()]);
        Self {
            state,
            evaluator_adam,
            latent_adam,
            use_constraint: config.use_constraint,
        }
    }

    /// `steps` Adam updates of `(W, b)` on the aggregation loss; `H` is frozen.
    pub fn evaluator_update(&mut self, batch: &AnchorBatch, steps: usize) -> Result<()> {
        for _ in 0..steps {
            let st = &mut self.state;
            check_shapes(&st.h.view(), &st.weights, &st.biases, &batch.views)?;
            let g = grad_parts(&st.h.view(), &st.weights, &st.biases, &batch.views, false, true);
            let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * st.weights.len());
            for w in st.weights.iter_mut() {
                params.push(w.as_slice_mut().expect("standard layout"));
            }
            for b in st.biases.iter_mut() {
                params.push(b.as_slice_mut().expect("standard layout"));
            }
            let mut grads: Vec<&[f64]> = Vec::with_capacity(params.len());
            grads.extend(g.weights.iter().map(|w| w.as_slice().expect("standard layout")));
            grads.extend(g.biases.iter().map(|b| b.as_slice().expect("standard layout")));
            self.evaluator_adam.step(&mut params, &grads)?;
        }
        Ok(())
    }

    /// `steps` Adam updates of `H` on aggregation + constraint loss; the
    /// evaluator is frozen.
    pub fn latent_update(&mut self, batch: &AnchorBatch, steps: usize) -> Result<()> {
        self.latent_steps(batch, steps, 1.0)
    }

    pub(crate) fn latent_steps(&mut self, batch: &AnchorBatch, steps: usize, agg_weight: f64) -> Result<()> {
        let n_s = self.state.n_support;
        for _ in 0..steps {
            let st = &mut self.state;
            let mut grad = if agg_weight != 0.0 {
                check_shapes(&st.h.view(), &st.weights, &st.biases, &batch.views)?;
                let mut g = grad_parts(&st.h.view(), &st.weights, &st.biases, &batch.views, true, false).h;
                g *= agg_weight;
                g
            } else {
                Array2::zeros(st.h.raw_dim())
            };
            if self.use_constraint {
                let (_, gc) = constraint_grad(&st.h.slice(s![.., ..n_s]), &batch.labels, batch.n_classes)?;
                let mut dst = grad.slice_mut(s![.., ..n_s]);
                dst += &gc;
            }
            self.latent_adam.step(
                &mut [st.h.as_slice_mut().expect("standard layout")],
                &[grad.as_slice().expect("standard layout")],
            )?;
        }
        Ok(())
    }

    pub fn losses(&self, batch: &AnchorBatch) -> Result<(f64, f64)> {
        let st = &self.state;
        let l_agg = aggregation_loss(&st.h.view(), &st.weights, &st.biases, &batch.views)?;
        let l_cst = if st.n_support >= 2 {
            constraint_loss(&st.support(), &batch.labels, batch.n_classes)?
        } else {
            0.0
        };
        Ok((l_agg, l_cst))
    }

    /// Run the alternating schedule. `check` is called once per outer
    /// iteration and aborts the run when it errors.
    pub fn run(
        &mut self,
        batch: &AnchorBatch,
        config: &AggregationConfig,
        mut check: impl FnMut() -> Result<()>,
    ) -> Result<AggregationTrace> {
        let mut trace = Vec::with_capacity(config.iters);
        for iter in 0..config.iters {
            check()?;
            self.evaluator_update(batch, config.evaluator_steps)?;
            self.latent_update(batch, config.latent_steps)?;
            let (l_agg, l_cst) = self.losses(batch)?;
            trace.push(TraceEntry { iter, l_agg, l_cst });
        }
        Ok(trace)
    }
}

pub fn resolve_latent_dim(config: &AggregationConfig, batch: &AnchorBatch) -> usize {
    config
        .latent_dim
        .unwrap_or_else(|| batch.views.iter().map(|v| v.nrows()).max().unwrap_or(1))
}

/// Initialize and run the full alternating optimization.
pub fn run_inverse_aggregation(
    batch: &AnchorBatch,
    config: &AggregationConfig,
    seed: u64,
) -> Result<(LatentState, AggregationTrace)> {
    let state = init_latent(batch, resolve_latent_dim(config, batch), seed)?;
    let mut agg = InverseAggregator::new(state, config);
    let trace = agg.run(batch, config, || Ok(()))?;
    Ok((agg.state, trace))
}
