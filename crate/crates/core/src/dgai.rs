//! View-distribution estimation, dense Gaussian anchor sampling and query
//! view interpolation.
//!
//! Each sample is described per view by a Gaussian whose parameters come
//! from the base classes retrieved around its available views. Supports are
//! expanded into `n_gamma` anchors per view; queries get their missing views
//! filled with the center of the estimated distribution.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, MultiViewSample};
use crate::error::{Result, UgdError};
use crate::rng::{self, tag};
use crate::stats::BaseStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgaiConfig {
    /// Base classes retrieved per available view.
    pub k: usize,
    /// Anchors drawn per support sample.
    pub n_gamma: usize,
    /// Relative ridge: `ridge * (trace(Σ)/d + 1)` is added to the diagonal
    /// before factorization.
    pub ridge: f64,
}

impl Default for DgaiConfig {
    fn default() -> Self {
        Self {
            k: 2,
            n_gamma: 60,
            ridge: 1e-6,
        }
    }
}

/// Per-view Euclidean distances to every base mean; `None` for missing views.
pub type DistanceTables = Vec<Option<Vec<f64>>>;

pub fn view_distances(sample: &MultiViewSample, stats: &BaseStats) -> Result<DistanceTables> {
    sample.validate(stats.view_spec())?;
    Ok((0..sample.view_count())
        .map(|v| {
            sample.view(v).map(|x| {
                (0..stats.class_count())
                    .map(|c| {
                        x.iter()
                            .zip(stats.mean(c, v))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            })
        })
        .collect())
}

/// Base classes retrieved for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    /// Ascending positions into the base-stats class list (which is sorted
    /// by class id, so this is also ascending id order).
    pub members: Vec<usize>,
    pub tables: DistanceTables,
}

impl RetrievalSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Indices of the `k` smallest entries, ties broken by the smaller index.
pub fn top_k(distances: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Union over available views of the `k` nearest base classes.
pub fn retrieve_topk(tables: DistanceTables, k: usize) -> Result<RetrievalSet> {
    if k == 0 {
        return Err(UgdError::InvalidInput("k must be at least 1".into()));
    }
    let mut members = Vec::new();
    let mut any = false;
    for t in tables.iter().flatten() {
        any = true;
        if t.len() < k {
            return Err(UgdError::InvalidInput(format!(
                "k = {k} exceeds the {} base classes",
                t.len()
            )));
        }
        members.extend(top_k(t, k));
    }
    if !any {
        return Err(UgdError::NoAvailableView);
    }
    members.sort_unstable();
    members.dedup();
    Ok(RetrievalSet { members, tables })
}

/// Gaussian parameters of one sample in every view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDistribution {
    pub means: Vec<Array1<f64>>,
    pub covs: Vec<Array2<f64>>,
}

pub fn estimate_distribution(
    sample: &MultiViewSample,
    stats: &BaseStats,
    retrieved: &RetrievalSet,
) -> Result<ViewDistribution> {
    if retrieved.is_empty() {
        return Err(UgdError::EmptyRetrieval);
    }
    sample.validate(stats.view_spec())?;
    let n = retrieved.len() as f64;
    let mut means = Vec::with_capacity(sample.view_count());
    let mut covs = Vec::with_capacity(sample.view_count());
    for (v, &d) in stats.view_spec().dims().iter().enumerate() {
        let mut mean_sum = Array1::<f64>::zeros(d);
        let mut cov_sum = Array2::<f64>::zeros((d, d));
        for &c in &retrieved.members {
            mean_sum += stats.mean(c, v);
            cov_sum += stats.cov(c, v);
        }
        let mean = match sample.view(v) {
            Some(x) => (mean_sum + x) / (n + 1.0),
            None => mean_sum / n,
        };
        means.push(mean);
        covs.push(cov_sum / n);
    }
    Ok(ViewDistribution { means, covs })
}

/// Retrieve and estimate in one go.
pub fn estimate_for_sample(
    sample: &MultiViewSample,
    stats: &BaseStats,
    k: usize,
) -> Result<ViewDistribution> {
    let retrieved = retrieve_topk(view_distances(sample, stats)?, k)?;
    estimate_distribution(sample, stats, &retrieved)
}

/// `ridge * (trace(Σ)/d + 1)`.
pub fn scaled_ridge(cov: &Array2<f64>, ridge: f64) -> f64 {
    let d = cov.nrows().max(1) as f64;
    ridge * (cov.diag().sum() / d + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    /// Lower-triangular Cholesky factor.
    Cholesky,
    /// `Q · diag(sqrt(max(λ, 0)))` from a symmetric eigendecomposition.
    Eigen,
}

/// A square-root factor `L` with `L Lᵀ = Σ + εI`.
#[derive(Debug, Clone)]
pub struct CovFactor {
    pub factor: Array2<f64>,
    pub kind: FactorKind,
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Factor `cov + eps·I`, falling back to a clamped eigendecomposition when
/// Cholesky hits a non-positive pivot. `view` is only used for errors.
pub fn factorize(cov: &Array2<f64>, eps: f64, view: usize) -> Result<CovFactor> {
    let d = cov.nrows();
    let mut m = to_nalgebra(cov);
    for i in 0..d {
        m[(i, i)] += eps;
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(UgdError::FactorizationFailure { view });
    }
    if let Some(ch) = m.clone().cholesky() {
        return Ok(CovFactor {
            factor: from_nalgebra(&ch.l()),
            kind: FactorKind::Cholesky,
        });
    }
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|x| !x.is_finite()) {
        return Err(UgdError::FactorizationFailure { view });
    }
    let mut q = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        q.column_mut(j).scale_mut(s);
    }
    Ok(CovFactor {
        factor: from_nalgebra(&q),
        kind: FactorKind::Eigen,
    })
}

/// `n` draws from N(mean, L Lᵀ) as the columns of a `d × n` matrix.
pub fn draw_gaussian<R: Rng>(
    mean: ArrayView1<f64>,
    factor: &CovFactor,
    n: usize,
    rng: &mut R,
) -> Array2<f64> {
    let d = mean.len();
    let z = Array2::from_shape_simple_fn((d, n), || rng.sample::<f64, _>(StandardNormal));
    let mut out = factor.factor.dot(&z);
    out += &mean.insert_axis(Axis(1));
    out
}

/// `n_gamma` anchors per view from N(μ_v, Σ_v + ε I). View `v` uses the
/// substream `(seed, v)`.
pub fn sample_support_anchors(
    dist: &ViewDistribution,
    n_gamma: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    sample_anchors_with(dist, n_gamma, |_| eps, seed)
}

fn sample_anchors_with(
    dist: &ViewDistribution,
    n_gamma: usize,
    eps: impl Fn(&Array2<f64>) -> f64,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    if n_gamma == 0 {
        return Err(UgdError::InvalidInput("n_gamma must be at least 1".into()));
    }
    dist.means
        .iter()
        .zip(&dist.covs)
        .enumerate()
        .map(|(v, (mean, cov))| {
            let e = eps(cov);
            if !(e > 0.0) {
                return Err(UgdError::InvalidInput("ridge must be positive".into()));
            }
            let factor = factorize(cov, e, v)?;
            let mut rng = rng::substream(seed, &[v as u64]);
            Ok(draw_gaussian(mean.view(), &factor, n_gamma, &mut rng))
        })
        .collect()
}

/// Available views pass through; missing ones take the distribution center.
pub fn complete_query_views(sample: &MultiViewSample, dist: &ViewDistribution) -> Vec<Array1<f64>> {
    (0..sample.view_count())
        .map(|v| match sample.view(v) {
            Some(x) => x.clone(),
            None => dist.means[v].clone(),
        })
        .collect()
}

/// Per-view anchor matrices: `N_S · n_gamma` support anchors (grouped by
/// support index) followed by one column per query.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBatch {
    pub views: Vec<Array2<f64>>,
    /// Episode-local labels of the support-anchor columns.
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub n_query: usize,
}

impl AnchorBatch {
    pub fn n_support_anchors(&self) -> usize {
        self.labels.len()
    }

    pub fn n_columns(&self) -> usize {
        self.labels.len() + self.n_query
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    /// All views stacked row-wise: `(Σ d_v) × n_columns`.
    pub fn concatenated(&self) -> Array2<f64> {
        let parts: Vec<_> = self.views.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(0), &parts).expect("equal column counts")
    }
}

pub fn build_anchor_batch(
    episode: &Episode,
    stats: &BaseStats,
    config: &DgaiConfig,
    seed: u64,
) -> Result<AnchorBatch> {
    stats.check_view_spec(episode.view_spec())?;
    let dims = episode.view_spec().dims();
    let n_support = episode.support().len();
    let n_query = episode.query().len();
    let n_cols = n_support * config.n_gamma + n_query;
    let mut views: Vec<Array2<f64>> = dims.iter().map(|&d| Array2::zeros((d, n_cols))).collect();
    let mut labels = Vec::with_capacity(n_support * config.n_gamma);

    for (i, s) in episode.support().iter().enumerate() {
        let dist = estimate_for_sample(s, stats, config.k)?;
        let anchors = sample_anchors_with(
            &dist,
            config.n_gamma,
            |cov| scaled_ridge(cov, config.ridge),
            rng::derive_seed(seed, &[tag::ANCHORS, i as u64]),
        )?;
        let cols = i * config.n_gamma..(i + 1) * config.n_gamma;
        for (dst, a) in views.iter_mut().zip(&anchors) {
            dst.slice_mut(ndarray::s![.., cols.clone()]).assign(a);
        }
        labels.extend(std::iter::repeat_n(s.label().unwrap_or(0), config.n_gamma));
    }
    let offset = n_support * config.n_gamma;
    for (j, q) in episode.query().iter().enumerate() {
        let filled = if q.is_complete() {
            q.views().iter().map(|x| x.clone().expect("complete")).collect()
        } else {
            complete_query_views(q, &estimate_for_sample(q, stats, config.k)?)
        };
        for (dst, x) in views.iter_mut().zip(&filled) {
            dst.column_mut(offset + j).assign(x);
        }
    }
    Ok(AnchorBatch {
        views,
        labels,
        n_classes: episode.ways(),
        n_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic_dataset, Role, SyntheticSpec};
    use crate::episode::{apply_view_missing, sample_episode, ViewSpec};
    use crate::stats::compute_base_stats;
    use ndarray::array;

    fn stats_from(points: Vec<(usize, Vec<Array1<f64>>)>, dims: Vec<usize>) -> BaseStats {
        let mut samples = Vec::new();
        for (c, views) in points {
            // two samples symmetric around the requested mean
            let lo: Vec<_> = views.iter().map(|m| m - 0.5).collect();
            let hi: Vec<_> = views.iter().map(|m| m + 0.5).collect();
            samples.push(MultiViewSample::complete(lo, Some(c)).unwrap());
            samples.push(MultiViewSample::complete(hi, Some(c)).unwrap());
        }
        let classes = samples.iter().filter_map(|s| s.label()).collect();
        let d = Dataset::new(ViewSpec::new(dims).unwrap(), classes, samples, Role::Base).unwrap();
        compute_base_stats(&d).unwrap()
    }
    use crate::dataset::Dataset;

    #[test]
    fn distances_per_available_view() {
        let stats = stats_from(vec![(0, vec![array![1.0]]), (1, vec![array![3.0]])], vec![1]);
        let s = MultiViewSample::complete(vec![array![3.0]], None).unwrap();
        let t = view_distances(&s, &stats).unwrap();
        assert_eq!(t, vec![Some(vec![2.0, 0.0])]);
    }

    #[test]
    fn missing_view_yields_empty_table() {
        let stats = stats_from(
            vec![(0, vec![array![1.0], array![0.0]])],
            vec![1, 1],
        );
        let s = MultiViewSample::new(vec![None, Some(array![1.0])], None).unwrap();
        let t = view_distances(&s, &stats).unwrap();
        assert!(t[0].is_none());
        assert_eq!(t[1], Some(vec![1.0]));
        assert!(matches!(
            retrieve_topk(vec![None, None], 1),
            Err(UgdError::NoAvailableView)
        ));
    }

    #[test]
    fn topk_examples() {
        let j = retrieve_topk(vec![Some(vec![0.1, 0.5, 0.3])], 2).unwrap();
        assert_eq!(j.members, vec![0, 2]);
        let j = retrieve_topk(vec![Some(vec![0.2, 0.2, 0.9])], 1).unwrap();
        assert_eq!(j.members, vec![0]);
        let mut a = vec![9.0; 8];
        a[7] = 0.0;
        a[3] = 1.0;
        let mut b = vec![5.0; 8];
        b[7] = 0.1;
        b[3] = 0.2;
        let j = retrieve_topk(vec![Some(a), Some(b)], 2).unwrap();
        assert_eq!(j.members, vec![3, 7]);
    }

    #[test]
    fn estimate_available_and_missing_views() {
        let stats = stats_from(
            vec![
                (0, vec![array![2.0, 0.0], array![1.0]]),
                (1, vec![array![4.0, 2.0], array![3.0]]),
            ],
            vec![2, 1],
        );
        let s = MultiViewSample::new(vec![Some(array![0.0, 4.0]), None], None).unwrap();
        let one = RetrievalSet { members: vec![0], tables: vec![] };
        let dist = estimate_distribution(&s, &stats, &one).unwrap();
        assert_eq!(dist.means[0], array![1.0, 2.0]);
        assert_eq!(dist.means[1], array![1.0]);

        let both = RetrievalSet { members: vec![0, 1], tables: vec![] };
        let dist = estimate_distribution(&s, &stats, &both).unwrap();
        assert_eq!(dist.means[1], array![2.0]);
        // every retrieved covariance is the same 0.5-spread matrix
        assert_eq!(dist.covs[0], stats.cov(0, 0));

        let empty = RetrievalSet { members: vec![], tables: vec![] };
        assert!(matches!(
            estimate_distribution(&s, &stats, &empty),
            Err(UgdError::EmptyRetrieval)
        ));
    }

    #[test]
    fn tiny_ridge_on_zero_covariance_pins_anchors_to_mean() {
        let mean = Array1::from_shape_fn(8, |i| i as f64 - 3.0);
        let dist = ViewDistribution {
            means: vec![mean.clone()],
            covs: vec![Array2::zeros((8, 8))],
        };
        let anchors = sample_support_anchors(&dist, 50, 1e-12, 4).unwrap();
        for col in anchors[0].columns() {
            for (a, m) in col.iter().zip(&mean) {
                assert!((a - m).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn non_positive_ridge_rejected() {
        let dist = ViewDistribution {
            means: vec![Array1::zeros(2)],
            covs: vec![Array2::eye(2)],
        };
        assert!(sample_support_anchors(&dist, 3, 0.0, 1).is_err());
        assert!(sample_support_anchors(&dist, 0, 1e-6, 1).is_err());
    }

    #[test]
    fn indefinite_input_falls_back_to_eigen() {
        let cov = array![[1.0, 2.0], [2.0, 1.0]];
        let f = factorize(&cov, 1e-9, 0).unwrap();
        assert_eq!(f.kind, FactorKind::Eigen);
        assert!(f.factor.iter().all(|x| x.is_finite()));
        let pd = factorize(&Array2::eye(3), 1e-9, 0).unwrap();
        assert_eq!(pd.kind, FactorKind::Cholesky);
        let bad = array![[f64::NAN, 0.0], [0.0, 1.0]];
        assert!(matches!(
            factorize(&bad, 1e-6, 2),
            Err(UgdError::FactorizationFailure { view: 2 })
        ));
    }

    #[test]
    fn query_completion_branches() {
        let dist = ViewDistribution {
            means: vec![array![9.0, 9.0], array![1.0, 2.0, 3.0]],
            covs: vec![Array2::eye(2), Array2::eye(3)],
        };
        let x0 = array![0.25, -1.5];
        let mixed = MultiViewSample::new(vec![Some(x0.clone()), None], None).unwrap();
        let out = complete_query_views(&mixed, &dist);
        assert_eq!(out[0], x0);
        assert_eq!(out[1], array![1.0, 2.0, 3.0]);

        let full =
            MultiViewSample::complete(vec![x0.clone(), array![7.0, 7.0, 7.0]], None).unwrap();
        assert_eq!(complete_query_views(&full, &dist), vec![x0, array![7.0, 7.0, 7.0]]);

        // idempotent: feeding the completed sample back changes nothing
        let again = MultiViewSample::complete(out.clone(), None).unwrap();
        assert_eq!(complete_query_views(&again, &dist), out);
    }

    fn synthetic_setup(eta: f64) -> (Episode, BaseStats) {
        let data = gen_synthetic_dataset(&SyntheticSpec {
            classes: 12,
            samples_per_class: 20,
            dims: vec![6, 4],
            separation: 3.0,
            noise: 1.0,
            seed: 8,
        })
        .unwrap();
        let (base, novel) = data
            .split(&(0..6).collect::<Vec<_>>(), Role::Base, Role::Novel)
            .unwrap();
        let stats = compute_base_stats(&base).unwrap();
        let ep = sample_episode(&novel, 5, 1, 15, 3).unwrap();
        (apply_view_missing(&ep, eta, 4).unwrap(), stats)
    }

    #[test]
    fn batch_layout_and_labels() {
        let (ep, stats) = synthetic_setup(0.3);
        let batch = build_anchor_batch(&ep, &stats, &DgaiConfig::default(), 1).unwrap();
        assert_eq!(batch.n_columns(), 5 * 60 + 75);
        for v in &batch.views {
            assert_eq!(v.ncols(), 375);
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let first = ep.support()[0].label().unwrap();
        assert!(batch.labels[..60].iter().all(|&y| y == first));
        for (i, s) in ep.support().iter().enumerate() {
            assert!(batch.labels[i * 60..(i + 1) * 60]
                .iter()
                .all(|&y| y == s.label().unwrap()));
        }
    }

    #[test]
    fn complete_queries_pass_through_bit_exact() {
        let (ep, stats) = synthetic_setup(0.0);
        let cfg = DgaiConfig { ridge: 1e-12, ..DgaiConfig::default() };
        let batch = build_anchor_batch(&ep, &stats, &cfg, 1).unwrap();
        for (j, q) in ep.query().iter().enumerate() {
            for v in 0..2 {
                assert_eq!(batch.views[v].column(300 + j), q.view(v).unwrap().view());
            }
        }
    }

    #[test]
    fn batch_is_deterministic_in_seed() {
        let (ep, stats) = synthetic_setup(0.3);
        let cfg = DgaiConfig::default();
        let a = build_anchor_batch(&ep, &stats, &cfg, 10).unwrap();
        assert_eq!(a, build_anchor_batch(&ep, &stats, &cfg, 10).unwrap());
        assert_ne!(a, build_anchor_batch(&ep, &stats, &cfg, 11).unwrap());
    }
}
