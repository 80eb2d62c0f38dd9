//! Incomplete multi-view samples, few-shot episodes and view-missing simulation.

use ndarray::Array1;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Result, UgdError};
use crate::rng;

pub type ClassId = usize;

/// Number of views and the feature dimension of each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ViewSpec {
    dims: Vec<usize>,
}

impl ViewSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(UgdError::InvalidInput("view spec needs at least one view".into()));
        }
        if let Some(v) = dims.iter().position(|&d| d == 0) {
            return Err(UgdError::InvalidInput(format!("view {v} has zero dimension")));
        }
        Ok(Self { dims })
    }

    pub fn view_count(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, view: usize) -> usize {
        self.dims[view]
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn max_dim(&self) -> usize {
        self.dims.iter().copied().max().unwrap_or(0)
    }
}

impl TryFrom<Vec<usize>> for ViewSpec {
    type Error = UgdError;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        ViewSpec::new(dims)
    }
}

impl From<ViewSpec> for Vec<usize> {
    fn from(spec: ViewSpec) -> Self {
        spec.dims
    }
}

/// One sample observed under a subset of the views.
///
/// `views[v]` is `None` exactly when view `v` is missing, so the availability
/// mask is derived rather than stored.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    views: Vec<Option<Array1<f64>>>,
    label: Option<ClassId>,
}

impl MultiViewSample {
    pub fn new(views: Vec<Option<Array1<f64>>>, label: Option<ClassId>) -> Result<Self> {
        if views.iter().all(Option::is_none) {
            return Err(UgdError::NoAvailableView);
        }
        Ok(Self { views, label })
    }

    pub fn complete(views: Vec<Array1<f64>>, label: Option<ClassId>) -> Result<Self> {
        Self::new(views.into_iter().map(Some).collect(), label)
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, v: usize) -> Option<&Array1<f64>> {
        self.views[v].as_ref()
    }

    pub fn views(&self) -> &[Option<Array1<f64>>] {
        &self.views
    }

    pub fn is_available(&self, v: usize) -> bool {
        self.views[v].is_some()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.views.iter().map(Option::is_some).collect()
    }

    pub fn available_count(&self) -> usize {
        self.views.iter().filter(|x| x.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.views.iter().all(Option::is_some)
    }

    pub fn label(&self) -> Option<ClassId> {
        self.label
    }

    pub(crate) fn with_label(mut self, label: Option<ClassId>) -> Self {
        self.label = label;
        self
    }

    pub(crate) fn drop_view(&mut self, v: usize) {
        self.views[v] = None;
    }

    /// Check present vectors against `spec`.
    pub fn validate(&self, spec: &ViewSpec) -> Result<()> {
        if self.views.len() != spec.view_count() {
            return Err(UgdError::DimMismatch {
                expected: spec.view_count(),
                actual: self.views.len(),
            });
        }
        for (x, &d) in self.views.iter().zip(spec.dims()) {
            if let Some(x) = x {
                if x.len() != d {
                    return Err(UgdError::DimMismatch {
                        expected: d,
                        actual: x.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A `|C|`-way `K`-shot task over incomplete multi-view samples.
///
/// Support labels are episode-local indices into `classes`. Query labels are
/// kept apart from the query samples and only reachable through
/// [`Episode::evaluation_labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    classes: Vec<ClassId>,
    shots: usize,
    support: Vec<MultiViewSample>,
    query: Vec<MultiViewSample>,
    query_labels: Vec<usize>,
    view_spec: ViewSpec,
    seed: u64,
}

impl Episode {
    pub fn new(
        classes: Vec<ClassId>,
        shots: usize,
        support: Vec<MultiViewSample>,
        query: Vec<MultiViewSample>,
        query_labels: Vec<usize>,
        view_spec: ViewSpec,
        seed: u64,
    ) -> Result<Self> {
        let ways = classes.len();
        if ways == 0 || shots == 0 {
            return Err(UgdError::InvalidInput("episode needs classes and shots".into()));
        }
        if support.len() != ways * shots {
            return Err(UgdError::InvalidInput(format!(
                "expected {} support samples, got {}",
                ways * shots,
                support.len()
            )));
        }
        let mut per_class = vec![0usize; ways];
        for s in &support {
            s.validate(&view_spec)?;
            match s.label() {
                Some(y) if y < ways => per_class[y] += 1,
                other => {
                    return Err(UgdError::InvalidInput(format!(
                        "support label {other:?} outside 0..{ways}"
                    )))
                }
            }
        }
        if per_class.iter().any(|&c| c != shots) {
            return Err(UgdError::InvalidInput(
                "support must hold exactly K samples per class".into(),
            ));
        }
        if query.len() != query_labels.len() {
            return Err(UgdError::InvalidInput("query label count mismatch".into()));
        }
        if query_labels.iter().any(|&y| y >= ways) {
            return Err(UgdError::InvalidInput("query label out of range".into()));
        }
        let mut query = query;
        for q in query.iter_mut() {
            q.validate(&view_spec)?;
            q.label = None;
        }
        Ok(Self {
            classes,
            shots,
            support,
            query,
            query_labels,
            view_spec,
            seed,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn support(&self) -> &[MultiViewSample] {
        &self.support
    }

    /// Episode-local support labels in support order.
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label().unwrap_or(0)).collect()
    }

    pub fn query(&self) -> &[MultiViewSample] {
        &self.query
    }

    /// Ground-truth query labels. Only scoring code should call this.
    pub fn evaluation_labels(&self) -> &[usize] {
        &self.query_labels
    }

    pub fn view_spec(&self) -> &ViewSpec {
        &self.view_spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples(&self) -> impl Iterator<Item = &MultiViewSample> {
        self.support.iter().chain(self.query.iter())
    }

    pub fn missing_rate(&self) -> f64 {
        missing_rate_of_masks(self.samples().map(|s| s.mask()))
    }

    /// SHA-256 over roster, masks, feature bits and labels (hex).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for &c in &self.classes {
            h.update((c as u64).to_le_bytes());
        }
        h.update((self.shots as u64).to_le_bytes());
        for s in self.samples() {
            h.update((s.label().map_or(u64::MAX, |y| y as u64)).to_le_bytes());
            for x in s.views() {
                match x {
                    None => h.update([0u8]),
                    Some(x) => {
                        h.update([1u8]);
                        for v in x {
                            h.update(v.to_bits().to_le_bytes());
                        }
                    }
                }
            }
        }
        for &y in &self.query_labels {
            h.update((y as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// View-missing rate of a set of availability masks: one minus the fraction
/// of available (sample, view) slots.
pub fn missing_rate_of_masks<I, M>(masks: I) -> f64
where
    I: IntoIterator<Item = M>,
    M: AsRef<[bool]>,
{
    let (mut present, mut total) = (0usize, 0usize);
    for m in masks {
        let m = m.as_ref();
        present += m.iter().filter(|&&b| b).count();
        total += m.len();
    }
    if total == 0 {
        return 0.0;
    }
    1.0 - present as f64 / total as f64
}

pub fn missing_rate(episode: &Episode) -> f64 {
    episode.missing_rate()
}

/// Number of slots to remove for a target rate over `slots` entries.
pub fn missing_count(target_eta: f64, slots: usize) -> usize {
    (target_eta * slots as f64).round_ties_even() as usize
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `table[r][k]` = ln of the number of ways to remove `k` slots from `r`
/// rows of `views` slots when every row keeps at least one.
fn log_completion_counts(rows: usize, drop: usize, views: usize) -> Vec<Vec<f64>> {
    let ln_c: Vec<f64> = (0..views).map(|j| ln_binomial(views, j)).collect();
    let mut table = vec![vec![f64::NEG_INFINITY; drop + 1]; rows + 1];
    table[0][0] = 0.0;
    for r in 1..=rows {
        for k in 0..=drop {
            let mut acc = f64::NEG_INFINITY;
            for (j, lc) in ln_c.iter().enumerate().take(k + 1) {
                acc = log_add(acc, lc + table[r - 1][k - j]);
            }
            table[r][k] = acc;
        }
    }
    table
}

/// Remove exactly `round(η · slots)` views from a complete episode.
///
/// The removed set is uniform over all sets of that size that leave every
/// sample at least one view: rows are visited in order (support, then
/// query) and each draws its removal count from the exact conditional
/// distribution given how many completions remain.
pub fn apply_view_missing(episode: &Episode, target_eta: f64, seed: u64) -> Result<Episode> {
    let views = episode.view_spec.view_count();
    let max_eta = (views - 1) as f64 / views as f64;
    if !(0.0..=max_eta).contains(&target_eta) {
        return Err(UgdError::InfeasibleEta {
            eta: target_eta,
            views,
            max: max_eta,
        });
    }
    if episode.samples().any(|s| !s.is_complete()) {
        return Err(UgdError::InvalidInput(
            "view-missing simulation expects a complete episode".into(),
        ));
    }
    let n = episode.support.len() + episode.query.len();
    // `max_eta` guarantees drop <= n*(V-1) up to rounding.
    let drop = missing_count(target_eta, n * views).min(n * (views - 1));
    let mut out = episode.clone();
    if drop == 0 {
        return Ok(out);
    }

    let table = log_completion_counts(n, drop, views);
    let ln_c: Vec<f64> = (0..views).map(|j| ln_binomial(views, j)).collect();
    let mut rng = rng::stream(seed);
    let mut left = drop;
    for i in 0..n {
        let rows_after = n - i - 1;
        let total = table[rows_after + 1][left];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut take = 0;
        for j in 0..views.min(left + 1) {
            let w = (ln_c[j] + table[rows_after][left - j] - total).exp();
            if w == 0.0 {
                continue;
            }
            take = j;
            acc += w;
            if u < acc {
                break;
            }
        }
        left -= take;
        let sample = if i < out.support.len() {
            &mut out.support[i]
        } else {
            &mut out.query[i - episode.support.len()]
        };
        for v in index::sample(&mut rng, views, take) {
            sample.drop_view(v);
        }
    }
    debug_assert_eq!(left, 0);
    Ok(out)
}

/// Draw a `ways`-way `shots`-shot episode with `queries_per_class` queries
/// per class from `pool`. All views stay available.
pub fn sample_episode(
    pool: &Dataset,
    ways: usize,
    shots: usize,
    queries_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    let classes = pool.classes();
    if ways == 0 || shots == 0 {
        return Err(UgdError::InvalidInput("ways and shots must be positive".into()));
    }
    if classes.len() < ways {
        return Err(UgdError::InsufficientPool(format!(
            "{} classes available, {ways} requested",
            classes.len()
        )));
    }
    let need = shots + queries_per_class;
    let by_class = pool.indices_by_class();
    for (c, idx) in classes.iter().zip(&by_class) {
        if idx.len() < need {
            return Err(UgdError::InsufficientPool(format!(
                "class {c} has {} samples, {need} needed",
                idx.len()
            )));
        }
    }

    let mut rng = rng::stream(seed);
    let chosen = index::sample(&mut rng, classes.len(), ways).into_vec();
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries_per_class);
    let mut query_labels = Vec::with_capacity(ways * queries_per_class);
    for (local, &ci) in chosen.iter().enumerate() {
        let members = &by_class[ci];
        let picks = index::sample(&mut rng, members.len(), need).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            let s = pool.samples()[members[p]].clone();
            if j < shots {
                support.push(s.with_label(Some(local)));
            } else {
                query.push(s.with_label(None));
                query_labels.push(local);
            }
        }
    }
    Episode::new(
        chosen.iter().map(|&ci| classes[ci]).collect(),
        shots,
        support,
        query,
        query_labels,
        pool.view_spec().clone(),
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic_dataset, SyntheticSpec};
    use ndarray::array;

    fn toy_episode(n_support: usize, n_query: usize, views: usize) -> Episode {
        let spec = ViewSpec::new(vec![2; views]).unwrap();
        let mk = |i: usize, label| {
            MultiViewSample::complete(
                (0..views).map(|v| array![i as f64, v as f64]).collect(),
                label,
            )
            .unwrap()
        };
        let support = (0..n_support).map(|i| mk(i, Some(i))).collect();
        let query = (0..n_query).map(|i| mk(100 + i, None)).collect();
        let labels = (0..n_query).map(|i| i % n_support).collect();
        Episode::new((0..n_support).collect(), 1, support, query, labels, spec, 0).unwrap()
    }

    #[test]
    fn missing_rate_counts_slots() {
        let e = toy_episode(1, 1, 2);
        assert_eq!(e.missing_rate(), 0.0);
        let mut e2 = e.clone();
        e2.query[0].drop_view(1);
        assert_eq!(missing_rate(&e2), 0.25);
        let all_false = vec![vec![false, false], vec![false, false]];
        assert_eq!(missing_rate_of_masks(&all_false), 1.0);
    }

    #[test]
    fn removal_sets_are_uniform() {
        // 2 samples × 3 views, 3 removals: 20 − 2 = 18 admissible sets
        let e = toy_episode(1, 1, 3);
        let mut counts = std::collections::HashMap::new();
        let draws = 36_000;
        for seed in 0..draws {
            let out = apply_view_missing(&e, 0.5, seed).unwrap();
            let key: Vec<bool> = out.samples().flat_map(|s| s.mask()).collect();
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 18);
        let expected = draws as f64 / 18.0;
        for (mask, &c) in &counts {
            assert!((c as f64 - expected).abs() < 0.1 * expected, "{mask:?}: {c}");
        }
    }

    #[test]
    fn completion_counts_match_enumeration() {
        // rows of 3 slots, each keeping at least one: per-row removal counts 0..=2
        let table = log_completion_counts(3, 6, 3);
        let per_row = [1.0, 3.0, 3.0];
        for k in 0..=6 {
            let mut brute = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        if a + b + c == k {
                            brute += per_row[a] * per_row[b] * per_row[c];
                        }
                    }
                }
            }
            assert!((table[3][k].exp() - brute).abs() < 1e-9 * brute.max(1.0), "k={k}");
        }
    }

    #[test]
    fn zero_eta_is_identity() {
        let e = toy_episode(5, 5, 3);
        assert_eq!(apply_view_missing(&e, 0.0, 3).unwrap(), e);
    }

    #[test]
    fn half_missing_three_views_ten_samples() {
        let e = toy_episode(5, 5, 3);
        let out = apply_view_missing(&e, 0.5, 11).unwrap();
        let missing: usize = out
            .samples()
            .map(|s| s.mask().iter().filter(|&&b| !b).count())
            .sum();
        assert_eq!(missing, 15);
        assert!(out.samples().all(|s| s.available_count() >= 1));
        assert_eq!(out.missing_rate(), 0.5);
    }

    #[test]
    fn infeasible_eta_rejected() {
        let e = toy_episode(2, 2, 2);
        assert!(matches!(
            apply_view_missing(&e, 0.9, 0),
            Err(UgdError::InfeasibleEta { .. })
        ));
    }

    #[test]
    fn missing_count_rounds_half_even() {
        assert_eq!(missing_count(0.5, 5), 2);
        assert_eq!(missing_count(0.5, 7), 4);
        assert_eq!(missing_count(0.3, 240), 72);
    }

    #[test]
    fn query_labels_are_quarantined() {
        let e = toy_episode(3, 3, 2);
        assert!(e.query().iter().all(|q| q.label().is_none()));
        assert_eq!(e.evaluation_labels(), &[0, 1, 2]);
    }

    #[test]
    fn sample_with_no_views_rejected() {
        assert!(matches!(
            MultiViewSample::new(vec![None, None], None),
            Err(UgdError::NoAvailableView)
        ));
    }

    fn pool(classes: usize) -> Dataset {
        gen_synthetic_dataset(&SyntheticSpec {
            classes,
            samples_per_class: 20,
            dims: vec![4, 3],
            separation: 3.0,
            noise: 1.0,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn episode_sampling_counts_and_determinism() {
        let p = pool(8);
        let e = sample_episode(&p, 5, 1, 15, 42).unwrap();
        assert_eq!(e.support().len(), 5);
        assert_eq!(e.query().len(), 75);
        let mut labels = e.support_labels();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(e, sample_episode(&p, 5, 1, 15, 42).unwrap());
        assert_ne!(e, sample_episode(&p, 5, 1, 15, 43).unwrap());
        assert!(e.samples().all(MultiViewSample::is_complete));
    }

    #[test]
    fn episode_sampling_rejects_small_pool() {
        let p = pool(4);
        assert!(matches!(
            sample_episode(&p, 5, 1, 15, 0),
            Err(UgdError::InsufficientPool(_))
        ));
        assert!(matches!(
            sample_episode(&p, 2, 10, 15, 0),
            Err(UgdError::InsufficientPool(_))
        ));
    }

    #[test]
    fn support_and_query_are_disjoint() {
        let p = pool(6);
        let e = sample_episode(&p, 3, 5, 10, 1).unwrap();
        for s in e.support() {
            assert!(e.query().iter().all(|q| q.views() != s.views()));
        }
    }
}
