//! Experiment configuration, episode execution, view-missing sweeps and
//! report files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aggregator::{init_latent, resolve_latent_dim, AggregationConfig, AggregationTrace, InverseAggregator};
use crate::classify::{accuracy, build_classifier, match_baseline, proto_baseline, Prediction};
use crate::dataset::{gen_synthetic_dataset, load_features, Dataset, Role, SyntheticSpec};
use crate::dgai::{build_anchor_batch, DgaiConfig};
use crate::episode::{apply_view_missing, sample_episode, ClassId, Episode};
use crate::error::{Result, UgdError};
use crate::rectify::{rectify, RectifyConfig, RectifyTraceEntry};
use crate::rng::{self, tag};
use crate::stats::{compute_base_stats, load_stats, BaseStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ugd,
    Proto,
    Match,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ugd => "ugd",
            Method::Proto => "proto",
            Method::Match => "match",
        }
    }
}

/// Component switches for ablations of the full method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Skip rectification; classify with the raw latent class means.
    pub no_ds: bool,
    /// Drop the cross-entropy term from rectification.
    pub no_ce: bool,
    /// Drop the entropy term from rectification.
    pub no_se: bool,
    /// Replace inverse aggregation by stacking the per-view anchors.
    pub no_iaa: bool,
    /// Drop the label constraint from the latent update.
    pub no_cst: bool,
}

impl Ablation {
    /// Suffix such as `[no_ds,no_cst]`, empty for the full method.
    pub fn tag(&self) -> String {
        let flags: Vec<&str> = [
            (self.no_ds, "no_ds"),
            (self.no_ce, "no_ce"),
            (self.no_se, "no_se"),
            (self.no_iaa, "no_iaa"),
            (self.no_cst, "no_cst"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if flags.is_empty() {
            String::new()
        } else {
            format!("[{}]", flags.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Gaussian clusters; the first `base_classes` ids form the base set.
    Synthetic {
        base_classes: usize,
        novel_classes: usize,
        samples_per_class: usize,
        dims: Vec<usize>,
        separation: f64,
        noise: f64,
        seed: u64,
    },
    /// Feature containers on disk. Base statistics come from `base_stats`
    /// when given, otherwise they are computed from `base_manifest`.
    Files {
        #[serde(default)]
        base_manifest: Option<PathBuf>,
        novel_manifest: PathBuf,
        #[serde(default)]
        base_stats: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            base_classes: 20,
            novel_classes: 10,
            samples_per_class: 100,
            dims: vec![32, 32, 32],
            separation: 1.0,
            noise: 1.0 / 3.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub ways: usize,
    pub shots: usize,
    /// Queries per class. Not fixed by the method itself; 15 is the usual
    /// few-shot convention.
    pub queries_per_class: usize,
    pub etas: Vec<f64>,
    /// Episodes averaged per (method, η) point.
    pub episodes: usize,

    pub k: usize,
    pub n_gamma: usize,
    pub ridge: f64,
    pub latent_dim: Option<usize>,
    pub iters: usize,
    pub n1: usize,
    pub n2: usize,
    pub lr_w: f64,
    pub lr_h: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub ds_iters: usize,
    pub ds_lr: f64,

    #[serde(flatten)]
    pub ablation: Ablation,

    pub data: DataSource,
    /// Randomly keep only this many base classes.
    pub base_subset: Option<usize>,
    pub seed: u64,
    pub episode_timeout_secs: Option<f64>,
    /// Write wall-clock seconds into `results.csv` (which makes the file
    /// differ between otherwise identical runs).
    pub report_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dgai = DgaiConfig::default();
        let agg = AggregationConfig::default();
        let ds = RectifyConfig::default();
        Self {
            methods: vec![Method::Ugd, Method::Proto, Method::Match],
            ways: 5,
            shots: 1,
            queries_per_class: 15,
            etas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            episodes: 400,
            k: dgai.k,
            n_gamma: dgai.n_gamma,
            ridge: dgai.ridge,
            latent_dim: agg.latent_dim,
            iters: agg.iters,
            n1: agg.evaluator_steps,
            n2: agg.latent_steps,
            lr_w: agg.lr_evaluator,
            lr_h: agg.lr_latent,
            lambda: ds.lambda,
            temperature: ds.temperature,
            ds_iters: ds.iters,
            ds_lr: ds.lr,
            ablation: Ablation::default(),
            data: DataSource::default(),
            base_subset: None,
            seed: 0,
            episode_timeout_secs: None,
            report_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UgdError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UgdError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply `key=value` overrides. Keys may be dotted (`data.noise`);
    /// values are parsed as JSON and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut tree = serde_json::to_value(&self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| UgdError::Config(format!("override '{item}' is not KEY=VALUE")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let (parent, field) = match key.rsplit_once('.') {
                Some((p, f)) => (format!("/{}", p.replace('.', "/")), f),
                None => (String::new(), key),
            };
            let obj = tree
                .pointer_mut(&parent)
                .and_then(Value::as_object_mut)
                .ok_or_else(|| UgdError::Config(format!("unknown config key '{key}'")))?;
            // nested objects may gain optional fields; top-level keys must exist
            if parent.is_empty() && !obj.contains_key(field) {
                return Err(UgdError::Config(format!("unknown config key '{key}'")));
            }
            obj.insert(field.to_string(), value);
        }
        serde_json::from_value(tree).map_err(|e| UgdError::Config(e.to_string()))
    }

    pub fn dgai(&self) -> DgaiConfig {
        DgaiConfig {
            k: self.k,
            n_gamma: self.n_gamma,
            ridge: self.ridge,
        }
    }

    pub fn aggregation(&self) -> AggregationConfig {
        AggregationConfig {
            latent_dim: self.latent_dim,
            iters: self.iters,
            evaluator_steps: self.n1,
            latent_steps: self.n2,
            lr_evaluator: self.lr_w,
            lr_latent: self.lr_h,
            use_constraint: !self.ablation.no_cst,
        }
    }

    pub fn rectification(&self) -> RectifyConfig {
        RectifyConfig {
            lambda: self.lambda,
            temperature: self.temperature,
            iters: self.ds_iters,
            lr: self.ds_lr,
            use_ce: !self.ablation.no_ce,
            use_se: !self.ablation.no_se,
        }
    }

    /// Result label of a method under this config's ablation flags.
    pub fn method_label(&self, method: Method) -> String {
        match method {
            Method::Ugd => format!("ugd{}", self.ablation.tag()),
            m => m.name().to_string(),
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(UgdError::Config(m.to_string()));
        if self.methods.is_empty() {
            return fail("at least one method is required");
        }
        if self.ways == 0 || self.shots == 0 {
            return fail("ways and shots must be positive");
        }
        if self.episodes == 0 {
            return fail("episodes must be at least 1");
        }
        if self.etas.is_empty() {
            return fail("at least one eta is required");
        }
        if self.etas.iter().any(|e| !(0.0..1.0).contains(e)) {
            return fail("eta values must lie in [0, 1)");
        }
        if self.k == 0 || self.n_gamma == 0 {
            return fail("k and n_gamma must be positive");
        }
        if !(self.ridge > 0.0) {
            return fail("ridge must be positive");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        if self.latent_dim == Some(0) {
            return fail("latent_dim must be positive");
        }
        if let Some(t) = self.episode_timeout_secs {
            if !(t > 0.0) {
                return fail("episode_timeout_secs must be positive");
            }
        }
        if self.methods.contains(&Method::Ugd) && self.ways * self.shots * self.n_gamma < 2 {
            return fail("ugd needs at least two support anchors");
        }
        Ok(())
    }

    /// Checks against the number of views of the loaded data.
    pub fn validate_views(&self, views: usize) -> Result<()> {
        let max = (views - 1) as f64 / views as f64;
        if let Some(&eta) = self.etas.iter().find(|&&e| e > max) {
            return Err(UgdError::Config(format!(
                "eta {eta} exceeds the feasible maximum {max} for {views} views"
            )));
        }
        Ok(())
    }
}

/// Novel pool and base statistics an experiment runs against.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub novel: Dataset,
    pub stats: BaseStats,
}

fn synthetic_pools(config: &ExperimentConfig) -> Result<Option<(Dataset, Dataset)>> {
    match &config.data {
        DataSource::Synthetic {
            base_classes,
            novel_classes,
            samples_per_class,
            dims,
            separation,
            noise,
            seed,
        } => {
            let all = gen_synthetic_dataset(&SyntheticSpec {
                classes: base_classes + novel_classes,
                samples_per_class: *samples_per_class,
                dims: dims.clone(),
                separation: *separation,
                noise: *noise,
                seed: *seed,
            })?;
            let base_ids: Vec<ClassId> = (0..*base_classes).collect();
            let (base, novel) = all.split(&base_ids, Role::Base, Role::Novel)?;
            Ok(Some((base, novel)))
        }
        DataSource::Files { .. } => Ok(None),
    }
}

/// Synthetic base and novel pools of a config (`None` for file sources).
pub fn synthetic_data(config: &ExperimentConfig) -> Result<Option<(Dataset, Dataset)>> {
    synthetic_pools(config)
}

/// Base dataset of the config, if it has one (file sources may carry only
/// precomputed statistics).
pub fn base_dataset(config: &ExperimentConfig) -> Result<Option<Dataset>> {
    if let Some((base, _)) = synthetic_pools(config)? {
        return Ok(Some(base));
    }
    match &config.data {
        DataSource::Files {
            base_manifest: Some(p),
            ..
        } => Ok(Some(load_features(p)?.1)),
        _ => Ok(None),
    }
}

/// Uniformly drop base classes down to `keep` under the dedicated
/// base-subset stream.
pub fn subset_base_classes(stats: &BaseStats, keep: usize, master_seed: u64) -> Result<BaseStats> {
    let classes = stats.classes();
    if keep == 0 || keep > classes.len() {
        return Err(UgdError::Config(format!(
            "base_subset {keep} must lie in 1..={}",
            classes.len()
        )));
    }
    let mut rng = rng::substream(master_seed, &[tag::BASE_SUBSET]);
    let picks: Vec<ClassId> = index::sample(&mut rng, classes.len(), keep)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    stats.subset(&picks)
}

pub fn prepare(config: &ExperimentConfig) -> Result<Workbench> {
    config.validate()?;
    let (novel, stats) = match synthetic_pools(config)? {
        Some((base, novel)) => (novel, compute_base_stats(&base)?),
        None => {
            let DataSource::Files {
                base_manifest,
                novel_manifest,
                base_stats,
            } = &config.data
            else {
                unreachable!("synthetic handled above")
            };
            let (_, novel) = load_features(novel_manifest)?;
            let stats = match (base_stats, base_manifest) {
                (Some(dir), _) => load_stats(dir)?,
                (None, Some(m)) => compute_base_stats(&load_features(m)?.1)?,
                (None, None) => {
                    return Err(UgdError::Config(
                        "file data source needs base_stats or base_manifest".into(),
                    ))
                }
            };
            (novel, stats)
        }
    };
    stats.check_view_spec(novel.view_spec())?;
    config.validate_views(novel.view_spec().view_count())?;
    let stats = match config.base_subset {
        Some(keep) => subset_base_classes(&stats, keep, config.seed)?,
        None => stats,
    };
    if config.methods.contains(&Method::Ugd) && stats.class_count() < config.k {
        return Err(UgdError::Config(format!(
            "k = {} exceeds the {} base classes",
            config.k,
            stats.class_count()
        )));
    }
    Ok(Workbench { novel, stats })
}

/// Outcome of one method on one episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
    pub aggregation_trace: Option<AggregationTrace>,
    pub rectify_trace: Option<Vec<RectifyTraceEntry>>,
}

fn check_deadline(deadline: Option<Instant>, budget: Option<f64>) -> Result<()> {
    match deadline {
        Some(d) if Instant::now() > d => Err(UgdError::Timeout(budget.unwrap_or_default())),
        _ => Ok(()),
    }
}

/// Run one method on one episode. `seed` drives every stochastic step of
/// the full method (anchor sampling and latent initialization).
pub fn run_episode(
    config: &ExperimentConfig,
    episode: &Episode,
    stats: &BaseStats,
    method: Method,
    seed: u64,
) -> Result<EpisodeOutcome> {
    let budget = config.episode_timeout_secs;
    let deadline = budget.map(|s| Instant::now() + Duration::from_secs_f64(s));
    let labels = episode.evaluation_labels();
    let finish = |predictions: Vec<Prediction>, agg, ds| EpisodeOutcome {
        accuracy: accuracy(&predictions, labels),
        predictions,
        aggregation_trace: agg,
        rectify_trace: ds,
    };
    match method {
        Method::Proto => Ok(finish(proto_baseline(episode), None, None)),
        Method::Match => Ok(finish(match_baseline(episode)?, None, None)),
        Method::Ugd => {
            let ablation = config.ablation;
            let batch = build_anchor_batch(episode, stats, &config.dgai(), seed)?;
            check_deadline(deadline, budget)?;

            let (h_support, h_query, agg_trace) = if ablation.no_iaa {
                let h = batch.concatenated();
                let n_s = batch.n_support_anchors();
                let hs = h.slice(ndarray::s![.., ..n_s]).to_owned();
                let hq = h.slice(ndarray::s![.., n_s..]).to_owned();
                (hs, hq, None)
            } else {
                let agg_cfg = config.aggregation();
                let state = init_latent(&batch, resolve_latent_dim(&agg_cfg, &batch), seed)?;
                let mut agg = InverseAggregator::new(state, &agg_cfg);
                let trace = agg.run(&batch, &agg_cfg, || check_deadline(deadline, budget))?;
                let hs = agg.state.support().to_owned();
                let hq = agg.state.query().to_owned();
                (hs, hq, Some(trace))
            };
            check_deadline(deadline, budget)?;

            let (anchors, ds_trace) = if ablation.no_ds {
                (h_support, None)
            } else {
                let res = rectify(
                    &h_support.view(),
                    &h_query.view(),
                    &batch.labels,
                    batch.n_classes,
                    &config.rectification(),
                )?;
                (res.rectified_anchors, Some(res.trace))
            };
            let classifier =
                build_classifier(&anchors.view(), &batch.labels, batch.n_classes, config.temperature)?;
            let predictions = classifier.predict_all(&h_query.view())?;
            Ok(finish(predictions, agg_trace, ds_trace))
        }
    }
}

/// Episode `index` of a sweep before any views are removed.
pub fn sweep_episode(config: &ExperimentConfig, novel: &Dataset, index: usize) -> Result<Episode> {
    sample_episode(
        novel,
        config.ways,
        config.shots,
        config.queries_per_class,
        rng::derive_seed(config.seed, &[tag::EPISODE, index as u64]),
    )
}

/// Episode `index` at view-missing rate `eta`. Identical for every method
/// and ablation of the same master seed.
pub fn point_episode(config: &ExperimentConfig, novel: &Dataset, eta: f64, index: usize) -> Result<Episode> {
    let complete = sweep_episode(config, novel, index)?;
    apply_view_missing(
        &complete,
        eta,
        rng::derive_seed(config.seed, &[tag::MISSING, index as u64, eta.to_bits()]),
    )
}

pub fn method_seed(config: &ExperimentConfig, eta: f64, index: usize) -> u64 {
    rng::derive_seed(config.seed, &[tag::METHOD, index as u64, eta.to_bits()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub method: String,
    pub eta: f64,
    pub mean_acc: f64,
    pub std: f64,
    pub n: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub seed: u64,
    pub report_timing: bool,
    pub points: Vec<PointResult>,
}

impl SweepResult {
    pub fn point(&self, method: &str, eta: f64) -> Option<&PointResult> {
        self.points.iter().find(|p| p.method == method && p.eta == eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub method: String,
    pub eta: f64,
    pub episode: usize,
    pub accuracy: f64,
    pub hash: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub result: SweepResult,
    pub episodes: Vec<EpisodeRecord>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Run every method at every η over `config.episodes` episodes. Episodes
/// are processed on `jobs` workers and reduced in index order.
pub fn run_sweep(config: &ExperimentConfig, bench: &Workbench, jobs: usize) -> Result<SweepOutput> {
    config.validate()?;
    config.validate_views(bench.novel.view_spec().view_count())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| UgdError::InvalidInput(e.to_string()))?;
    let mut points = Vec::new();
    let mut records = Vec::new();
    for &eta in &config.etas {
        type Row = (String, Vec<(f64, f64)>);
        let rows: Vec<Result<Row>> = pool.install(|| {
            (0..config.episodes)
                .into_par_iter()
                .map(|i| {
                    let ep = point_episode(config, &bench.novel, eta, i)?;
                    let seed = method_seed(config, eta, i);
                    let per_method = config
                        .methods
                        .iter()
                        .map(|&m| {
                            let t0 = Instant::now();
                            let out = run_episode(config, &ep, &bench.stats, m, seed)?;
                            Ok((out.accuracy, t0.elapsed().as_secs_f64()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((ep.content_hash(), per_method))
                })
                .collect()
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        for (mi, &m) in config.methods.iter().enumerate() {
            let label = config.method_label(m);
            let accs: Vec<f64> = rows.iter().map(|(_, r)| r[mi].0).collect();
            let seconds = rows.iter().map(|(_, r)| r[mi].1).sum();
            let (mean_acc, std) = mean_std(&accs);
            points.push(PointResult {
                method: label.clone(),
                eta,
                mean_acc,
                std,
                n: accs.len(),
                seconds,
            });
            records.extend(rows.iter().enumerate().map(|(i, (hash, r))| EpisodeRecord {
                method: label.clone(),
                eta,
                episode: i,
                accuracy: r[mi].0,
                hash: hash.clone(),
            }));
        }
    }
    Ok(SweepOutput {
        result: SweepResult {
            ways: config.ways,
            shots: config.shots,
            queries_per_class: config.queries_per_class,
            seed: config.seed,
            report_timing: config.report_timing,
            points,
        },
        episodes: records,
    })
}

pub fn results_csv(result: &SweepResult) -> String {
    let mut out = String::from("method,eta,mean_acc,std,n,seconds\n");
    for p in &result.points {
        let seconds = if result.report_timing {
            format!("{}", p.seconds)
        } else {
            String::new()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.method, p.eta, p.mean_acc, p.std, p.n, seconds
        ));
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| UgdError::io(path, e))
}

/// Write `results.csv`, `results.json` and, when records are given,
/// `per_episode.jsonl` into `dir`. Nothing is written for empty results.
pub fn emit_report(result: &SweepResult, records: Option<&[EpisodeRecord]>, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.points.is_empty() {
        return Err(UgdError::EmptyResults);
    }
    fs::create_dir_all(dir).map_err(|e| UgdError::io(dir, e))?;
    let csv_path = dir.join("results.csv");
    fs::write(&csv_path, results_csv(result)).map_err(|e| UgdError::io(&csv_path, e))?;
    let json_path = dir.join("results.json");
    let json = serde_json::to_string_pretty(result).expect("results serialize");
    fs::write(&json_path, json).map_err(|e| UgdError::io(&json_path, e))?;
    let mut written = vec![csv_path, json_path];
    if let Some(records) = records {
        let p = dir.join("per_episode.jsonl");
        write_jsonl(&p, records)?;
        written.push(p);
    }
    Ok(written)
}

pub fn load_results(path: &Path) -> Result<SweepResult> {
    let text = fs::read_to_string(path).map_err(|e| UgdError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| UgdError::schema(path, e.to_string()))
}
