//! Labelled multi-view feature pools: synthetic generation and the on-disk
//! CSV + JSON manifest container.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episode::{ClassId, MultiViewSample, ViewSpec};
use crate::error::{Result, UgdError};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Novel,
}

/// An in-memory pool of complete, labelled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    view_spec: ViewSpec,
    classes: Vec<ClassId>,
    samples: Vec<MultiViewSample>,
    role: Role,
}

impl Dataset {
    /// `classes` is sorted and deduplicated; every sample must carry a label
    /// from it.
    pub fn new(
        view_spec: ViewSpec,
        mut classes: Vec<ClassId>,
        samples: Vec<MultiViewSample>,
        role: Role,
    ) -> Result<Self> {
        classes.sort_unstable();
        classes.dedup();
        for s in &samples {
            s.validate(&view_spec)?;
            match s.label() {
                Some(y) if classes.binary_search(&y).is_ok() => {}
                other => {
                    return Err(UgdError::InvalidInput(format!(
                        "sample label {other:?} not among declared classes"
                    )))
                }
            }
        }
        Ok(Self {
            view_spec,
            classes,
            samples,
            role,
        })
    }

    pub fn view_spec(&self) -> &ViewSpec {
        &self.view_spec
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn samples(&self) -> &[MultiViewSample] {
        &self.samples
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Sample indices per class, aligned with [`Dataset::classes`].
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(pos) = s.label().and_then(|y| self.classes.binary_search(&y).ok()) {
                out[pos].push(i);
            }
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.indices_by_class().iter().map(Vec::len).collect()
    }

    /// Keep only the listed classes (and their samples).
    pub fn restrict(&self, keep: &[ClassId]) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .filter(|s| s.label().is_some_and(|y| keep.contains(&y)))
            .cloned()
            .collect();
        Dataset::new(self.view_spec.clone(), keep.to_vec(), samples, self.role)
    }

    /// Split by class id into (classes in `first`, the rest).
    pub fn split(&self, first: &[ClassId], role_first: Role, role_rest: Role) -> Result<(Dataset, Dataset)> {
        let rest: Vec<ClassId> = self
            .classes
            .iter()
            .copied()
            .filter(|c| !first.contains(c))
            .collect();
        let mut a = self.restrict(first)?;
        let mut b = self.restrict(&rest)?;
        a.role = role_first;
        b.role = role_rest;
        Ok((a, b))
    }
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub dims: Vec<usize>,
    /// Class centers are drawn from N(0, separation² I) per view.
    pub separation: f64,
    /// Samples are drawn from N(center, noise² I) per view.
    pub noise: f64,
    pub seed: u64,
}

/// Generate `classes` Gaussian clusters. Class ids are `0..classes`; samples
/// are ordered class-major.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.samples_per_class == 0 {
        return Err(UgdError::InvalidInput("synthetic counts must be positive".into()));
    }
    let view_spec = ViewSpec::new(spec.dims.clone())?;
    let mut rng = rng::stream(spec.seed);
    let mut gaussian = |n: usize, scale: f64| -> Array1<f64> {
        Array1::from_shape_fn(n, |_| scale * rng.sample::<f64, _>(StandardNormal))
    };
    let centers: Vec<Vec<Array1<f64>>> = (0..spec.classes)
        .map(|_| spec.dims.iter().map(|&d| gaussian(d, spec.separation)).collect())
        .collect();
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let views = center
                .iter()
                .map(|mu| mu + &gaussian(mu.len(), spec.noise))
                .collect();
            samples.push(MultiViewSample::complete(views, Some(c))?);
        }
    }
    Dataset::new(view_spec, (0..spec.classes).collect(), samples, Role::Novel)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewFile {
    pub path: PathBuf,
    pub dim: usize,
}

/// JSON manifest of a feature container. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub views: Vec<ViewFile>,
    pub labels_path: PathBuf,
    pub classes: Vec<ClassId>,
    pub role: Role,
    /// Per-class sample counts aligned with `classes`, when declared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Write `dataset` as `<name>.json` plus `<name>_view<v>.csv` and
/// `<name>_labels.txt` in `dir`. Returns the manifest path.
pub fn save_features(dataset: &Dataset, dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| UgdError::io(dir, e))?;
    let mut views = Vec::new();
    for (v, &dim) in dataset.view_spec().dims().iter().enumerate() {
        let rel = PathBuf::from(format!("{name}_view{v}.csv"));
        let path = dir.join(&rel);
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| csv_err(&path, e))?;
        for s in dataset.samples() {
            let x = s.view(v).ok_or_else(|| {
                UgdError::InvalidInput("feature containers hold complete samples only".into())
            })?;
            w.serialize(x.as_slice().expect("contiguous feature vector"))
                .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| UgdError::io(&path, e))?;
        views.push(ViewFile { path: rel, dim });
    }
    let labels_rel = PathBuf::from(format!("{name}_labels.txt"));
    let labels: String = dataset
        .samples()
        .iter()
        .map(|s| format!("{}\n", s.label().unwrap_or_default()))
        .collect();
    let labels_path = dir.join(&labels_rel);
    fs::write(&labels_path, labels).map_err(|e| UgdError::io(&labels_path, e))?;

    let manifest = DatasetManifest {
        views,
        labels_path: labels_rel,
        classes: dataset.classes().to_vec(),
        role: dataset.role(),
        counts: Some(dataset.class_counts()),
    };
    let path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| UgdError::io(&path, e))?;
    Ok(path)
}

fn csv_err(path: &Path, e: csv::Error) -> UgdError {
    UgdError::schema(path, e.to_string())
}

pub(crate) fn read_matrix(path: &Path, cols: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != cols {
            return Err(UgdError::schema(
                path,
                format!("row {i} has {} columns, expected {cols}", rec.len()),
            ));
        }
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| UgdError::schema(path, format!("row {i}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Load a feature container from its manifest.
pub fn load_features(manifest_path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| UgdError::schema(manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| UgdError::schema(manifest_path, e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let spec = ViewSpec::new(manifest.views.iter().map(|v| v.dim).collect())
        .map_err(|e| UgdError::schema(manifest_path, e.to_string()))?;

    let labels_path = resolve(dir, &manifest.labels_path);
    let labels_text = fs::read_to_string(&labels_path)
        .map_err(|e| UgdError::schema(&labels_path, format!("cannot read labels: {e}")))?;
    let labels = labels_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let y: ClassId = l
                .trim()
                .parse()
                .map_err(|e| UgdError::schema(&labels_path, format!("line {i}: {e}")))?;
            if !manifest.classes.contains(&y) {
                return Err(UgdError::schema(&labels_path, format!("unknown class id {y}")));
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tables = Vec::with_capacity(manifest.views.len());
    for vf in &manifest.views {
        let path = resolve(dir, &vf.path);
        if !path.exists() {
            return Err(UgdError::schema(&path, "view file does not exist"));
        }
        let rows = read_matrix(&path, vf.dim)?;
        if rows.len() != labels.len() {
            return Err(UgdError::schema(
                &path,
                format!("{} rows, but {} labels", rows.len(), labels.len()),
            ));
        }
        tables.push(rows);
    }

    if let Some(counts) = &manifest.counts {
        if counts.len() != manifest.classes.len() {
            return Err(UgdError::schema(manifest_path, "counts length differs from classes"));
        }
        for (c, &n) in manifest.classes.iter().zip(counts) {
            let actual = labels.iter().filter(|&&y| y == *c).count();
            if actual != n {
                return Err(UgdError::schema(
                    manifest_path,
                    format!("class {c}: declared {n} samples, found {actual}"),
                ));
            }
        }
    }

    let mut tables: Vec<std::vec::IntoIter<Vec<f64>>> =
        tables.into_iter().map(Vec::into_iter).collect();
    let samples = labels
        .iter()
        .map(|&y| {
            let views = tables
                .iter_mut()
                .map(|t| Array1::from(t.next().expect("row count checked")))
                .collect();
            MultiViewSample::complete(views, Some(y))
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(spec, manifest.classes.clone(), samples, manifest.role)
        .map_err(|e| UgdError::schema(manifest_path, e.to_string()))?;
    Ok((manifest, dataset))
}
