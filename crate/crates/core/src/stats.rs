//! Per-class, per-view mean and covariance of the base set.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_matrix, Dataset};
use crate::episode::{ClassId, ViewSpec};
use crate::error::{Result, UgdError};

/// Base-class statistics. `means[c][v]` and `covs[c][v]` are indexed by the
/// position of the class in the ascending `classes` list.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseStats {
    view_spec: ViewSpec,
    classes: Vec<ClassId>,
    means: Vec<Vec<Array1<f64>>>,
    covs: Vec<Vec<Array2<f64>>>,
}

impl BaseStats {
    pub fn view_spec(&self) -> &ViewSpec {
        &self.view_spec
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn mean(&self, class_pos: usize, view: usize) -> &Array1<f64> {
        &self.means[class_pos][view]
    }

    pub fn cov(&self, class_pos: usize, view: usize) -> &Array2<f64> {
        &self.covs[class_pos][view]
    }

    pub fn check_view_spec(&self, expected: &ViewSpec) -> Result<()> {
        if &self.view_spec != expected {
            return Err(UgdError::schema(
                "<base stats>",
                format!(
                    "stats cover views {:?}, pipeline expects {:?}",
                    self.view_spec.dims(),
                    expected.dims()
                ),
            ));
        }
        Ok(())
    }

    /// Statistics restricted to `keep` (class ids), preserving id order.
    pub fn subset(&self, keep: &[ClassId]) -> Result<BaseStats> {
        let mut positions = Vec::with_capacity(keep.len());
        for c in keep {
            let pos = self
                .classes
                .binary_search(c)
                .map_err(|_| UgdError::InvalidInput(format!("class {c} not in base stats")))?;
            positions.push(pos);
        }
        positions.sort_unstable();
        positions.dedup();
        Ok(BaseStats {
            view_spec: self.view_spec.clone(),
            classes: positions.iter().map(|&p| self.classes[p]).collect(),
            means: positions.iter().map(|&p| self.means[p].clone()).collect(),
            covs: positions.iter().map(|&p| self.covs[p].clone()).collect(),
        })
    }
}

/// Sample mean and unbiased covariance for every base class and view.
pub fn compute_base_stats(base: &Dataset) -> Result<BaseStats> {
    if base.samples().iter().any(|s| !s.is_complete()) {
        return Err(UgdError::IncompleteBase);
    }
    let spec = base.view_spec().clone();
    let mut means = Vec::with_capacity(base.classes().len());
    let mut covs = Vec::with_capacity(base.classes().len());
    for (&class, members) in base.classes().iter().zip(base.indices_by_class()) {
        let n = members.len();
        let mut class_means = Vec::with_capacity(spec.view_count());
        let mut class_covs = Vec::with_capacity(spec.view_count());
        for (v, &d) in spec.dims().iter().enumerate() {
            if n < 2 {
                return Err(UgdError::TooFewSamples { class, view: v });
            }
            let mut x = Array2::<f64>::zeros((n, d));
            for (row, &i) in x.rows_mut().into_iter().zip(&members) {
                let obs = base.samples()[i].view(v).expect("complete base sample");
                row.into_iter().zip(obs).for_each(|(r, &o)| *r = o);
            }
            let mu = x.mean_axis(Axis(0)).expect("non-empty class");
            let centered = &x - &mu;
            let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
            class_means.push(mu);
            class_covs.push(symmetrize(cov));
        }
        means.push(class_means);
        covs.push(class_covs);
    }
    Ok(BaseStats {
        view_spec: spec,
        classes: base.classes().to_vec(),
        means,
        covs,
    })
}

/// (A + Aᵀ)/2, which is exactly symmetric in floating point.
pub fn symmetrize(a: Array2<f64>) -> Array2<f64> {
    let t = a.t().to_owned();
    (a + t) * 0.5
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsIndex {
    dims: Vec<usize>,
    classes: Vec<ClassId>,
    entries: Vec<StatsEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsEntry {
    class: ClassId,
    view: usize,
    mean: PathBuf,
    cov: PathBuf,
}

fn write_rows(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| UgdError::schema(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| UgdError::schema(path, e.to_string()))?;
    }
    w.flush().map_err(|e| UgdError::io(path, e))
}

/// Write `index.json` and one mean / covariance CSV per (class, view).
pub fn save_stats(stats: &BaseStats, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| UgdError::io(dir, e))?;
    let mut entries = Vec::new();
    for (pos, &class) in stats.classes.iter().enumerate() {
        for v in 0..stats.view_spec.view_count() {
            let mean = PathBuf::from(format!("mean_c{class}_v{v}.csv"));
            let cov = PathBuf::from(format!("cov_c{class}_v{v}.csv"));
            write_rows(&dir.join(&mean), std::iter::once(stats.means[pos][v].to_vec()))?;
            write_rows(
                &dir.join(&cov),
                stats.covs[pos][v].rows().into_iter().map(|r| r.to_vec()),
            )?;
            entries.push(StatsEntry { class, view: v, mean, cov });
        }
    }
    let index = StatsIndex {
        dims: stats.view_spec.dims().to_vec(),
        classes: stats.classes.clone(),
        entries,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes"))
        .map_err(|e| UgdError::io(&path, e))
}

pub fn load_stats(dir: &Path) -> Result<BaseStats> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path)
        .map_err(|e| UgdError::schema(&index_path, format!("cannot read index: {e}")))?;
    let index: StatsIndex =
        serde_json::from_str(&text).map_err(|e| UgdError::schema(&index_path, e.to_string()))?;
    let spec = ViewSpec::new(index.dims.clone())
        .map_err(|e| UgdError::schema(&index_path, e.to_string()))?;
    let mut classes = index.classes.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != index.classes.len() {
        return Err(UgdError::schema(&index_path, "duplicate class ids"));
    }
    let v_count = spec.view_count();
    let mut means: Vec<Vec<Option<Array1<f64>>>> = vec![vec![None; v_count]; classes.len()];
    let mut covs: Vec<Vec<Option<Array2<f64>>>> = vec![vec![None; v_count]; classes.len()];
    for e in &index.entries {
        let pos = classes
            .binary_search(&e.class)
            .map_err(|_| UgdError::schema(&index_path, format!("unknown class {}", e.class)))?;
        if e.view >= v_count {
            return Err(UgdError::schema(&index_path, format!("unknown view {}", e.view)));
        }
        let d = spec.dim(e.view);
        let mean_path = dir.join(&e.mean);
        let rows = read_matrix(&mean_path, d)?;
        if rows.len() != 1 {
            return Err(UgdError::schema(&mean_path, format!("{} rows, expected 1", rows.len())));
        }
        let cov_path = dir.join(&e.cov);
        let cov_rows = read_matrix(&cov_path, d)?;
        if cov_rows.len() != d {
            return Err(UgdError::schema(&cov_path, format!("{} rows, expected {d}", cov_rows.len())));
        }
        means[pos][e.view] = Some(Array1::from(rows.into_iter().next().unwrap()));
        covs[pos][e.view] = Some(
            Array2::from_shape_vec((d, d), cov_rows.into_iter().flatten().collect())
                .expect("square covariance"),
        );
    }
    let complete = |pos: usize, v: usize| {
        UgdError::schema(
            &index_path,
            format!("missing entry for class {} view {v}", classes[pos]),
        )
    };
    let mut out_means = Vec::with_capacity(classes.len());
    let mut out_covs = Vec::with_capacity(classes.len());
    for pos in 0..classes.len() {
        let mut m = Vec::with_capacity(v_count);
        let mut c = Vec::with_capacity(v_count);
        for v in 0..v_count {
            m.push(means[pos][v].take().ok_or_else(|| complete(pos, v))?);
            c.push(covs[pos][v].take().ok_or_else(|| complete(pos, v))?);
        }
        out_means.push(m);
        out_covs.push(c);
    }
    Ok(BaseStats {
        view_spec: spec,
        classes,
        means: out_means,
        covs: out_covs,
    })
}
