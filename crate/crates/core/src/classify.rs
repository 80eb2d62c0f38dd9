//! Nearest-class-mean metric classifier and the zero-padding baselines.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::episode::{Episode, MultiViewSample, ViewSpec};
use crate::error::{Result, UgdError};
use crate::rectify::{class_means, softmax_neg, sq_dist};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Array1<f64>,
    pub label: usize,
}

/// Class weights `m_c` (rows) and the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weights: Array2<f64>,
    pub temperature: f64,
}

/// Index of the smallest value; ties go to the smaller index.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Softmax over negative scaled squared distances, labelled by the nearest
/// class. The label comes from the distances themselves, so underflowed
/// probabilities never create artificial ties.
fn predict_from_distances(distances: &[f64], temperature: f64) -> Prediction {
    Prediction {
        probabilities: Array1::from(softmax_neg(distances, temperature)),
        label: argmin(distances),
    }
}

/// Class weights are the per-class means of the (rectified) anchors.
pub fn build_classifier(
    anchors: &ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    temperature: f64,
) -> Result<Classifier> {
    Ok(Classifier {
        weights: class_means(anchors, labels, n_classes)?,
        temperature,
    })
}

impl Classifier {
    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn predict(&self, h: ArrayView1<f64>) -> Result<Prediction> {
        if h.len() != self.weights.ncols() {
            return Err(UgdError::DimMismatch {
                expected: self.weights.ncols(),
                actual: h.len(),
            });
        }
        let d: Vec<f64> = self.weights.rows().into_iter().map(|m| sq_dist(m, h)).collect();
        Ok(predict_from_distances(&d, self.temperature))
    }

    /// Predictions for every column of `h`.
    pub fn predict_all(&self, h: &ArrayView2<f64>) -> Result<Vec<Prediction>> {
        h.columns().into_iter().map(|c| self.predict(c)).collect()
    }
}

/// Views joined end to end with zero vectors in missing slots.
pub fn zero_padded(sample: &MultiViewSample, spec: &ViewSpec) -> Array1<f64> {
    let mut out = Array1::zeros(spec.total_dim());
    let mut offset = 0;
    for (v, &d) in spec.dims().iter().enumerate() {
        if let Some(x) = sample.view(v) {
            out.slice_mut(ndarray::s![offset..offset + d]).assign(x);
        }
        offset += d;
    }
    out
}

fn padded_support(episode: &Episode) -> Vec<Array1<f64>> {
    episode
        .support()
        .iter()
        .map(|s| zero_padded(s, episode.view_spec()))
        .collect()
}

/// Prototypical baseline: class prototypes are mean zero-padded supports;
/// queries go to the nearest prototype in Euclidean distance.
pub fn proto_baseline(episode: &Episode) -> Vec<Prediction> {
    let spec = episode.view_spec();
    let support = padded_support(episode);
    let labels = episode.support_labels();
    let mut protos = Array2::<f64>::zeros((episode.ways(), spec.total_dim()));
    let mut counts = vec![0usize; episode.ways()];
    for (x, &y) in support.iter().zip(&labels) {
        let mut row = protos.row_mut(y);
        row += x;
        counts[y] += 1;
    }
    for (mut row, &n) in protos.rows_mut().into_iter().zip(&counts) {
        row /= n as f64;
    }
    episode
        .query()
        .iter()
        .map(|q| {
            let x = zero_padded(q, spec);
            let d: Vec<f64> = protos.rows().into_iter().map(|p| sq_dist(p, x.view())).collect();
            predict_from_distances(&d, 1.0)
        })
        .collect()
}

fn unit(x: Array1<f64>) -> Result<Array1<f64>> {
    let norm = x.dot(&x).sqrt();
    if norm == 0.0 {
        return Err(UgdError::ZeroVector);
    }
    Ok(x / norm)
}

/// Matching baseline: softmax attention over cosine similarities to every
/// zero-padded support, summed per class.
pub fn match_baseline(episode: &Episode) -> Result<Vec<Prediction>> {
    let spec = episode.view_spec();
    let support = padded_support(episode)
        .into_iter()
        .map(unit)
        .collect::<Result<Vec<_>>>()?;
    let labels = episode.support_labels();
    episode
        .query()
        .iter()
        .map(|q| {
            let x = unit(zero_padded(q, spec))?;
            let sims: Vec<f64> = support.iter().map(|s| s.dot(&x)).collect();
            let top = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut mass = vec![0.0; episode.ways()];
            for (s, &y) in sims.iter().zip(&labels) {
                mass[y] += (s - top).exp();
            }
            let total: f64 = mass.iter().sum();
            let probabilities = Array1::from_iter(mass.iter().map(|m| m / total));
            let neg: Vec<f64> = mass.iter().map(|m| -m).collect();
            Ok(Prediction {
                probabilities,
                label: argmin(&neg),
            })
        })
        .collect()
}

/// Fraction of predictions matching `labels`.
pub fn accuracy(predictions: &[Prediction], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.label == y)
        .count();
    hits as f64 / predictions.len() as f64
}
