//! Shared oracles for the integration suites.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use ugd::aggregator::{aggregation_grad, aggregation_loss, constraint_grad};
use ugd::rectify::{ce_grad, ce_loss, relation_matrix, se_grad, se_loss};
use ugd::rng::{stream, StreamRng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 25;

pub fn randn(rng: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn randn_vec(rng: &mut StreamRng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

/// Central differences of `f` at `x`.
pub fn central_fd(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn labels_with_all_classes(rng: &mut StreamRng, m: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..m).map(|i| if i < classes { i } else { rng.random_range(0..classes) }).collect();
    // shuffle so class blocks are not contiguous
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

/// Worst relative error of the aggregation gradient (latent, weights and
/// biases) over random instances.
pub fn aggregation_grad_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..=8);
        let v_count = rng.random_range(1..=3);
        let cols = rng.random_range(2..=30);
        let dims: Vec<usize> = (0..v_count).map(|_| rng.random_range(1..=8)).collect();
        let h = randn(&mut rng, d, cols);
        let weights: Vec<Array2<f64>> = dims.iter().map(|&dv| randn(&mut rng, dv, d)).collect();
        let biases: Vec<Array1<f64>> = dims.iter().map(|&dv| randn_vec(&mut rng, dv)).collect();
        let views: Vec<Array2<f64>> = dims.iter().map(|&dv| randn(&mut rng, dv, cols)).collect();

        let g = aggregation_grad(&h.view(), &weights, &biases, &views).unwrap();
        let mut analytic: Vec<f64> = g.h.iter().copied().collect();
        for w in &g.weights {
            analytic.extend(w.iter());
        }
        for b in &g.biases {
            analytic.extend(b.iter());
        }

        let mut flat: Vec<f64> = h.iter().copied().collect();
        for w in &weights {
            flat.extend(w.iter());
        }
        for b in &biases {
            flat.extend(b.iter());
        }
        let unpack = |x: &[f64]| {
            let mut at = 0;
            let mut take = |n: usize| {
                let s = x[at..at + n].to_vec();
                at += n;
                s
            };
            let h = Array2::from_shape_vec((d, cols), take(d * cols)).unwrap();
            let ws: Vec<Array2<f64>> = dims
                .iter()
                .map(|&dv| Array2::from_shape_vec((dv, d), take(dv * d)).unwrap())
                .collect();
            let bs: Vec<Array1<f64>> = dims.iter().map(|&dv| Array1::from(take(dv))).collect();
            (h, ws, bs)
        };
        let numeric = central_fd(
            |x| {
                let (h, ws, bs) = unpack(x);
                aggregation_loss(&h.view(), &ws, &bs, &views).unwrap()
            },
            &flat,
        );
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Relation scores by explicit pairwise sums: `O(M²·d)`.
pub fn naive_relations(h: &Array2<f64>, labels: &[usize], classes: usize) -> Array2<f64> {
    let m = h.ncols();
    let z = (m as f64 - 1.0) / classes as f64;
    let mut r = Array2::zeros((m, classes));
    for n in 0..m {
        for j in 0..m {
            if j != n {
                r[[n, labels[j]]] += h.column(n).dot(&h.column(j));
            }
        }
    }
    r / z
}

/// Constraint loss from the pairwise oracle.
pub fn naive_constraint_loss(h: &Array2<f64>, labels: &[usize], classes: usize) -> f64 {
    let r = naive_relations(h, labels, classes);
    labels
        .iter()
        .enumerate()
        .map(|(n, &y)| {
            let top = r.row(n).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (top - r[[n, y]]).max(0.0)
        })
        .sum()
}

/// Smallest gap between the two largest relation scores of any anchor;
/// small values mean a finite difference may straddle a kink.
pub fn kink_margin(h: &Array2<f64>, labels: &[usize], classes: usize) -> f64 {
    let r = naive_relations(h, labels, classes);
    r.rows()
        .into_iter()
        .map(|row| {
            let mut v: Vec<f64> = row.to_vec();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v[0] - v[1]
        })
        .fold(f64::INFINITY, f64::min)
}

pub const KINK_MARGIN: f64 = 1e-2;

/// Worst relative error of the constraint gradient against finite
/// differences of the pairwise oracle, plus the worst loss disagreement
/// between the fast and pairwise forms. Instances near kinks are redrawn.
pub fn constraint_grad_suite(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = stream(seed);
    let (mut worst_grad, mut worst_loss): (f64, f64) = (0.0, 0.0);
    let mut done = 0;
    while done < instances {
        let d = rng.random_range(2..=8);
        let classes = rng.random_range(2..=4);
        let m = rng.random_range(classes.max(3)..=30);
        let labels = labels_with_all_classes(&mut rng, m, classes);
        let h = randn(&mut rng, d, m);
        if kink_margin(&h, &labels, classes) < KINK_MARGIN {
            continue;
        }
        let oracle_loss = naive_constraint_loss(&h, &labels, classes);
        if oracle_loss == 0.0 {
            continue;
        }
        let (loss, grad) = constraint_grad(&h.view(), &labels, classes).unwrap();
        worst_loss = worst_loss.max((loss - oracle_loss).abs() / oracle_loss.abs());
        let flat: Vec<f64> = h.iter().copied().collect();
        let numeric = central_fd(
            |x| naive_constraint_loss(&Array2::from_shape_vec((d, m), x.to_vec()).unwrap(), &labels, classes),
            &flat,
        );
        let analytic: Vec<f64> = grad.iter().copied().collect();
        worst_grad = worst_grad.max(rel_err(&analytic, &numeric));
        done += 1;
    }
    (worst_grad, worst_loss)
}

/// Worst relative error of the cross-entropy gradient w.r.t. the means.
pub fn ce_grad_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..=8);
        let classes = rng.random_range(2..=5);
        let m = rng.random_range(classes..=30);
        let labels = labels_with_all_classes(&mut rng, m, classes);
        let t = rng.random_range(0.1..1.0);
        let h = randn(&mut rng, d, m);
        let means = randn(&mut rng, classes, d);
        let (_, g) = ce_grad(&h.view(), &labels, &means.view(), t);
        let numeric = central_fd(
            |x| {
                let mu = Array2::from_shape_vec((classes, d), x.to_vec()).unwrap();
                ce_loss(&relation_matrix(&h.view(), &mu.view(), t).view(), &labels)
            },
            means.as_slice().unwrap(),
        );
        worst = worst.max(rel_err(g.as_slice().unwrap(), &numeric));
    }
    worst
}

/// Worst relative error of the entropy gradient w.r.t. the means.
pub fn se_grad_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..=8);
        let classes = rng.random_range(2..=5);
        let n = rng.random_range(1..=30);
        let t = rng.random_range(0.1..1.0);
        let h = randn(&mut rng, d, n);
        let means = randn(&mut rng, classes, d);
        let (_, g) = se_grad(&h.view(), &means.view(), t);
        let numeric = central_fd(
            |x| {
                let mu = Array2::from_shape_vec((classes, d), x.to_vec()).unwrap();
                se_loss(&relation_matrix(&h.view(), &mu.view(), t).view())
            },
            means.as_slice().unwrap(),
        );
        worst = worst.max(rel_err(g.as_slice().unwrap(), &numeric));
    }
    worst
}

/// Per-coordinate worst `|mean − μ|` and `|var − 1|` of `n` anchors drawn
/// from N(μ, I) through the support-anchor sampler.
pub fn identity_sampler_errors(n: usize, d: usize, seed: u64) -> (f64, f64) {
    use ugd::dgai::{sample_support_anchors, scaled_ridge, ViewDistribution};
    let mut rng = stream(seed ^ 0x5eed);
    let mu = randn_vec(&mut rng, d) * 3.0;
    let cov = Array2::eye(d);
    let eps = scaled_ridge(&cov, 1e-6);
    let dist = ViewDistribution {
        means: vec![mu.clone()],
        covs: vec![cov],
    };
    let draws = sample_support_anchors(&dist, n, eps, seed).unwrap().remove(0);
    let (mut mean_err, mut var_err): (f64, f64) = (0.0, 0.0);
    for (row, &m) in draws.rows().into_iter().zip(&mu) {
        let mean = row.sum() / n as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        mean_err = mean_err.max((mean - m).abs());
        var_err = var_err.max((var - 1.0).abs());
    }
    (mean_err, var_err)
}

/// Final over initial aggregation loss for one complete view, latent size
/// equal to the view size and a single class, under the default schedule.
pub fn solvable_aggregator_ratio(d: usize, columns: usize, seed: u64) -> f64 {
    use ugd::aggregator::{init_latent, AggregationConfig, InverseAggregator};
    use ugd::dgai::AnchorBatch;
    let mut rng = stream(seed);
    let n_query = columns / 5;
    let batch = AnchorBatch {
        views: vec![randn(&mut rng, d, columns)],
        labels: vec![0; columns - n_query],
        n_classes: 1,
        n_query,
    };
    let cfg = AggregationConfig::default();
    let state = init_latent(&batch, d, seed).unwrap();
    let mut agg = InverseAggregator::new(state, &cfg);
    let (initial, _) = agg.losses(&batch).unwrap();
    let trace = agg.run(&batch, &cfg, || Ok(())).unwrap();
    trace.last().unwrap().l_agg / initial
}
