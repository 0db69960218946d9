//! Independent reference implementations.
//!
//! Nothing here calls into the code paths it is used to check: the
//! finite-difference gradient only evaluates a scalar function, and the
//! brute-force classifiers and metric tallies are written with plain
//! loops over `f64` slices.

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn numerical_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Denominator floor for [`relative_error`], relative to the magnitude of
/// the function being differentiated; below it the error is effectively
/// absolute. Components whose exact gradient is zero (dead ReLU units,
/// symmetric directions) still show central-difference noise at
/// `h = 1e-5`: roundoff of order `eps * |f| / h` plus truncation of order
/// `h^2` times the third derivative, up to about `1e-8` on saturated losses.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    scaled_relative_error(analytic, numeric, 1.0)
}

/// [`relative_error`] with the floor scaled by `max(1, |value|)`, where
/// `value` is the function value at the evaluation point.
pub fn scaled_relative_error(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = REL_ERR_FLOOR * value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_scaled_relative_error(analytic, numeric, 1.0)
}

pub fn max_scaled_relative_error(analytic: &[f64], numeric: &[f64], value: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| scaled_relative_error(a, n, value))
        .fold(0.0, f64::max)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

fn first_min(scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    best
}

/// Class means of labeled points.
pub fn centroids(points: &[(usize, Vec<f64>)], way: usize) -> Vec<Vec<f64>> {
    let dim = points[0].1.len();
    let mut sums = vec![vec![0.0; dim]; way];
    let mut counts = vec![0usize; way];
    for (c, p) in points {
        for k in 0..dim {
            sums[*c][k] += p[k];
        }
        counts[*c] += 1;
    }
    for c in 0..way {
        for k in 0..dim {
            sums[c][k] /= counts[c] as f64;
        }
    }
    sums
}

/// Nearest centroid by squared Euclidean distance, ties to the lowest class.
pub fn nearest_centroid(support: &[(usize, Vec<f64>)], way: usize, query: &[f64]) -> usize {
    let cents = centroids(support, way);
    let d: Vec<f64> = cents.iter().map(|c| sq_dist(c, query)).collect();
    first_min(&d)
}

/// 1-nearest-neighbour; among equidistant supports the lowest class wins.
pub fn nearest_neighbor(support: &[(usize, Vec<f64>)], query: &[f64]) -> usize {
    let mut best_class = usize::MAX;
    let mut best_dist = f64::INFINITY;
    for (c, p) in support {
        let d = sq_dist(p, query);
        if d < best_dist || (d == best_dist && *c < best_class) {
            best_dist = d;
            best_class = *c;
        }
    }
    best_class
}

/// Center on `mean`, scale to unit length (clamped at 1e-12).
pub fn cl2n(v: &[f64], mean: &[f64]) -> Vec<f64> {
    let centered: Vec<f64> = v.iter().zip(mean).map(|(a, b)| a - b).collect();
    let n = centered
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    centered.iter().map(|x| x / n).collect()
}

pub fn cl2n_nearest_centroid(
    support: &[(usize, Vec<f64>)],
    way: usize,
    query: &[f64],
    mean: &[f64],
) -> usize {
    let transformed: Vec<(usize, Vec<f64>)> =
        support.iter().map(|(c, v)| (*c, cl2n(v, mean))).collect();
    nearest_centroid(&transformed, way, &cl2n(query, mean))
}

/// `cm[true][pred]` counts.
pub fn tally(preds: &[usize], labels: &[usize], way: usize) -> Vec<Vec<u64>> {
    let mut cm = vec![vec![0u64; way]; way];
    for i in 0..preds.len() {
        cm[labels[i]][preds[i]] += 1;
    }
    cm
}

/// Per-class (precision, recall, f1) with 0/0 taken as 0.
pub fn per_class_prf(cm: &[Vec<u64>]) -> Vec<(f64, f64, f64)> {
    let way = cm.len();
    let mut out = Vec::new();
    for c in 0..way {
        let tp = cm[c][c] as f64;
        let mut predicted = 0.0;
        let mut actual = 0.0;
        for r in 0..way {
            predicted += cm[r][c] as f64;
            actual += cm[c][r] as f64;
        }
        let p = if predicted == 0.0 {
            0.0
        } else {
            tp / predicted
        };
        let r = if actual == 0.0 { 0.0 } else { tp / actual };
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        out.push((p, r, f));
    }
    out
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let mut hits = 0;
    for i in 0..preds.len() {
        if preds[i] == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / preds.len() as f64
}
