//! Metric-based learners: nearest neighbour, prototypes, matching
//! attention, SimpleShot and the relation module.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::{Batch, Prediction, StepStats};
use crate::error::Result;
use crate::nn::{
    cosine_backward, cosine_logits_batch, softmax, LossConfig, Mlp, Tape, COSINE_SCALE, NORM_EPS,
};
use crate::tasks::Task;

/// Class means of `emb` rows (`way x embed`).
pub fn prototypes(emb: ArrayView2<f64>, labels: &[usize], way: usize) -> Array2<f64> {
    let mut protos = Array2::zeros((way, emb.ncols()));
    let mut counts = vec![0usize; way];
    for (row, &c) in emb.rows().into_iter().zip(labels) {
        let mut p = protos.row_mut(c);
        p += &row;
        counts[c] += 1;
    }
    for (mut p, &n) in protos.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            p.mapv_inplace(|v| v / n as f64);
        }
    }
    protos
}

/// `-||q - mu_c||^2` for every query row and prototype.
pub fn squared_distance_logits(queries: ArrayView2<f64>, protos: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((queries.nrows(), protos.nrows()));
    for (i, q) in queries.rows().into_iter().enumerate() {
        for (c, p) in protos.rows().into_iter().enumerate() {
            out[[i, c]] = -q
                .iter()
                .zip(p.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    out
}

struct Embedded {
    support: Batch,
    query: Batch,
    emb: Array2<f64>,
}

impl Embedded {
    fn es(&self) -> ArrayView2<'_, f64> {
        self.emb.slice(s![..self.support.labels.len(), ..])
    }
    fn eq(&self) -> ArrayView2<'_, f64> {
        self.emb.slice(s![self.support.labels.len().., ..])
    }
}

fn embed(enc: &Mlp, task: &Task, tape: Option<&mut Tape>) -> Embedded {
    let support = Batch::support(task);
    let query = Batch::query(task);
    let x = concatenate(Axis(0), &[support.x.view(), query.x.view()]).expect("same feature width");
    let emb = match tape {
        Some(t) => enc.forward_recorded(x.view(), t),
        None => enc.forward(x.view()),
    };
    Embedded {
        support,
        query,
        emb,
    }
}

pub fn predict_protonet(enc: &Mlp, task: &Task) -> Prediction {
    let e = embed(enc, task, None);
    let protos = prototypes(e.es(), &e.support.labels, task.way());
    Prediction::from_logits(
        squared_distance_logits(e.eq(), protos.view()),
        e.query.labels.clone(),
    )
}

/// Class score is minus the squared distance to the closest support point.
pub fn predict_nn1(enc: &Mlp, task: &Task) -> Prediction {
    let e = embed(enc, task, None);
    let dists = squared_distance_logits(e.eq(), e.es());
    let mut logits = Array2::from_elem((dists.nrows(), task.way()), f64::NEG_INFINITY);
    for (i, row) in dists.rows().into_iter().enumerate() {
        for (&d, &c) in row.iter().zip(&e.support.labels) {
            if d > logits[[i, c]] {
                logits[[i, c]] = d;
            }
        }
    }
    Prediction::from_logits(logits, e.query.labels.clone())
}

/// Centre on `base_mean`, L2-normalize, then nearest prototype.
pub fn predict_simpleshot(enc: &Mlp, task: &Task, base_mean: &[f64]) -> Prediction {
    let mut e = embed(enc, task, None);
    for mut row in e.emb.rows_mut() {
        for (v, m) in row.iter_mut().zip(base_mean) {
            *v -= m;
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        row.mapv_inplace(|v| v / n);
    }
    let protos = prototypes(e.es(), &e.support.labels, task.way());
    Prediction::from_logits(
        squared_distance_logits(e.eq(), protos.view()),
        e.query.labels.clone(),
    )
}

/// Attention weights over support points and the per-class mass they sum to.
fn matching_attention(
    eq: ArrayView2<f64>,
    es: ArrayView2<f64>,
    labels: &[usize],
    way: usize,
) -> (Array2<f64>, Array2<f64>) {
    let scores = cosine_logits_batch(eq, es, COSINE_SCALE);
    let mut attn = Array2::zeros(scores.raw_dim());
    let mut mass = Array2::zeros((eq.nrows(), way));
    for (i, row) in scores.rows().into_iter().enumerate() {
        for (j, a) in softmax(&row.to_vec()).into_iter().enumerate() {
            attn[[i, j]] = a;
            mass[[i, labels[j]]] += a;
        }
    }
    (attn, mass)
}

/// Logits are the class probabilities themselves.
pub fn predict_matching(enc: &Mlp, task: &Task) -> Prediction {
    let e = embed(enc, task, None);
    let (_, mass) = matching_attention(e.eq(), e.es(), &e.support.labels, task.way());
    Prediction::from_logits(mass, e.query.labels.clone())
}

fn relation_inputs(eq: ArrayView2<f64>, protos: ArrayView2<f64>) -> Array2<f64> {
    let (nq, way, d) = (eq.nrows(), protos.nrows(), protos.ncols());
    let mut x = Array2::zeros((nq * way, 2 * d));
    for i in 0..nq {
        for c in 0..way {
            let mut row = x.row_mut(i * way + c);
            row.slice_mut(s![..d]).assign(&protos.row(c));
            row.slice_mut(s![d..]).assign(&eq.row(i));
        }
    }
    x
}

pub fn predict_relation(enc: &Mlp, rel: &Mlp, task: &Task) -> Prediction {
    let e = embed(enc, task, None);
    let protos = prototypes(e.es(), &e.support.labels, task.way());
    let scores = rel.forward(relation_inputs(e.eq(), protos.view()).view());
    let logits = scores
        .into_shape_with_order((e.query.labels.len(), task.way()))
        .expect("one score per pair");
    Prediction::from_logits(logits, e.query.labels.clone())
}

/// Routes prototype gradients back to the support embeddings.
fn spread_prototype_grad(
    grad_emb: &mut Array2<f64>,
    grad_protos: &Array2<f64>,
    labels: &[usize],
    shots: &[usize],
) {
    for (j, &c) in labels.iter().enumerate() {
        let mut row = grad_emb.row_mut(j);
        row.scaled_add(1.0 / shots[c] as f64, &grad_protos.row(c));
    }
}

/// Prototypical-network episode: accumulates encoder gradients of the
/// query cross-entropy.
pub fn protonet_episode(enc: &mut Mlp, task: &Task) -> Result<StepStats> {
    let mut tape = Tape::new();
    let e = embed(enc, task, Some(&mut tape));
    let way = task.way();
    let ns = e.support.labels.len();
    let protos = prototypes(e.es(), &e.support.labels, way);
    let logits = squared_distance_logits(e.eq(), protos.view());
    let (loss, g) = LossConfig::ce().batch(logits.view(), &e.query.labels, &task.support_shots());
    let mut grad_emb = Array2::zeros(e.emb.raw_dim());
    let mut grad_protos = Array2::zeros(protos.raw_dim());
    let eq = e.eq();
    for i in 0..eq.nrows() {
        for c in 0..way {
            let gic = g[[i, c]];
            for k in 0..protos.ncols() {
                let diff = eq[[i, k]] - protos[[c, k]];
                grad_emb[[ns + i, k]] -= 2.0 * gic * diff;
                grad_protos[[c, k]] += 2.0 * gic * diff;
            }
        }
    }
    spread_prototype_grad(
        &mut grad_emb,
        &grad_protos,
        &e.support.labels,
        task.support_shots().counts(),
    );
    enc.backward(&mut tape, grad_emb.view())?;
    let accuracy = Prediction::from_logits(logits, e.query.labels).accuracy();
    Ok(StepStats { loss, accuracy })
}

/// Matching-network episode with loss `-log P(y_q | q)`.
pub fn matching_episode(enc: &mut Mlp, task: &Task) -> Result<StepStats> {
    let mut tape = Tape::new();
    let e = embed(enc, task, Some(&mut tape));
    let ns = e.support.labels.len();
    let nq = e.query.labels.len();
    let (attn, mass) = matching_attention(e.eq(), e.es(), &e.support.labels, task.way());
    let mut loss = 0.0;
    let mut g_scores = Array2::zeros(attn.raw_dim());
    for (i, &y) in e.query.labels.iter().enumerate() {
        let p = mass[[i, y]].max(f64::MIN_POSITIVE);
        loss -= p.ln();
        for (j, &yj) in e.support.labels.iter().enumerate() {
            let own = if yj == y { attn[[i, j]] / p } else { 0.0 };
            g_scores[[i, j]] = (attn[[i, j]] - own) / nq as f64;
        }
    }
    let (ge_q, ge_s) = cosine_backward(e.eq(), e.es(), COSINE_SCALE, g_scores.view());
    let mut grad_emb = Array2::zeros(e.emb.raw_dim());
    grad_emb.slice_mut(s![..ns, ..]).assign(&ge_s);
    grad_emb.slice_mut(s![ns.., ..]).assign(&ge_q);
    enc.backward(&mut tape, grad_emb.view())?;
    let accuracy = Prediction::from_logits(mass, e.query.labels).accuracy();
    Ok(StepStats {
        loss: loss / nq as f64,
        accuracy,
    })
}

/// Relation-network episode: cross-entropy over the relation scores,
/// accumulating gradients in both the encoder and the relation module.
pub fn relation_episode(enc: &mut Mlp, rel: &mut Mlp, task: &Task) -> Result<StepStats> {
    let mut tape = Tape::new();
    let e = embed(enc, task, Some(&mut tape));
    let way = task.way();
    let ns = e.support.labels.len();
    let nq = e.query.labels.len();
    let d = e.emb.ncols();
    let protos = prototypes(e.es(), &e.support.labels, way);
    let mut rel_tape = Tape::new();
    let scores = rel.forward_recorded(relation_inputs(e.eq(), protos.view()).view(), &mut rel_tape);
    let logits = scores
        .into_shape_with_order((nq, way))
        .expect("one score per pair");
    let (loss, g) = LossConfig::ce().batch(logits.view(), &e.query.labels, &task.support_shots());
    let g_pairs = g.into_shape_with_order((nq * way, 1)).expect("pairs");
    let g_in = rel.backward(&mut rel_tape, g_pairs.view())?;
    let mut grad_emb = Array2::zeros(e.emb.raw_dim());
    let mut grad_protos = Array2::zeros(protos.raw_dim());
    for i in 0..nq {
        for c in 0..way {
            let row = g_in.row(i * way + c);
            let mut gp = grad_protos.row_mut(c);
            gp += &row.slice(s![..d]);
            let mut gq = grad_emb.row_mut(ns + i);
            gq += &row.slice(s![d..]);
        }
    }
    spread_prototype_grad(
        &mut grad_emb,
        &grad_protos,
        &e.support.labels,
        task.support_shots().counts(),
    );
    enc.backward(&mut tape, grad_emb.view())?;
    let accuracy = Prediction::from_logits(logits, e.query.labels).accuracy();
    Ok(StepStats { loss, accuracy })
}

#[cfg(test)]
mod tests {
    use super::super::tests::task_from;
    use super::*;
    use crate::nn::{Dense, EncoderConfig, Module};
    use crate::verify;

    fn small_task() -> Task {
        task_from(
            vec![
                vec![vec![0.3, -0.2], vec![0.5, 0.1], vec![0.1, 0.4]],
                vec![vec![2.0, 1.5]],
                vec![vec![-1.5, 2.5], vec![-2.0, 1.8]],
            ],
            vec![
                vec![vec![0.2, 0.2]],
                vec![vec![1.8, 1.2], vec![1.0, 1.0]],
                vec![vec![-1.0, 2.0]],
            ],
        )
    }

    fn labeled(task: &Task) -> Vec<(usize, Vec<f64>)> {
        task.support_labeled()
            .map(|(c, e)| (c, e.features.clone()))
            .collect()
    }

    #[test]
    fn identity_protonet_matches_brute_force_centroid() {
        let task = small_task();
        let p = predict_protonet(&Mlp::identity("enc", 2), &task);
        let support = labeled(&task);
        for ((_, q), &pred) in task.query_labeled().zip(&p.predicted) {
            assert_eq!(pred, verify::nearest_centroid(&support, 3, &q.features));
        }
    }

    #[test]
    fn identity_nn1_matches_brute_force() {
        let task = small_task();
        let p = predict_nn1(&Mlp::identity("enc", 2), &task);
        let support = labeled(&task);
        for ((_, q), &pred) in task.query_labeled().zip(&p.predicted) {
            assert_eq!(pred, verify::nearest_neighbor(&support, &q.features));
        }
    }

    #[test]
    fn simpleshot_matches_cl2n_oracle() {
        let task = small_task();
        let mean = [0.4, -0.3];
        let p = predict_simpleshot(&Mlp::identity("enc", 2), &task, &mean);
        let support = labeled(&task);
        for ((_, q), &pred) in task.query_labeled().zip(&p.predicted) {
            assert_eq!(
                pred,
                verify::cl2n_nearest_centroid(&support, 3, &q.features, &mean)
            );
        }
    }

    #[test]
    fn ties_resolve_to_lowest_slot() {
        let task = task_from(
            vec![vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]],
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, -1.0]]],
        );
        let enc = Mlp::identity("enc", 2);
        assert_eq!(predict_protonet(&enc, &task).predicted, vec![0, 0]);
        assert_eq!(predict_nn1(&enc, &task).predicted, vec![0, 0]);
        assert_eq!(predict_matching(&enc, &task).predicted, vec![0, 0]);
    }

    #[test]
    fn matching_probabilities_sum_to_one() {
        let task = small_task();
        let p = predict_matching(&Mlp::identity("enc", 2), &task);
        for row in p.logits.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    /// With 1-d embeddings, hidden units relu(p - q) and relu(q - p) and an
    /// output of minus their sum score `-|p - q|`, so the relation module
    /// picks the same class as nearest prototype.
    #[test]
    fn constructed_relation_module_agrees_with_protonet() {
        let rel = Mlp {
            layers: vec![
                Dense::from_parts(
                    "rel.0",
                    ndarray::array![[1.0, -1.0], [-1.0, 1.0]],
                    vec![0.0, 0.0],
                ),
                Dense::from_parts("rel.1", ndarray::array![[-1.0, -1.0]], vec![0.0]),
            ],
        };
        let task = task_from(
            vec![
                vec![vec![0.0], vec![0.4]],
                vec![vec![2.0]],
                vec![vec![-3.0], vec![-2.0]],
                vec![vec![5.0]],
            ],
            vec![
                vec![vec![0.1], vec![1.2]],
                vec![vec![1.9]],
                vec![vec![-2.2], vec![-1.4]],
                vec![vec![3.6]],
            ],
        );
        let enc = Mlp::identity("enc", 1);
        assert_eq!(
            predict_relation(&enc, &rel, &task).predicted,
            predict_protonet(&enc, &task).predicted
        );
    }

    fn check_episode_gradient(
        mut run: impl FnMut(&mut Mlp, Option<&mut Mlp>) -> f64,
        with_rel: bool,
    ) {
        let mut rng = crate::seed::rng(11);
        let enc = Mlp::new("enc", &EncoderConfig::new(2, vec![5], 3), &mut rng).unwrap();
        let rel = Mlp::new("rel", &EncoderConfig::new(6, vec![4], 1), &mut rng).unwrap();
        let mut e = enc.clone();
        let mut r = rel.clone();
        e.zero_grad();
        r.zero_grad();
        run(&mut e, with_rel.then_some(&mut r));
        let mut analytic = e.flat_grads();
        let mut x0 = enc.flat_values();
        let ne = x0.len();
        if with_rel {
            analytic.extend(r.flat_grads());
            x0.extend(rel.flat_values());
        }
        let numeric = verify::numerical_gradient(
            |x| {
                let mut e = enc.clone();
                let mut r = rel.clone();
                e.set_flat_values(&x[..ne]);
                if with_rel {
                    r.set_flat_values(&x[ne..]);
                }
                run(&mut e, with_rel.then_some(&mut r))
            },
            &x0,
            1e-5,
        );
        let err = verify::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn protonet_gradient_matches_finite_differences() {
        let task = small_task();
        check_episode_gradient(|e, _| protonet_episode(e, &task).unwrap().loss, false);
    }

    #[test]
    fn matching_gradient_matches_finite_differences() {
        let task = small_task();
        check_episode_gradient(|e, _| matching_episode(e, &task).unwrap().loss, false);
    }

    #[test]
    fn relation_gradient_matches_finite_differences() {
        let task = small_task();
        check_episode_gradient(
            |e, r| relation_episode(e, r.unwrap(), &task).unwrap().loss,
            true,
        );
    }
}
