//! Randomized gradient-check and oracle suites.
//!
//! Both suites are deterministic in their seed. Every check draws its own
//! random instances, compares against [`crate::verify`] and reports the
//! worst deviation it saw together with the number of failing instances.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::learners::{
    fomaml_task_gradient, matching_episode, predict_nn1, predict_protonet, predict_simpleshot,
    protomaml_head, protomaml_task_gradient, protonet_episode, prototypes, relation_episode,
    AdaptationConfig, Batch, Head,
};
use crate::metrics::{confusion, precision_recall_f1};
use crate::nn::{
    ce_loss, cosine_backward, cosine_logits_batch, focal_loss, weighted_ce_loss, CosineHead, Dense,
    EncoderConfig, LossConfig, Mlp, Module, Tape, COSINE_SCALE,
};
use crate::seed;
use crate::tasks::{ShotVector, Task};
use crate::verify;

/// Maximum relative error accepted by a gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum absolute deviation accepted for rates in the oracle suite.
pub const RATE_TOLERANCE: f64 = 1e-9;
/// Instances with a hidden pre-activation closer than this to a ReLU kink
/// are redrawn.
const KINK_MARGIN: f64 = 1e-3;
/// Cosine scores are singular at the origin and the truncation error of a
/// central difference grows like `h^2 / |e|^3` near it, so draws feeding a
/// cosine with an embedding shorter than this are redrawn.
const COSINE_MARGIN: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// Largest relative gradient error, or largest rate deviation.
    pub worst: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.instances > 0 && self.failures == 0
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<32} {} ({} instances, {} failed, worst {:.2e})",
            self.name,
            if self.passed() { "ok" } else { "FAILED" },
            self.instances,
            self.failures,
            self.worst
        )
    }
}

type SuiteRng = seed::Rng;

fn normal_vec(rng: &mut SuiteRng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normal_matrix(rng: &mut SuiteRng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), normal_vec(rng, rows * cols, std))
        .expect("shape matches length")
}

fn random_counts(rng: &mut SuiteRng, way: usize, max: usize) -> Vec<usize> {
    (0..way).map(|_| rng.random_range(1..=max)).collect()
}

/// Random task with separated class centres and unequal shots.
fn random_task(rng: &mut SuiteRng, dim: usize) -> Task {
    let way = rng.random_range(2..=4);
    let centres: Vec<Vec<f64>> = (0..way).map(|_| normal_vec(rng, dim, 1.5)).collect();
    let draw = |counts: &[usize], rng: &mut SuiteRng| -> Vec<Vec<Vec<f64>>> {
        counts
            .iter()
            .zip(&centres)
            .map(|(&k, c)| {
                (0..k)
                    .map(|_| {
                        c.iter()
                            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let ks = random_counts(rng, way, 3);
    let ms = random_counts(rng, way, 2);
    let support = draw(&ks, rng);
    let query = draw(&ms, rng);
    Task::from_features(support, query)
}

fn random_mlp(rng: &mut SuiteRng, name: &str, input: usize, output: usize) -> Mlp {
    let depth = rng.random_range(0..=2);
    let hidden = (0..depth).map(|_| rng.random_range(3..=6)).collect();
    Mlp::new(name, &EncoderConfig::new(input, hidden, output), rng).expect("positive widths")
}

fn task_inputs(task: &Task) -> Array2<f64> {
    let s = Batch::support(task);
    let q = Batch::query(task);
    concatenate(Axis(0), &[s.x.view(), q.x.view()]).expect("same width")
}

fn min_row_norm(m: &Array2<f64>) -> f64 {
    m.rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// An analytic gradient, central differences at the same point and the
/// function value there, which scales the noise floor of the comparison.
struct Comparison {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    value: f64,
}

fn compare(analytic: Vec<f64>, mut f: impl FnMut(&[f64]) -> f64, x0: &[f64]) -> Comparison {
    let value = f(x0);
    let numeric = verify::numerical_gradient(&mut f, x0, FD_STEP);
    Comparison {
        analytic,
        numeric,
        value,
    }
}

/// Runs `instances` draws of a gradient comparison. `draw` returns `None`
/// when the instance sits on a kink and must be redrawn.
fn grad_check<F>(name: &str, instances: usize, rng: &mut SuiteRng, mut draw: F) -> CheckOutcome
where
    F: FnMut(&mut SuiteRng) -> Option<Comparison>,
{
    let mut out = CheckOutcome {
        name: name.to_string(),
        instances: 0,
        failures: 0,
        worst: 0.0,
    };
    let mut redraws = 0usize;
    while out.instances < instances {
        let Some(c) = draw(rng) else {
            redraws += 1;
            assert!(
                redraws < 100 * instances.max(1),
                "{name}: could not draw instances away from ReLU kinks"
            );
            continue;
        };
        let err = verify::max_scaled_relative_error(&c.analytic, &c.numeric, c.value);
        out.instances += 1;
        out.worst = out.worst.max(err);
        if !(err < GRAD_TOLERANCE) {
            out.failures += 1;
        }
    }
    out
}

fn loss_op_checks(n: usize, rng: &mut SuiteRng) -> Vec<CheckOutcome> {
    vec![
        grad_check("ce_loss", n, rng, |rng| {
            let way = rng.random_range(2..=6);
            let logits = normal_vec(rng, way, 2.0);
            let label = rng.random_range(0..way);
            Some(compare(
                ce_loss(&logits, label).1,
                |z| ce_loss(z, label).0,
                &logits,
            ))
        }),
        grad_check("weighted_ce_loss", n, rng, |rng| {
            let way = rng.random_range(2..=6);
            let counts = ShotVector::new(random_counts(rng, way, 9)).expect("positive counts");
            let logits = normal_vec(rng, way, 2.0);
            let label = rng.random_range(0..way);
            Some(compare(
                weighted_ce_loss(&logits, label, &counts).1,
                |z| weighted_ce_loss(z, label, &counts).0,
                &logits,
            ))
        }),
        grad_check("focal_loss", n, rng, |rng| {
            let way = rng.random_range(2..=6);
            let logits = normal_vec(rng, way, 2.0);
            let label = rng.random_range(0..way);
            let gamma = rng.random_range(0.0..3.0);
            let alpha = rng.random_range(0.25..2.0);
            Some(compare(
                focal_loss(&logits, label, gamma, alpha).1,
                |z| focal_loss(z, label, gamma, alpha).0,
                &logits,
            ))
        }),
    ]
}

fn layer_checks(n: usize, rng: &mut SuiteRng) -> Vec<CheckOutcome> {
    vec![
        grad_check("cosine_logits", n, rng, |rng| {
            let (b, c, d) = (
                rng.random_range(1..=4),
                rng.random_range(2..=5),
                rng.random_range(2..=5),
            );
            let e = normal_matrix(rng, b, d, 1.0);
            let w = normal_matrix(rng, c, d, 1.0);
            let g = normal_matrix(rng, b, c, 1.0);
            let (ge, gw) = cosine_backward(e.view(), w.view(), COSINE_SCALE, g.view());
            let x0: Vec<f64> = e.iter().chain(w.iter()).copied().collect();
            Some(compare(
                ge.iter().chain(gw.iter()).copied().collect(),
                |x| {
                    let e = Array2::from_shape_vec((b, d), x[..b * d].to_vec()).unwrap();
                    let w = Array2::from_shape_vec((c, d), x[b * d..].to_vec()).unwrap();
                    (cosine_logits_batch(e.view(), w.view(), COSINE_SCALE) * &g).sum()
                },
                &x0,
            ))
        }),
        grad_check("dense", n, rng, |rng| {
            let (b, i, o) = (
                rng.random_range(1..=4),
                rng.random_range(1..=5),
                rng.random_range(1..=5),
            );
            let mut layer = Dense::new("d", i, o, rng);
            let x = normal_matrix(rng, b, i, 1.0);
            let g = normal_matrix(rng, b, o, 1.0);
            layer.zero_grad();
            let gx = layer.backward(x.view(), g.view());
            let mut analytic = layer.flat_grads();
            analytic.extend(gx.iter());
            let np = layer.num_params();
            let mut x0 = layer.flat_values();
            x0.extend(x.iter());
            Some(compare(
                analytic,
                |v| {
                    let mut l = layer.clone();
                    l.set_flat_values(&v[..np]);
                    let x = Array2::from_shape_vec((b, i), v[np..].to_vec()).unwrap();
                    (l.forward(x.view()) * &g).sum()
                },
                &x0,
            ))
        }),
        grad_check("mlp_relu", n, rng, |rng| {
            let (b, i, o) = (
                rng.random_range(1..=4),
                rng.random_range(2..=5),
                rng.random_range(1..=4),
            );
            let mut mlp = random_mlp(rng, "m", i, o);
            let x = normal_matrix(rng, b, i, 1.0);
            if mlp.min_abs_preactivation(x.view()) < KINK_MARGIN {
                return None;
            }
            let g = normal_matrix(rng, b, o, 1.0);
            mlp.zero_grad();
            let mut tape = Tape::new();
            mlp.forward_recorded(x.view(), &mut tape);
            let gx = mlp.backward(&mut tape, g.view()).expect("recorded forward");
            let mut analytic = mlp.flat_grads();
            analytic.extend(gx.iter());
            let np = mlp.num_params();
            let mut x0 = mlp.flat_values();
            x0.extend(x.iter());
            Some(compare(
                analytic,
                |v| {
                    let mut m = mlp.clone();
                    m.set_flat_values(&v[..np]);
                    let x = Array2::from_shape_vec((b, i), v[np..].to_vec()).unwrap();
                    (m.forward(x.view()) * &g).sum()
                },
                &x0,
            ))
        }),
    ]
}

/// Encoder + head + loss over an imbalanced labelled batch.
fn full_forward_check(
    name: &str,
    cosine: bool,
    loss: LossConfig,
    n: usize,
    rng: &mut SuiteRng,
) -> CheckOutcome {
    grad_check(name, n, rng, |rng| {
        let task = random_task(rng, 3);
        let batch = Batch::support(&task);
        let counts = task.support_shots();
        let embed = rng.random_range(2..=4);
        let mut enc = random_mlp(rng, "enc", 3, embed);
        if enc.min_abs_preactivation(batch.x.view()) < KINK_MARGIN {
            return None;
        }
        let mut head = if cosine {
            Head::Cosine(CosineHead::new("head", task.way(), embed, rng))
        } else {
            Head::Linear(Dense::new("head", embed, task.way(), rng))
        };
        enc.zero_grad();
        head.zero_grad();
        let mut tape = Tape::new();
        let emb = enc.forward_recorded(batch.x.view(), &mut tape);
        // Cosine similarity is not differentiable at the origin.
        if cosine && min_row_norm(&emb) < COSINE_MARGIN {
            return None;
        }
        let (_, g) = loss.batch(head.forward(emb.view()).view(), &batch.labels, &counts);
        let ge = head.backward(emb.view(), g.view());
        enc.backward(&mut tape, ge.view())
            .expect("recorded forward");
        let mut analytic = enc.flat_grads();
        analytic.extend(head.flat_grads());
        let ne = enc.num_params();
        let mut x0 = enc.flat_values();
        x0.extend(head.flat_values());
        Some(compare(
            analytic,
            |v| {
                let (mut e, mut h) = (enc.clone(), head.clone());
                e.set_flat_values(&v[..ne]);
                h.set_flat_values(&v[ne..]);
                loss.batch(
                    h.forward(e.forward(batch.x.view()).view()).view(),
                    &batch.labels,
                    &counts,
                )
                .0
            },
            &x0,
        ))
    })
}

/// Query cross-entropy of `head(enc(x))`.
fn query_ce(enc: &Mlp, head: &Dense, task: &Task) -> f64 {
    let q = Batch::query(task);
    let logits = head.forward(enc.forward(q.x.view()).view());
    LossConfig::ce()
        .batch(logits.view(), &q.labels, &task.query_shots())
        .0
}

fn episode_checks(n: usize, rng: &mut SuiteRng) -> Vec<CheckOutcome> {
    fn encoder_only(
        name: &str,
        n: usize,
        rng: &mut SuiteRng,
        mut grad: impl FnMut(&mut Mlp, &Task),
        mut value: impl FnMut(&mut Mlp, &Task) -> f64,
    ) -> CheckOutcome {
        grad_check(name, n, rng, |rng| {
            let task = random_task(rng, 3);
            let embed = rng.random_range(2..=4);
            let enc = random_mlp(rng, "enc", 3, embed);
            let x = task_inputs(&task);
            if enc.min_abs_preactivation(x.view()) < KINK_MARGIN
                || min_row_norm(&enc.forward(x.view())) < COSINE_MARGIN
            {
                return None;
            }
            let mut e = enc.clone();
            e.zero_grad();
            grad(&mut e, &task);
            Some(compare(
                e.flat_grads(),
                |v| {
                    let mut e = enc.clone();
                    e.set_flat_values(v);
                    value(&mut e, &task)
                },
                &enc.flat_values(),
            ))
        })
    }

    let zero_steps = AdaptationConfig {
        inner_steps: 0,
        ..AdaptationConfig::default()
    };
    let mut out = vec![
        encoder_only(
            "protonet_episode",
            n,
            rng,
            |e, t| {
                protonet_episode(e, t).expect("recorded forward");
            },
            |e, t| protonet_episode(e, t).expect("recorded forward").loss,
        ),
        encoder_only(
            "matching_episode",
            n,
            rng,
            |e, t| {
                matching_episode(e, t).expect("recorded forward");
            },
            |e, t| matching_episode(e, t).expect("recorded forward").loss,
        ),
        encoder_only(
            "protomaml_zero_step",
            n,
            rng,
            |e, t| {
                protomaml_task_gradient(e, t, &zero_steps).expect("recorded forward");
            },
            |e, t| query_ce(e, &protomaml_head(e, t), t),
        ),
    ];

    out.push(grad_check("relation_episode", n, rng, |rng| {
        let task = random_task(rng, 3);
        let embed = rng.random_range(2..=3);
        let enc = random_mlp(rng, "enc", 3, embed);
        let rel = random_mlp(rng, "rel", 2 * embed, 1);
        let x = task_inputs(&task);
        if enc.min_abs_preactivation(x.view()) < KINK_MARGIN {
            return None;
        }
        // Every (prototype, query) pair the relation module will score.
        let emb = enc.forward(x.view());
        let ns = task.support_len();
        let protos = prototypes(
            emb.slice(ndarray::s![..ns, ..]),
            &Batch::support(&task).labels,
            task.way(),
        );
        let mut pairs = Vec::new();
        for q in emb.slice(ndarray::s![ns.., ..]).rows() {
            for p in protos.rows() {
                pairs.extend(p.iter().chain(q.iter()).copied());
            }
        }
        let pairs = Array2::from_shape_vec((pairs.len() / (2 * embed), 2 * embed), pairs).unwrap();
        if rel.min_abs_preactivation(pairs.view()) < KINK_MARGIN {
            return None;
        }
        let (mut e, mut r) = (enc.clone(), rel.clone());
        e.zero_grad();
        r.zero_grad();
        relation_episode(&mut e, &mut r, &task).expect("recorded forward");
        let mut analytic = e.flat_grads();
        analytic.extend(r.flat_grads());
        let ne = enc.num_params();
        let mut x0 = enc.flat_values();
        x0.extend(rel.flat_values());
        Some(compare(
            analytic,
            |v| {
                let (mut e, mut r) = (enc.clone(), rel.clone());
                e.set_flat_values(&v[..ne]);
                r.set_flat_values(&v[ne..]);
                relation_episode(&mut e, &mut r, &task)
                    .expect("recorded forward")
                    .loss
            },
            &x0,
        ))
    }));

    out.push(grad_check("fomaml_zero_step", n, rng, |rng| {
        let task = random_task(rng, 3);
        let embed = rng.random_range(2..=4);
        let enc = random_mlp(rng, "enc", 3, embed);
        if enc.min_abs_preactivation(task_inputs(&task).view()) < KINK_MARGIN {
            return None;
        }
        let head = Dense::new("head", embed, task.way(), rng);
        let (mut e, mut h) = (enc.clone(), head.clone());
        e.zero_grad();
        h.zero_grad();
        fomaml_task_gradient(&mut e, &mut h, &task, &zero_steps).expect("recorded forward");
        let mut analytic = e.flat_grads();
        analytic.extend(h.flat_grads());
        let ne = enc.num_params();
        let mut x0 = enc.flat_values();
        x0.extend(head.flat_values());
        Some(compare(
            analytic,
            |v| {
                let (mut e, mut h) = (enc.clone(), head.clone());
                e.set_flat_values(&v[..ne]);
                h.set_flat_values(&v[ne..]);
                query_ce(&e, &h, &task)
            },
            &x0,
        ))
    }));
    out
}

/// Finite-difference checks of every differentiable op and every learner
/// forward, `instances` random draws each.
pub fn gradient_suite(instances: usize, root: u64) -> Vec<CheckOutcome> {
    let mut rng = seed::rng(seed::mix_str(root, "gradient-suite"));
    let mut out = loss_op_checks(instances, &mut rng);
    out.extend(layer_checks(instances, &mut rng));
    let losses = [
        ("ce", LossConfig::ce()),
        ("weighted_ce", LossConfig::weighted()),
        ("focal", LossConfig::focal(2.0, 1.0)),
    ];
    for (head, cosine) in [("linear", false), ("cosine", true)] {
        for (lname, loss) in &losses {
            out.push(full_forward_check(
                &format!("encoder+{head}+{lname}"),
                cosine,
                *loss,
                instances,
                &mut rng,
            ));
        }
    }
    out.extend(episode_checks(instances, &mut rng));
    out
}

fn labeled_embeddings(enc: &Mlp, task: &Task) -> Vec<(usize, Vec<f64>)> {
    task.support_labeled()
        .map(|(c, e)| (c, enc.encode(&e.features).expect("matching width")))
        .collect()
}

fn argmax_check(
    name: &str,
    instances: usize,
    rng: &mut SuiteRng,
    mut run: impl FnMut(&mut SuiteRng) -> (Vec<usize>, Vec<usize>),
) -> CheckOutcome {
    let mut out = CheckOutcome {
        name: name.to_string(),
        instances,
        failures: 0,
        worst: 0.0,
    };
    for _ in 0..instances {
        let (got, expected) = run(rng);
        let mismatches = got.iter().zip(&expected).filter(|(a, b)| a != b).count();
        if mismatches > 0 || got.len() != expected.len() {
            out.failures += 1;
            out.worst = out.worst.max(mismatches as f64);
        }
    }
    out
}

/// Compares ProtoNet, SimpleShot, 1-NN and the metric computations with
/// brute-force references on `instances` random small tasks each.
pub fn oracle_suite(instances: usize, root: u64) -> Vec<CheckOutcome> {
    let mut rng = seed::rng(seed::mix_str(root, "oracle-suite"));
    let setup = |rng: &mut SuiteRng| {
        let task = random_task(rng, 3);
        let embed = rng.random_range(2..=4);
        let enc = random_mlp(rng, "enc", 3, embed);
        (task, enc)
    };
    let mut out = vec![
        argmax_check("protonet_vs_nearest_centroid", instances, &mut rng, |rng| {
            let (task, enc) = setup(rng);
            let support = labeled_embeddings(&enc, &task);
            let expected = task
                .query_labeled()
                .map(|(_, q)| {
                    verify::nearest_centroid(
                        &support,
                        task.way(),
                        &enc.encode(&q.features).unwrap(),
                    )
                })
                .collect();
            (predict_protonet(&enc, &task).predicted, expected)
        }),
        argmax_check("nn1_vs_nearest_neighbor", instances, &mut rng, |rng| {
            let (task, enc) = setup(rng);
            let support = labeled_embeddings(&enc, &task);
            let expected = task
                .query_labeled()
                .map(|(_, q)| verify::nearest_neighbor(&support, &enc.encode(&q.features).unwrap()))
                .collect();
            (predict_nn1(&enc, &task).predicted, expected)
        }),
        argmax_check("simpleshot_vs_cl2n_centroid", instances, &mut rng, |rng| {
            let (task, enc) = setup(rng);
            let mean = normal_vec(rng, enc.output_dim(), 1.0);
            let support = labeled_embeddings(&enc, &task);
            let expected = task
                .query_labeled()
                .map(|(_, q)| {
                    verify::cl2n_nearest_centroid(
                        &support,
                        task.way(),
                        &enc.encode(&q.features).unwrap(),
                        &mean,
                    )
                })
                .collect();
            (predict_simpleshot(&enc, &task, &mean).predicted, expected)
        }),
    ];

    let mut metrics = CheckOutcome {
        name: "metrics_vs_tally".into(),
        instances,
        failures: 0,
        worst: 0.0,
    };
    for _ in 0..instances {
        let way = rng.random_range(2..=6);
        let n = rng.random_range(1..=30);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..way)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..way)).collect();
        let cm = confusion(&preds, &labels, way).expect("labels in range");
        let reference = verify::tally(&preds, &labels, way);
        let mut bad = cm.rows() != reference;
        let (scores, macro_f1) = precision_recall_f1(&cm);
        let prf = verify::per_class_prf(&reference);
        let mut dev: f64 = 0.0;
        for (s, (p, r, f)) in scores.iter().zip(&prf) {
            dev = dev
                .max((s.precision - p).abs())
                .max((s.recall - r).abs())
                .max((s.f1 - f).abs());
        }
        let ref_macro = prf.iter().map(|x| x.2).sum::<f64>() / way as f64;
        dev = dev.max((macro_f1 - ref_macro).abs());
        dev = dev.max((cm.accuracy() - verify::accuracy(&preds, &labels)).abs());
        bad |= !(dev <= RATE_TOLERANCE);
        metrics.worst = metrics.worst.max(dev);
        if bad {
            metrics.failures += 1;
        }
    }
    out.push(metrics);
    out
}
