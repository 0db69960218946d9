//! Fine-tuning baselines: a fresh head trained on frozen support embeddings.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution as _, Normal};

use super::{AdaptationConfig, Batch, Head, Prediction};
use crate::nn::{sgd_step, CosineHead, Dense, LossConfig, Mlp, Module};
use crate::seed;
use crate::tasks::{ShotVector, Task};

/// Weight std of a fresh linear task head. Small, so the first steps are
/// driven by the support data rather than by the random init.
pub const FINETUNE_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Cosine,
}

/// Trains a new `way`-class head with full-batch SGD. Returns the head and
/// the loss before each step followed by the final loss.
#[allow(clippy::too_many_arguments)]
pub fn finetune_head(
    emb: ArrayView2<f64>,
    labels: &[usize],
    counts: &ShotVector,
    loss: &LossConfig,
    steps: usize,
    lr: f64,
    kind: HeadKind,
    init_seed: u64,
) -> (Head, Vec<f64>) {
    let mut rng = seed::rng(init_seed);
    let way = counts.way();
    let mut head = match kind {
        HeadKind::Linear => {
            let normal = Normal::new(0.0, FINETUNE_INIT_STD).expect("positive std");
            let w = Array2::from_shape_simple_fn((way, emb.ncols()), || normal.sample(&mut rng));
            Head::Linear(Dense::from_parts("ft", w, vec![0.0; way]))
        }
        HeadKind::Cosine => Head::Cosine(CosineHead::new("ft", way, emb.ncols(), &mut rng)),
    };
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        head.zero_grad();
        let logits = head.forward(emb);
        let (l, g) = loss.batch(logits.view(), labels, counts);
        losses.push(l);
        head.backward(emb, g.view());
        sgd_step(&mut head, lr);
        head.after_update();
    }
    let (l, _) = loss.batch(head.forward(emb).view(), labels, counts);
    losses.push(l);
    (head, losses)
}

pub fn adapt_finetune(
    enc: &Mlp,
    task: &Task,
    loss: &LossConfig,
    cfg: &AdaptationConfig,
    kind: HeadKind,
    init_seed: u64,
) -> Prediction {
    let support = Batch::support(task);
    let query = Batch::query(task);
    let es = enc.forward(support.x.view());
    let (head, _) = finetune_head(
        es.view(),
        &support.labels,
        &task.support_shots(),
        loss,
        cfg.finetune_steps,
        cfg.finetune_lr,
        kind,
        init_seed,
    );
    let logits = head.forward(enc.forward(query.x.view()).view());
    Prediction::from_logits(logits, query.labels)
}
