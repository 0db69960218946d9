//! First-order MAML and ProtoMAML.

use ndarray::Array2;

use super::metric::prototypes;
use super::{AdaptationConfig, Batch, Prediction, StepStats};
use crate::error::Result;
use crate::nn::{sgd_step, Dense, LossConfig, Mlp, Module, Tape};
use crate::tasks::{ShotVector, Task};

/// Task-adapted copies of the network and what adaptation produced.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub encoder: Mlp,
    pub head: Dense,
    /// Support loss before each inner step, then after the last one.
    pub losses: Vec<f64>,
    pub prediction: Prediction,
}

/// Forward through encoder and head; with `backward` set, accumulates
/// gradients of the mean loss into both.
fn classify(
    enc: &mut Mlp,
    head: &mut Dense,
    batch: &Batch,
    counts: &ShotVector,
    loss: &LossConfig,
    backward: bool,
) -> Result<(f64, Array2<f64>)> {
    let mut tape = Tape::new();
    let emb = enc.forward_recorded(batch.x.view(), &mut tape);
    let logits = head.forward(emb.view());
    let (l, g) = loss.batch(logits.view(), &batch.labels, counts);
    if backward {
        let ge = head.backward(emb.view(), g.view());
        enc.backward(&mut tape, ge.view())?;
    }
    Ok((l, logits))
}

/// Plain SGD on the support loss. `train_encoder = false` adapts the head
/// only.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    enc: &mut Mlp,
    head: &mut Dense,
    support: &Batch,
    counts: &ShotVector,
    loss: &LossConfig,
    lr: f64,
    steps: usize,
    train_encoder: bool,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        enc.zero_grad();
        head.zero_grad();
        let (l, _) = classify(enc, head, support, counts, loss, true)?;
        losses.push(l);
        sgd_step(head, lr);
        if train_encoder {
            sgd_step(enc, lr);
        }
    }
    losses.push(classify(enc, head, support, counts, loss, false)?.0);
    Ok(losses)
}

fn adapt(
    enc: &Mlp,
    head: Dense,
    task: &Task,
    cfg: &AdaptationConfig,
    loss: &LossConfig,
) -> Adapted {
    let support = Batch::support(task);
    let query = Batch::query(task);
    let mut encoder = enc.clone();
    let mut head = head;
    let losses = inner_adapt(
        &mut encoder,
        &mut head,
        &support,
        &task.support_shots(),
        loss,
        cfg.inner_lr,
        cfg.inner_steps,
        true,
    )
    .expect("tape recorded on the same network");
    let logits = head.forward(encoder.forward(query.x.view()).view());
    Adapted {
        encoder,
        head,
        losses,
        prediction: Prediction::from_logits(logits, query.labels),
    }
}

pub fn adapt_fomaml(
    enc: &Mlp,
    head: &Dense,
    task: &Task,
    cfg: &AdaptationConfig,
    loss: &LossConfig,
) -> Adapted {
    adapt(enc, head.clone(), task, cfg, loss)
}

/// Linear head equivalent to nearest-prototype scoring:
/// `w_c = 2 mu_c`, `b_c = -||mu_c||^2`.
pub fn protomaml_head(enc: &Mlp, task: &Task) -> Dense {
    let support = Batch::support(task);
    let protos = prototypes(
        enc.forward(support.x.view()).view(),
        &support.labels,
        task.way(),
    );
    let bias = protos.rows().into_iter().map(|r| -r.dot(&r)).collect();
    Dense::from_parts("head", protos.mapv(|v| 2.0 * v), bias)
}

pub fn adapt_protomaml(
    enc: &Mlp,
    task: &Task,
    cfg: &AdaptationConfig,
    loss: &LossConfig,
) -> Adapted {
    adapt(enc, protomaml_head(enc, task), task, cfg, loss)
}

/// Query-loss gradients at the adapted parameters, left in `adapted`.
fn query_gradient(adapted: &mut Adapted, task: &Task) -> Result<StepStats> {
    let query = Batch::query(task);
    adapted.encoder.zero_grad();
    adapted.head.zero_grad();
    let (loss, logits) = classify(
        &mut adapted.encoder,
        &mut adapted.head,
        &query,
        &task.query_shots(),
        &LossConfig::ce(),
        true,
    )?;
    let accuracy = Prediction::from_logits(logits, query.labels).accuracy();
    Ok(StepStats { loss, accuracy })
}

fn add_grads<M: Module + ?Sized, N: Module + ?Sized>(dst: &mut M, src: &N) {
    for (d, s) in dst.params_mut().into_iter().zip(src.params()) {
        d.grad += &s.grad;
    }
}

/// First-order meta-gradient of one task, added to `enc`/`head` gradients.
pub fn fomaml_task_gradient(
    enc: &mut Mlp,
    head: &mut Dense,
    task: &Task,
    cfg: &AdaptationConfig,
) -> Result<StepStats> {
    let mut adapted = adapt_fomaml(enc, head, task, cfg, &LossConfig::ce());
    let stats = query_gradient(&mut adapted, task)?;
    add_grads(enc, &adapted.encoder);
    add_grads(head, &adapted.head);
    Ok(stats)
}

/// First-order ProtoMAML meta-gradient: the adapted encoder's gradient
/// plus the adapted head's gradient carried back through the prototype
/// initialization into the support embeddings.
pub fn protomaml_task_gradient(
    enc: &mut Mlp,
    task: &Task,
    cfg: &AdaptationConfig,
) -> Result<StepStats> {
    let mut adapted = adapt_protomaml(enc, task, cfg, &LossConfig::ce());
    let stats = query_gradient(&mut adapted, task)?;
    add_grads(enc, &adapted.encoder);

    let support = Batch::support(task);
    let shots = task.support_shots();
    let mut tape = Tape::new();
    let es = enc.forward_recorded(support.x.view(), &mut tape);
    let protos = prototypes(es.view(), &support.labels, task.way());
    let gw = &adapted.head.weight.grad;
    let gb = &adapted.head.bias.grad;
    let mut grad_emb = Array2::zeros(es.raw_dim());
    for (j, &c) in support.labels.iter().enumerate() {
        let k = shots[c] as f64;
        for d in 0..es.ncols() {
            grad_emb[[j, d]] = (2.0 * gw[[c, d]] - 2.0 * protos[[c, d]] * gb[[0, c]]) / k;
        }
    }
    enc.backward(&mut tape, grad_emb.view())?;
    Ok(stats)
}
