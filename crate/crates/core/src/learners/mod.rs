//! Few-shot learners behind one interface.
//!
//! Every learner owns an encoder. Pre-trained baselines (`nn1`,
//! `finetune`, `baseline_pp`, `simpleshot`) additionally carry the
//! supervised classification head used during pre-training; `fomaml`
//! carries its meta-learned `way`-output head; `relation` carries its
//! relation module. Prediction never mutates the learner: anything that
//! adapts works on clones.

mod finetune;
mod maml;
mod metric;

pub use finetune::{adapt_finetune, finetune_head, HeadKind};
pub use maml::{
    adapt_fomaml, adapt_protomaml, fomaml_task_gradient, inner_adapt, protomaml_head,
    protomaml_task_gradient, Adapted,
};
pub use metric::{
    matching_episode, predict_matching, predict_nn1, predict_protonet, predict_relation,
    predict_simpleshot, protonet_episode, prototypes, relation_episode, squared_distance_logits,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    argmax, Checkpoint, CosineHead, Dense, EncoderConfig, LossConfig, LossKind, Mlp, Module,
    ParamTensor,
};
use crate::seed;
use crate::tasks::{ShotVector, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Nn1,
    Finetune,
    BaselinePp,
    Protonet,
    Matching,
    Simpleshot,
    Relation,
    Fomaml,
    Protomaml,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 9] = [
        LearnerKind::Nn1,
        LearnerKind::Finetune,
        LearnerKind::BaselinePp,
        LearnerKind::Protonet,
        LearnerKind::Matching,
        LearnerKind::Simpleshot,
        LearnerKind::Relation,
        LearnerKind::Fomaml,
        LearnerKind::Protomaml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Nn1 => "nn1",
            LearnerKind::Finetune => "finetune",
            LearnerKind::BaselinePp => "baseline_pp",
            LearnerKind::Protonet => "protonet",
            LearnerKind::Matching => "matching",
            LearnerKind::Simpleshot => "simpleshot",
            LearnerKind::Relation => "relation",
            LearnerKind::Fomaml => "fomaml",
            LearnerKind::Protomaml => "protomaml",
        }
    }

    /// Trained by supervised pre-training instead of episodes.
    pub fn is_pretrained(self) -> bool {
        matches!(
            self,
            LearnerKind::Nn1
                | LearnerKind::Finetune
                | LearnerKind::BaselinePp
                | LearnerKind::Simpleshot
        )
    }

    /// Has an inner optimisation loop whose loss can be swapped.
    pub fn has_inner_loop(self) -> bool {
        matches!(
            self,
            LearnerKind::Finetune
                | LearnerKind::BaselinePp
                | LearnerKind::Fomaml
                | LearnerKind::Protomaml
        )
    }

    /// Metric learners have no inner loop to reweight, so only plain CE.
    pub fn supports_loss(self, loss: &LossConfig) -> bool {
        loss.kind == LossKind::Ce || self.has_inner_loop()
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LearnerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown learner {s:?}")))
    }
}

/// Inner-loop and episode settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Tasks averaged per meta-update.
    pub meta_batch: usize,
    /// Way of meta-training episodes (20 for the wide ProtoNet variant).
    pub train_way: usize,
    /// Head-only gradient steps for the fine-tune baselines at inference.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Hidden width of the relation module.
    pub relation_hidden: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.1,
            inner_steps: 10,
            meta_batch: 4,
            train_way: 5,
            finetune_steps: 100,
            finetune_lr: 0.01,
            relation_hidden: 32,
        }
    }
}

impl AdaptationConfig {
    /// Defaults per learner: FOMAML averages 4 tasks per update, everything
    /// else (ProtoMAML included) updates after every task.
    pub fn for_kind(kind: LearnerKind) -> Self {
        let meta_batch = if kind == LearnerKind::Fomaml { 4 } else { 1 };
        Self {
            meta_batch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) || self.inner_steps < 1 {
            return Err(Error::InvalidSpec(
                "inner_lr must be > 0 and inner_steps >= 1".into(),
            ));
        }
        if self.meta_batch < 1 || self.train_way < 2 || self.relation_hidden < 1 {
            return Err(Error::InvalidSpec(
                "meta_batch >= 1, train_way >= 2, relation_hidden >= 1 required".into(),
            ));
        }
        if !(self.finetune_lr >= 0.0) {
            return Err(Error::InvalidSpec("finetune_lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// Classification head over embeddings.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear(Dense),
    Cosine(CosineHead),
}

impl Head {
    pub fn forward(&self, emb: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Head::Linear(d) => d.forward(emb),
            Head::Cosine(c) => c.forward(emb),
        }
    }

    pub fn backward(&mut self, emb: ArrayView2<f64>, grad_logits: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Head::Linear(d) => d.backward(emb, grad_logits),
            Head::Cosine(c) => c.backward(emb, grad_logits),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Linear(d) => d.output_dim(),
            Head::Cosine(c) => c.weight.value.nrows(),
        }
    }

    /// Re-normalizes cosine rows; no-op for linear heads.
    pub fn after_update(&mut self) {
        if let Head::Cosine(c) = self {
            c.normalize_rows();
        }
    }
}

impl Module for Head {
    fn params(&self) -> Vec<&ParamTensor> {
        match self {
            Head::Linear(d) => d.params(),
            Head::Cosine(c) => c.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            Head::Linear(d) => d.params_mut(),
            Head::Cosine(c) => c.params_mut(),
        }
    }
}

/// Predicted and true slots for every query, in slot-major query order.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
    pub logits: Array2<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Array2<f64>, labels: Vec<usize>) -> Self {
        let predicted = logits
            .rows()
            .into_iter()
            .map(|r| argmax(&r.to_vec()))
            .collect();
        Self {
            predicted,
            labels,
            logits,
        }
    }

    pub fn accuracy(&self) -> f64 {
        let hits = self
            .predicted
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        hits as f64 / self.labels.len().max(1) as f64
    }
}

/// Outcome of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Row-stacked features and slot labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn support(task: &Task) -> Self {
        Self::from_sets(&task.support, task.feature_dim)
    }

    pub fn query(task: &Task) -> Self {
        Self::from_sets(&task.query, task.feature_dim)
    }

    fn from_sets(sets: &[Vec<crate::tasks::Example>], dim: usize) -> Self {
        let n: usize = sets.iter().map(Vec::len).sum();
        let mut x = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (slot, examples) in sets.iter().enumerate() {
            for e in examples {
                x.row_mut(row)
                    .assign(&ndarray::ArrayView1::from(&e.features));
                labels.push(slot);
                row += 1;
            }
        }
        Self { x, labels }
    }

    pub fn from_rows(rows: &[&[f64]], labels: Vec<usize>) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut x = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
        }
        Self { x, labels }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub kind: LearnerKind,
    pub config: AdaptationConfig,
    pub encoder: Mlp,
    pub head: Option<Head>,
    pub relation: Option<Mlp>,
    /// Mean pre-training embedding used by SimpleShot's centering.
    pub base_mean: Option<Vec<f64>>,
}

impl Learner {
    /// Freshly initialized learner. `pretrain_classes` sizes the supervised
    /// head of pre-trained baselines and is ignored otherwise.
    pub fn new(
        kind: LearnerKind,
        config: AdaptationConfig,
        encoder: &EncoderConfig,
        pretrain_classes: usize,
        init_seed: u64,
    ) -> Result<Self> {
        let mut rng = seed::rng(init_seed);
        let enc = Mlp::new("enc", encoder, &mut rng)?;
        let embed = encoder.embed_dim;
        let head = match kind {
            LearnerKind::BaselinePp => Some(Head::Cosine(CosineHead::new(
                "head",
                pretrain_classes,
                embed,
                &mut rng,
            ))),
            k if k.is_pretrained() => Some(Head::Linear(Dense::new(
                "head",
                embed,
                pretrain_classes,
                &mut rng,
            ))),
            LearnerKind::Fomaml => Some(Head::Linear(Dense::new(
                "head",
                embed,
                config.train_way,
                &mut rng,
            ))),
            _ => None,
        };
        let relation = (kind == LearnerKind::Relation)
            .then(|| {
                Mlp::new(
                    "rel",
                    &EncoderConfig::new(2 * embed, vec![config.relation_hidden], 1),
                    &mut rng,
                )
            })
            .transpose()?;
        Ok(Self {
            kind,
            config,
            encoder: enc,
            head,
            relation,
            base_mean: None,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn check_loss(&self, loss: &LossConfig) -> Result<()> {
        loss.validate()?;
        if !self.kind.supports_loss(loss) {
            return Err(Error::UnsupportedStrategy {
                learner: self.kind.to_string(),
                strategy: format!("{} inner loss", loss.kind.as_str()),
            });
        }
        Ok(())
    }

    fn head(&self) -> Result<&Head> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{} learner has no head", self.kind)))
    }

    /// Adapts to the task's support set (on clones) and classifies its
    /// queries. `adapt_seed` seeds any randomly initialized task head.
    pub fn predict(&self, task: &Task, loss: &LossConfig, adapt_seed: u64) -> Result<Prediction> {
        self.check_loss(loss)?;
        if task.feature_dim != self.encoder.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.encoder.input_dim(),
                got: task.feature_dim,
            });
        }
        match self.kind {
            LearnerKind::Nn1 => Ok(predict_nn1(&self.encoder, task)),
            LearnerKind::Protonet => Ok(predict_protonet(&self.encoder, task)),
            LearnerKind::Matching => Ok(predict_matching(&self.encoder, task)),
            LearnerKind::Simpleshot => {
                let mean = self.base_mean.as_deref().ok_or_else(|| {
                    Error::Usage("simpleshot needs a base mean from pre-training".into())
                })?;
                Ok(predict_simpleshot(&self.encoder, task, mean))
            }
            LearnerKind::Relation => {
                let rel = self
                    .relation
                    .as_ref()
                    .ok_or_else(|| Error::Usage("relation module missing".into()))?;
                Ok(predict_relation(&self.encoder, rel, task))
            }
            LearnerKind::Finetune | LearnerKind::BaselinePp => {
                let kind = if self.kind == LearnerKind::BaselinePp {
                    HeadKind::Cosine
                } else {
                    HeadKind::Linear
                };
                Ok(adapt_finetune(
                    &self.encoder,
                    task,
                    loss,
                    &self.config,
                    kind,
                    adapt_seed,
                ))
            }
            LearnerKind::Fomaml => {
                let Head::Linear(head) = self.head()? else {
                    return Err(Error::Usage("fomaml needs a linear head".into()));
                };
                if head.output_dim() != task.way() {
                    return Err(Error::DimensionMismatch {
                        expected: head.output_dim(),
                        got: task.way(),
                    });
                }
                Ok(adapt_fomaml(&self.encoder, head, task, &self.config, loss).prediction)
            }
            LearnerKind::Protomaml => {
                Ok(adapt_protomaml(&self.encoder, task, &self.config, loss).prediction)
            }
        }
    }

    /// One meta-update over `tasks`: gradients are averaged over the tasks
    /// and applied with `update`, which receives the learner with its
    /// gradient buffers filled.
    pub fn meta_train_step(
        &mut self,
        tasks: &[Task],
        mut update: impl FnMut(&mut Learner),
    ) -> Result<StepStats> {
        if tasks.is_empty() {
            return Err(Error::Usage(
                "meta-train step needs at least one task".into(),
            ));
        }
        self.zero_grad();
        let mut stats = StepStats::default();
        for task in tasks {
            let s = self.accumulate_episode(task)?;
            stats.loss += s.loss;
            stats.accuracy += s.accuracy;
        }
        let n = tasks.len() as f64;
        for p in self.params_mut() {
            p.grad.mapv_inplace(|g| g / n);
        }
        update(self);
        if let Some(h) = self.head.as_mut() {
            h.after_update();
        }
        Ok(StepStats {
            loss: stats.loss / n,
            accuracy: stats.accuracy / n,
        })
    }

    /// Adds one episode's meta-gradient into the gradient buffers.
    fn accumulate_episode(&mut self, task: &Task) -> Result<StepStats> {
        match self.kind {
            LearnerKind::Protonet => protonet_episode(&mut self.encoder, task),
            LearnerKind::Matching => matching_episode(&mut self.encoder, task),
            LearnerKind::Relation => {
                let rel = self
                    .relation
                    .as_mut()
                    .ok_or_else(|| Error::Usage("relation module missing".into()))?;
                relation_episode(&mut self.encoder, rel, task)
            }
            LearnerKind::Fomaml => {
                let Some(Head::Linear(head)) = self.head.as_mut() else {
                    return Err(Error::Usage("fomaml needs a linear head".into()));
                };
                fomaml_task_gradient(&mut self.encoder, head, task, &self.config)
            }
            LearnerKind::Protomaml => {
                protomaml_task_gradient(&mut self.encoder, task, &self.config)
            }
            k => Err(Error::Usage(format!(
                "{k} is trained by pre-training, not episodes"
            ))),
        }
    }

    /// Supervised cross-entropy on a labeled batch through encoder and
    /// pre-training head. Accumulates gradients.
    pub fn pretrain_gradient(&mut self, x: ArrayView2<f64>, labels: &[usize]) -> Result<StepStats> {
        let head = self
            .head
            .as_mut()
            .ok_or_else(|| Error::Usage(format!("{} has no pre-training head", self.kind)))?;
        let mut tape = crate::nn::Tape::new();
        let emb = self.encoder.forward_recorded(x, &mut tape);
        let logits = head.forward(emb.view());
        let counts = ShotVector::new(vec![1; head.classes().max(2)])?;
        let (loss, g) = LossConfig::ce().batch(logits.view(), labels, &counts);
        let ge = head.backward(emb.view(), g.view());
        self.encoder.backward(&mut tape, ge.view())?;
        let pred = Prediction::from_logits(logits, labels.to_vec());
        Ok(StepStats {
            loss,
            accuracy: pred.accuracy(),
        })
    }

    /// Pre-training head predictions for a batch.
    pub fn classify(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let head = self.head()?;
        let logits = head.forward(self.encoder.forward(x).view());
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| argmax(&r.to_vec()))
            .collect())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_module(self)
            .with_meta("kind", self.kind.as_str())
            .with_meta("config", serde_json::to_string(&self.config)?);
        if let Some(h) = &self.head {
            ckpt = match h {
                Head::Linear(_) => ckpt.with_meta("head", "linear"),
                Head::Cosine(c) => ckpt.with_meta("head", format!("cosine {}", c.scale)),
            };
        }
        if let Some(m) = &self.base_mean {
            ckpt = ckpt.with_meta("base_mean", serde_json::to_string(m)?);
        }
        Ok(ckpt)
    }

    /// Rebuilds a learner; layer shapes come from the stored parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| Error::Checkpoint(format!("missing {what}"));
        let kind: LearnerKind = ckpt.meta("kind").ok_or_else(|| missing("kind"))?.parse()?;
        let config: AdaptationConfig =
            serde_json::from_str(ckpt.meta("config").ok_or_else(|| missing("config"))?)?;
        let encoder = mlp_from(ckpt, "enc")?.ok_or_else(|| missing("encoder"))?;
        let relation = mlp_from(ckpt, "rel")?;
        let head = match ckpt.meta("head") {
            None => None,
            Some("linear") => {
                let w = ckpt
                    .param("head.weight")
                    .ok_or_else(|| missing("head.weight"))?
                    .clone();
                let b = ckpt
                    .param("head.bias")
                    .ok_or_else(|| missing("head.bias"))?;
                Some(Head::Linear(Dense::from_parts(
                    "head",
                    w,
                    b.iter().copied().collect(),
                )))
            }
            Some(other) => {
                let scale: f64 = other
                    .strip_prefix("cosine ")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("bad head tag {other:?}")))?;
                let w = ckpt
                    .param("head.weight")
                    .ok_or_else(|| missing("head.weight"))?
                    .clone();
                Some(Head::Cosine(CosineHead {
                    weight: ParamTensor::new("head.weight", w),
                    scale,
                }))
            }
        };
        let base_mean = ckpt
            .meta("base_mean")
            .map(serde_json::from_str)
            .transpose()?;
        Ok(Self {
            kind,
            config,
            encoder,
            head,
            relation,
            base_mean,
        })
    }
}

fn mlp_from(ckpt: &Checkpoint, prefix: &str) -> Result<Option<Mlp>> {
    let mut layers = Vec::new();
    for i in 0.. {
        let (Some(w), Some(b)) = (
            ckpt.param(&format!("{prefix}.{i}.weight")),
            ckpt.param(&format!("{prefix}.{i}.bias")),
        ) else {
            break;
        };
        layers.push(Dense::from_parts(
            &format!("{prefix}.{i}"),
            w.clone(),
            b.iter().copied().collect(),
        ));
    }
    Ok((!layers.is_empty()).then_some(Mlp { layers }))
}

impl Module for Learner {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut p = self.encoder.params();
        if let Some(h) = &self.head {
            p.extend(h.params());
        }
        if let Some(r) = &self.relation {
            p.extend(r.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut p = self.encoder.params_mut();
        if let Some(h) = &mut self.head {
            p.extend(h.params_mut());
        }
        if let Some(r) = &mut self.relation {
            p.extend(r.params_mut());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn task_from(support: Vec<Vec<Vec<f64>>>, query: Vec<Vec<Vec<f64>>>) -> Task {
        Task::from_features(support, query)
    }

    fn learner(kind: LearnerKind) -> Learner {
        Learner::new(
            kind,
            AdaptationConfig::for_kind(kind),
            &EncoderConfig::new(2, vec![4], 3),
            6,
            1,
        )
        .unwrap()
    }

    #[test]
    fn kinds_round_trip_names() {
        for k in LearnerKind::ALL {
            assert_eq!(k.as_str().parse::<LearnerKind>().unwrap(), k);
        }
        assert!("dkt".parse::<LearnerKind>().is_err());
    }

    #[test]
    fn metric_learners_reject_rebalancing_losses() {
        for k in [
            LearnerKind::Protonet,
            LearnerKind::Matching,
            LearnerKind::Nn1,
            LearnerKind::Simpleshot,
            LearnerKind::Relation,
        ] {
            let l = learner(k);
            assert!(matches!(
                l.check_loss(&LossConfig::weighted()),
                Err(Error::UnsupportedStrategy { .. })
            ));
            assert!(matches!(
                l.check_loss(&LossConfig::focal(2.0, 1.0)),
                Err(Error::UnsupportedStrategy { .. })
            ));
            assert!(l.check_loss(&LossConfig::ce()).is_ok());
        }
        for k in [
            LearnerKind::Finetune,
            LearnerKind::BaselinePp,
            LearnerKind::Fomaml,
            LearnerKind::Protomaml,
        ] {
            assert!(learner(k).check_loss(&LossConfig::focal(2.0, 1.0)).is_ok());
        }
    }

    #[test]
    fn adaptation_config_validation() {
        assert!(AdaptationConfig::default().validate().is_ok());
        assert!(AdaptationConfig {
            inner_lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdaptationConfig {
            inner_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            AdaptationConfig::for_kind(LearnerKind::Protomaml).meta_batch,
            1
        );
        assert_eq!(
            AdaptationConfig::for_kind(LearnerKind::Fomaml).meta_batch,
            4
        );
    }

    #[test]
    fn predictions_cover_every_query_with_valid_slots() {
        let task = task_from(
            vec![
                vec![vec![0.0, 0.0], vec![0.2, 0.1]],
                vec![vec![3.0, 3.0]],
                vec![vec![-3.0, 2.0]],
            ],
            vec![
                vec![vec![0.1, 0.0]],
                vec![vec![2.5, 3.0], vec![3.0, 2.0]],
                vec![vec![-2.0, 2.0]],
            ],
        );
        for k in LearnerKind::ALL {
            let mut l = Learner::new(
                k,
                AdaptationConfig {
                    train_way: 3,
                    ..AdaptationConfig::for_kind(k)
                },
                &EncoderConfig::new(2, vec![4], 3),
                6,
                1,
            )
            .unwrap();
            l.base_mean = Some(vec![0.0; 3]);
            let p = l.predict(&task, &LossConfig::ce(), 0).unwrap();
            assert_eq!(p.predicted.len(), 4, "{k}");
            assert!(p.predicted.iter().all(|&s| s < 3), "{k}");
            assert_eq!(p.labels, vec![0, 1, 1, 2]);
        }
    }

    #[test]
    fn simpleshot_without_mean_is_usage_error() {
        let task = task_from(
            vec![vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]],
            vec![vec![vec![0.0, 0.1]], vec![vec![1.0, 0.9]]],
        );
        assert!(matches!(
            learner(LearnerKind::Simpleshot).predict(&task, &LossConfig::ce(), 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_all_kinds() {
        for k in LearnerKind::ALL {
            let mut l = learner(k);
            if k == LearnerKind::Simpleshot {
                l.base_mean = Some(vec![0.1, -0.25, 3.0]);
            }
            let text = l.checkpoint().unwrap().to_text();
            let back =
                Learner::from_checkpoint(&Checkpoint::parse(text.as_bytes()).unwrap()).unwrap();
            assert_eq!(back, l, "{k}");
        }
    }

    #[test]
    fn pretrained_kinds_cannot_take_episode_steps() {
        let task = task_from(
            vec![vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]],
            vec![vec![vec![0.0, 0.1]], vec![vec![1.0, 0.9]]],
        );
        let mut l = learner(LearnerKind::Finetune);
        assert!(l.meta_train_step(&[task], |_| {}).is_err());
    }
}
