//! Training and evaluation orchestration.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{baseline_pretrain_split, MetaDataset, Split};
use crate::error::{Error, Result};
use crate::learners::{Batch, Learner, LearnerKind, StepStats};
use crate::metrics::{SpecResult, TaskRecord};
use crate::nn::{Adam, LossConfig, Module};
use crate::rebalance::{random_shot_spec, training_spec, Strategy};
use crate::seed::{self, mix};
use crate::tasks::{sample_task, Distribution, ImbalanceSpec, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Meta-training episodes, or minibatch updates for pre-training.
    pub total_episodes: usize,
    pub lr_first_half: f64,
    pub lr_second_half: f64,
    pub val_every: usize,
    pub val_tasks: usize,
    pub pretrain_batch: usize,
    pub query_per_class: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_episodes: 2000,
            lr_first_half: 1e-3,
            lr_second_half: 1e-4,
            val_every: 50,
            val_tasks: 50,
            pretrain_batch: 128,
            query_per_class: 16,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_episodes == 0 || self.val_every == 0 || self.val_every > self.total_episodes {
            return Err(Error::InvalidSpec(
                "need 0 < val_every <= total_episodes".into(),
            ));
        }
        if self.val_tasks == 0 || self.pretrain_batch == 0 || self.query_per_class == 0 {
            return Err(Error::InvalidSpec(
                "val_tasks, pretrain_batch and query_per_class must be positive".into(),
            ));
        }
        if !(self.lr_first_half >= 0.0 && self.lr_second_half >= 0.0) {
            return Err(Error::InvalidSpec("learning rates must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate for a 0-based episode; drops at `floor(E / 2)`.
    pub fn lr_at(&self, episode: usize) -> f64 {
        if episode < self.total_episodes / 2 {
            self.lr_first_half
        } else {
            self.lr_second_half
        }
    }
}

/// Task distribution used for meta-validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSpec {
    /// Whatever the strategy trains on.
    #[default]
    Training,
    Balanced,
}

/// Episode distributions of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub balanced: ImbalanceSpec,
    pub random: ImbalanceSpec,
    pub validation: ValidationSpec,
    pub sigma_aug: f64,
}

impl EpisodeConfig {
    /// 5-shot balanced vs 1-9-shot random episodes of `train_way` classes;
    /// 20-way episodes get 5 queries per class.
    pub fn new(train_way: usize, query_per_class: usize, sigma_aug: f64) -> Self {
        let q = if train_way >= 20 { 5 } else { query_per_class };
        let query = Distribution::Balanced { k: q };
        Self {
            balanced: ImbalanceSpec::balanced(5, train_way).with_query(query),
            random: random_shot_spec(1, 9, train_way).with_query(query),
            validation: ValidationSpec::Training,
            sigma_aug,
        }
    }

    pub fn training<'a>(&'a self, strategy: &Strategy) -> &'a ImbalanceSpec {
        training_spec(strategy, &self.balanced, &self.random)
    }

    pub fn validation<'a>(&'a self, strategy: &Strategy) -> &'a ImbalanceSpec {
        match self.validation {
            ValidationSpec::Training => self.training(strategy),
            ValidationSpec::Balanced => &self.balanced,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogPoint {
    pub episode: usize,
    pub split: String,
    pub accuracy: f64,
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct RunHandle {
    pub root_seed: u64,
    pub learner: LearnerKind,
    pub strategy: String,
    pub schedule: TrainSchedule,
    /// Parameters at the best validation point.
    pub best: Learner,
    pub best_accuracy: f64,
    pub best_episode: usize,
    pub log: Vec<LogPoint>,
}

impl RunHandle {
    pub fn validation_points(&self) -> impl Iterator<Item = &LogPoint> {
        self.log.iter().filter(|p| p.split == "val")
    }
}

fn mean_accuracy(learner: &Learner, tasks: &[Task], seed: u64) -> Result<f64> {
    let accs = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            learner
                .predict(t, &LossConfig::ce(), mix(seed, i as u64))
                .map(|p| p.accuracy())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

struct Tracker {
    best: Option<(Learner, f64, usize)>,
    log: Vec<LogPoint>,
    train_acc: f64,
    train_n: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            best: None,
            log: Vec::new(),
            train_acc: 0.0,
            train_n: 0,
        }
    }

    fn step(&mut self, s: StepStats) {
        self.train_acc += s.accuracy;
        self.train_n += 1;
    }

    fn validate(&mut self, episode: usize, learner: &Learner, acc: f64) {
        if self.train_n > 0 {
            self.log.push(LogPoint {
                episode,
                split: "train".into(),
                accuracy: self.train_acc / self.train_n as f64,
            });
        }
        self.train_acc = 0.0;
        self.train_n = 0;
        self.log.push(LogPoint {
            episode,
            split: "val".into(),
            accuracy: acc,
        });
        if self.best.as_ref().is_none_or(|b| acc > b.1) {
            self.best = Some((learner.clone(), acc, episode));
        }
    }

    fn finish(
        self,
        root_seed: u64,
        learner: LearnerKind,
        strategy: &Strategy,
        schedule: &TrainSchedule,
    ) -> RunHandle {
        let (best, best_accuracy, best_episode) = self.best.expect("at least one validation point");
        RunHandle {
            root_seed,
            learner,
            strategy: strategy.name.clone(),
            schedule: schedule.clone(),
            best,
            best_accuracy,
            best_episode,
            log: self.log,
        }
    }
}

pub fn meta_train(
    learner: Learner,
    train: &Split,
    val: &Split,
    strategy: &Strategy,
    schedule: &TrainSchedule,
    episodes: &EpisodeConfig,
    seed: u64,
) -> Result<RunHandle> {
    meta_train_observed(
        learner,
        train,
        val,
        strategy,
        schedule,
        episodes,
        seed,
        |_, _| {},
    )
}

/// [`meta_train`] that shows every (rebalanced) training task to `observe`.
#[allow(clippy::too_many_arguments)]
pub fn meta_train_observed(
    mut learner: Learner,
    train: &Split,
    val: &Split,
    strategy: &Strategy,
    schedule: &TrainSchedule,
    episodes: &EpisodeConfig,
    seed: u64,
    mut observe: impl FnMut(usize, &Task),
) -> Result<RunHandle> {
    schedule.validate()?;
    if learner.kind.is_pretrained() {
        return Err(Error::Usage(format!(
            "{} is pre-trained, not meta-trained",
            learner.kind
        )));
    }
    let spec = episodes.training(strategy);
    let mut task_rng = seed::rng(mix(seed, 1));
    let mut rebalance_rng = seed::rng(mix(seed, 2));
    let mut val_rng = seed::rng(mix(seed, 3));
    let val_spec = episodes.validation(strategy);
    let val_tasks = (0..schedule.val_tasks)
        .map(|_| sample_task(val, val_spec, &mut val_rng))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = Adam::new(&learner);
    let mut tracker = Tracker::new();
    let mut batch = Vec::with_capacity(learner.config.meta_batch);
    for ep in 0..schedule.total_episodes {
        let wrap = |e: Error| Error::Episode {
            episode: ep,
            source: Box::new(e),
        };
        let task = sample_task(train, spec, &mut task_rng).map_err(wrap)?;
        let task = strategy
            .train_rebalance
            .apply(task, episodes.sigma_aug, &mut rebalance_rng)
            .map_err(wrap)?;
        observe(ep, &task);
        batch.push(task);
        if batch.len() == learner.config.meta_batch || ep + 1 == schedule.total_episodes {
            let lr = schedule.lr_at(ep);
            let stats = learner
                .meta_train_step(&batch, |l| adam.step(l, lr))
                .map_err(wrap)?;
            tracker.step(stats);
            batch.clear();
        }
        if (ep + 1) % schedule.val_every == 0 {
            let acc = mean_accuracy(&learner, &val_tasks, mix(seed, 4)).map_err(wrap)?;
            tracker.validate(ep + 1, &learner, acc);
        }
    }
    Ok(tracker.finish(seed, learner.kind, strategy, schedule))
}

/// Flattened labeled samples with classes mapped to `0..n` in id order.
fn labeled(split: &Split) -> (Vec<&[f64]>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, (_, samples)) in split.iter().enumerate() {
        for s in samples {
            xs.push(s.as_slice());
            ys.push(i);
        }
    }
    (xs, ys)
}

/// Supervised pre-training on `pretrain` with holdout-based checkpoint
/// selection. `holdout` must contain the same classes.
pub fn pretrain(
    mut learner: Learner,
    pretrain: &Split,
    holdout: &Split,
    strategy: &Strategy,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<RunHandle> {
    schedule.validate()?;
    if !learner.kind.is_pretrained() {
        return Err(Error::Usage(format!(
            "{} is meta-trained, not pre-trained",
            learner.kind
        )));
    }
    if pretrain.class_ids() != holdout.class_ids() {
        return Err(Error::Validation(
            "pre-training and holdout classes differ".into(),
        ));
    }
    let classes = learner.head.as_ref().map_or(0, |h| h.classes());
    if classes != pretrain.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: classes,
            got: pretrain.num_classes(),
        });
    }
    let (xs, ys) = labeled(pretrain);
    let (hx, hy) = labeled(holdout);
    let holdout_batch = Batch::from_rows(&hx, hy);
    let mut rng = seed::rng(mix(seed, 5));
    let bs = schedule.pretrain_batch.min(xs.len());
    let mut adam = Adam::new(&learner);
    let mut tracker = Tracker::new();
    for step in 0..schedule.total_episodes {
        let idx = index::sample(&mut rng, xs.len(), bs).into_vec();
        let rows: Vec<&[f64]> = idx.iter().map(|&i| xs[i]).collect();
        let b = Batch::from_rows(&rows, idx.iter().map(|&i| ys[i]).collect());
        learner.zero_grad();
        let stats = learner.pretrain_gradient(b.x.view(), &b.labels)?;
        adam.step(&mut learner, schedule.lr_at(step));
        if let Some(h) = learner.head.as_mut() {
            h.after_update();
        }
        tracker.step(stats);
        if (step + 1) % schedule.val_every == 0 {
            let pred = learner.classify(holdout_batch.x.view())?;
            let acc = crate::verify::accuracy(&pred, &holdout_batch.labels);
            tracker.validate(step + 1, &learner, acc);
        }
    }
    let mut run = tracker.finish(seed, learner.kind, strategy, schedule);
    if run.learner == LearnerKind::Simpleshot {
        run.best.base_mean = Some(mean_embedding(&run.best, &xs));
    }
    Ok(run)
}

/// Mean encoder output over `rows`.
pub fn mean_embedding(learner: &Learner, rows: &[&[f64]]) -> Vec<f64> {
    let b = Batch::from_rows(rows, vec![0; rows.len()]);
    let emb = learner.encoder.forward(b.x.view());
    emb.mean_axis(ndarray::Axis(0))
        .map(|m| m.to_vec())
        .unwrap_or_default()
}

/// Trains `learner` the way its kind requires: pre-training on an 80/20
/// split of the training classes, or episodic meta-training.
pub fn train(
    learner: Learner,
    dataset: &MetaDataset,
    strategy: &Strategy,
    schedule: &TrainSchedule,
    episodes: &EpisodeConfig,
    seed: u64,
) -> Result<RunHandle> {
    if learner.kind.is_pretrained() {
        let (pre, hold) = baseline_pretrain_split(dataset, mix(seed, 6))?;
        pretrain(learner, &pre, &hold, strategy, schedule, seed)
    } else {
        meta_train(
            learner,
            &dataset.train,
            &dataset.val,
            strategy,
            schedule,
            episodes,
            seed,
        )
    }
}

/// Seed of evaluation task `task_index` of spec `spec_index`.
pub fn eval_task_seed(seed: u64, spec_index: usize, task_index: usize) -> u64 {
    mix(mix(seed, spec_index as u64), task_index as u64)
}

/// The evaluation task stream is a pure function of the seed, so every
/// learner sees the same tasks.
pub fn eval_task(
    test: &Split,
    spec: &ImbalanceSpec,
    seed: u64,
    spec_index: usize,
    task_index: usize,
) -> Result<Task> {
    sample_task(
        test,
        spec,
        &mut seed::rng(eval_task_seed(seed, spec_index, task_index)),
    )
}

/// Adapts to and scores `n_tasks` test tasks per spec. Tasks run in
/// parallel; results come back in task order.
pub fn evaluate(
    learner: &Learner,
    strategy: &Strategy,
    test: &Split,
    specs: &[ImbalanceSpec],
    n_tasks: usize,
    seed: u64,
    sigma_aug: f64,
) -> Result<Vec<SpecResult>> {
    learner.check_loss(&strategy.infer_loss)?;
    specs
        .iter()
        .enumerate()
        .map(|(si, spec)| {
            let tasks = (0..n_tasks)
                .into_par_iter()
                .map(|ti| {
                    let ts = eval_task_seed(seed, si, ti);
                    let task = sample_task(test, spec, &mut seed::rng(ts))?;
                    let shots = task.support_shots().counts().to_vec();
                    let task = strategy.infer_rebalance.apply(
                        task,
                        sigma_aug,
                        &mut seed::rng(mix(ts, 1)),
                    )?;
                    let pred = learner.predict(&task, &strategy.infer_loss, mix(ts, 2))?;
                    TaskRecord::from_prediction(ti, ts, shots, &pred)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SpecResult { spec: *spec, tasks })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::learners::AdaptationConfig;
    use crate::nn::EncoderConfig;

    fn tiny_data() -> MetaDataset {
        generate_synthetic(&SyntheticSpec {
            classes_per_split: (10, 5, 5),
            samples_per_class: 40,
            feature_dim: 4,
            class_mean_scale: 1.5,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn schedule(e: usize, v: usize) -> TrainSchedule {
        TrainSchedule {
            total_episodes: e,
            val_every: v,
            val_tasks: 4,
            pretrain_batch: 16,
            query_per_class: 4,
            ..Default::default()
        }
    }

    fn learner(kind: LearnerKind, classes: usize) -> Learner {
        Learner::new(
            kind,
            AdaptationConfig {
                inner_steps: 2,
                ..AdaptationConfig::for_kind(kind)
            },
            &EncoderConfig::new(4, vec![8], 4),
            classes,
            0,
        )
        .unwrap()
    }

    #[test]
    fn lr_switches_at_half() {
        let s = TrainSchedule {
            total_episodes: 7,
            ..Default::default()
        };
        assert_eq!(s.lr_at(2), 1e-3);
        assert_eq!(s.lr_at(3), 1e-4);
        assert!(TrainSchedule {
            val_every: 8,
            total_episodes: 7,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn validation_point_count_and_running_best() {
        let ds = tiny_data();
        let eps = EpisodeConfig::new(5, 4, 0.1);
        let st = Strategy::preset("standard").unwrap();
        let run = meta_train(
            learner(LearnerKind::Protonet, 0),
            &ds.train,
            &ds.val,
            &st,
            &schedule(40, 5),
            &eps,
            3,
        )
        .unwrap();
        let vals: Vec<f64> = run.validation_points().map(|p| p.accuracy).collect();
        assert_eq!(vals.len(), 8);
        assert_eq!(
            run.best_accuracy,
            vals.iter().cloned().fold(f64::MIN, f64::max)
        );
    }

    #[test]
    fn meta_training_is_deterministic() {
        let ds = tiny_data();
        let eps = EpisodeConfig::new(5, 4, 0.1);
        let st = Strategy::preset("random-shot-ros").unwrap();
        for kind in [
            LearnerKind::Fomaml,
            LearnerKind::Protomaml,
            LearnerKind::Matching,
            LearnerKind::Relation,
        ] {
            let a = meta_train(
                learner(kind, 0),
                &ds.train,
                &ds.val,
                &st,
                &schedule(8, 4),
                &eps,
                9,
            )
            .unwrap();
            let b = meta_train(
                learner(kind, 0),
                &ds.train,
                &ds.val,
                &st,
                &schedule(8, 4),
                &eps,
                9,
            )
            .unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.best, b.best);
        }
    }

    #[test]
    fn standard_rosplus_infer_leaves_training_tasks_alone() {
        let ds = tiny_data();
        let eps = EpisodeConfig::new(5, 4, 0.1);
        let mut seen = Vec::new();
        let st = Strategy::preset("standard-rosplus-infer").unwrap();
        meta_train_observed(
            learner(LearnerKind::Protonet, 0),
            &ds.train,
            &ds.val,
            &st,
            &schedule(10, 5),
            &eps,
            1,
            |_, t| seen.push(t.clone()),
        )
        .unwrap();
        let mut rng = seed::rng(mix(1, 1));
        for t in &seen {
            assert_eq!(t, &sample_task(&ds.train, &eps.balanced, &mut rng).unwrap());
        }
    }

    #[test]
    fn pretrain_records_simpleshot_mean() {
        let ds = tiny_data();
        let (pre, hold) = baseline_pretrain_split(&ds, 0).unwrap();
        let st = Strategy::preset("standard").unwrap();
        let run = pretrain(
            learner(LearnerKind::Simpleshot, 15),
            &pre,
            &hold,
            &st,
            &schedule(30, 10),
            2,
        )
        .unwrap();
        let (xs, _) = labeled(&pre);
        let mut brute = vec![0.0; 4];
        for x in &xs {
            for (b, e) in brute.iter_mut().zip(run.best.encoder.encode(x).unwrap()) {
                *b += e / xs.len() as f64;
            }
        }
        for (a, b) in run.best.base_mean.as_ref().unwrap().iter().zip(&brute) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(run.best_accuracy >= 0.1);
    }

    #[test]
    fn wrong_training_path_is_rejected() {
        let ds = tiny_data();
        let st = Strategy::preset("standard").unwrap();
        let eps = EpisodeConfig::new(5, 4, 0.1);
        assert!(meta_train(
            learner(LearnerKind::Finetune, 15),
            &ds.train,
            &ds.val,
            &st,
            &schedule(4, 2),
            &eps,
            0
        )
        .is_err());
        let (pre, hold) = baseline_pretrain_split(&ds, 0).unwrap();
        assert!(pretrain(
            learner(LearnerKind::Protonet, 0),
            &pre,
            &hold,
            &st,
            &schedule(4, 2),
            0
        )
        .is_err());
    }

    #[test]
    fn evaluation_streams_are_shared_and_sized() {
        let ds = tiny_data();
        let st = Strategy::preset("standard").unwrap();
        let spec = ImbalanceSpec::balanced(5, 5).with_query(Distribution::Balanced { k: 3 });
        let a = evaluate(
            &learner(LearnerKind::Protonet, 0),
            &st,
            &ds.test,
            std::slice::from_ref(&spec),
            6,
            5,
            0.1,
        )
        .unwrap();
        let b = evaluate(
            &learner(LearnerKind::Matching, 0),
            &st,
            &ds.test,
            std::slice::from_ref(&spec),
            6,
            5,
            0.1,
        )
        .unwrap();
        assert_eq!(a[0].tasks.len(), 6);
        assert_eq!(
            a[0].tasks.iter().map(|t| t.seed).collect::<Vec<_>>(),
            b[0].tasks.iter().map(|t| t.seed).collect::<Vec<_>>()
        );
        let queries: u64 = a[0].tasks.iter().map(|t| t.total.iter().sum::<u64>()).sum();
        assert_eq!(queries, 6 * 5 * 3);
    }

    #[test]
    fn evaluation_does_not_mutate_learner() {
        let ds = tiny_data();
        let st = Strategy::preset("standard-focal-infer").unwrap();
        let l = learner(LearnerKind::Fomaml, 0);
        let before = l.clone();
        evaluate(
            &l,
            &st,
            &ds.test,
            &[
                ImbalanceSpec::new(5, Distribution::Linear { k_min: 1, k_max: 9 })
                    .with_query(Distribution::Balanced { k: 2 }),
            ],
            3,
            1,
            0.1,
        )
        .unwrap();
        assert_eq!(l, before);
    }

    #[test]
    fn metric_learner_rejects_focal_strategy() {
        let ds = tiny_data();
        let st = Strategy::preset("standard-focal-infer").unwrap();
        let r = evaluate(
            &learner(LearnerKind::Protonet, 0),
            &st,
            &ds.test,
            &[ImbalanceSpec::balanced(1, 5)],
            2,
            0,
            0.1,
        );
        assert!(matches!(r, Err(Error::UnsupportedStrategy { .. })));
    }
}
