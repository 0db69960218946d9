//! Shot-vector generators and task sampling.
//!
//! A task is a `K_min`-`K_max`-shot `N`-way task whose per-class support
//! counts follow one of four distributions. Slot `i` of the shot vector is
//! bound to the `i`-th class drawn from the split; class selection is
//! already uniform, so the vector itself is never permuted. For linear and
//! step distributions this makes slot 0 the lowest-shot class.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};

/// Offset used by the linear generator so that rounding never lands on a
/// half boundary for integer inputs.
pub const LINEAR_ROUNDING_OFFSET: f64 = 0.499;

/// Default number of query samples per class.
pub const DEFAULT_QUERY: usize = 16;

/// Per-class support (or query) counts for one task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ShotVector(Vec<usize>);

impl ShotVector {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "shot vector needs at least 2 classes, got {}",
                counts.len()
            )));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidSpec(
                "every class needs at least one sample".into(),
            ));
        }
        Ok(Self(counts))
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn way(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn min(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(0)
    }

    pub fn is_balanced(&self) -> bool {
        self.max() == self.min()
    }
}

impl TryFrom<Vec<usize>> for ShotVector {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ShotVector> for Vec<usize> {
    fn from(s: ShotVector) -> Self {
        s.0
    }
}

impl std::ops::Index<usize> for ShotVector {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

fn check_range(k_min: usize, k_max: usize, way: usize) -> Result<()> {
    if way < 2 {
        return Err(Error::InvalidSpec(format!(
            "way must be at least 2, got {way}"
        )));
    }
    if k_min < 1 {
        return Err(Error::InvalidSpec("k_min must be at least 1".into()));
    }
    if k_max < k_min {
        return Err(Error::InvalidSpec(format!(
            "k_max ({k_max}) is smaller than k_min ({k_min})"
        )));
    }
    Ok(())
}

/// Linearly spaced counts from `k_min` to `k_max`.
pub fn linear_shots(k_min: usize, k_max: usize, way: usize) -> Result<ShotVector> {
    check_range(k_min, k_max, way)?;
    let c = LINEAR_ROUNDING_OFFSET;
    let lo = k_min as f64;
    let span = (k_max as f64 + c * 2.0 - lo) / (way - 1) as f64;
    let counts = (0..way)
        .map(|i| (lo - c + i as f64 * span).round() as usize)
        .collect();
    ShotVector::new(counts)
}

/// `n_min` minority classes with `k_min` samples, the rest with `k_max`.
pub fn step_shots(k_min: usize, k_max: usize, way: usize, n_min: usize) -> Result<ShotVector> {
    check_range(k_min, k_max, way)?;
    if k_min == k_max {
        return Err(Error::InvalidSpec(
            "step distribution needs k_min < k_max; use a balanced distribution".into(),
        ));
    }
    if n_min < 1 || n_min > way - 1 {
        return Err(Error::InvalidSpec(format!(
            "n_min must be in [1, {}], got {n_min}",
            way - 1
        )));
    }
    let counts = (0..way)
        .map(|i| if i < n_min { k_min } else { k_max })
        .collect();
    ShotVector::new(counts)
}

/// Independent uniform draws from the inclusive range `[k_min, k_max]`.
pub fn random_shots<R: Rng + ?Sized>(
    k_min: usize,
    k_max: usize,
    way: usize,
    rng: &mut R,
) -> Result<ShotVector> {
    check_range(k_min, k_max, way)?;
    let counts = (0..way).map(|_| rng.random_range(k_min..=k_max)).collect();
    ShotVector::new(counts)
}

/// Ratio between the largest and smallest class count.
pub fn imbalance_ratio(shots: &ShotVector) -> f64 {
    shots.max() as f64 / shots.min() as f64
}

/// How per-class counts are distributed across the classes of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Balanced {
        k: usize,
    },
    Linear {
        k_min: usize,
        k_max: usize,
    },
    Step {
        k_min: usize,
        k_max: usize,
        n_min: usize,
    },
    Random {
        k_min: usize,
        k_max: usize,
    },
}

impl Distribution {
    pub fn k_min(&self) -> usize {
        match *self {
            Distribution::Balanced { k } => k,
            Distribution::Linear { k_min, .. }
            | Distribution::Step { k_min, .. }
            | Distribution::Random { k_min, .. } => k_min,
        }
    }

    pub fn k_max(&self) -> usize {
        match *self {
            Distribution::Balanced { k } => k,
            Distribution::Linear { k_max, .. }
            | Distribution::Step { k_max, .. }
            | Distribution::Random { k_max, .. } => k_max,
        }
    }

    /// True when every draw yields the same vector.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Distribution::Random { k_min, k_max } if k_min != k_max)
    }

    pub fn validate(&self, way: usize) -> Result<()> {
        match *self {
            Distribution::Balanced { k } => check_range(k, k, way),
            Distribution::Linear { k_min, k_max } | Distribution::Random { k_min, k_max } => {
                check_range(k_min, k_max, way)
            }
            Distribution::Step {
                k_min,
                k_max,
                n_min,
            } => step_shots(k_min, k_max, way, n_min).map(|_| ()),
        }
    }

    /// Draws a shot vector. Only the random distribution consumes `rng`.
    pub fn shots<R: Rng + ?Sized>(&self, way: usize, rng: &mut R) -> Result<ShotVector> {
        match *self {
            Distribution::Balanced { k } => {
                check_range(k, k, way)?;
                ShotVector::new(vec![k; way])
            }
            Distribution::Linear { k_min, k_max } => linear_shots(k_min, k_max, way),
            Distribution::Step {
                k_min,
                k_max,
                n_min,
            } => step_shots(k_min, k_max, way, n_min),
            Distribution::Random { k_min, k_max } => random_shots(k_min, k_max, way, rng),
        }
    }

    /// Imbalance ratio reported for this distribution. Deterministic
    /// distributions report the ratio of their vector; random reports the
    /// ratio of its bounds.
    pub fn nominal_ratio(&self, way: usize) -> Result<f64> {
        match *self {
            Distribution::Random { k_min, k_max } => {
                check_range(k_min, k_max, way)?;
                Ok(k_max as f64 / k_min as f64)
            }
            _ => {
                let mut unused = crate::seed::rng(0);
                Ok(imbalance_ratio(&self.shots(way, &mut unused)?))
            }
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Distribution::Balanced { k } => write!(f, "{k}shot balanced"),
            Distribution::Linear { k_min, k_max } => write!(f, "{k_min}-{k_max}shot linear"),
            Distribution::Step {
                k_min,
                k_max,
                n_min,
            } => {
                write!(f, "{k_min}-{k_max}shot step {n_min}minor")
            }
            Distribution::Random { k_min, k_max } => write!(f, "{k_min}-{k_max}shot random"),
        }
    }
}

impl FromStr for Distribution {
    type Err = Error;

    /// Parses the labels produced by `Display`, e.g. `1-9shot step 1minor`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("cannot parse distribution {s:?}"));
        let mut words = s.split_whitespace();
        let shots = words.next().ok_or_else(bad)?;
        let kind = words.next().ok_or_else(bad)?;
        let range = shots.strip_suffix("shot").ok_or_else(bad)?;
        let (lo, hi) = match range.split_once('-') {
            Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
            None => {
                let k = range.parse().map_err(|_| bad())?;
                (k, k)
            }
        };
        let dist = match kind {
            "balanced" if lo == hi => Distribution::Balanced { k: lo },
            "linear" => Distribution::Linear {
                k_min: lo,
                k_max: hi,
            },
            "random" => Distribution::Random {
                k_min: lo,
                k_max: hi,
            },
            "step" => {
                let minor = words.next().ok_or_else(bad)?;
                let n_min = minor
                    .strip_suffix("minor")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(bad)?;
                Distribution::Step {
                    k_min: lo,
                    k_max: hi,
                    n_min,
                }
            }
            _ => return Err(bad()),
        };
        if words.next().is_some() {
            return Err(bad());
        }
        Ok(dist)
    }
}

/// Support and query distributions for an `N`-way task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub way: usize,
    pub support: Distribution,
    #[serde(default = "default_query")]
    pub query: Distribution,
}

fn default_query() -> Distribution {
    Distribution::Balanced { k: DEFAULT_QUERY }
}

impl ImbalanceSpec {
    /// Spec with the default balanced query side.
    pub fn new(way: usize, support: Distribution) -> Self {
        Self {
            way,
            support,
            query: default_query(),
        }
    }

    pub fn with_query(mut self, query: Distribution) -> Self {
        self.query = query;
        self
    }

    pub fn balanced(k: usize, way: usize) -> Self {
        Self::new(way, Distribution::Balanced { k })
    }

    pub fn validate(&self) -> Result<()> {
        self.support.validate(self.way)?;
        self.query.validate(self.way)
    }

    pub fn name(&self) -> String {
        let mut s = self.support.to_string();
        if self.way != 5 {
            s.push_str(&format!(" {}way", self.way));
        }
        if self.query != default_query() {
            s.push_str(&format!(" query {}", self.query));
        }
        s
    }
}

/// Identity of one vector in a dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub class: u32,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub source: SampleRef,
    pub features: Vec<f64>,
}

/// A sampled few-shot task. `support[i]` and `query[i]` belong to local
/// class slot `i`, which maps to global class `class_map[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support: Vec<Vec<Example>>,
    pub query: Vec<Vec<Example>>,
    pub class_map: Vec<u32>,
    pub feature_dim: usize,
}

impl Task {
    /// Builds a task from raw feature vectors grouped by slot. Slot `i` is
    /// given global class `i`; source indices count up across the task.
    pub fn from_features(support: Vec<Vec<Vec<f64>>>, query: Vec<Vec<Vec<f64>>>) -> Task {
        let feature_dim = support
            .iter()
            .chain(&query)
            .flatten()
            .next()
            .map_or(0, Vec::len);
        let mut n = 0u32;
        let mut build = |sets: Vec<Vec<Vec<f64>>>| -> Vec<Vec<Example>> {
            sets.into_iter()
                .enumerate()
                .map(|(c, xs)| {
                    xs.into_iter()
                        .map(|features| {
                            n += 1;
                            Example {
                                source: SampleRef {
                                    class: c as u32,
                                    index: n,
                                },
                                features,
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let support = build(support);
        let query = build(query);
        let class_map = (0..support.len() as u32).collect();
        Task {
            support,
            query,
            class_map,
            feature_dim,
        }
    }

    pub fn way(&self) -> usize {
        self.class_map.len()
    }

    pub fn support_shots(&self) -> ShotVector {
        ShotVector(self.support.iter().map(Vec::len).collect())
    }

    pub fn query_shots(&self) -> ShotVector {
        ShotVector(self.query.iter().map(Vec::len).collect())
    }

    pub fn support_len(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    pub fn query_len(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }

    /// Support examples flattened in slot order, with their slot.
    pub fn support_labeled(&self) -> impl Iterator<Item = (usize, &Example)> {
        labeled(&self.support)
    }

    pub fn query_labeled(&self) -> impl Iterator<Item = (usize, &Example)> {
        labeled(&self.query)
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query_labeled().map(|(c, _)| c).collect()
    }

    /// Order-sensitive 64-bit digest of slots, sources and feature bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::seed::fnv1a("task");
        let mut fold = |v: u64| h = crate::seed::mix(h, v);
        for (role, sets) in [(0u64, &self.support), (1, &self.query)] {
            fold(role);
            for (slot, examples) in sets.iter().enumerate() {
                fold(slot as u64);
                fold(u64::from(self.class_map[slot]));
                for e in examples {
                    fold(u64::from(e.source.class) << 32 | u64::from(e.source.index));
                    for x in &e.features {
                        fold(x.to_bits());
                    }
                }
            }
        }
        h
    }
}

fn labeled(sets: &[Vec<Example>]) -> impl Iterator<Item = (usize, &Example)> {
    sets.iter()
        .enumerate()
        .flat_map(|(slot, xs)| xs.iter().map(move |e| (slot, e)))
}

/// Samples a task from `split`.
///
/// Classes are drawn uniformly without replacement; within each class the
/// `K_i + M_i` samples are drawn uniformly without replacement and the
/// first `K_i` become the support, so support and query never overlap.
pub fn sample_task<R: Rng + ?Sized>(
    split: &Split,
    spec: &ImbalanceSpec,
    rng: &mut R,
) -> Result<Task> {
    spec.validate()?;
    let ids = split.class_ids();
    if ids.len() < spec.way {
        return Err(Error::NotEnoughClasses {
            required: spec.way,
            available: ids.len(),
        });
    }
    let chosen = index::sample(rng, ids.len(), spec.way);
    let shots = spec.support.shots(spec.way, rng)?;
    let queries = spec.query.shots(spec.way, rng)?;

    let mut support = Vec::with_capacity(spec.way);
    let mut query = Vec::with_capacity(spec.way);
    let mut class_map = Vec::with_capacity(spec.way);
    for (slot, pick) in chosen.iter().enumerate() {
        let class = ids[pick];
        let samples = split.samples(class).unwrap_or(&[]);
        let need = shots[slot] + queries[slot];
        if samples.len() < need {
            return Err(Error::TaskSampling {
                class,
                required: need,
                available: samples.len(),
            });
        }
        let drawn = index::sample(rng, samples.len(), need);
        let mut examples = drawn.iter().map(|i| Example {
            source: SampleRef {
                class,
                index: i as u32,
            },
            features: samples[i].clone(),
        });
        support.push(examples.by_ref().take(shots[slot]).collect());
        query.push(examples.collect());
        class_map.push(class);
    }
    Ok(Task {
        support,
        query,
        class_map,
        feature_dim: split.feature_dim(),
    })
}

/// Writes a task in the line-oriented dump format:
///
/// ```text
/// way <N> feature_dim <d>
/// S(<slot>) <global class> <v_1> ... <v_d>
/// Q(<slot>) <global class> <v_1> ... <v_d>
/// ```
///
/// Support lines precede query lines; values use the shortest decimal that
/// round-trips.
pub fn write_task<W: Write>(out: &mut W, task: &Task) -> std::io::Result<()> {
    writeln!(out, "way {} feature_dim {}", task.way(), task.feature_dim)?;
    for (role, sets) in [('S', &task.support), ('Q', &task.query)] {
        for (slot, e) in labeled(sets) {
            write!(out, "{role}({slot}) {}", task.class_map[slot])?;
            for v in &e.features {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads tasks written by [`write_task`]. Sample indices are not part of
/// the format; each example gets its ordinal within its class.
pub fn read_tasks<R: BufRead>(input: R) -> Result<Vec<Task>> {
    let err = |line: usize, message: String| Error::Parse {
        path: "<tasks>".into(),
        line,
        message,
    };
    let mut tasks: Vec<Task> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let mut words = line.split_whitespace();
        let Some(head) = words.next() else { continue };
        if head == "way" {
            let fields: Vec<&str> = words.collect();
            let (way, dim) = match fields.as_slice() {
                [w, "feature_dim", d] => (
                    w.parse::<usize>().map_err(|e| err(lineno, e.to_string()))?,
                    d.parse::<usize>().map_err(|e| err(lineno, e.to_string()))?,
                ),
                _ => return Err(err(lineno, "malformed header".into())),
            };
            tasks.push(Task {
                support: vec![Vec::new(); way],
                query: vec![Vec::new(); way],
                class_map: vec![u32::MAX; way],
                feature_dim: dim,
            });
            continue;
        }
        let task = tasks
            .last_mut()
            .ok_or_else(|| err(lineno, "example before header".into()))?;
        let (role, slot) = head
            .split_once('(')
            .and_then(|(r, rest)| Some((r, rest.strip_suffix(')')?.parse::<usize>().ok()?)))
            .ok_or_else(|| err(lineno, format!("bad role {head:?}")))?;
        if slot >= task.way() {
            return Err(err(lineno, format!("slot {slot} out of range")));
        }
        let class: u32 = words
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| err(lineno, "missing class id".into()))?;
        let features = words
            .map(|w| w.parse::<f64>().map_err(|e| err(lineno, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if features.len() != task.feature_dim {
            return Err(err(
                lineno,
                format!(
                    "expected {} values, got {}",
                    task.feature_dim,
                    features.len()
                ),
            ));
        }
        if task.class_map[slot] != u32::MAX && task.class_map[slot] != class {
            return Err(err(lineno, format!("slot {slot} maps to two classes")));
        }
        task.class_map[slot] = class;
        let index = (task.support[slot].len() + task.query[slot].len()) as u32;
        let example = Example {
            source: SampleRef { class, index },
            features,
        };
        match role {
            "S" => task.support[slot].push(example),
            "Q" => task.query[slot].push(example),
            _ => return Err(err(lineno, format!("unknown role {role:?}"))),
        }
    }
    Ok(tasks)
}
