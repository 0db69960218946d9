//! Meta-datasets: synthetic generation, dataset-level imbalance, the
//! baselines' pre-training split, and the CSV feature format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tasks::Distribution;

/// Class-indexed feature vectors of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    feature_dim: usize,
    classes: BTreeMap<u32, Vec<Vec<f64>>>,
}

impl Split {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class: u32, samples: Vec<Vec<f64>>) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Validation(format!("class {class} has no samples")));
        }
        if let Some(bad) = samples.iter().find(|v| v.len() != self.feature_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                got: bad.len(),
            });
        }
        self.classes.insert(class, samples);
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Class ids in ascending order.
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    pub fn samples(&self, class: u32) -> Option<&[Vec<f64>]> {
        self.classes.get(&class).map(Vec::as_slice)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_samples(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[Vec<f64>])> {
        self.classes.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    /// Per-class sample counts in class-id order.
    pub fn counts(&self) -> Vec<usize> {
        self.classes.values().map(Vec::len).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Train/val/test splits over pairwise disjoint class sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl MetaDataset {
    pub fn new(train: Split, val: Split, test: Split) -> Result<Self> {
        let ds = Self { train, val, test };
        ds.validate()?;
        Ok(ds)
    }

    pub fn feature_dim(&self) -> usize {
        self.train.feature_dim
    }

    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    fn split_mut(&mut self, name: SplitName) -> &mut Split {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.train.feature_dim;
        let mut owner: BTreeMap<u32, SplitName> = BTreeMap::new();
        for name in SplitName::ALL {
            let split = self.split(name);
            if split.feature_dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: split.feature_dim,
                });
            }
            for (class, samples) in split.iter() {
                if samples.is_empty() {
                    return Err(Error::Validation(format!(
                        "class {class} in {name} is empty"
                    )));
                }
                if let Some(prev) = owner.insert(class, name) {
                    return Err(Error::Validation(format!(
                        "class {class} appears in both {prev} and {name}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        SplitName::ALL
            .iter()
            .map(|&n| self.split(n).num_samples())
            .sum()
    }
}

/// Isotropic Gaussian-mixture meta-dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes_per_split: (usize, usize, usize),
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Standard deviation of the class means around the origin.
    pub class_mean_scale: f64,
    pub within_class_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes_per_split: (64, 16, 20),
            samples_per_class: 600,
            feature_dim: 16,
            class_mean_scale: 0.8,
            within_class_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.classes_per_split;
        if a == 0 || b == 0 || c == 0 || self.samples_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidSpec(
                "synthetic dataset counts must be positive".into(),
            ));
        }
        if !(self.within_class_std > 0.0) || !(self.class_mean_scale >= 0.0) {
            return Err(Error::InvalidSpec(
                "within_class_std must be > 0 and class_mean_scale >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Generates a Gaussian-mixture meta-dataset. Class ids run consecutively
/// over train, val and test. Each class draws from its own stream derived
/// from `(seed, class id)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MetaDataset> {
    spec.validate()?;
    let (n_train, n_val, n_test) = spec.classes_per_split;
    let d = spec.feature_dim;
    let mut next_class = 0u32;
    let mut build = |n: usize| -> Result<Split> {
        let mut split = Split::new(d);
        for _ in 0..n {
            let class = next_class;
            next_class += 1;
            let mut rng = seed::rng(seed::mix(spec.seed, u64::from(class)));
            let mean: Vec<f64> = (0..d)
                .map(|_| spec.class_mean_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let samples = (0..spec.samples_per_class)
                .map(|_| {
                    mean.iter()
                        .map(|m| m + spec.within_class_std * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            split.insert(class, samples)?;
        }
        Ok(split)
    };
    let train = build(n_train)?;
    let val = build(n_val)?;
    let test = build(n_test)?;
    MetaDataset::new(train, val, test)
}

/// Dataset-level imbalance: per-class sample counts of one split follow a
/// shot distribution evaluated over `dn` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetImbalanceSpec {
    pub distribution: Distribution,
    pub dn: usize,
    #[serde(default = "default_target")]
    pub target_split: SplitName,
}

fn default_target() -> SplitName {
    SplitName::Train
}

/// Subsamples the classes of the target split so their counts follow the
/// distribution. Which class receives which count is decided by a uniform
/// shuffle of the class ids; retained samples are chosen uniformly without
/// replacement and keep their original relative order.
pub fn apply_dataset_imbalance<R: Rng + ?Sized>(
    ds: &MetaDataset,
    spec: &DatasetImbalanceSpec,
    rng: &mut R,
) -> Result<MetaDataset> {
    let source = ds.split(spec.target_split);
    if source.num_classes() != spec.dn {
        return Err(Error::InvalidSpec(format!(
            "{} split has {} classes, imbalance spec expects {}",
            spec.target_split,
            source.num_classes(),
            spec.dn
        )));
    }
    let counts = spec.distribution.shots(spec.dn, rng)?;
    let mut ids = source.class_ids();
    ids.shuffle(rng);
    let mut split = Split::new(source.feature_dim);
    for (slot, &class) in ids.iter().enumerate() {
        let samples = source.samples(class).unwrap_or(&[]);
        split.insert(class, subsample(class, samples, counts[slot], rng)?)?;
    }
    let mut out = ds.clone();
    *out.split_mut(spec.target_split) = split;
    Ok(out)
}

fn subsample<R: Rng + ?Sized>(
    class: u32,
    samples: &[Vec<f64>],
    keep: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if samples.len() < keep {
        return Err(Error::InsufficientSamples {
            class,
            required: keep,
            available: samples.len(),
        });
    }
    let mut picked = index::sample(rng, samples.len(), keep).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| samples[i].clone()).collect())
}

/// Keeps `n_classes` uniformly chosen train classes with
/// `total_budget / n_classes` samples each.
pub fn reduce_dataset<R: Rng + ?Sized>(
    ds: &MetaDataset,
    total_budget: usize,
    n_classes: usize,
    rng: &mut R,
) -> Result<MetaDataset> {
    if n_classes == 0 || !total_budget.is_multiple_of(n_classes) {
        return Err(Error::InvalidSpec(format!(
            "budget {total_budget} is not divisible by {n_classes} classes"
        )));
    }
    let ids = ds.train.class_ids();
    if ids.len() < n_classes {
        return Err(Error::NotEnoughClasses {
            required: n_classes,
            available: ids.len(),
        });
    }
    let per_class = total_budget / n_classes;
    let mut chosen: Vec<u32> = index::sample(rng, ids.len(), n_classes)
        .iter()
        .map(|i| ids[i])
        .collect();
    chosen.sort_unstable();
    let mut train = Split::new(ds.feature_dim());
    for class in chosen {
        let samples = ds.train.samples(class).unwrap_or(&[]);
        train.insert(class, subsample(class, samples, per_class, rng)?)?;
    }
    Ok(MetaDataset {
        train,
        ..ds.clone()
    })
}

/// Merges the train and val classes and splits every class 80/20 into a
/// pre-training set and a holdout set with identical label spaces. Each
/// class is shuffled with a stream derived from `(seed, class id)`.
pub fn baseline_pretrain_split(ds: &MetaDataset, seed: u64) -> Result<(Split, Split)> {
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Validation(
            "pre-training needs non-empty train and val splits".into(),
        ));
    }
    let dim = ds.feature_dim();
    let mut pretrain = Split::new(dim);
    let mut holdout = Split::new(dim);
    for (class, samples) in ds.train.iter().chain(ds.val.iter()) {
        if samples.len() < 5 {
            return Err(Error::InsufficientSamples {
                class,
                required: 5,
                available: samples.len(),
            });
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::rng(seed::mix(seed, u64::from(class))));
        let cut = samples.len() * 4 / 5;
        let take = |range: &[usize]| range.iter().map(|&i| samples[i].clone()).collect();
        pretrain.insert(class, take(&order[..cut]))?;
        holdout.insert(class, take(&order[cut..]))?;
    }
    Ok((pretrain, holdout))
}

/// Writes the CSV feature format: header `split,class_id,f_1,...,f_d`, one
/// row per vector, classes in ascending id order within each split.
pub fn write_features<W: Write>(ds: &MetaDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["split".to_string(), "class_id".to_string()];
    header.extend((1..=ds.feature_dim()).map(|i| format!("f_{i}")));
    w.write_record(&header)?;
    for name in SplitName::ALL {
        for (class, samples) in ds.split(name).iter() {
            for v in samples {
                let mut row = vec![name.to_string(), class.to_string()];
                row.extend(v.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_features(ds: &MetaDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_features(ds, std::io::BufWriter::new(file))
}

pub fn load_features(path: &Path) -> Result<MetaDataset> {
    let file = std::fs::File::open(path)?;
    read_features(std::io::BufReader::new(file), path)
}

/// Parses the CSV feature format. `origin` is only used in error messages.
pub fn read_features<R: Read>(input: R, origin: &Path) -> Result<MetaDataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(err(1, "empty file".into())),
    };
    let dim = header.len().saturating_sub(2);
    let expected: Vec<String> = ["split".to_string(), "class_id".to_string()]
        .into_iter()
        .chain((1..=dim).map(|i| format!("f_{i}")))
        .collect();
    if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(err(1, "expected header split,class_id,f_1,...,f_d".into()));
    }

    let mut parts: [BTreeMap<u32, Vec<Vec<f64>>>; 3] = Default::default();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 2 {
            return Err(err(
                line,
                format!("expected {} fields, got {}", dim + 2, record.len()),
            ));
        }
        let split: SplitName = record[0].parse().map_err(|e| err(line, e))?;
        let class: u32 = record[1]
            .parse()
            .map_err(|_| err(line, format!("bad class id {:?}", &record[1])))?;
        let values = record
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| err(line, format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let slot = SplitName::ALL.iter().position(|&n| n == split).unwrap_or(0);
        parts[slot].entry(class).or_default().push(values);
    }

    let [train, val, test] = parts.map(|classes| Split {
        feature_dim: dim,
        classes,
    });
    MetaDataset::new(train, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{imbalance_ratio, linear_shots, ShotVector};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes_per_split: (6, 3, 4),
            samples_per_class: 40,
            feature_dim: 3,
            seed: 9,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn default_grid_sizes() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(
            ds.train.num_classes() + ds.val.num_classes() + ds.test.num_classes(),
            100
        );
        assert_eq!(ds.num_samples(), 60_000);
        assert_eq!(ds.feature_dim(), 16);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec {
            seed: 10,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        assert!(generate_synthetic(&SyntheticSpec {
            within_class_std: 0.0,
            ..small_spec()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            samples_per_class: 0,
            ..small_spec()
        })
        .is_err());
    }

    #[test]
    fn step_dataset_imbalance_rho_19() {
        let spec = SyntheticSpec {
            classes_per_split: (64, 2, 2),
            samples_per_class: 600,
            feature_dim: 2,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let imb = DatasetImbalanceSpec {
            distribution: Distribution::Step {
                k_min: 30,
                k_max: 570,
                n_min: 32,
            },
            dn: 64,
            target_split: SplitName::Train,
        };
        let out = apply_dataset_imbalance(&ds, &imb, &mut seed::rng(1)).unwrap();
        let counts = ShotVector::new(out.train.counts()).unwrap();
        assert_eq!(imbalance_ratio(&counts), 19.0);
        assert_eq!(counts.counts().iter().filter(|&&k| k == 30).count(), 32);
        assert_eq!(out.val, ds.val);
        assert_eq!(out.test, ds.test);
        out.validate().unwrap();
    }

    #[test]
    fn balanced_and_degenerate_linear_agree() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let bal = DatasetImbalanceSpec {
            distribution: Distribution::Balanced { k: 30 },
            dn: 6,
            target_split: SplitName::Train,
        };
        let lin = DatasetImbalanceSpec {
            distribution: Distribution::Linear {
                k_min: 30,
                k_max: 30,
            },
            ..bal.clone()
        };
        let a = apply_dataset_imbalance(&ds, &bal, &mut seed::rng(4)).unwrap();
        let b = apply_dataset_imbalance(&ds, &lin, &mut seed::rng(4)).unwrap();
        assert!(a.train.counts().iter().all(|&k| k == 30));
        assert_eq!(a, b);
    }

    #[test]
    fn linear_dataset_imbalance_total_matches_generator() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let spec = DatasetImbalanceSpec {
            distribution: Distribution::Linear {
                k_min: 3,
                k_max: 37,
            },
            dn: 6,
            target_split: SplitName::Train,
        };
        let out = apply_dataset_imbalance(&ds, &spec, &mut seed::rng(2)).unwrap();
        assert_eq!(
            out.train.num_samples(),
            linear_shots(3, 37, 6).unwrap().total()
        );
        for (class, samples) in out.train.iter() {
            let original = ds.train.samples(class).unwrap();
            assert!(samples.len() <= original.len());
            assert!(samples.iter().all(|s| original.contains(s)));
        }
    }

    #[test]
    fn dataset_imbalance_errors() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let too_many = DatasetImbalanceSpec {
            distribution: Distribution::Balanced { k: 41 },
            dn: 6,
            target_split: SplitName::Train,
        };
        assert!(matches!(
            apply_dataset_imbalance(&ds, &too_many, &mut seed::rng(0)),
            Err(Error::InsufficientSamples {
                required: 41,
                available: 40,
                ..
            })
        ));
        let wrong_dn = DatasetImbalanceSpec { dn: 5, ..too_many };
        assert!(apply_dataset_imbalance(&ds, &wrong_dn, &mut seed::rng(0)).is_err());
    }

    #[test]
    fn reduce_examples() {
        let spec = SyntheticSpec {
            classes_per_split: (40, 2, 2),
            samples_per_class: 160,
            feature_dim: 2,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let r = reduce_dataset(&ds, 4800, 32, &mut seed::rng(0)).unwrap();
        assert_eq!(r.train.num_classes(), 32);
        assert!(r.train.counts().iter().all(|&k| k == 150));
        let r = reduce_dataset(&ds, 3200, 32, &mut seed::rng(0)).unwrap();
        assert!(r.train.counts().iter().all(|&k| k == 100));
        assert!(reduce_dataset(&ds, 4801, 32, &mut seed::rng(0)).is_err());
    }

    #[test]
    fn pretrain_split_examples() {
        let ds = generate_synthetic(&SyntheticSpec {
            samples_per_class: 10,
            ..small_spec()
        })
        .unwrap();
        let (pre, hold) = baseline_pretrain_split(&ds, 3).unwrap();
        assert_eq!(pre.num_classes(), 9);
        assert_eq!(pre.class_ids(), hold.class_ids());
        assert!(pre.counts().iter().all(|&k| k == 8));
        assert!(hold.counts().iter().all(|&k| k == 2));
        assert_eq!(
            (pre.clone(), hold.clone()),
            baseline_pretrain_split(&ds, 3).unwrap()
        );

        let tiny = generate_synthetic(&SyntheticSpec {
            samples_per_class: 4,
            ..small_spec()
        })
        .unwrap();
        assert!(baseline_pretrain_split(&tiny, 0).is_err());
    }

    #[test]
    fn default_pretrain_corpus_has_80_classes() {
        let ds = generate_synthetic(&SyntheticSpec {
            samples_per_class: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (pre, _) = baseline_pretrain_split(&ds, 0).unwrap();
        assert_eq!(pre.num_classes(), 80);
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let mut buf = Vec::new();
        write_features(&ds, &mut buf).unwrap();
        let back = read_features(&buf[..], Path::new("mem.csv")).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_errors() {
        let bad_arity = "split,class_id,f_1,f_2\ntrain,0,1.0,2.0\ntrain,0,1.0\n";
        match read_features(bad_arity.as_bytes(), Path::new("x.csv")) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let overlap = "split,class_id,f_1\ntrain,0,1.0\ntest,0,2.0\n";
        assert!(matches!(
            read_features(overlap.as_bytes(), Path::new("x.csv")),
            Err(Error::Validation(_))
        ));
        let header = "split,class,f_1\ntrain,0,1.0\n";
        assert!(matches!(
            read_features(header.as_bytes(), Path::new("x.csv")),
            Err(Error::Parse { line: 1, .. })
        ));
        let value = "split,class_id,f_1\ntrain,0,abc\n";
        assert!(matches!(
            read_features(value.as_bytes(), Path::new("x.csv")),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
