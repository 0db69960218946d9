//! Experiment configuration (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cifsl_core::data::{
    apply_dataset_imbalance, generate_synthetic, load_features, reduce_dataset,
    DatasetImbalanceSpec, MetaDataset, SyntheticSpec,
};
use cifsl_core::learners::{AdaptationConfig, LearnerKind};
use cifsl_core::nn::EncoderConfig;
use cifsl_core::protocol::TrainSchedule;
use cifsl_core::rebalance::Strategy;
use cifsl_core::seed;
use cifsl_core::tasks::{Distribution, ImbalanceSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Relative paths resolve against the directory holding the config.
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub encoder: EncoderDefaults,
    pub learners: Vec<LearnerEntry>,
    pub strategies: Vec<String>,
    #[serde(default)]
    pub schedule: TrainSchedule,
    pub eval_specs: Vec<NamedSpec>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Generate a synthetic meta-dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Or load the CSV feature format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<DatasetImbalanceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce: Option<ReduceSpec>,
    /// Seed of the imbalance/reduction subsampling.
    #[serde(default)]
    pub subsample_seed: u64,
}

/// Keep `n_classes` train classes with `total_budget / n_classes` samples each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReduceSpec {
    pub total_budget: usize,
    pub n_classes: usize,
}

/// Encoder widths; the input width comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderDefaults {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderDefaults {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            embed_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerEntry {
    pub kind: LearnerKind,
    /// Missing fields take the per-kind defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<AdaptationConfig>,
}

impl LearnerEntry {
    pub fn adaptation(&self) -> AdaptationConfig {
        self.adaptation
            .clone()
            .unwrap_or_else(|| AdaptationConfig::for_kind(self.kind))
    }
}

/// An evaluation spec with a file-system friendly name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSpec {
    pub name: String,
    pub way: usize,
    pub support: Distribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<Distribution>,
}

impl NamedSpec {
    pub fn spec(&self) -> ImbalanceSpec {
        let spec = ImbalanceSpec::new(self.way, self.support);
        match self.query {
            Some(q) => spec.with_query(q),
            None => spec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub tasks_per_spec: usize,
    /// ROS+ noise factor applied to the per-dimension support std.
    pub sigma_aug: f64,
    /// Reference spec for deltas in reports; defaults to the first
    /// balanced spec.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced_spec: Option<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            tasks_per_spec: 600,
            sigma_aug: 0.1,
            balanced_spec: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(p) = &cfg.dataset.path {
            cfg.dataset.path = Some(base.join(p));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.learners.is_empty() || self.strategies.is_empty() || self.seeds.is_empty() {
            return bad("learners, strategies and seeds must be non-empty".into());
        }
        if self.eval_specs.is_empty() {
            return bad("at least one eval spec is required".into());
        }
        match (&self.dataset.synthetic, &self.dataset.path) {
            (Some(s), None) => s.validate().map_err(|e| CliError::Config(e.to_string()))?,
            (None, Some(_)) => {}
            _ => return bad("dataset needs exactly one of `synthetic` or `path`".into()),
        }
        let mut names = BTreeSet::new();
        for s in &self.eval_specs {
            if s.name.is_empty()
                || !s
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            {
                return bad(format!(
                    "eval spec name {:?} must be non-empty and use [A-Za-z0-9-_.]",
                    s.name
                ));
            }
            if !names.insert(s.name.as_str()) {
                return bad(format!("duplicate eval spec name {:?}", s.name));
            }
            s.spec()
                .validate()
                .map_err(|e| CliError::Config(format!("eval spec {:?}: {e}", s.name)))?;
        }
        let mut kinds = BTreeSet::new();
        for l in &self.learners {
            if !kinds.insert(l.kind.as_str()) {
                return bad(format!("learner {} listed twice", l.kind));
            }
            l.adaptation()
                .validate()
                .map_err(|e| CliError::Config(format!("learner {}: {e}", l.kind)))?;
        }
        let mut seen = BTreeSet::new();
        for name in &self.strategies {
            let strategy = Strategy::preset(name).map_err(|e| CliError::Config(e.to_string()))?;
            if !seen.insert(name.as_str()) {
                return bad(format!("strategy {name} listed twice"));
            }
            for l in &self.learners {
                if !l.kind.supports_loss(&strategy.infer_loss) {
                    return bad(format!(
                        "learner {} cannot run strategy {name} (loss not supported)",
                        l.kind
                    ));
                }
            }
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        self.schedule
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.evaluation.tasks_per_spec < 2 {
            return bad(
                "evaluation.tasks_per_spec must be at least 2 for confidence intervals".into(),
            );
        }
        if self.evaluation.sigma_aug.is_nan() || self.evaluation.sigma_aug < 0.0 {
            return bad("evaluation.sigma_aug must be >= 0".into());
        }
        if self.encoder.embed_dim == 0 || self.encoder.hidden.contains(&0) {
            return bad("encoder widths must be positive".into());
        }
        if let Some(b) = &self.evaluation.balanced_spec {
            if !names.contains(b.as_str()) {
                return bad(format!("balanced_spec {b:?} is not an eval spec"));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig::new(
            input_dim,
            self.encoder.hidden.clone(),
            self.encoder.embed_dim,
        )
    }

    pub fn strategy_list(&self) -> Vec<Strategy> {
        self.strategies
            .iter()
            .map(|s| Strategy::preset(s).expect("validated"))
            .collect()
    }

    /// Name of the reference spec for deltas, if there is one.
    pub fn balanced_spec(&self) -> Option<&str> {
        self.evaluation.balanced_spec.as_deref().or_else(|| {
            self.eval_specs
                .iter()
                .find(|s| matches!(s.support, Distribution::Balanced { .. }))
                .map(|s| s.name.as_str())
        })
    }

    /// Builds the meta-dataset: synthetic or loaded, then dataset-level
    /// imbalance and reduction of the train split.
    pub fn build_dataset(&self) -> CliResult<MetaDataset> {
        let d = &self.dataset;
        let mut ds = match (&d.synthetic, &d.path) {
            (Some(spec), _) => generate_synthetic(spec)?,
            (None, Some(path)) => load_features(path)?,
            (None, None) => return Err(CliError::Config("no dataset source".into())),
        };
        if let Some(spec) = &d.imbalance {
            ds = apply_dataset_imbalance(
                &ds,
                spec,
                &mut seed::rng(seed::mix_str(d.subsample_seed, "imbalance")),
            )?;
        }
        if let Some(r) = d.reduce {
            ds = reduce_dataset(
                &ds,
                r.total_budget,
                r.n_classes,
                &mut seed::rng(seed::mix_str(d.subsample_seed, "reduce")),
            )?;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
output_dir = "out"
seeds = [0]
learners = [{ kind = "protonet" }]
strategies = ["standard"]

[dataset.synthetic]
classes_per_split = [10, 5, 5]
samples_per_class = 30

[[eval_specs]]
name = "balanced"
way = 5
support = { kind = "balanced", k = 5 }

[[eval_specs]]
name = "linear"
way = 5
support = { kind = "linear", k_min = 1, k_max = 9 }
query = { kind = "balanced", k = 10 }
"#;

    fn parse(text: &str) -> CliResult<ExperimentConfig> {
        ExperimentConfig::from_toml(text, Path::new("test.toml"))
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.schedule, TrainSchedule::default());
        assert_eq!(cfg.encoder, EncoderDefaults::default());
        assert_eq!(cfg.eval_specs[0].spec(), ImbalanceSpec::balanced(5, 5));
        assert_eq!(
            cfg.eval_specs[1].spec().query,
            Distribution::Balanced { k: 10 }
        );
        assert_eq!(cfg.balanced_spec(), Some("balanced"));
        assert_eq!(
            cfg.learners[0].adaptation(),
            AdaptationConfig::for_kind(LearnerKind::Protonet)
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = parse(MINIMAL).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            (MINIMAL.replace("version = 1", "version = 2"), "version"),
            (MINIMAL.replace("seeds = [0]", "seeds = []"), "non-empty"),
            (MINIMAL.replace("\"standard\"", "\"nope\""), "nope"),
            (
                MINIMAL.replace("name = \"linear\"", "name = \"balanced\""),
                "duplicate",
            ),
            (
                MINIMAL.replace("seeds = [0]", "seeds = [0]\ncolour = 3"),
                "colour",
            ),
            (
                MINIMAL.replace("\"standard\"", "\"standard-focal-infer\""),
                "cannot run",
            ),
            (
                MINIMAL.replace(
                    "[dataset.synthetic]",
                    "[dataset]\npath = \"x.csv\"\n[dataset.synthetic]",
                ),
                "exactly one",
            ),
        ];
        for (text, needle) in cases {
            let err = parse(&text).unwrap_err().to_string();
            assert!(err.contains(needle), "{needle}: {err}");
        }
    }

    #[test]
    fn builds_reduced_dataset() {
        let mut cfg = parse(MINIMAL).unwrap();
        cfg.dataset.reduce = Some(ReduceSpec {
            total_budget: 100,
            n_classes: 5,
        });
        let ds = cfg.build_dataset().unwrap();
        assert_eq!(ds.train.num_classes(), 5);
        assert_eq!(ds.train.num_samples(), 100);
        assert_eq!(cfg.build_dataset().unwrap(), ds);
    }
}
