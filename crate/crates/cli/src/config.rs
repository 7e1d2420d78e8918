//! Experiment configuration: a single JSON document that fully determines
//! every artifact the tool writes.
//!
//! Configurations resolve in four stages: the built-in defaults (or a
//! `--config` file), then `--set key=value` overrides applied to the JSON
//! tree, then the `--seed`/`--f64` flag overrides, and finally a typed parse
//! that rejects unknown keys. The resolved document is hashed into a short
//! digest that names the output directory and is embedded in the artifacts,
//! so identical configurations land in (and reproduce) identical files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use datadiet_core::data::SyntheticTaskSpec;
use datadiet_core::nn::{ArchKind, ModelSpec};
use datadiet_core::scores::ScoreKind;
use datadiet_core::trainer::TrainConfig;

use crate::CliError;

/// Numeric working precision for training, scoring, and dynamics probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Which loader produces the training (and optional test) split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
    Cifar,
    Snapshot,
}

/// IDX image/label file pairs (the MNIST container format).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

/// CIFAR-10 binary batch files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarPaths {
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

/// Pre-built `.ddset` snapshots.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotPaths {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticTaskSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxPaths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cifar: Option<CifarPaths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<SnapshotPaths>,
    /// Fraction of training labels to permute (and flag) before anything
    /// else sees the data. The permutation seed derives from the master seed.
    pub corruption_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SyntheticTaskSpec::default(),
            idx: None,
            cifar: None,
            snapshot: None,
            corruption_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Score families to compute. `external` tables are loaded, never
    /// computed, so they are rejected here.
    pub kinds: Vec<ScoreKind>,
    /// Checkpoint epochs at which gradient/error-norm scores are taken.
    /// Ignored for forgetting counts, which always span the full run.
    pub epochs: Vec<usize>,
    /// Independent (init, data-order) seeded runs averaged per table.
    pub runs: usize,
    /// When set, score this saved checkpoint directly (single run, no
    /// training); forgetting counts are unavailable in this mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            kinds: vec![ScoreKind::El2n],
            epochs: vec![4],
            runs: 10,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Selection policies: `keep_top`, `random`, `window`.
    pub policies: Vec<String>,
    /// Kept fraction for `prune` and `window-sweep`.
    pub fraction: f64,
    /// Kept fractions for `sweep`.
    pub fractions: Vec<f64>,
    /// Window offset (fraction of the ranking skipped from the top) for the
    /// `window` policy in `prune`/`sweep`.
    pub offset: f64,
    /// Window offsets for `window-sweep`.
    pub offsets: Vec<f64>,
    /// Independent retrains per (policy, fraction) cell.
    pub retrains: usize,
    /// Score table to select by; defaults to the file `score` writes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_csv: Option<PathBuf>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            policies: vec!["keep_top".into(), "random".into()],
            fraction: 0.5,
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            offset: 0.0,
            offsets: vec![0.0, 0.1, 0.2, 0.3],
            retrains: 4,
            score_csv: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Examples per rank bucket in the kernel-velocity profile.
    pub bucket_size: usize,
    /// Rank distance between consecutive bucket starts.
    pub bucket_stride: usize,
    /// Checkpoint epochs for the velocity profile; velocities come from
    /// consecutive pairs that differ by exactly one epoch.
    pub velocity_epochs: Vec<usize>,
    /// Epochs at which child runs fork off the parent trajectory.
    pub spawn_epochs: Vec<usize>,
    /// Child-run pairs per spawn epoch.
    pub n_pairs: usize,
    /// Uniform interpolation grid size for barrier evaluation.
    pub alpha_points: usize,
    /// Use the fast endpoints-plus-midpoint grid instead.
    pub alpha_mid_only: bool,
    /// Kept fractions for score-ranked barrier subsets; each fraction runs
    /// once on the top of the ranking and once on the bottom, alongside the
    /// always-present full-data run.
    pub barrier_fractions: Vec<f64>,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            bucket_size: 100,
            bucket_stride: 100,
            velocity_epochs: vec![0, 1, 2, 3],
            spawn_epochs: vec![0, 1, 2, 4, 8],
            n_pairs: 3,
            alpha_points: 11,
            alpha_mid_only: false,
            barrier_fractions: vec![],
        }
    }
}

/// The complete experiment description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. Every derived seed family (score runs, retrains,
    /// selection shuffles, spawned children, label corruption) is a pure
    /// function of this value; the training run's own seeds live in `train`.
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub prune: PruneConfig,
    pub dynamics: DynamicsConfig,
    /// Output root. Relocates artifacts without altering them, so it is the
    /// one field excluded from the config digest. Overridden by `--out` and
    /// defaulted from `DATADIET_OUT` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            precision: Precision::F32,
            model: ModelSpec::mlp(vec![36, 128, 128, 10], 0),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            prune: PruneConfig::default(),
            dynamics: DynamicsConfig::default(),
            out: None,
        }
    }
}

/// Everything that feeds configuration resolution.
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub force_f64: bool,
}

/// Load, override, parse, normalize, and validate a configuration.
pub fn resolve(source: &ConfigSource) -> Result<ExperimentConfig, CliError> {
    let mut value = match &source.path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str::<serde_json::Value>(&text).map_err(|e| {
                CliError::Config(format!("config {} is not valid JSON: {e}", path.display()))
            })?
        }
        None => serde_json::to_value(ExperimentConfig::default())
            .expect("default config serializes"),
    };
    if !value.is_object() {
        return Err(CliError::Config(
            "configuration root must be a JSON object".into(),
        ));
    }
    for spec in &source.sets {
        apply_set(&mut value, spec)?;
    }
    if let Some(seed) = source.seed {
        value["seed"] = serde_json::Value::from(seed);
    }
    if source.force_f64 {
        value["precision"] = serde_json::Value::from("f64");
    }
    let mut config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
    normalize(&mut config);
    validate(&config)?;
    Ok(config)
}

/// Apply one `key.path=value` override to the JSON tree.
///
/// The value is parsed as JSON when possible and treated as a string
/// otherwise, so `--set train.epochs=8`, `--set prune.policies=["window"]`,
/// and `--set data.source=idx` all do what they look like. Intermediate
/// path segments are created as needed (a sparse config file may omit whole
/// sections), and typos are still caught by the strict typed parse
/// afterwards.
fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{spec}'")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|seg| seg.is_empty()) {
        return Err(CliError::Config(format!("--set has an empty key in '{spec}'")));
    }
    let parsed = serde_json::from_str::<serde_json::Value>(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    let mut cursor = &mut *root;
    for (i, seg) in segments[..segments.len() - 1].iter().enumerate() {
        let object = cursor.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "config key '{}' is not an object",
                segments[..i].join(".")
            ))
        })?;
        cursor = object
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let leaf = segments[segments.len() - 1];
    let object = cursor.as_object_mut().ok_or_else(|| {
        CliError::Config(format!(
            "config key '{}' is not an object",
            segments[..segments.len() - 1].join(".")
        ))
    })?;
    object.insert(leaf.to_string(), parsed);
    Ok(())
}

/// Make the redundant model fields agree with their sources of truth:
/// dense layer chains imply the input/output sizes, and the model always
/// initializes from the training config's seed.
fn normalize(config: &mut ExperimentConfig) {
    if config.model.arch == ArchKind::Mlp {
        if let (Some(&first), Some(&last)) =
            (config.model.widths.first(), config.model.widths.last())
        {
            config.model.input_dim = first;
            config.model.classes = last;
        }
    }
    config.model.init_seed = config.train.init_seed;
}

fn validate(config: &ExperimentConfig) -> Result<(), CliError> {
    config.train.validate()?;

    let data = &config.data;
    if !(data.corruption_fraction.is_finite() && (0.0..=1.0).contains(&data.corruption_fraction))
    {
        return Err(CliError::Config(format!(
            "data.corruption_fraction {} outside [0, 1]",
            data.corruption_fraction
        )));
    }
    match data.source {
        DataSource::Synthetic => data.synthetic.validate()?,
        DataSource::Idx if data.idx.is_none() => {
            return Err(CliError::Config(
                "data.source is \"idx\" but data.idx is not set".into(),
            ));
        }
        DataSource::Cifar if data.cifar.is_none() => {
            return Err(CliError::Config(
                "data.source is \"cifar\" but data.cifar is not set".into(),
            ));
        }
        DataSource::Snapshot if data.snapshot.is_none() => {
            return Err(CliError::Config(
                "data.source is \"snapshot\" but data.snapshot is not set".into(),
            ));
        }
        _ => {}
    }

    let score = &config.score;
    if score.kinds.is_empty() {
        return Err(CliError::Config("score.kinds must not be empty".into()));
    }
    if score.kinds.contains(&ScoreKind::External) {
        return Err(CliError::Config(
            "external score tables are loaded from files, not computed; \
             point prune.score_csv at one instead"
                .into(),
        ));
    }
    if score.epochs.is_empty() {
        return Err(CliError::Config("score.epochs must not be empty".into()));
    }
    if score.runs == 0 {
        return Err(CliError::Config("score.runs must be positive".into()));
    }

    let prune = &config.prune;
    if prune.policies.is_empty() {
        return Err(CliError::Config("prune.policies must not be empty".into()));
    }
    for name in &prune.policies {
        if !matches!(name.as_str(), "keep_top" | "random" | "window") {
            return Err(CliError::Config(format!(
                "unknown selection policy '{name}' (expected keep_top, random, or window)"
            )));
        }
    }
    for &f in prune.fractions.iter().chain([&prune.fraction]) {
        if !(f.is_finite() && 0.0 < f && f <= 1.0) {
            return Err(CliError::Config(format!(
                "keep fraction {f} outside (0, 1]"
            )));
        }
    }
    if prune.fractions.is_empty() {
        return Err(CliError::Config("prune.fractions must not be empty".into()));
    }
    for &o in prune.offsets.iter().chain([&prune.offset]) {
        if !(o.is_finite() && (0.0..1.0).contains(&o)) {
            return Err(CliError::Config(format!(
                "window offset {o} outside [0, 1)"
            )));
        }
    }
    if prune.offsets.is_empty() {
        return Err(CliError::Config("prune.offsets must not be empty".into()));
    }
    if prune.retrains == 0 {
        return Err(CliError::Config("prune.retrains must be positive".into()));
    }

    let dynamics = &config.dynamics;
    if dynamics.bucket_size == 0 || dynamics.bucket_stride == 0 {
        return Err(CliError::Config(
            "dynamics bucket size and stride must be positive".into(),
        ));
    }
    if dynamics.n_pairs == 0 {
        return Err(CliError::Config("dynamics.n_pairs must be positive".into()));
    }
    if dynamics.alpha_points < 2 {
        return Err(CliError::Config(
            "dynamics.alpha_points needs both endpoints".into(),
        ));
    }
    for &f in &dynamics.barrier_fractions {
        if !(f.is_finite() && 0.0 < f && f <= 1.0) {
            return Err(CliError::Config(format!(
                "barrier fraction {f} outside (0, 1]"
            )));
        }
    }
    Ok(())
}

/// Short content hash of the resolved configuration.
///
/// The output root is stripped first: it decides where artifacts go, never
/// what they contain.
pub fn digest(config: &ExperimentConfig) -> String {
    let mut value = serde_json::to_value(config).expect("config serializes");
    value
        .as_object_mut()
        .expect("config is an object")
        .remove("out");
    let json = serde_json::to_vec(&value).expect("config value serializes");
    let hash = Sha256::digest(&json);
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_sets(sets: &[&str]) -> Result<ExperimentConfig, CliError> {
        resolve(&ConfigSource {
            path: None,
            sets: sets.iter().map(|s| s.to_string()).collect(),
            seed: None,
            force_f64: false,
        })
    }

    #[test]
    fn defaults_resolve_and_digest_is_stable() {
        let a = resolve_sets(&[]).unwrap();
        let b = resolve_sets(&[]).unwrap();
        assert_eq!(digest(&a), digest(&b));
        assert_eq!(digest(&a).len(), 16);
        assert_eq!(a.model.input_dim, 36);
        assert_eq!(a.model.classes, 10);
    }

    #[test]
    fn set_overrides_reach_nested_fields_and_change_the_digest() {
        let base = resolve_sets(&[]).unwrap();
        let tweaked = resolve_sets(&["train.epochs=8", "train.lr_decay_epochs=[2,5]"]).unwrap();
        assert_eq!(tweaked.train.epochs, 8);
        assert_eq!(tweaked.train.lr_decay_epochs, vec![2, 5]);
        assert_ne!(digest(&base), digest(&tweaked));
    }

    #[test]
    fn out_field_never_moves_the_digest() {
        let base = resolve_sets(&[]).unwrap();
        let moved = resolve_sets(&["out=/tmp/elsewhere"]).unwrap();
        assert_eq!(moved.out.as_deref(), Some(std::path::Path::new("/tmp/elsewhere")));
        assert_eq!(digest(&base), digest(&moved));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            resolve_sets(&["train.epocks=8"]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            resolve_sets(&["nonsense.path=1"]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn values_parse_as_json_with_string_fallback() {
        let cfg = resolve_sets(&[
            "data.source=idx",
            "data.idx={\"train_images\":\"a.idx\",\"train_labels\":\"b.idx\"}",
        ])
        .unwrap();
        assert_eq!(cfg.data.source, DataSource::Idx);
        let idx = cfg.data.idx.unwrap();
        assert_eq!(idx.train_images, PathBuf::from("a.idx"));
        assert!(idx.test_images.is_none());
    }

    #[test]
    fn flag_overrides_take_effect_after_sets() {
        let cfg = resolve(&ConfigSource {
            path: None,
            sets: vec!["seed=3".into()],
            seed: Some(11),
            force_f64: true,
        })
        .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn invalid_settings_are_validation_errors() {
        assert!(resolve_sets(&["train.epochs=0"]).is_err());
        assert!(resolve_sets(&["prune.fraction=0"]).is_err());
        assert!(resolve_sets(&["prune.offset=1.0"]).is_err());
        assert!(resolve_sets(&["score.kinds=[\"external\"]"]).is_err());
        assert!(resolve_sets(&["data.source=idx"]).is_err());
        assert!(resolve_sets(&["dynamics.alpha_points=1"]).is_err());
    }

    #[test]
    fn mlp_widths_are_the_source_of_truth_for_shape() {
        let cfg = resolve_sets(&["model.widths=[6,8,3]"]).unwrap();
        assert_eq!(cfg.model.input_dim, 6);
        assert_eq!(cfg.model.classes, 3);
        assert_eq!(cfg.model.init_seed, cfg.train.init_seed);
    }
}
