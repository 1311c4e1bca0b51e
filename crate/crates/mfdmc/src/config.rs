//! Run configuration: a TOML file with strict sections, dotted-path
//! command-line overrides, and a stable hash of the merged result.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::data::DatasetMeta;
use crate::error::{Error, Result};
use crate::losses::WeightLossKind;
use crate::model::ModelConfig;
use crate::trainer::{OptimizerKind, PsiMode, TrainConfig};

/// Directory prepended to relative dataset paths when set.
pub const DATA_DIR_ENV: &str = "MFDMC_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// Tab-separated `user item rating timestamp` on a 1..5 scale.
    #[serde(rename = "movielens-100k")]
    Movielens100k,
    /// Any `user<delim>item<delim>rating` file with a declared range.
    Delimited,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub format: DatasetFormat,
    /// Ratings file; relative paths resolve under `MFDMC_DATA_DIR` when set.
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_range_min")]
    pub range_min: f64,
    #[serde(default = "default_range_max")]
    pub range_max: f64,
    /// First line of a delimited file is a header to skip.
    #[serde(default)]
    pub has_header: bool,
    /// Optional category metadata: a MovieLens `u.item` file for the
    /// movielens-100k format, else `item<delim>label...` rows.
    #[serde(default)]
    pub metadata_path: Option<PathBuf>,
}

fn default_delimiter() -> String {
    "\t".to_string()
}

fn default_range_min() -> f64 {
    1.0
}

fn default_range_max() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub views: usize,
    pub centers_per_view: usize,
    #[serde(default = "default_true")]
    pub share_centers: bool,
    #[serde(default = "default_true")]
    pub use_biases: bool,
}

fn default_true() -> bool {
    true
}

/// Training overrides; anything unset falls back to the defaults, with the
/// shuffle seed defaulting to the top-level seed and the coefficient ramp
/// defaulting to the prune warmup length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub eta_max: Option<f64>,
    pub gamma_max: Option<f64>,
    pub ramp_epochs: Option<usize>,
    pub prune_warmup: Option<usize>,
    pub psi: Option<PsiMode>,
    pub min_centers: Option<usize>,
    pub prune_every: Option<usize>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub weight_loss: Option<WeightLossKind>,
    pub seed: Option<u64>,
    pub early_stop_patience: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Clamp predictions into the rating range before scoring.
    pub clamp: bool,
    /// Where export files land when a command writes them.
    pub export_dir: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            clamp: true,
            export_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub factors: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub early_stop_patience: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: drives the split, parameter init, and (unless
    /// train.seed overrides it) the epoch shuffle.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    /// The dataset path with `MFDMC_DATA_DIR` applied to relative paths.
    pub fn dataset_path(&self) -> PathBuf {
        resolve_data_path(&self.dataset.path)
    }

    pub fn metadata_path(&self) -> Option<PathBuf> {
        self.dataset.metadata_path.as_deref().map(resolve_data_path)
    }

    /// Model shape with the rating range taken from the loaded dataset.
    pub fn model_config(&self, meta: &DatasetMeta) -> Result<ModelConfig> {
        let config = ModelConfig {
            latent_dim: self.model.latent_dim,
            views: self.model.views,
            centers_per_view: self.model.centers_per_view,
            share_centers: self.model.share_centers,
            use_biases: self.model.use_biases,
            range_min: meta.range_min,
            range_max: meta.range_max,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let s = &self.train;
        let prune_warmup = s.prune_warmup.unwrap_or(d.prune_warmup);
        let config = TrainConfig {
            epochs: s.epochs.unwrap_or(d.epochs),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
            optimizer: s.optimizer.unwrap_or(d.optimizer),
            beta1: s.beta1.unwrap_or(d.beta1),
            beta2: s.beta2.unwrap_or(d.beta2),
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            eta_max: s.eta_max.unwrap_or(d.eta_max),
            gamma_max: s.gamma_max.unwrap_or(d.gamma_max),
            ramp_epochs: s.ramp_epochs.unwrap_or(prune_warmup),
            prune_warmup,
            psi: s.psi.unwrap_or(d.psi),
            min_centers: s.min_centers.unwrap_or(d.min_centers),
            prune_every: s.prune_every.unwrap_or(d.prune_every),
            lambda: s.lambda.unwrap_or(d.lambda),
            rho: s.rho.unwrap_or(d.rho),
            weight_loss: s.weight_loss.unwrap_or(d.weight_loss),
            seed: s.seed.unwrap_or(self.seed),
            early_stop_patience: s.early_stop_patience.unwrap_or(d.early_stop_patience),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn baseline_config(&self, kind: BaselineKind) -> Result<BaselineConfig> {
        let d = BaselineConfig::default();
        let s = &self.baseline;
        let config = BaselineConfig {
            kind,
            factors: s.factors.unwrap_or(d.factors),
            epochs: s.epochs.unwrap_or(d.epochs),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
            optimizer: s.optimizer.unwrap_or(d.optimizer),
            beta1: s.beta1.unwrap_or(d.beta1),
            beta2: s.beta2.unwrap_or(d.beta2),
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            lambda: s.lambda.unwrap_or(d.lambda),
            seed: s.seed.unwrap_or(self.seed),
            early_stop_patience: s.early_stop_patience.unwrap_or(d.early_stop_patience),
            range_min: self.dataset.range_min,
            range_max: self.dataset.range_max,
        };
        config.validate()?;
        Ok(config)
    }
}

fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var(DATA_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// A parsed config plus the canonical merged text it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    canonical: String,
}

impl LoadedConfig {
    /// Short hex digest of the merged config, printed in summaries so runs
    /// are auditable.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical.as_bytes());
        format!("{digest:x}")[..16].to_string()
    }
}

/// Reads, overrides, and validates a config file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text, overrides)
}

/// Parses config text, applies `section.key=value` overrides, and rejects
/// unknown keys.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<LoadedConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let canonical = toml::to_string(&table)
        .map_err(|e| Error::Config(format!("config cannot be re-serialized: {e}")))?;
    let config: RunConfig = table
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    Ok(LoadedConfig { config, canonical })
}

/// Applies one `section.key=value` override. The value parses as TOML when
/// possible and falls back to a plain string (so bare paths work unquoted).
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw_value) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override {spec:?} must look like section.key=value"))
    })?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let raw_value = raw_value.trim();
    let value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let mut current = table;
    for k in &keys[..keys.len() - 1] {
        current = current
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{k} is not a section")))?;
    }
    current.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 5

[dataset]
format = "movielens-100k"
path = "ml-100k/u.data"

[model]
latent_dim = 16
views = 8
centers_per_view = 10
"#;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            users: 10,
            items: 10,
            interactions: 50,
            range_min: 1.0,
            range_max: 5.0,
            global_mean: 3.0,
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let loaded = parse_config(MINIMAL, &[]).expect("parse");
        let cfg = &loaded.config;
        assert_eq!(cfg.seed, 5);
        assert!(cfg.model.share_centers && cfg.model.use_biases);
        let train = cfg.train_config().expect("train config");
        assert_eq!(train.seed, 5, "shuffle seed follows the master seed");
        assert_eq!(train.ramp_epochs, train.prune_warmup, "ramp defaults to the warmup");
        assert!(cfg.eval.clamp);
        let model = cfg.model_config(&meta()).expect("model config");
        assert_eq!(model.center_dim(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let with_typo = MINIMAL.replace("centers_per_view = 10", "centers_per_view = 10\nviewz = 3");
        match parse_config(&with_typo, &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("viewz"), "message should name the key: {msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
        assert!(parse_config(MINIMAL, &["train.warm=1".to_string()]).is_err());
    }

    #[test]
    fn overrides_change_only_their_key() {
        let base = parse_config(MINIMAL, &[]).expect("parse");
        let over = parse_config(MINIMAL, &["train.seed=7".to_string()]).expect("parse");
        assert_eq!(over.config.train.seed, Some(7));
        assert_eq!(over.config.seed, base.config.seed);
        assert_eq!(over.config.model, base.config.model);
        assert_eq!(over.config.train_config().expect("train").seed, 7);
        assert_ne!(over.hash(), base.hash(), "hash reflects the override");
    }

    #[test]
    fn override_values_parse_as_toml_with_string_fallback() {
        let loaded = parse_config(
            MINIMAL,
            &[
                "eval.clamp=false".to_string(),
                "dataset.path=other/ratings.tsv".to_string(),
                "train.psi={ fixed = 0.07 }".to_string(),
                "train.weight_loss=\"uniform-offset\"".to_string(),
            ],
        )
        .expect("parse");
        let cfg = &loaded.config;
        assert!(!cfg.eval.clamp);
        assert_eq!(cfg.dataset.path, PathBuf::from("other/ratings.tsv"));
        assert_eq!(cfg.train.psi, Some(PsiMode::Fixed(0.07)));
        assert_eq!(
            cfg.train_config().expect("train").weight_loss,
            WeightLossKind::UniformOffset
        );
    }

    #[test]
    fn malformed_overrides_are_usage_errors() {
        assert!(parse_config(MINIMAL, &["train.seed".to_string()]).is_err());
        assert!(parse_config(MINIMAL, &["..=3".to_string()]).is_err());
        // scalar in the middle of a dotted path
        assert!(parse_config(MINIMAL, &["seed.x=3".to_string()]).is_err());
    }

    #[test]
    fn hash_is_stable_for_identical_configs() {
        let a = parse_config(MINIMAL, &[]).expect("parse");
        let b = parse_config(MINIMAL, &[]).expect("parse");
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
