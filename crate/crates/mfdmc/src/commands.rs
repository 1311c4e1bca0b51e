//! Subcommand drivers. Each returns a stage-tagged failure so the binary
//! can map it onto the documented exit codes: 1 for usage and configuration
//! problems, 2 for data and checkpoint problems, 3 for failures while
//! training, evaluating, or writing results.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{self, BaselineKind, BaselineModel};
use crate::config::{load_config, DatasetFormat, LoadedConfig, RunConfig};
use crate::data::{
    self, DatasetSplit, ItemMetadata, LoadedDataset, RatingTriple,
};
use crate::error::Error;
use crate::eval::{self, EvalReport};
use crate::losses::{LossParams, WeightLossKind};
use crate::model::{MfdmcModel, ModelConfig, Side};
use crate::trainer::{self, checkpoint, checkpoint::DatasetFingerprint, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Usage,
    Data,
    Run,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Usage => 1,
            Stage::Data => 2,
            Stage::Run => 3,
        }
    }
}

#[derive(Debug)]
pub struct CmdFailure {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for CmdFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl CmdFailure {
    fn usage(error: Error) -> Self {
        CmdFailure {
            stage: Stage::Usage,
            error,
        }
    }

    fn data(error: Error) -> Self {
        CmdFailure {
            stage: Stage::Data,
            error,
        }
    }

    fn run(error: Error) -> Self {
        CmdFailure {
            stage: Stage::Run,
            error,
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, CmdFailure>;

/// Loads the ratings file named by the config, along with category metadata
/// when the config points at any. Configuration mistakes (bad delimiter,
/// empty range) stay usage errors; unreadable or malformed files are data
/// errors.
fn load_dataset(config: &RunConfig) -> CmdResult<(LoadedDataset, Option<ItemMetadata>)> {
    let by_kind = |e: Error| match e {
        Error::Config(_) => CmdFailure::usage(e),
        other => CmdFailure::data(other),
    };
    let path = config.dataset_path();
    let dataset = match config.dataset.format {
        DatasetFormat::Movielens100k => data::load_movielens_100k(&path),
        DatasetFormat::Delimited => data::load_generic_delimited(
            &path,
            &config.dataset.delimiter,
            config.dataset.range_min,
            config.dataset.range_max,
            config.dataset.has_header,
        ),
    }
    .map_err(by_kind)?;
    let metadata = match config.metadata_path() {
        Some(p) => Some(
            match config.dataset.format {
                DatasetFormat::Movielens100k => data::load_movielens_genres(&p, &dataset.item_ids),
                DatasetFormat::Delimited => {
                    data::load_categories_delimited(&p, &config.dataset.delimiter, &dataset.item_ids)
                }
            }
            .map_err(by_kind)?,
        ),
        None => None,
    };
    Ok((dataset, metadata))
}

/// Prints and returns the flat `key=value` record every command ends with.
fn emit_summary(lines: &[(&str, String)]) -> String {
    let mut text = String::new();
    for (key, value) in lines {
        writeln!(text, "{key}={value}").expect("string write");
    }
    print!("{text}");
    text
}

fn write_out(path: &Path, text: &str) -> CmdResult<()> {
    fs::write(path, text).map_err(|e| CmdFailure::run(e.into()))
}

fn join_counts(counts: &[usize]) -> String {
    counts
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn eval_lines(report: &EvalReport, out: &mut Vec<(&'static str, String)>) {
    out.push(("split", report.split.clone()));
    out.push(("examples", report.count.to_string()));
    out.push(("clamp", report.clamped.to_string()));
    out.push(("rmse", report.rmse.to_string()));
    out.push(("mae", report.mae.to_string()));
}

fn bucket_text(report: &EvalReport) -> String {
    let mut text = String::from("rating\tcount\trmse\n");
    for b in &report.buckets {
        writeln!(text, "{}\t{}\t{}", b.label, b.count, b.rmse).expect("string write");
    }
    text
}

/// Writes the interpretability exports for a trained model into a directory.
fn write_exports(
    model: &MfdmcModel,
    split: &DatasetSplit,
    metadata: Option<&ItemMetadata>,
    dir: &Path,
) -> CmdResult<()> {
    fs::create_dir_all(dir).map_err(|e| CmdFailure::run(e.into()))?;
    for (side, tag) in [(Side::User, "users"), (Side::Item, "items")] {
        eval::export_assignments(model, side, &dir.join(format!("assignments-{tag}.tsv")))
            .map_err(CmdFailure::run)?;
        eval::export_embeddings(model, side, &dir.join(format!("embeddings-{tag}.tsv")))
            .map_err(CmdFailure::run)?;
        eval::cluster_report(model, split, metadata, side)
            .write_tsv(&dir.join(format!("clusters-{tag}.tsv")))
            .map_err(CmdFailure::run)?;
    }
    Ok(())
}

/// Splits the data, trains a model, scores the test split, and leaves a
/// checkpoint, split manifest, epoch log, and summary in the output
/// directory.
pub fn cmd_train(config_path: &Path, overrides: &[String], out_dir: &Path) -> CmdResult<()> {
    let loaded = load_config(config_path, overrides).map_err(CmdFailure::usage)?;
    let config = &loaded.config;
    let (dataset, metadata) = load_dataset(config)?;
    let split = data::split_dataset(&dataset.triples, config.seed).map_err(CmdFailure::data)?;

    let model_config = config.model_config(&dataset.meta).map_err(CmdFailure::usage)?;
    let train_config = config.train_config().map_err(CmdFailure::usage)?;
    let mut model =
        MfdmcModel::init(model_config, &dataset.meta, config.seed).map_err(CmdFailure::usage)?;

    fs::create_dir_all(out_dir).map_err(|e| CmdFailure::run(e.into()))?;
    let manifest_path = out_dir.join("split.tsv");
    data::write_split_manifest(&split, &manifest_path).map_err(CmdFailure::run)?;

    let report = trainer::fit(&mut model, &split, &train_config).map_err(CmdFailure::run)?;
    let test = eval::evaluate(&model, &split.test, config.eval.clamp, "test")
        .map_err(CmdFailure::run)?;

    let checkpoint_path = out_dir.join("model.ckpt");
    let fingerprint = DatasetFingerprint::new(&dataset.meta, split.seed);
    checkpoint::save_model(&checkpoint_path, &model, &train_config, &fingerprint)
        .map_err(CmdFailure::run)?;
    let log_path = out_dir.join("train_log.tsv");
    report.write_tsv(&log_path).map_err(CmdFailure::run)?;
    write_out(&out_dir.join("test_buckets.tsv"), &bucket_text(&test))?;

    if let Some(dir) = &config.eval.export_dir {
        write_exports(&model, &split, metadata.as_ref(), dir)?;
    }

    let mut lines: Vec<(&str, String)> = vec![
        ("command", "train".to_string()),
        ("dataset", config.dataset_path().display().to_string()),
        ("users", dataset.meta.users.to_string()),
        ("items", dataset.meta.items.to_string()),
        ("interactions", dataset.meta.interactions.to_string()),
        ("config_hash", loaded.hash()),
        ("seed", config.seed.to_string()),
        ("epochs_run", report.epochs.len().to_string()),
        ("best_epoch", report.best_epoch.to_string()),
        ("best_val_rmse", report.best_val_rmse.to_string()),
        ("test_rmse", test.rmse.to_string()),
        ("test_mae", test.mae.to_string()),
        ("clamp", test.clamped.to_string()),
        ("user_alive", join_counts(&report.epochs.last().expect("epochs ran").user_alive)),
        ("item_alive", join_counts(&report.epochs.last().expect("epochs ran").item_alive)),
        ("pruned_centers", report.pruned_centers.to_string()),
        ("checkpoint", checkpoint_path.display().to_string()),
        ("manifest", manifest_path.display().to_string()),
        ("train_log", log_path.display().to_string()),
    ];
    lines.push(("summary", out_dir.join("summary.txt").display().to_string()));
    let text = emit_summary(&lines);
    write_out(&out_dir.join("summary.txt"), &text)
}

/// Rebuilds the exact split from a manifest and scores a checkpoint on one
/// of its parts. Refuses checkpoints trained on different data.
pub fn cmd_evaluate(
    config_path: &Path,
    overrides: &[String],
    checkpoint_path: &Path,
    manifest_path: &Path,
    split_name: &str,
) -> CmdResult<()> {
    let loaded = load_config(config_path, overrides).map_err(CmdFailure::usage)?;
    let config = &loaded.config;
    let (dataset, _) = load_dataset(config)?;
    let split =
        data::read_split_manifest(manifest_path, &dataset.meta).map_err(CmdFailure::data)?;
    let saved = checkpoint::load(checkpoint_path).map_err(CmdFailure::data)?;
    saved
        .fingerprint()
        .check(&dataset.meta, split.seed)
        .map_err(CmdFailure::data)?;

    let triples = match split_name {
        "train" => &split.train,
        "validation" => &split.validation,
        "test" => &split.test,
        other => {
            return Err(CmdFailure::usage(Error::Config(format!(
                "unknown split {other:?}; expected train, validation, or test"
            ))))
        }
    };
    let report = match &saved {
        checkpoint::SavedCheckpoint::Model { model, .. } => {
            eval::evaluate(model, triples, config.eval.clamp, split_name)
        }
        checkpoint::SavedCheckpoint::Baseline { model, .. } => {
            eval::evaluate(model, triples, config.eval.clamp, split_name)
        }
    }
    .map_err(CmdFailure::run)?;

    let mut lines: Vec<(&str, String)> = vec![
        ("command", "evaluate".to_string()),
        ("checkpoint", checkpoint_path.display().to_string()),
        ("kind", saved.kind().to_string()),
        ("dataset", config.dataset_path().display().to_string()),
        ("config_hash", loaded.hash()),
    ];
    eval_lines(&report, &mut lines);
    for b in &report.buckets {
        lines.push(("bucket", format!("{}:{}:{}", b.label, b.count, b.rmse)));
    }
    emit_summary(&lines);
    Ok(())
}

/// Trains a classic matrix factorization baseline under the shared split
/// and evaluation protocol.
pub fn cmd_baseline(
    config_path: &Path,
    overrides: &[String],
    kind_name: &str,
    out_dir: &Path,
) -> CmdResult<()> {
    let kind = match kind_name {
        "funk" => BaselineKind::Funk,
        "biased" => BaselineKind::Biased,
        other => {
            return Err(CmdFailure::usage(Error::Config(format!(
                "unknown baseline kind {other:?}; expected funk or biased"
            ))))
        }
    };
    let loaded = load_config(config_path, overrides).map_err(CmdFailure::usage)?;
    let config = &loaded.config;
    let (dataset, _) = load_dataset(config)?;
    let split = data::split_dataset(&dataset.triples, config.seed).map_err(CmdFailure::data)?;

    let baseline_config = config.baseline_config(kind).map_err(CmdFailure::usage)?;
    let mut model = BaselineModel::init(baseline_config, &dataset.meta, config.seed)
        .map_err(CmdFailure::usage)?;

    fs::create_dir_all(out_dir).map_err(|e| CmdFailure::run(e.into()))?;
    let manifest_path = out_dir.join("split.tsv");
    data::write_split_manifest(&split, &manifest_path).map_err(CmdFailure::run)?;

    let report = baselines::fit(&mut model, &split).map_err(CmdFailure::run)?;
    let test = eval::evaluate(&model, &split.test, config.eval.clamp, "test")
        .map_err(CmdFailure::run)?;

    let checkpoint_path = out_dir.join(format!("{}.ckpt", kind.name()));
    let fingerprint = DatasetFingerprint::new(&dataset.meta, split.seed);
    checkpoint::save_baseline(&checkpoint_path, &model, &fingerprint).map_err(CmdFailure::run)?;
    let log_path = out_dir.join("train_log.tsv");
    report.write_tsv(&log_path).map_err(CmdFailure::run)?;

    let lines: Vec<(&str, String)> = vec![
        ("command", "baseline".to_string()),
        ("kind", kind.name().to_string()),
        ("dataset", config.dataset_path().display().to_string()),
        ("users", dataset.meta.users.to_string()),
        ("items", dataset.meta.items.to_string()),
        ("interactions", dataset.meta.interactions.to_string()),
        ("config_hash", loaded.hash()),
        ("seed", config.seed.to_string()),
        ("factors", model.config.factors.to_string()),
        ("epochs_run", report.epochs.len().to_string()),
        ("best_epoch", report.best_epoch.to_string()),
        ("best_val_rmse", report.best_val_rmse.to_string()),
        ("test_rmse", test.rmse.to_string()),
        ("test_mae", test.mae.to_string()),
        ("clamp", test.clamped.to_string()),
        ("checkpoint", checkpoint_path.display().to_string()),
        ("manifest", manifest_path.display().to_string()),
        ("train_log", log_path.display().to_string()),
    ];
    let text = emit_summary(&lines);
    write_out(&out_dir.join("summary.txt"), &text)
}

/// What `cmd_export` can write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportWhat {
    Assignments,
    Embeddings,
    Clusters,
}

impl ExportWhat {
    fn parse(name: &str) -> CmdResult<Self> {
        match name {
            "assignments" => Ok(ExportWhat::Assignments),
            "embeddings" => Ok(ExportWhat::Embeddings),
            "clusters" => Ok(ExportWhat::Clusters),
            other => Err(CmdFailure::usage(Error::Config(format!(
                "unknown export {other:?}; expected assignments, embeddings, or clusters"
            )))),
        }
    }
}

fn parse_side(name: &str) -> CmdResult<Side> {
    match name {
        "user" => Ok(Side::User),
        "item" => Ok(Side::Item),
        other => Err(CmdFailure::usage(Error::Config(format!(
            "unknown side {other:?}; expected user or item"
        )))),
    }
}

/// Writes one interpretability export from a model checkpoint. The cluster
/// report needs the config and split manifest to recover train ratings and
/// metadata; assignments and embeddings need only the checkpoint.
pub fn cmd_export(
    checkpoint_path: &Path,
    what_name: &str,
    side_name: &str,
    out_path: &Path,
    config_path: Option<&Path>,
    overrides: &[String],
    manifest_path: Option<&Path>,
) -> CmdResult<()> {
    let what = ExportWhat::parse(what_name)?;
    let side = parse_side(side_name)?;
    let (model, _, fingerprint) =
        checkpoint::load_model(checkpoint_path).map_err(CmdFailure::data)?;

    let rows = match what {
        ExportWhat::Assignments => {
            eval::export_assignments(&model, side, out_path).map_err(CmdFailure::run)?;
            model.num_entities(side) * model.config.views
        }
        ExportWhat::Embeddings => {
            eval::export_embeddings(&model, side, out_path).map_err(CmdFailure::run)?;
            model.num_entities(side)
        }
        ExportWhat::Clusters => {
            let (Some(config_path), Some(manifest_path)) = (config_path, manifest_path) else {
                return Err(CmdFailure::usage(Error::Config(
                    "exporting clusters needs --config and --manifest".to_string(),
                )));
            };
            let loaded = load_config(config_path, overrides).map_err(CmdFailure::usage)?;
            let (dataset, metadata) = load_dataset(&loaded.config)?;
            let split = data::read_split_manifest(manifest_path, &dataset.meta)
                .map_err(CmdFailure::data)?;
            fingerprint
                .check(&dataset.meta, split.seed)
                .map_err(CmdFailure::data)?;
            let report = eval::cluster_report(&model, &split, metadata.as_ref(), side);
            report.write_tsv(out_path).map_err(CmdFailure::run)?;
            report.clusters.len()
        }
    };

    emit_summary(&[
        ("command", "export".to_string()),
        ("what", what_name.to_string()),
        ("side", side_name.to_string()),
        ("rows", rows.to_string()),
        ("path", out_path.display().to_string()),
    ]);
    Ok(())
}

/// Loss parameters and model shape used by `cmd_gradcheck`.
struct GradcheckSetup {
    model_config: ModelConfig,
    params: LossParams,
}

fn gradcheck_setup(config: Option<&LoadedConfig>) -> GradcheckSetup {
    match config {
        Some(loaded) => {
            let c = &loaded.config;
            let d = TrainConfig::default();
            let t = &c.train;
            GradcheckSetup {
                model_config: ModelConfig {
                    latent_dim: c.model.latent_dim,
                    views: c.model.views,
                    centers_per_view: c.model.centers_per_view,
                    share_centers: c.model.share_centers,
                    use_biases: c.model.use_biases,
                    range_min: 1.0,
                    range_max: 5.0,
                },
                params: LossParams {
                    eta: t.eta_max.unwrap_or(d.eta_max),
                    gamma: t.gamma_max.unwrap_or(d.gamma_max),
                    lambda: t.lambda.unwrap_or(d.lambda),
                    rho: t.rho.unwrap_or(d.rho),
                    weight_loss: t.weight_loss.unwrap_or(d.weight_loss),
                },
            }
        }
        None => GradcheckSetup {
            model_config: ModelConfig {
                latent_dim: 4,
                views: 2,
                centers_per_view: 3,
                share_centers: true,
                use_biases: true,
                range_min: 1.0,
                range_max: 5.0,
            },
            params: LossParams {
                eta: 0.1,
                gamma: 0.1,
                lambda: 0.05,
                rho: 1.0,
                weight_loss: WeightLossKind::MappedEntropy,
            },
        },
    }
}

/// Builds a tiny random model and compares every analytic derivative of the
/// full objective against central finite differences, printing the worst
/// relative error per parameter block. Fails when any block exceeds 1e-4.
pub fn cmd_gradcheck(
    config_path: Option<&Path>,
    overrides: &[String],
    seed: u64,
) -> CmdResult<()> {
    let loaded = match config_path {
        Some(p) => Some(load_config(p, overrides).map_err(CmdFailure::usage)?),
        None => None,
    };
    let setup = gradcheck_setup(loaded.as_ref());
    let entities = 5usize;
    let meta = crate::data::DatasetMeta {
        users: entities,
        items: entities,
        interactions: 2 * entities,
        range_min: setup.model_config.range_min,
        range_max: setup.model_config.range_max,
        global_mean: 0.5 * (setup.model_config.range_min + setup.model_config.range_max),
    };
    let mut model =
        MfdmcModel::init(setup.model_config, &meta, seed).map_err(CmdFailure::usage)?;
    // spread the near-zero initial logits so no softmax weight sits at the
    // mapping function's knee, where the objective is not differentiable
    for side in [Side::User, Side::Item] {
        for view in 0..model.config.views {
            for x in model.logits_mut(side)[view].data_mut() {
                *x *= 180.0;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let span = meta.range_max - meta.range_min;
    let batch: Vec<RatingTriple> = (0..2 * entities)
        .map(|_| RatingTriple {
            user: rng.random_range(0..entities),
            item: rng.random_range(0..entities),
            rating: meta.range_min + span * rng.random::<f64>(),
        })
        .collect();

    let blocks =
        trainer::gradient_check(&mut model, &batch, &setup.params).map_err(CmdFailure::run)?;
    let mut worst: f64 = 0.0;
    let mut lines: Vec<(&str, String)> = vec![("command", "gradcheck".to_string())];
    for block in &blocks {
        lines.push((
            "block",
            format!("{}:{}:{}", block.name, block.checked, block.max_rel_err),
        ));
        worst = worst.max(block.max_rel_err);
    }
    lines.push(("max_rel_err", worst.to_string()));
    lines.push(("threshold", "0.0001".to_string()));
    lines.push(("pass", (worst < 1e-4).to_string()));
    emit_summary(&lines);
    if worst >= 1e-4 {
        return Err(CmdFailure::run(Error::GradientCheck(format!(
            "max relative error {worst} is at or above 1e-4"
        ))));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_map_to_documented_exit_codes() {
        assert_eq!(Stage::Usage.exit_code(), 1);
        assert_eq!(Stage::Data.exit_code(), 2);
        assert_eq!(Stage::Run.exit_code(), 3);
    }

    #[test]
    fn default_gradcheck_setup_passes() {
        // the built-in tiny configuration must satisfy its own threshold
        assert!(cmd_gradcheck(None, &[], 1).is_ok());
    }

    #[test]
    fn missing_dataset_failure_names_the_path() {
        let dir = tempfile::tempdir().expect("tempdir");
        let config_path = dir.path().join("run.toml");
        fs::write(
            &config_path,
            "[dataset]\nformat = \"movielens-100k\"\npath = \"/nowhere/u.data\"\n\n[model]\nlatent_dim = 4\nviews = 2\ncenters_per_view = 3\n",
        )
        .expect("write");
        let failure = cmd_train(&config_path, &[], &dir.path().join("out"))
            .expect_err("missing data must fail");
        assert_eq!(failure.stage, Stage::Data);
        assert!(
            failure.error.to_string().contains("/nowhere/u.data"),
            "message should name the path: {}",
            failure.error
        );
    }
}
