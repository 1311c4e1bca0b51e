//! Python bindings for the mfdmc recommender.
//!
//! Exposes dataset loading, splitting, model training, evaluation, and
//! checkpoint round trips as a handful of Python classes. Build the
//! importable module with `cargo build -p mfdmc-py --features extension-module`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mfdmc::baselines::{self, BaselineConfig, BaselineKind, BaselineModel};
use mfdmc::data::{self, DatasetMeta, DatasetSplit, LoadedDataset, RatingTriple};
use mfdmc::losses::{self, WeightLossKind};
use mfdmc::model::{MfdmcModel, ModelConfig, Side};
use mfdmc::trainer::checkpoint::{self, DatasetFingerprint};
use mfdmc::trainer::{self, OptimizerKind, PsiMode, TrainConfig};

fn to_py(err: mfdmc::Error) -> PyErr {
    use mfdmc::Error::*;
    match &err {
        Read { .. } => PyIOError::new_err(err.to_string()),
        NonFiniteGradient(_) | GradientCheck(_) => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn parse_side(name: &str) -> PyResult<Side> {
    match name {
        "user" => Ok(Side::User),
        "item" => Ok(Side::Item),
        _ => Err(PyValueError::new_err(format!(
            "unknown side {name:?}; use \"user\" or \"item\""
        ))),
    }
}

fn parse_optimizer(name: &str) -> PyResult<OptimizerKind> {
    match name {
        "plain-sgd" => Ok(OptimizerKind::PlainSgd),
        "adaptive-moment" => Ok(OptimizerKind::AdaptiveMoment),
        _ => Err(PyValueError::new_err(format!(
            "unknown optimizer {name:?}; use \"plain-sgd\" or \"adaptive-moment\""
        ))),
    }
}

fn parse_weight_loss(name: &str) -> PyResult<WeightLossKind> {
    match name {
        "mapped-entropy" => Ok(WeightLossKind::MappedEntropy),
        "uniform-offset" => Ok(WeightLossKind::UniformOffset),
        _ => Err(PyValueError::new_err(format!(
            "unknown weight loss {name:?}; use \"mapped-entropy\" or \"uniform-offset\""
        ))),
    }
}

fn meta_from_fingerprint(fp: &DatasetFingerprint) -> DatasetMeta {
    DatasetMeta {
        users: fp.users,
        items: fp.items,
        interactions: fp.interactions,
        range_min: fp.range_min,
        range_max: fp.range_max,
        global_mean: fp.global_mean,
    }
}

fn triples_to_tuples(triples: &[RatingTriple]) -> Vec<(usize, usize, f64)> {
    triples.iter().map(|t| (t.user, t.item, t.rating)).collect()
}

/// A ratings table in dense index space. Raw IDs are remapped to 0-based
/// indices in first-seen order; `user_ids()` / `item_ids()` recover them.
#[pyclass]
struct Dataset {
    inner: LoadedDataset,
}

#[pymethods]
impl Dataset {
    /// Load a MovieLens-100k `u.data` file (tab-separated, ratings 1..5).
    #[staticmethod]
    fn movielens_100k(path: PathBuf) -> PyResult<Self> {
        let inner = data::load_movielens_100k(&path).map_err(to_py)?;
        Ok(Dataset { inner })
    }

    /// Load a delimited `user, item, rating` file. The delimiter is one
    /// character or the literal "::"; extra columns are ignored.
    #[staticmethod]
    #[pyo3(signature = (path, delimiter="\t", range_min=1.0, range_max=5.0, has_header=false))]
    fn delimited(
        path: PathBuf,
        delimiter: &str,
        range_min: f64,
        range_max: f64,
        has_header: bool,
    ) -> PyResult<Self> {
        let inner = data::load_generic_delimited(&path, delimiter, range_min, range_max, has_header)
            .map_err(to_py)?;
        Ok(Dataset { inner })
    }

    #[getter]
    fn users(&self) -> usize {
        self.inner.meta.users
    }

    #[getter]
    fn items(&self) -> usize {
        self.inner.meta.items
    }

    #[getter]
    fn interactions(&self) -> usize {
        self.inner.meta.interactions
    }

    #[getter]
    fn global_mean(&self) -> f64 {
        self.inner.meta.global_mean
    }

    #[getter]
    fn range(&self) -> (f64, f64) {
        (self.inner.meta.range_min, self.inner.meta.range_max)
    }

    fn user_ids(&self) -> Vec<String> {
        self.inner.user_ids.clone()
    }

    fn item_ids(&self) -> Vec<String> {
        self.inner.item_ids.clone()
    }

    /// Seeded 80/10/10 train/validation/test split.
    #[pyo3(signature = (seed=1))]
    fn split(&self, seed: u64) -> PyResult<Split> {
        let inner = data::split_dataset(&self.inner.triples, seed).map_err(to_py)?;
        Ok(Split {
            inner,
            meta: self.inner.meta.clone(),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.meta.interactions
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(users={}, items={}, interactions={})",
            self.inner.meta.users, self.inner.meta.items, self.inner.meta.interactions
        )
    }
}

/// One seeded split of a dataset. Triples are `(user, item, rating)` tuples
/// in dense index space.
#[pyclass]
struct Split {
    inner: DatasetSplit,
    meta: DatasetMeta,
}

#[pymethods]
impl Split {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn validation_size(&self) -> usize {
        self.inner.validation.len()
    }

    #[getter]
    fn test_size(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn train_mean(&self) -> f64 {
        self.inner.train_mean()
    }

    fn train(&self) -> Vec<(usize, usize, f64)> {
        triples_to_tuples(&self.inner.train)
    }

    fn validation(&self) -> Vec<(usize, usize, f64)> {
        triples_to_tuples(&self.inner.validation)
    }

    fn test(&self) -> Vec<(usize, usize, f64)> {
        triples_to_tuples(&self.inner.test)
    }

    fn __repr__(&self) -> String {
        format!(
            "Split(seed={}, train={}, validation={}, test={})",
            self.inner.seed,
            self.inner.train.len(),
            self.inner.validation.len(),
            self.inner.test.len()
        )
    }
}

/// What one training run did: epoch count, the best validation epoch, and
/// per-epoch trajectories.
#[pyclass]
struct TrainSummary {
    #[pyo3(get)]
    epochs_run: usize,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    best_val_rmse: f64,
    #[pyo3(get)]
    pruned_centers: usize,
    #[pyo3(get)]
    val_rmse: Vec<f64>,
    #[pyo3(get)]
    total_loss: Vec<f64>,
    /// Alive centers per user view after the final epoch.
    #[pyo3(get)]
    user_alive: Vec<usize>,
    #[pyo3(get)]
    item_alive: Vec<usize>,
}

#[pymethods]
impl TrainSummary {
    fn __repr__(&self) -> String {
        format!(
            "TrainSummary(epochs_run={}, best_epoch={}, best_val_rmse={:.6}, pruned_centers={})",
            self.epochs_run, self.best_epoch, self.best_val_rmse, self.pruned_centers
        )
    }
}

#[pyclass]
struct BaselineSummary {
    #[pyo3(get)]
    epochs_run: usize,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    best_val_rmse: f64,
    #[pyo3(get)]
    val_rmse: Vec<f64>,
}

#[pymethods]
impl BaselineSummary {
    fn __repr__(&self) -> String {
        format!(
            "BaselineSummary(epochs_run={}, best_epoch={}, best_val_rmse={:.6})",
            self.epochs_run, self.best_epoch, self.best_val_rmse
        )
    }
}

/// Scores for one split. `buckets` breaks the error down by truth value as
/// `(label, count, rmse)` tuples.
#[pyclass]
struct EvalSummary {
    #[pyo3(get)]
    split: String,
    #[pyo3(get)]
    count: usize,
    #[pyo3(get)]
    clamped: bool,
    #[pyo3(get)]
    rmse: f64,
    #[pyo3(get)]
    mae: f64,
    #[pyo3(get)]
    buckets: Vec<(String, usize, f64)>,
}

#[pymethods]
impl EvalSummary {
    fn __repr__(&self) -> String {
        format!(
            "EvalSummary(split={:?}, count={}, rmse={:.6}, mae={:.6})",
            self.split, self.count, self.rmse, self.mae
        )
    }
}

fn eval_summary(report: mfdmc::eval::EvalReport) -> EvalSummary {
    EvalSummary {
        split: report.split,
        count: report.count,
        clamped: report.clamped,
        rmse: report.rmse,
        mae: report.mae,
        buckets: report
            .buckets
            .into_iter()
            .map(|b| (b.label, b.count, b.rmse))
            .collect(),
    }
}

fn pick_split<'a>(split: &'a Split, which: &str) -> PyResult<&'a [RatingTriple]> {
    match which {
        "train" => Ok(&split.inner.train),
        "validation" => Ok(&split.inner.validation),
        "test" => Ok(&split.inner.test),
        _ => Err(PyValueError::new_err(format!(
            "unknown split {which:?}; use \"train\", \"validation\", or \"test\""
        ))),
    }
}

/// Guards evaluation and prediction against data the model was not built
/// for, mirroring the checkpoint fingerprint rules.
fn check_split(
    meta: &DatasetMeta,
    fingerprint: &Option<DatasetFingerprint>,
    split: &Split,
) -> PyResult<()> {
    if let Some(fp) = fingerprint {
        fp.check(&split.meta, split.inner.seed).map_err(to_py)
    } else if *meta != split.meta {
        Err(PyValueError::new_err(
            "split comes from a different dataset than this model",
        ))
    } else {
        Ok(())
    }
}

/// The clustered factorization model: per-view center banks mixed by
/// softmax weights, trained with spread, proximity, and sharpening terms,
/// and pruned of underused centers along the way.
#[pyclass]
struct Model {
    inner: MfdmcModel,
    meta: DatasetMeta,
    train: TrainConfig,
    fingerprint: Option<DatasetFingerprint>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (dataset, latent_dim=16, views=8, centers_per_view=10, share_centers=true, use_biases=true, seed=1))]
    fn new(
        dataset: &Dataset,
        latent_dim: usize,
        views: usize,
        centers_per_view: usize,
        share_centers: bool,
        use_biases: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let meta = dataset.inner.meta.clone();
        let config = ModelConfig {
            latent_dim,
            views,
            centers_per_view,
            share_centers,
            use_biases,
            range_min: meta.range_min,
            range_max: meta.range_max,
        };
        let inner = MfdmcModel::init(config, &meta, seed).map_err(to_py)?;
        Ok(Model {
            inner,
            meta,
            train: TrainConfig::default(),
            fingerprint: None,
        })
    }

    /// Train in place and remember the split identity for later saves and
    /// evaluations. `psi` of None prunes below 1/alive; a float fixes the
    /// threshold. `patience` of 0 disables early stopping.
    #[pyo3(signature = (split, epochs=200, batch_size=1024, learning_rate=0.003,
                        optimizer="adaptive-moment", eta_max=0.05, gamma_max=0.01,
                        ramp_epochs=40, prune_warmup=40, psi=None, min_centers=3,
                        prune_every=1, weight_decay=0.05, rho=1.0,
                        weight_loss="mapped-entropy", patience=10, seed=1))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        split: &Split,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        optimizer: &str,
        eta_max: f64,
        gamma_max: f64,
        ramp_epochs: usize,
        prune_warmup: usize,
        psi: Option<f64>,
        min_centers: usize,
        prune_every: usize,
        weight_decay: f64,
        rho: f64,
        weight_loss: &str,
        patience: usize,
        seed: u64,
    ) -> PyResult<TrainSummary> {
        if self.meta != split.meta {
            return Err(PyValueError::new_err(
                "split comes from a different dataset than this model",
            ));
        }
        let config = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            optimizer: parse_optimizer(optimizer)?,
            eta_max,
            gamma_max,
            ramp_epochs,
            prune_warmup,
            psi: psi.map_or(PsiMode::OneOverT, PsiMode::Fixed),
            min_centers,
            prune_every,
            lambda: weight_decay,
            rho,
            weight_loss: parse_weight_loss(weight_loss)?,
            seed,
            early_stop_patience: patience,
            ..TrainConfig::default()
        };
        let report = trainer::fit(&mut self.inner, &split.inner, &config).map_err(to_py)?;
        self.train = config;
        self.fingerprint = Some(DatasetFingerprint::new(&split.meta, split.inner.seed));
        let last = report.epochs.last().expect("fit yields at least one epoch");
        Ok(TrainSummary {
            epochs_run: report.epochs.len(),
            best_epoch: report.best_epoch,
            best_val_rmse: report.best_val_rmse,
            pruned_centers: report.pruned_centers,
            val_rmse: report.epochs.iter().map(|r| r.val_rmse).collect(),
            total_loss: report.epochs.iter().map(|r| r.total).collect(),
            user_alive: last.user_alive.clone(),
            item_alive: last.item_alive.clone(),
        })
    }

    fn predict(&self, user: usize, item: usize) -> PyResult<f64> {
        if user >= self.meta.users || item >= self.meta.items {
            return Err(PyIndexError::new_err(format!(
                "pair ({user}, {item}) outside {} users x {} items",
                self.meta.users, self.meta.items
            )));
        }
        Ok(self.inner.predict(user, item))
    }

    /// Score one part of a split ("train", "validation", or "test"). A
    /// fitted or loaded model refuses splits of other datasets.
    #[pyo3(signature = (split, which="test", clamp=true))]
    fn evaluate(&self, split: &Split, which: &str, clamp: bool) -> PyResult<EvalSummary> {
        check_split(&self.meta, &self.fingerprint, split)?;
        let triples = pick_split(split, which)?;
        let report = mfdmc::eval::evaluate(&self.inner, triples, clamp, which).map_err(to_py)?;
        Ok(eval_summary(report))
    }

    /// Softmax mixing weights of one entity over one view's centers.
    fn view_weights(&self, side: &str, entity: usize, view: usize) -> PyResult<Vec<f64>> {
        let side = parse_side(side)?;
        self.check_entity(side, entity, view)?;
        Ok(self.inner.view_weights(side, entity, view))
    }

    /// The composed latent vector of one entity (all views concatenated).
    fn compose_latent(&self, side: &str, entity: usize) -> PyResult<Vec<f64>> {
        let side = parse_side(side)?;
        self.check_entity(side, entity, 0)?;
        Ok(self.inner.compose_latent(side, entity))
    }

    /// Index of the center an entity leans on hardest in one view.
    fn cluster_of(&self, side: &str, entity: usize, view: usize) -> PyResult<usize> {
        let side = parse_side(side)?;
        self.check_entity(side, entity, view)?;
        Ok(losses::assign_cluster(&self.inner, side, entity, view))
    }

    /// Alive center count per view on one side.
    fn alive(&self, side: &str) -> PyResult<Vec<usize>> {
        let side = parse_side(side)?;
        Ok((0..self.inner.config.views)
            .map(|v| self.inner.alive(side, v))
            .collect())
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.config.latent_dim
    }

    #[getter]
    fn views(&self) -> usize {
        self.inner.config.views
    }

    #[getter]
    fn users(&self) -> usize {
        self.meta.users
    }

    #[getter]
    fn items(&self) -> usize {
        self.meta.items
    }

    #[getter]
    fn share_centers(&self) -> bool {
        self.inner.is_shared()
    }

    #[getter]
    fn use_biases(&self) -> bool {
        self.inner.config.use_biases
    }

    /// Write a checkpoint. Only a fitted (or loaded) model knows which
    /// dataset it belongs to, so fit first.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let fp = self.fingerprint.as_ref().ok_or_else(|| {
            PyValueError::new_err("nothing records which dataset this model was trained on; fit before saving")
        })?;
        checkpoint::save_model(&path, &self.inner, &self.train, fp).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, train, fingerprint) = checkpoint::load_model(&path).map_err(to_py)?;
        Ok(Model {
            inner,
            meta: meta_from_fingerprint(&fingerprint),
            train,
            fingerprint: Some(fingerprint),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(latent_dim={}, views={}, users={}, items={}, fitted={})",
            self.inner.config.latent_dim,
            self.inner.config.views,
            self.meta.users,
            self.meta.items,
            self.fingerprint.is_some()
        )
    }
}

impl Model {
    fn check_entity(&self, side: Side, entity: usize, view: usize) -> PyResult<()> {
        let total = self.inner.num_entities(side);
        if entity >= total {
            return Err(PyIndexError::new_err(format!(
                "{} {entity} outside 0..{total}",
                side.name()
            )));
        }
        if view >= self.inner.config.views {
            return Err(PyIndexError::new_err(format!(
                "view {view} outside 0..{}",
                self.inner.config.views
            )));
        }
        Ok(())
    }
}

/// Plain matrix factorization for comparison runs: "funk" is the inner
/// product alone, "biased" adds a global mean and per-entity offsets.
#[pyclass]
struct Baseline {
    inner: BaselineModel,
    meta: DatasetMeta,
    fingerprint: Option<DatasetFingerprint>,
}

#[pymethods]
impl Baseline {
    #[new]
    #[pyo3(signature = (dataset, kind="funk", factors=16, epochs=200, batch_size=256,
                        learning_rate=0.005, optimizer="adaptive-moment",
                        weight_decay=0.05, patience=10, seed=1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dataset: &Dataset,
        kind: &str,
        factors: usize,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        optimizer: &str,
        weight_decay: f64,
        patience: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let kind = match kind {
            "funk" => BaselineKind::Funk,
            "biased" => BaselineKind::Biased,
            _ => {
                return Err(PyValueError::new_err(format!(
                    "unknown baseline kind {kind:?}; use \"funk\" or \"biased\""
                )))
            }
        };
        let meta = dataset.inner.meta.clone();
        let config = BaselineConfig {
            kind,
            factors,
            epochs,
            batch_size,
            learning_rate,
            optimizer: parse_optimizer(optimizer)?,
            lambda: weight_decay,
            seed,
            early_stop_patience: patience,
            ..BaselineConfig::default()
        };
        let inner = BaselineModel::init(config, &meta, seed).map_err(to_py)?;
        Ok(Baseline {
            inner,
            meta,
            fingerprint: None,
        })
    }

    fn fit(&mut self, split: &Split) -> PyResult<BaselineSummary> {
        if self.meta != split.meta {
            return Err(PyValueError::new_err(
                "split comes from a different dataset than this model",
            ));
        }
        let report = baselines::fit(&mut self.inner, &split.inner).map_err(to_py)?;
        self.fingerprint = Some(DatasetFingerprint::new(&split.meta, split.inner.seed));
        Ok(BaselineSummary {
            epochs_run: report.epochs.len(),
            best_epoch: report.best_epoch,
            best_val_rmse: report.best_val_rmse,
            val_rmse: report.epochs.iter().map(|r| r.val_rmse).collect(),
        })
    }

    fn predict(&self, user: usize, item: usize) -> PyResult<f64> {
        if user >= self.meta.users || item >= self.meta.items {
            return Err(PyIndexError::new_err(format!(
                "pair ({user}, {item}) outside {} users x {} items",
                self.meta.users, self.meta.items
            )));
        }
        Ok(self.inner.predict(user, item))
    }

    #[pyo3(signature = (split, which="test", clamp=true))]
    fn evaluate(&self, split: &Split, which: &str, clamp: bool) -> PyResult<EvalSummary> {
        check_split(&self.meta, &self.fingerprint, split)?;
        let triples = pick_split(split, which)?;
        let report = mfdmc::eval::evaluate(&self.inner, triples, clamp, which).map_err(to_py)?;
        Ok(eval_summary(report))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.config.kind.name()
    }

    #[getter]
    fn factors(&self) -> usize {
        self.inner.config.factors
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let fp = self.fingerprint.as_ref().ok_or_else(|| {
            PyValueError::new_err("nothing records which dataset this model was trained on; fit before saving")
        })?;
        checkpoint::save_baseline(&path, &self.inner, fp).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, fingerprint) = checkpoint::load_baseline(&path).map_err(to_py)?;
        Ok(Baseline {
            inner,
            meta: meta_from_fingerprint(&fingerprint),
            fingerprint: Some(fingerprint),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Baseline(kind={:?}, factors={}, fitted={})",
            self.inner.config.kind.name(),
            self.inner.config.factors,
            self.fingerprint.is_some()
        )
    }
}

/// The sharpening map applied to softmax weights before the entropy term:
/// linear below the uniform point 1/t, linear above it, fixed at
/// map(1/t) = 1/e.
#[pyfunction]
fn map_weight(w: f64, t: usize) -> PyResult<f64> {
    losses::map_weight(w, t).map_err(to_py)
}

/// Numerically stable softmax of a logit row.
#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    mfdmc::model::softmax(&logits)
}

#[pymodule]
fn mfdmc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<Split>()?;
    m.add_class::<Model>()?;
    m.add_class::<Baseline>()?;
    m.add_class::<TrainSummary>()?;
    m.add_class::<BaselineSummary>()?;
    m.add_class::<EvalSummary>()?;
    m.add_function(wrap_pyfunction!(map_weight, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    Ok(())
}
