//! Checkpoint files: a fixed magic and version, a length-prefixed JSON
//! metadata block, then every parameter as raw little-endian f64 in a
//! documented order. Loading verifies structure and dataset identity.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineModel};
use crate::data::DatasetMeta;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Biases, CenterBank, CenterView, MfdmcModel, ModelConfig, Side};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 5] = b"MFDMC";
pub const VERSION: u32 = 1;

/// Identity of the dataset and split a checkpoint was trained on. Evaluation
/// refuses to run against data that does not match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub range_min: f64,
    pub range_max: f64,
    pub global_mean: f64,
    pub split_seed: u64,
}

impl DatasetFingerprint {
    pub fn new(meta: &DatasetMeta, split_seed: u64) -> Self {
        DatasetFingerprint {
            users: meta.users,
            items: meta.items,
            interactions: meta.interactions,
            range_min: meta.range_min,
            range_max: meta.range_max,
            global_mean: meta.global_mean,
            split_seed,
        }
    }

    pub fn check(&self, meta: &DatasetMeta, split_seed: u64) -> Result<()> {
        let mut diffs = Vec::new();
        if self.users != meta.users {
            diffs.push(format!("users: checkpoint {} vs dataset {}", self.users, meta.users));
        }
        if self.items != meta.items {
            diffs.push(format!("items: checkpoint {} vs dataset {}", self.items, meta.items));
        }
        if self.interactions != meta.interactions {
            diffs.push(format!(
                "interactions: checkpoint {} vs dataset {}",
                self.interactions, meta.interactions
            ));
        }
        if self.range_min != meta.range_min || self.range_max != meta.range_max {
            diffs.push(format!(
                "rating range: checkpoint [{}, {}] vs dataset [{}, {}]",
                self.range_min, self.range_max, meta.range_min, meta.range_max
            ));
        }
        if (self.global_mean - meta.global_mean).abs() > 1e-12 {
            diffs.push(format!(
                "global mean: checkpoint {} vs dataset {}",
                self.global_mean, meta.global_mean
            ));
        }
        if self.split_seed != split_seed {
            diffs.push(format!(
                "split seed: checkpoint {} vs manifest {}",
                self.split_seed, split_seed
            ));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch(diffs.join("; ")))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MfdmcMeta {
    kind: String,
    model: ModelConfig,
    train: TrainConfig,
    /// Surviving centers' original identities, per user view.
    user_original: Vec<Vec<usize>>,
    /// Same for the item bank; absent when the banks are shared.
    item_original: Option<Vec<Vec<usize>>>,
    fingerprint: DatasetFingerprint,
    /// Total f64 count of the payload, as an integrity check.
    values: u64,
}

#[derive(Serialize, Deserialize)]
struct BaselineMeta {
    kind: String,
    config: BaselineConfig,
    fingerprint: DatasetFingerprint,
    values: u64,
}

#[derive(Debug)]
pub enum SavedCheckpoint {
    Model {
        model: MfdmcModel,
        train: TrainConfig,
        fingerprint: DatasetFingerprint,
    },
    Baseline {
        model: BaselineModel,
        fingerprint: DatasetFingerprint,
    },
}

impl SavedCheckpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedCheckpoint::Model { .. } => "mfdmc",
            SavedCheckpoint::Baseline { model, .. } => model.config.kind.name(),
        }
    }

    pub fn fingerprint(&self) -> &DatasetFingerprint {
        match self {
            SavedCheckpoint::Model { fingerprint, .. } => fingerprint,
            SavedCheckpoint::Baseline { fingerprint, .. } => fingerprint,
        }
    }
}

fn model_value_count(model: &MfdmcModel) -> u64 {
    let mut n = 0u64;
    let bank_len = |bank: &CenterBank| -> u64 {
        bank.views
            .iter()
            .map(|v| (v.centers.rows() * v.centers.cols()) as u64)
            .sum()
    };
    n += bank_len(model.centers(Side::User));
    if !model.is_shared() {
        n += bank_len(model.centers(Side::Item));
    }
    for side in [Side::User, Side::Item] {
        n += model
            .logits(side)
            .iter()
            .map(|l| (l.rows() * l.cols()) as u64)
            .sum::<u64>();
    }
    if let Some(b) = &model.biases {
        n += 1 + (b.user.len() + b.item.len()) as u64;
    }
    n
}

fn baseline_value_count(model: &BaselineModel) -> u64 {
    let mut n = (model.user_factors.rows() * model.user_factors.cols()
        + model.item_factors.rows() * model.item_factors.cols()) as u64;
    if let Some(b) = &model.biases {
        n += 1 + (b.user.len() + b.item.len()) as u64;
    }
    n
}

fn write_envelope(path: &Path, meta_json: &[u8], payload: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(5 + 4 + 8 + meta_json.len() + payload.len() * 8);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    out.write_all(meta_json)?;
    for &x in payload {
        out.write_all(&x.to_le_bytes())?;
    }
    fs::write(path, out)?;
    Ok(())
}

fn push_matrix(payload: &mut Vec<f64>, m: &Matrix) {
    payload.extend_from_slice(m.data());
}

fn push_bank(payload: &mut Vec<f64>, bank: &CenterBank) {
    for view in &bank.views {
        push_matrix(payload, &view.centers);
    }
}

fn push_biases(payload: &mut Vec<f64>, b: &Biases) {
    payload.push(b.mu);
    payload.extend_from_slice(&b.user);
    payload.extend_from_slice(&b.item);
}

/// Writes a model checkpoint. Payload order: user center bank view by view,
/// the item bank when not shared, user logits view by view, item logits view
/// by view, then mu and the per-entity biases when present.
pub fn save_model(
    path: &Path,
    model: &MfdmcModel,
    train: &TrainConfig,
    fingerprint: &DatasetFingerprint,
) -> Result<()> {
    let meta = MfdmcMeta {
        kind: "mfdmc".to_string(),
        model: model.config,
        train: *train,
        user_original: model
            .centers(Side::User)
            .views
            .iter()
            .map(|v| v.original.clone())
            .collect(),
        item_original: (!model.is_shared()).then(|| {
            model
                .centers(Side::Item)
                .views
                .iter()
                .map(|v| v.original.clone())
                .collect()
        }),
        fingerprint: fingerprint.clone(),
        values: model_value_count(model),
    };
    let mut payload = Vec::with_capacity(meta.values as usize);
    push_bank(&mut payload, model.centers(Side::User));
    if !model.is_shared() {
        push_bank(&mut payload, model.centers(Side::Item));
    }
    for side in [Side::User, Side::Item] {
        for logits in model.logits(side) {
            push_matrix(&mut payload, logits);
        }
    }
    if let Some(b) = &model.biases {
        push_biases(&mut payload, b);
    }
    debug_assert_eq!(payload.len() as u64, meta.values);
    let json = serde_json::to_vec(&meta)
        .map_err(|e| Error::CheckpointMetadata(e.to_string()))?;
    write_envelope(path, &json, &payload)
}

/// Writes a baseline checkpoint: user factors, item factors, then biases
/// when the variant has them.
pub fn save_baseline(
    path: &Path,
    model: &BaselineModel,
    fingerprint: &DatasetFingerprint,
) -> Result<()> {
    let meta = BaselineMeta {
        kind: model.config.kind.name().to_string(),
        config: model.config,
        fingerprint: fingerprint.clone(),
        values: baseline_value_count(model),
    };
    let mut payload = Vec::with_capacity(meta.values as usize);
    push_matrix(&mut payload, &model.user_factors);
    push_matrix(&mut payload, &model.item_factors);
    if let Some(b) = &model.biases {
        push_biases(&mut payload, b);
    }
    debug_assert_eq!(payload.len() as u64, meta.values);
    let json = serde_json::to_vec(&meta)
        .map_err(|e| Error::CheckpointMetadata(e.to_string()))?;
    write_envelope(path, &json, &payload)
}

/// Streaming reader over the payload region.
struct PayloadReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> PayloadReader<'a> {
    fn take(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let need = count * 8;
        if self.at + need > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "payload ends inside {what}"
            )));
        }
        let out = self.bytes[self.at..self.at + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.at += need;
        Ok(out)
    }

    fn take_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let data = self.take(rows * cols, what)?;
        let mut m = Matrix::zeros(rows, cols);
        m.data_mut().copy_from_slice(&data);
        Ok(m)
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::CheckpointMetadata(format!(
                "payload holds {} trailing bytes past the declared values",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn read_bank(
    reader: &mut PayloadReader,
    original: &[Vec<usize>],
    center_dim: usize,
    side: &str,
) -> Result<CenterBank> {
    let views = original
        .iter()
        .enumerate()
        .map(|(v, orig)| {
            Ok(CenterView {
                centers: reader.take_matrix(
                    orig.len(),
                    center_dim,
                    &format!("{side} centers view {v}"),
                )?,
                original: orig.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CenterBank { views })
}

fn read_biases(reader: &mut PayloadReader, users: usize, items: usize) -> Result<Biases> {
    let mu = reader.take(1, "global bias")?[0];
    let user = reader.take(users, "user biases")?;
    let item = reader.take(items, "item biases")?;
    Ok(Biases { mu, user, item })
}

/// Reads any checkpoint, reporting which kind it holds.
pub fn load(path: &Path) -> Result<SavedCheckpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::NotACheckpoint(path.display().to_string()));
    }
    let mut at = MAGIC.len();
    let header = |bytes: &[u8], at: usize, n: usize, what: &str| -> Result<Vec<u8>> {
        bytes
            .get(at..at + n)
            .map(<[u8]>::to_vec)
            .ok_or_else(|| Error::CheckpointTruncated(format!("header ends inside {what}")))
    };
    let version = u32::from_le_bytes(header(&bytes, at, 4, "version")?.try_into().expect("4 bytes"));
    at += 4;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len =
        u64::from_le_bytes(header(&bytes, at, 8, "metadata length")?.try_into().expect("8 bytes"))
            as usize;
    at += 8;
    let meta_bytes = header(&bytes, at, meta_len, "metadata")?;
    at += meta_len;

    let value: serde_json::Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::CheckpointMetadata(e.to_string()))?;
    let kind = value
        .get("kind")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| Error::CheckpointMetadata("metadata lacks a kind".to_string()))?
        .to_string();
    let mut reader = PayloadReader {
        bytes: &bytes[at..],
        at: 0,
    };

    match kind.as_str() {
        "mfdmc" => {
            let meta: MfdmcMeta = serde_json::from_value(value)
                .map_err(|e| Error::CheckpointMetadata(e.to_string()))?;
            let center_dim = meta.model.center_dim();
            let users = meta.fingerprint.users;
            let items = meta.fingerprint.items;
            let user_bank = read_bank(&mut reader, &meta.user_original, center_dim, "user")?;
            let item_bank = match &meta.item_original {
                Some(orig) => Some(read_bank(&mut reader, orig, center_dim, "item")?),
                None => None,
            };
            let user_alive: Vec<usize> = meta.user_original.iter().map(Vec::len).collect();
            let item_alive: Vec<usize> = meta
                .item_original
                .as_ref()
                .map_or_else(|| user_alive.clone(), |o| o.iter().map(Vec::len).collect());
            let mut user_logits = Vec::new();
            for (v, &alive) in user_alive.iter().enumerate() {
                user_logits.push(reader.take_matrix(users, alive, &format!("user logits view {v}"))?);
            }
            let mut item_logits = Vec::new();
            for (v, &alive) in item_alive.iter().enumerate() {
                item_logits.push(reader.take_matrix(items, alive, &format!("item logits view {v}"))?);
            }
            let biases = if meta.model.use_biases {
                Some(read_biases(&mut reader, users, items)?)
            } else {
                None
            };
            reader.finish()?;
            let model = MfdmcModel::from_parts(
                meta.model,
                user_bank,
                item_bank,
                user_logits,
                item_logits,
                biases,
            )?;
            Ok(SavedCheckpoint::Model {
                model,
                train: meta.train,
                fingerprint: meta.fingerprint,
            })
        }
        "funk" | "biased" => {
            let meta: BaselineMeta = serde_json::from_value(value)
                .map_err(|e| Error::CheckpointMetadata(e.to_string()))?;
            let users = meta.fingerprint.users;
            let items = meta.fingerprint.items;
            let k = meta.config.factors;
            let user_factors = reader.take_matrix(users, k, "user factors")?;
            let item_factors = reader.take_matrix(items, k, "item factors")?;
            let biases = if meta.config.kind.has_biases() {
                Some(read_biases(&mut reader, users, items)?)
            } else {
                None
            };
            reader.finish()?;
            Ok(SavedCheckpoint::Baseline {
                model: BaselineModel {
                    config: meta.config,
                    user_factors,
                    item_factors,
                    biases,
                },
                fingerprint: meta.fingerprint,
            })
        }
        other => Err(Error::CheckpointMetadata(format!(
            "unknown checkpoint kind {other:?}"
        ))),
    }
}

/// Reads a checkpoint that must hold the clustered model.
pub fn load_model(path: &Path) -> Result<(MfdmcModel, TrainConfig, DatasetFingerprint)> {
    match load(path)? {
        SavedCheckpoint::Model {
            model,
            train,
            fingerprint,
        } => Ok((model, train, fingerprint)),
        other => Err(Error::CheckpointKind {
            found: other.kind().to_string(),
            expected: "mfdmc".to_string(),
        }),
    }
}

/// Reads a checkpoint that must hold a baseline.
pub fn load_baseline(path: &Path) -> Result<(BaselineModel, DatasetFingerprint)> {
    match load(path)? {
        SavedCheckpoint::Baseline { model, fingerprint } => Ok((model, fingerprint)),
        other => Err(Error::CheckpointKind {
            found: other.kind().to_string(),
            expected: "funk or biased".to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::BaselineKind;
    use crate::trainer::{prune_centers, TrainConfig};

    fn meta() -> DatasetMeta {
        DatasetMeta {
            users: 5,
            items: 4,
            interactions: 12,
            range_min: 1.0,
            range_max: 5.0,
            global_mean: 3.25,
        }
    }

    fn sample_model(shared: bool) -> MfdmcModel {
        let cfg = ModelConfig {
            latent_dim: 6,
            views: 2,
            centers_per_view: 4,
            share_centers: shared,
            use_biases: true,
            range_min: 1.0,
            range_max: 5.0,
        };
        MfdmcModel::init(cfg, &meta(), 11).expect("init")
    }

    fn models_match(a: &MfdmcModel, b: &MfdmcModel) {
        assert_eq!(a.config, b.config);
        for side in [Side::User, Side::Item] {
            for v in 0..a.config.views {
                assert_eq!(
                    a.centers(side).views[v].centers.data(),
                    b.centers(side).views[v].centers.data(),
                    "centers must round-trip bit-exactly"
                );
                assert_eq!(a.centers(side).views[v].original, b.centers(side).views[v].original);
                assert_eq!(a.logits(side)[v].data(), b.logits(side)[v].data());
            }
        }
        match (&a.biases, &b.biases) {
            (Some(x), Some(y)) => {
                assert_eq!(x.mu, y.mu);
                assert_eq!(x.user, y.user);
                assert_eq!(x.item, y.item);
            }
            (None, None) => {}
            _ => panic!("bias presence must round-trip"),
        }
    }

    #[test]
    fn model_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().expect("tempdir");
        for shared in [true, false] {
            let model = sample_model(shared);
            let train = TrainConfig::default();
            let fp = DatasetFingerprint::new(&meta(), 42);
            let path = dir.path().join(format!("model-{shared}.ckpt"));
            save_model(&path, &model, &train, &fp).expect("save");
            let (loaded, train2, fp2) = load_model(&path).expect("load");
            models_match(&model, &loaded);
            assert_eq!(train, train2);
            assert_eq!(fp, fp2);
            assert_eq!(loaded.is_shared(), shared);
        }
    }

    #[test]
    fn pruned_model_round_trips_with_original_identities() {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut model = sample_model(false);
        // sharpen one view's logits so a prune removes something
        for r in 0..model.logits(Side::User)[0].rows() {
            model.logits_mut(Side::User)[0][(r, 0)] = 12.0;
        }
        let cfg = TrainConfig {
            prune_warmup: 0,
            ..TrainConfig::default()
        };
        let report = prune_centers(&mut model, &cfg, 1);
        assert!(report.removed() > 0, "setup should force a removal");
        let path = dir.path().join("pruned.ckpt");
        save_model(&path, &model, &cfg, &DatasetFingerprint::new(&meta(), 7)).expect("save");
        let (loaded, _, _) = load_model(&path).expect("load");
        models_match(&model, &loaded);
        assert!(
            loaded.centers(Side::User).views[0].original.len() < 4,
            "pruned view stays pruned"
        );
    }

    #[test]
    fn baseline_checkpoint_round_trips() {
        let dir = tempfile::tempdir().expect("tempdir");
        for kind in [BaselineKind::Funk, BaselineKind::Biased] {
            let cfg = BaselineConfig {
                kind,
                ..BaselineConfig::default()
            };
            let model = BaselineModel::init(cfg, &meta(), 3).expect("init");
            let fp = DatasetFingerprint::new(&meta(), 42);
            let path = dir.path().join(format!("{}.ckpt", kind.name()));
            save_baseline(&path, &model, &fp).expect("save");
            let (loaded, fp2) = load_baseline(&path).expect("load");
            assert_eq!(model.config, loaded.config);
            assert_eq!(model.user_factors.data(), loaded.user_factors.data());
            assert_eq!(model.item_factors.data(), loaded.item_factors.data());
            assert_eq!(model.biases.is_some(), loaded.biases.is_some());
            assert_eq!(fp, fp2);
        }
    }

    #[test]
    fn kind_confusion_is_a_distinct_error() {
        let dir = tempfile::tempdir().expect("tempdir");
        let model_path = dir.path().join("model.ckpt");
        save_model(
            &model_path,
            &sample_model(true),
            &TrainConfig::default(),
            &DatasetFingerprint::new(&meta(), 1),
        )
        .expect("save");
        match load_baseline(&model_path) {
            Err(Error::CheckpointKind { found, .. }) => assert_eq!(found, "mfdmc"),
            other => panic!("expected a kind error, got {other:?}"),
        }

        let base_path = dir.path().join("funk.ckpt");
        let base = BaselineModel::init(BaselineConfig::default(), &meta(), 2).expect("init");
        save_baseline(&base_path, &base, &DatasetFingerprint::new(&meta(), 1)).expect("save");
        match load_model(&base_path) {
            Err(Error::CheckpointKind { found, expected }) => {
                assert_eq!(found, "funk");
                assert_eq!(expected, "mfdmc");
            }
            other => panic!("expected a kind error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_files_report_what_broke() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.ckpt");
        save_model(
            &path,
            &sample_model(true),
            &TrainConfig::default(),
            &DatasetFingerprint::new(&meta(), 1),
        )
        .expect("save");
        let good = fs::read(&path).expect("read");

        let wrong_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        fs::write(&path, wrong_magic).expect("write");
        assert!(matches!(load(&path), Err(Error::NotACheckpoint(_))));

        let wrong_version = {
            let mut b = good.clone();
            b[5..9].copy_from_slice(&9u32.to_le_bytes());
            b
        };
        fs::write(&path, wrong_version).expect("write");
        match load(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 9);
                assert_eq!(expected, 1);
            }
            other => panic!("expected a version error, got {other:?}"),
        }

        fs::write(&path, &good[..good.len() - 16]).expect("write");
        assert!(matches!(load(&path), Err(Error::CheckpointTruncated(_))));

        let broken_json = {
            let mut b = good.clone();
            // first metadata byte is the JSON opening brace
            b[17] = b'!';
            b
        };
        fs::write(&path, broken_json).expect("write");
        assert!(matches!(load(&path), Err(Error::CheckpointMetadata(_))));

        fs::write(&path, b"just some text").expect("write");
        assert!(matches!(load(&path), Err(Error::NotACheckpoint(_))));
    }

    #[test]
    fn fingerprint_check_names_the_differing_fields() {
        let fp = DatasetFingerprint::new(&meta(), 42);
        assert!(fp.check(&meta(), 42).is_ok());

        let mut other = meta();
        other.users = 6;
        match fp.check(&other, 42) {
            Err(Error::FingerprintMismatch(msg)) => {
                assert!(msg.contains("users"), "message should name the field: {msg}");
            }
            other => panic!("expected a mismatch, got {other:?}"),
        }

        match fp.check(&meta(), 43) {
            Err(Error::FingerprintMismatch(msg)) => {
                assert!(msg.contains("seed"), "message should name the seed: {msg}");
            }
            other => panic!("expected a mismatch, got {other:?}"),
        }
    }
}
