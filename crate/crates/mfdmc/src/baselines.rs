//! Plain matrix factorization baselines: inner-product models trained on
//! the same splits and evaluation protocol as the clustered model.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, DatasetSplit, RatingTriple};
use crate::error::{Error, Result};
use crate::losses::distinct_entities;
use crate::matrix::Matrix;
use crate::model::Biases;
use crate::trainer::optim::{update_scalar, update_slice, MomentPair, VecMoments};
use crate::trainer::{OptimHyper, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Factors only: prediction is the inner product.
    Funk,
    /// Factors plus a global mean and per-entity bias terms.
    Biased,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Funk => "funk",
            BaselineKind::Biased => "biased",
        }
    }

    pub fn has_biases(&self) -> bool {
        matches!(self, BaselineKind::Biased)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub factors: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Clamp range for evaluation; always taken from the dataset at init.
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kind: BaselineKind::Funk,
            factors: 16,
            epochs: 200,
            batch_size: 256,
            learning_rate: 0.005,
            optimizer: OptimizerKind::AdaptiveMoment,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda: 0.05,
            seed: 1,
            early_stop_patience: 10,
            range_min: 1.0,
            range_max: 5.0,
        }
    }
}

impl BaselineConfig {
    fn hyper(&self) -> OptimHyper {
        OptimHyper {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper().validate()?;
        if self.factors == 0 {
            return Err(Error::Config("factors must be at least 1".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.range_min >= self.range_max {
            return Err(Error::Config(format!(
                "rating range [{}, {}] is empty",
                self.range_min, self.range_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub user_factors: Matrix,
    pub item_factors: Matrix,
    /// Present exactly for the biased variant.
    pub biases: Option<Biases>,
}

impl BaselineModel {
    /// Fresh model with factors drawn N(0, 0.1), user rows first then item
    /// rows, each row-major. Biases start at zero around the global mean.
    /// The clamp range always tracks the dataset.
    pub fn init(config: BaselineConfig, meta: &DatasetMeta, seed: u64) -> Result<Self> {
        let mut config = config;
        config.range_min = meta.range_min;
        config.range_max = meta.range_max;
        config.validate()?;
        if meta.users == 0 || meta.items == 0 {
            return Err(Error::EmptyDataset("no users or items".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid parameters");
        let mut draw = |rows: usize, cols: usize| -> Matrix {
            let mut m = Matrix::zeros(rows, cols);
            for x in m.data_mut() {
                *x = normal.sample(&mut rng);
            }
            m
        };
        let user_factors = draw(meta.users, config.factors);
        let item_factors = draw(meta.items, config.factors);
        let biases = config.kind.has_biases().then(|| Biases {
            mu: meta.global_mean,
            user: vec![0.0; meta.users],
            item: vec![0.0; meta.items],
        });
        Ok(BaselineModel {
            config,
            user_factors,
            item_factors,
            biases,
        })
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        let dot = self
            .user_factors
            .row(user)
            .iter()
            .zip(self.item_factors.row(item))
            .map(|(p, q)| p * q)
            .sum::<f64>();
        match &self.biases {
            Some(b) => b.mu + b.user[user] + b.item[item] + dot,
            None => dot,
        }
    }
}

/// Gradients for one batch: factor and bias rows align with the distinct
/// entity lists in first-occurrence order.
pub struct BaselineGradients {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub user_factors: Matrix,
    pub item_factors: Matrix,
    pub mu: f64,
    pub user_biases: Vec<f64>,
    pub item_biases: Vec<f64>,
}

/// Batch objective: mean squared rating error plus lambda times the mean
/// squared factor norms over the batch's distinct entities (and mean squared
/// biases for the biased variant; the global mean is not decayed).
pub fn batch_loss(model: &BaselineModel, batch: &[RatingTriple]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mse = batch
        .iter()
        .map(|t| {
            let e = model.predict(t.user, t.item) - t.rating;
            e * e
        })
        .sum::<f64>()
        / batch.len() as f64;

    let (users, items) = distinct_entities(batch);
    let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
    let mut decay = users
        .iter()
        .map(|&u| sq(model.user_factors.row(u)))
        .sum::<f64>()
        / users.len() as f64
        + items
            .iter()
            .map(|&i| sq(model.item_factors.row(i)))
            .sum::<f64>()
            / items.len() as f64;
    if let Some(b) = &model.biases {
        decay += users.iter().map(|&u| b.user[u] * b.user[u]).sum::<f64>() / users.len() as f64
            + items.iter().map(|&i| b.item[i] * b.item[i]).sum::<f64>() / items.len() as f64;
    }
    Ok(mse + model.config.lambda * decay)
}

fn compute_gradients(
    model: &BaselineModel,
    batch: &[RatingTriple],
) -> Result<(BaselineGradients, f64)> {
    let loss = batch_loss(model, batch)?;
    let (users, items) = distinct_entities(batch);
    let upos: HashMap<usize, usize> = users.iter().enumerate().map(|(p, &u)| (u, p)).collect();
    let ipos: HashMap<usize, usize> = items.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let k = model.config.factors;
    let mut g = BaselineGradients {
        user_factors: Matrix::zeros(users.len(), k),
        item_factors: Matrix::zeros(items.len(), k),
        mu: 0.0,
        user_biases: vec![0.0; users.len()],
        item_biases: vec![0.0; items.len()],
        users,
        items,
    };

    let inv_batch = 1.0 / batch.len() as f64;
    for t in batch {
        let s = 2.0 * (model.predict(t.user, t.item) - t.rating) * inv_batch;
        let up = upos[&t.user];
        let ip = ipos[&t.item];
        let p = model.user_factors.row(t.user);
        let q = model.item_factors.row(t.item);
        for (out, &qx) in g.user_factors.row_mut(up).iter_mut().zip(q) {
            *out += s * qx;
        }
        for (out, &px) in g.item_factors.row_mut(ip).iter_mut().zip(p) {
            *out += s * px;
        }
        if model.biases.is_some() {
            g.mu += s;
            g.user_biases[up] += s;
            g.item_biases[ip] += s;
        }
    }

    let lambda = model.config.lambda;
    let user_scale = 2.0 * lambda / g.users.len() as f64;
    for (pos, &u) in g.users.iter().enumerate() {
        for (out, &px) in g.user_factors.row_mut(pos).iter_mut().zip(model.user_factors.row(u)) {
            *out += user_scale * px;
        }
    }
    let item_scale = 2.0 * lambda / g.items.len() as f64;
    for (pos, &i) in g.items.iter().enumerate() {
        for (out, &qx) in g.item_factors.row_mut(pos).iter_mut().zip(model.item_factors.row(i)) {
            *out += item_scale * qx;
        }
    }
    if let Some(b) = &model.biases {
        for (pos, &u) in g.users.iter().enumerate() {
            g.user_biases[pos] += user_scale * b.user[u];
        }
        for (pos, &i) in g.items.iter().enumerate() {
            g.item_biases[pos] += item_scale * b.item[i];
        }
    }
    Ok((g, loss))
}

struct BaselineMoments {
    user: MomentPair,
    item: MomentPair,
    mu: (f64, f64),
    user_bias: VecMoments,
    item_bias: VecMoments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineEpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineReport {
    pub epochs: Vec<BaselineEpochRow>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

impl BaselineReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_rmse\n");
        for r in &self.epochs {
            writeln!(out, "{}\t{}\t{}", r.epoch, r.train_loss, r.val_rmse).expect("string write");
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Trains in place with the shared protocol: seeded shuffle, minibatch
/// updates touching only the rows a batch saw, clamped validation RMSE each
/// epoch, early stopping on stalls, best-epoch weights restored at the end.
pub fn fit(model: &mut BaselineModel, split: &DatasetSplit) -> Result<BaselineReport> {
    model.config.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Config(
            "training needs nonempty train and validation splits".to_string(),
        ));
    }
    let config = model.config;
    let hyper = config.hyper();
    let mut moments = (config.optimizer == OptimizerKind::AdaptiveMoment).then(|| {
        BaselineMoments {
            user: MomentPair::like(&model.user_factors),
            item: MomentPair::like(&model.item_factors),
            mu: (0.0, 0.0),
            user_bias: VecMoments::zeros(model.user_factors.rows()),
            item_bias: VecMoments::zeros(model.item_factors.rows()),
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = split.train.clone();
    let mut step = 0u64;
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, BaselineModel)> = None;
    let mut stale = 0usize;

    for e in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (grads, loss) = compute_gradients(model, batch)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
            for (pos, &u) in grads.users.iter().enumerate() {
                update_slice(
                    model.user_factors.row_mut(u),
                    grads.user_factors.row(pos),
                    moments.as_mut().map(|s| (s.user.m.row_mut(u), s.user.v.row_mut(u))),
                    &hyper,
                    step,
                );
            }
            for (pos, &i) in grads.items.iter().enumerate() {
                update_slice(
                    model.item_factors.row_mut(i),
                    grads.item_factors.row(pos),
                    moments.as_mut().map(|s| (s.item.m.row_mut(i), s.item.v.row_mut(i))),
                    &hyper,
                    step,
                );
            }
            if let Some(b) = &mut model.biases {
                update_scalar(
                    &mut b.mu,
                    grads.mu,
                    moments.as_mut().map(|s| (&mut s.mu.0, &mut s.mu.1)),
                    &hyper,
                    step,
                );
                for (pos, &u) in grads.users.iter().enumerate() {
                    update_scalar(
                        &mut b.user[u],
                        grads.user_biases[pos],
                        moments
                            .as_mut()
                            .map(|s| (&mut s.user_bias.m[u], &mut s.user_bias.v[u])),
                        &hyper,
                        step,
                    );
                }
                for (pos, &i) in grads.items.iter().enumerate() {
                    update_scalar(
                        &mut b.item[i],
                        grads.item_biases[pos],
                        moments
                            .as_mut()
                            .map(|s| (&mut s.item_bias.m[i], &mut s.item_bias.v[i])),
                        &hyper,
                        step,
                    );
                }
            }
        }

        let val_rmse =
            crate::eval::evaluate(model, &split.validation, true, "validation")?.rmse;
        rows.push(BaselineEpochRow {
            epoch: e + 1,
            train_loss: loss_sum / order.len() as f64,
            val_rmse,
        });
        let improved = best.as_ref().map_or(true, |(b, _, _)| val_rmse < *b);
        if improved {
            best = Some((val_rmse, e + 1, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
                break;
            }
        }
    }

    let (best_val_rmse, best_epoch, best_model) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(BaselineReport {
        epochs: rows,
        best_epoch,
        best_val_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_dataset;

    fn meta(users: usize, items: usize) -> DatasetMeta {
        DatasetMeta {
            users,
            items,
            interactions: users * items,
            range_min: 1.0,
            range_max: 5.0,
            global_mean: 3.0,
        }
    }

    fn sample_batch() -> Vec<RatingTriple> {
        vec![
            RatingTriple { user: 0, item: 1, rating: 4.0 },
            RatingTriple { user: 2, item: 1, rating: 2.0 },
            RatingTriple { user: 0, item: 3, rating: 5.0 },
            RatingTriple { user: 1, item: 0, rating: 1.0 },
        ]
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = BaselineConfig::default();
        let a = BaselineModel::init(cfg, &meta(4, 5), 9).expect("init");
        let b = BaselineModel::init(cfg, &meta(4, 5), 9).expect("init");
        let c = BaselineModel::init(cfg, &meta(4, 5), 10).expect("init");
        assert_eq!(a.user_factors.data(), b.user_factors.data());
        assert_eq!(a.item_factors.data(), b.item_factors.data());
        assert_ne!(a.user_factors.data(), c.user_factors.data());
        assert!(a.biases.is_none(), "funk has no bias terms");
    }

    #[test]
    fn biased_prediction_adds_the_three_bias_terms() {
        let cfg = BaselineConfig {
            kind: BaselineKind::Biased,
            factors: 2,
            ..BaselineConfig::default()
        };
        let mut model = BaselineModel::init(cfg, &meta(2, 2), 1).expect("init");
        model.user_factors.data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        model.item_factors.data_mut().copy_from_slice(&[1.0, 2.0, -0.5, 4.0]);
        let b = model.biases.as_mut().expect("biased");
        b.mu = 3.0;
        b.user = vec![0.1, -0.2];
        b.item = vec![0.3, 0.05];
        // 3.0 + (-0.2) + 0.05 + (2.0 * -0.5 + 0.25 * 4.0)
        assert!((model.predict(1, 1) - 2.85).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        for kind in [BaselineKind::Funk, BaselineKind::Biased] {
            let cfg = BaselineConfig {
                kind,
                factors: 3,
                lambda: 0.07,
                ..BaselineConfig::default()
            };
            let mut model = BaselineModel::init(cfg, &meta(3, 4), 5).expect("init");
            let batch = sample_batch();
            let (grads, _) = compute_gradients(&model, &batch).expect("gradients");

            let mut check = |analytic: f64, get: &mut dyn FnMut(&mut BaselineModel) -> &mut f64, what: &str| {
                let base = *get(&mut model);
                *get(&mut model) = base + h;
                let up = batch_loss(&model, &batch).expect("loss");
                *get(&mut model) = base - h;
                let down = batch_loss(&model, &batch).expect("loss");
                *get(&mut model) = base;
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
                assert!(rel < 1e-4, "{what}: analytic {analytic} vs numeric {numeric}");
            };

            for (pos, &u) in grads.users.iter().enumerate() {
                for f in 0..3 {
                    check(
                        grads.user_factors[(pos, f)],
                        &mut |m| &mut m.user_factors[(u, f)],
                        "user factor",
                    );
                }
            }
            for (pos, &i) in grads.items.iter().enumerate() {
                for f in 0..3 {
                    check(
                        grads.item_factors[(pos, f)],
                        &mut |m| &mut m.item_factors[(i, f)],
                        "item factor",
                    );
                }
            }
            if kind.has_biases() {
                check(grads.mu, &mut |m| &mut m.biases.as_mut().expect("biased").mu, "mu");
                for (pos, &u) in grads.users.iter().enumerate() {
                    check(
                        grads.user_biases[pos],
                        &mut |m| &mut m.biases.as_mut().expect("biased").user[u],
                        "user bias",
                    );
                }
                for (pos, &i) in grads.items.iter().enumerate() {
                    check(
                        grads.item_biases[pos],
                        &mut |m| &mut m.biases.as_mut().expect("biased").item[i],
                        "item bias",
                    );
                }
            }
        }
    }

    #[test]
    fn memorizes_a_fully_observed_toy_matrix() {
        let mut triples = Vec::new();
        for u in 0..4 {
            for i in 0..4 {
                triples.push(RatingTriple {
                    user: u,
                    item: i,
                    rating: ((u + 2 * i) % 5 + 1) as f64,
                });
            }
        }
        let split = DatasetSplit {
            train: triples.clone(),
            validation: triples.clone(),
            test: triples,
            seed: 0,
        };
        let cfg = BaselineConfig {
            kind: BaselineKind::Biased,
            factors: 8,
            epochs: 2000,
            batch_size: 16,
            learning_rate: 0.01,
            lambda: 0.0,
            early_stop_patience: 0,
            ..BaselineConfig::default()
        };
        let mut model = BaselineModel::init(cfg, &meta(4, 4), 3).expect("init");
        let report = fit(&mut model, &split).expect("fit");
        let last = report.epochs.last().expect("epochs");
        assert!(
            last.train_loss < 1e-3,
            "baseline should memorize the toy matrix, got {}",
            last.train_loss
        );
    }

    #[test]
    fn fit_is_seed_deterministic() {
        let triples: Vec<RatingTriple> = (0..40)
            .map(|i| RatingTriple {
                user: i % 5,
                item: (i * 3) % 7,
                rating: ((i * 11) % 5 + 1) as f64,
            })
            .collect();
        let split = split_dataset(&triples, 8).expect("split");
        let cfg = BaselineConfig {
            kind: BaselineKind::Biased,
            factors: 4,
            epochs: 5,
            batch_size: 8,
            early_stop_patience: 0,
            ..BaselineConfig::default()
        };
        let run = || {
            let mut model =
                BaselineModel::init(cfg, &meta(5, 7), 2).expect("init");
            let report = fit(&mut model, &split).expect("fit");
            (report.to_tsv(), model.predict(0, 0))
        };
        let (tsv_a, pred_a) = run();
        let (tsv_b, pred_b) = run();
        assert_eq!(tsv_a, tsv_b);
        assert_eq!(pred_a, pred_b);
    }
}
