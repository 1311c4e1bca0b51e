//! Model parameters: per-view center banks, per-entity mixing logits, and
//! optional bias terms, plus latent composition and rating prediction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DatasetMeta;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Which side of the interaction matrix an entity index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total latent dimension d; must equal `views * center_dim()`.
    pub latent_dim: usize,
    /// Number of views v.
    pub views: usize,
    /// Centers per view at initialization; pruning may reduce each view.
    pub centers_per_view: usize,
    /// One bank serves both sides when set.
    pub share_centers: bool,
    /// Adds mu + b_u + b_i to the dot-product prediction when set.
    pub use_biases: bool,
    pub range_min: f64,
    pub range_max: f64,
}

impl ModelConfig {
    /// Dimension b of a single center (= latent_dim / views).
    pub fn center_dim(&self) -> usize {
        self.latent_dim / self.views
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Config("views must be at least 1".to_string()));
        }
        if self.latent_dim == 0 || self.latent_dim % self.views != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by views {}",
                self.latent_dim, self.views
            )));
        }
        if self.centers_per_view < 3 {
            return Err(Error::Config(format!(
                "centers_per_view must be at least 3, got {}",
                self.centers_per_view
            )));
        }
        if !(self.range_min < self.range_max) {
            return Err(Error::Config(format!(
                "rating range [{}, {}] is empty",
                self.range_min, self.range_max
            )));
        }
        Ok(())
    }
}

/// One view's center matrix (alive x b) plus the original identity of each
/// surviving row, so pruned models can still report stable center IDs.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterView {
    pub centers: Matrix,
    pub original: Vec<usize>,
}

/// Center matrices for every view of one side (or of both, when shared).
#[derive(Clone, Debug, PartialEq)]
pub struct CenterBank {
    pub views: Vec<CenterView>,
}

impl CenterBank {
    pub fn alive(&self, view: usize) -> usize {
        self.views[view].centers.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Biases {
    pub mu: f64,
    pub user: Vec<f64>,
    pub item: Vec<f64>,
}

/// Full parameter set. When centers are shared, `item_centers` is `None` and
/// both sides read and write `user_centers`, so a mutation through either
/// side is observable through the other.
#[derive(Clone, Debug, PartialEq)]
pub struct MfdmcModel {
    pub config: ModelConfig,
    user_centers: CenterBank,
    item_centers: Option<CenterBank>,
    user_logits: Vec<Matrix>,
    item_logits: Vec<Matrix>,
    pub biases: Option<Biases>,
}

/// Numerically stable softmax (max-shifted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl MfdmcModel {
    /// Initializes a model for `meta.users` x `meta.items` entities.
    ///
    /// Draw order on the seeded stream (fixed so equal seeds give
    /// bit-identical parameters): user center views in order, each row-major,
    /// uniform in [0,1); item center views the same way unless shared; user
    /// logit tables per view, row-major, N(0, 0.01^2); item logit tables the
    /// same way. Biases start at zero with mu = meta.global_mean.
    pub fn init(config: ModelConfig, meta: &DatasetMeta, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.center_dim();
        let t = config.centers_per_view;
        let logit_noise = Normal::new(0.0, 0.01).expect("valid std");

        let draw_bank = |rng: &mut ChaCha8Rng| CenterBank {
            views: (0..config.views)
                .map(|_| {
                    let mut centers = Matrix::zeros(t, b);
                    for x in centers.data_mut() {
                        *x = rng.random::<f64>();
                    }
                    CenterView {
                        centers,
                        original: (0..t).collect(),
                    }
                })
                .collect(),
        };
        let user_centers = draw_bank(&mut rng);
        let item_centers = if config.share_centers {
            None
        } else {
            Some(draw_bank(&mut rng))
        };

        let draw_logits = |rng: &mut ChaCha8Rng, entities: usize| -> Vec<Matrix> {
            (0..config.views)
                .map(|_| {
                    let mut logits = Matrix::zeros(entities, t);
                    for x in logits.data_mut() {
                        *x = logit_noise.sample(rng);
                    }
                    logits
                })
                .collect()
        };
        let user_logits = draw_logits(&mut rng, meta.users);
        let item_logits = draw_logits(&mut rng, meta.items);

        let biases = config.use_biases.then(|| Biases {
            mu: meta.global_mean,
            user: vec![0.0; meta.users],
            item: vec![0.0; meta.items],
        });

        Ok(MfdmcModel {
            config,
            user_centers,
            item_centers,
            user_logits,
            item_logits,
            biases,
        })
    }

    /// Assembles a model from explicit parts, checking structural consistency
    /// (view counts, center dims, logit widths) but not the training-path
    /// rules of [`ModelConfig::validate`]; tests use this to build degenerate
    /// models (e.g. two centers in a view).
    pub fn from_parts(
        config: ModelConfig,
        user_centers: CenterBank,
        item_centers: Option<CenterBank>,
        user_logits: Vec<Matrix>,
        item_logits: Vec<Matrix>,
        biases: Option<Biases>,
    ) -> Result<Self> {
        let b = config.center_dim();
        if config.views == 0 || config.latent_dim != config.views * b {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by views {}",
                config.latent_dim, config.views
            )));
        }
        let check_bank = |bank: &CenterBank, name: &str| -> Result<()> {
            if bank.views.len() != config.views {
                return Err(Error::Config(format!(
                    "{name} bank has {} views, config says {}",
                    bank.views.len(),
                    config.views
                )));
            }
            for (j, view) in bank.views.iter().enumerate() {
                if view.centers.cols() != b {
                    return Err(Error::Config(format!(
                        "{name} view {j} has center dim {}, config says {b}",
                        view.centers.cols()
                    )));
                }
                if view.original.len() != view.centers.rows() {
                    return Err(Error::Config(format!(
                        "{name} view {j}: {} identity entries for {} centers",
                        view.original.len(),
                        view.centers.rows()
                    )));
                }
                if view.centers.rows() == 0 {
                    return Err(Error::Config(format!("{name} view {j} has no centers")));
                }
            }
            Ok(())
        };
        check_bank(&user_centers, "user")?;
        if let Some(bank) = &item_centers {
            check_bank(bank, "item")?;
        }
        if config.share_centers != item_centers.is_none() {
            return Err(Error::Config(
                "share_centers flag disagrees with presence of an item bank".to_string(),
            ));
        }

        let check_logits = |logits: &[Matrix], bank: &CenterBank, name: &str| -> Result<()> {
            if logits.len() != config.views {
                return Err(Error::Config(format!(
                    "{name} logits cover {} views, config says {}",
                    logits.len(),
                    config.views
                )));
            }
            let entities = logits.first().map_or(0, Matrix::rows);
            for (j, table) in logits.iter().enumerate() {
                if table.cols() != bank.alive(j) {
                    return Err(Error::Config(format!(
                        "{name} logits view {j} has width {}, bank has {} centers",
                        table.cols(),
                        bank.alive(j)
                    )));
                }
                if table.rows() != entities {
                    return Err(Error::Config(format!(
                        "{name} logits view {j} has {} rows, view 0 has {entities}",
                        table.rows()
                    )));
                }
            }
            Ok(())
        };
        check_logits(&user_logits, &user_centers, "user")?;
        check_logits(
            &item_logits,
            item_centers.as_ref().unwrap_or(&user_centers),
            "item",
        )?;

        if let Some(bias) = &biases {
            let (m, n) = (
                user_logits.first().map_or(0, Matrix::rows),
                item_logits.first().map_or(0, Matrix::rows),
            );
            if bias.user.len() != m || bias.item.len() != n {
                return Err(Error::Config(format!(
                    "bias lengths {}/{} disagree with entity counts {m}/{n}",
                    bias.user.len(),
                    bias.item.len()
                )));
            }
        }

        Ok(MfdmcModel {
            config,
            user_centers,
            item_centers,
            user_logits,
            item_logits,
            biases,
        })
    }

    pub fn is_shared(&self) -> bool {
        self.item_centers.is_none()
    }

    pub fn centers(&self, side: Side) -> &CenterBank {
        match side {
            Side::User => &self.user_centers,
            Side::Item => self.item_centers.as_ref().unwrap_or(&self.user_centers),
        }
    }

    /// Mutable access to the bank serving `side`; with shared centers both
    /// sides resolve to the same storage.
    pub fn centers_mut(&mut self, side: Side) -> &mut CenterBank {
        match side {
            Side::User => &mut self.user_centers,
            Side::Item => self.item_centers.as_mut().unwrap_or(&mut self.user_centers),
        }
    }

    pub fn logits(&self, side: Side) -> &[Matrix] {
        match side {
            Side::User => &self.user_logits,
            Side::Item => &self.item_logits,
        }
    }

    pub fn logits_mut(&mut self, side: Side) -> &mut [Matrix] {
        match side {
            Side::User => &mut self.user_logits,
            Side::Item => &mut self.item_logits,
        }
    }

    pub fn num_entities(&self, side: Side) -> usize {
        self.logits(side).first().map_or(0, Matrix::rows)
    }

    pub fn alive(&self, side: Side, view: usize) -> usize {
        self.centers(side).alive(view)
    }

    /// Softmax mixing weights of one entity over one view's alive centers.
    pub fn view_weights(&self, side: Side, entity: usize, view: usize) -> Vec<f64> {
        softmax(self.logits(side)[view].row(entity))
    }

    /// One view's sub-vector: the weights-weighted sum of that view's centers.
    pub fn view_subvector(&self, side: Side, entity: usize, view: usize) -> Vec<f64> {
        let weights = self.view_weights(side, entity, view);
        self.view_subvector_with(side, view, &weights)
    }

    /// Same as [`view_subvector`](Self::view_subvector) with precomputed weights.
    pub fn view_subvector_with(&self, side: Side, view: usize, weights: &[f64]) -> Vec<f64> {
        let bank = &self.centers(side).views[view];
        let mut sub = vec![0.0; bank.centers.cols()];
        for (i, &w) in weights.iter().enumerate() {
            for (s, c) in sub.iter_mut().zip(bank.centers.row(i)) {
                *s += w * c;
            }
        }
        sub
    }

    /// The entity's full d-dimensional latent vector: per-view sub-vectors
    /// concatenated in view order (view 0 leftmost).
    pub fn compose_latent(&self, side: Side, entity: usize) -> Vec<f64> {
        let mut latent = Vec::with_capacity(self.config.latent_dim);
        for view in 0..self.config.views {
            latent.extend(self.view_subvector(side, entity, view));
        }
        latent
    }

    /// Predicted rating: dot product of the composed latents, plus
    /// mu + b_u + b_i when biases are enabled. Never clamped here.
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        let p = self.compose_latent(Side::User, user);
        let q = self.compose_latent(Side::Item, item);
        let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        match &self.biases {
            Some(bias) => bias.mu + bias.user[user] + bias.item[item] + dot,
            None => dot,
        }
    }
}
