//! Training loop: minibatch updates with ramped regularizer coefficients,
//! population-based center pruning after a warmup, early stopping on
//! validation RMSE, and checkpoint persistence.

pub mod checkpoint;
pub mod gradients;
pub mod optim;

pub use gradients::{compute_gradients, gradient_check, GradCheckBlock, Gradients};
pub use optim::{OptimHyper, OptimizerKind};

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, RatingTriple};
use crate::error::{Error, Result};
use crate::losses::{LossParams, WeightLossKind};
use crate::model::{softmax, CenterBank, MfdmcModel, Side};
use optim::{update_scalar, update_slice, MomentPair, VecMoments};

/// Pruning threshold: one over the view's alive count, or a fixed cut.
///
/// Serialized as `"one-over-t"` or `{ fixed = 0.05 }`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiMode {
    OneOverT,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Final spread/proximity coefficient after the ramp.
    pub eta_max: f64,
    /// Final weight-sharpening coefficient after the ramp.
    pub gamma_max: f64,
    /// Epochs over which eta/gamma rise linearly from zero.
    pub ramp_epochs: usize,
    /// Completed epochs before pruning may start.
    pub prune_warmup: usize,
    pub psi: PsiMode,
    /// Centers every view keeps no matter how unpopular.
    pub min_centers: usize,
    /// Prune cadence in epochs once past the warmup.
    pub prune_every: usize,
    /// Weight decay on composed latents and biases.
    pub lambda: f64,
    /// Spread hinge margin on normalized centers.
    pub rho: f64,
    pub weight_loss: WeightLossKind,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1024,
            learning_rate: 0.003,
            optimizer: OptimizerKind::AdaptiveMoment,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eta_max: 0.05,
            gamma_max: 0.01,
            ramp_epochs: 40,
            prune_warmup: 40,
            psi: PsiMode::OneOverT,
            min_centers: 3,
            prune_every: 1,
            lambda: 0.05,
            rho: 1.0,
            weight_loss: WeightLossKind::MappedEntropy,
            seed: 1,
            early_stop_patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> OptimHyper {
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
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if self.min_centers == 0 {
            return Err(Error::Config("min_centers must be at least 1".to_string()));
        }
        if self.prune_every == 0 {
            return Err(Error::Config("prune_every must be at least 1".to_string()));
        }
        for (name, x) in [
            ("eta_max", self.eta_max),
            ("gamma_max", self.gamma_max),
            ("lambda", self.lambda),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {x}")));
            }
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if let PsiMode::Fixed(x) = self.psi {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Config(format!(
                    "fixed psi must lie in [0, 1], got {x}"
                )));
            }
        }
        Ok(())
    }
}

/// Regularizer coefficients at a 0-based epoch: a linear rise over
/// `ramp_epochs`, constant at the configured maxima afterwards.
pub fn ramp_coefficients(config: &TrainConfig, epoch: usize) -> (f64, f64) {
    let fraction = if config.ramp_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / config.ramp_epochs as f64).min(1.0)
    };
    (config.eta_max * fraction, config.gamma_max * fraction)
}

/// One view's removals in a prune pass. Row positions are as of the moment
/// of this event (earlier events already applied), ascending.
#[derive(Clone, Debug)]
pub struct PruneEvent {
    pub side: Side,
    pub view: usize,
    pub removed_rows: Vec<usize>,
    /// Original (pre-pruning) identities of the removed centers.
    pub removed_original: Vec<usize>,
    /// Population-mean softmax weight of each removed center.
    pub mean_weights: Vec<f64>,
    /// Threshold in force when the view was examined.
    pub psi: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PruneReport {
    pub events: Vec<PruneEvent>,
}

impl PruneReport {
    pub fn removed(&self) -> usize {
        self.events.iter().map(|e| e.removed_rows.len()).sum()
    }
}

/// Mean softmax weight per center of one (side, view) over every entity of
/// that side.
fn population_mean_weights(model: &MfdmcModel, side: Side, view: usize) -> Vec<f64> {
    let logits = &model.logits(side)[view];
    let mut sums = vec![0.0; logits.cols()];
    for r in 0..logits.rows() {
        for (s, w) in sums.iter_mut().zip(softmax(logits.row(r))) {
            *s += w;
        }
    }
    let inv = 1.0 / logits.rows() as f64;
    for s in &mut sums {
        *s *= inv;
    }
    sums
}

/// Removes centers whose population-mean weight fell below the threshold.
///
/// `epoch` counts completed epochs (1-based). Nothing happens during the
/// warmup or off the `prune_every` cadence. Views at or below `min_centers`
/// are left alone; when removing every below-threshold center would sink a
/// view under the floor, the view keeps its top `min_centers` centers by
/// mean weight and removes only the remaining candidates. Sides are
/// processed user-first, so with a shared bank the item pass sees the user
/// pass's removals already applied.
pub fn prune_centers(model: &mut MfdmcModel, config: &TrainConfig, epoch: usize) -> PruneReport {
    let mut report = PruneReport::default();
    if epoch <= config.prune_warmup
        || (epoch - config.prune_warmup) % config.prune_every.max(1) != 0
    {
        return report;
    }
    for side in [Side::User, Side::Item] {
        for view in 0..model.config.views {
            let alive = model.alive(side, view);
            if alive <= config.min_centers {
                continue;
            }
            let wbar = population_mean_weights(model, side, view);
            let psi = match config.psi {
                PsiMode::OneOverT => 1.0 / alive as f64,
                PsiMode::Fixed(x) => x,
            };
            let mut candidates: Vec<usize> = (0..alive).filter(|&i| wbar[i] < psi).collect();
            if alive - candidates.len() < config.min_centers {
                let mut order: Vec<usize> = (0..alive).collect();
                order.sort_by(|&a, &b| {
                    wbar[b]
                        .partial_cmp(&wbar[a])
                        .expect("mean weights are finite")
                        .then(a.cmp(&b))
                });
                let retained: HashSet<usize> = order[..config.min_centers].iter().copied().collect();
                candidates.retain(|i| !retained.contains(i));
            }
            if candidates.is_empty() {
                continue;
            }
            report.events.push(PruneEvent {
                side,
                view,
                removed_rows: candidates.clone(),
                removed_original: {
                    let originals = &model.centers(side).views[view].original;
                    candidates.iter().map(|&i| originals[i]).collect()
                },
                mean_weights: candidates.iter().map(|&i| wbar[i]).collect(),
                psi,
            });
            remove_centers(model, side, view, &candidates);
        }
    }
    report
}

/// Deletes the given center rows and the matching logit columns. With a
/// shared bank, both sides lose the logit columns (their logits index the
/// same center rows).
fn remove_centers(model: &mut MfdmcModel, side: Side, view: usize, rows: &[usize]) {
    let shared = model.is_shared();
    {
        let bank = model.centers_mut(side);
        for &r in rows.iter().rev() {
            bank.views[view].centers.remove_row(r);
            bank.views[view].original.remove(r);
        }
    }
    for &r in rows.iter().rev() {
        model.logits_mut(side)[view].remove_col(r);
    }
    if shared {
        let other = match side {
            Side::User => Side::Item,
            Side::Item => Side::User,
        };
        for &r in rows.iter().rev() {
            model.logits_mut(other)[view].remove_col(r);
        }
    }
}

struct BiasMoments {
    mu_m: f64,
    mu_v: f64,
    user: VecMoments,
    item: VecMoments,
}

struct AdamState {
    user_centers: Vec<MomentPair>,
    item_centers: Option<Vec<MomentPair>>,
    user_logits: Vec<MomentPair>,
    item_logits: Vec<MomentPair>,
    biases: Option<BiasMoments>,
}

impl AdamState {
    fn like(model: &MfdmcModel) -> Self {
        let bank_state = |bank: &CenterBank| -> Vec<MomentPair> {
            bank.views
                .iter()
                .map(|v| MomentPair::like(&v.centers))
                .collect()
        };
        let logit_state = |side: Side| -> Vec<MomentPair> {
            model.logits(side).iter().map(MomentPair::like).collect()
        };
        AdamState {
            user_centers: bank_state(model.centers(Side::User)),
            item_centers: (!model.is_shared()).then(|| bank_state(model.centers(Side::Item))),
            user_logits: logit_state(Side::User),
            item_logits: logit_state(Side::Item),
            biases: model.biases.as_ref().map(|b| BiasMoments {
                mu_m: 0.0,
                mu_v: 0.0,
                user: VecMoments::zeros(b.user.len()),
                item: VecMoments::zeros(b.item.len()),
            }),
        }
    }
}

/// Applies gradient updates to a model, owning whatever per-parameter state
/// the update rule needs. Center matrices update densely every step; logit
/// and bias rows update only for the entities a batch touched.
pub struct Optimizer {
    hyper: OptimHyper,
    step: u64,
    state: Option<AdamState>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, model: &MfdmcModel) -> Result<Self> {
        let hyper = config.hyper();
        hyper.validate()?;
        let state =
            (hyper.kind == OptimizerKind::AdaptiveMoment).then(|| AdamState::like(model));
        Ok(Optimizer {
            hyper,
            step: 0,
            state,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update step over every block the gradients cover.
    pub fn apply(&mut self, model: &mut MfdmcModel, grads: &Gradients) {
        self.step += 1;
        let step = self.step;
        let hyper = self.hyper;
        let views = model.config.views;

        for (view, g) in grads.user_centers.iter().enumerate() {
            let moments = self.state.as_mut().map(|s| {
                let p = &mut s.user_centers[view];
                (p.m.data_mut(), p.v.data_mut())
            });
            update_slice(
                model.centers_mut(Side::User).views[view].centers.data_mut(),
                g.data(),
                moments,
                &hyper,
                step,
            );
        }
        if let Some(item_grads) = &grads.item_centers {
            for (view, g) in item_grads.iter().enumerate() {
                let moments = self.state.as_mut().map(|s| {
                    let p = &mut s.item_centers.as_mut().expect("split banks")[view];
                    (p.m.data_mut(), p.v.data_mut())
                });
                update_slice(
                    model.centers_mut(Side::Item).views[view].centers.data_mut(),
                    g.data(),
                    moments,
                    &hyper,
                    step,
                );
            }
        }

        for (side, entities, g_logits) in [
            (Side::User, &grads.users, &grads.user_logits),
            (Side::Item, &grads.items, &grads.item_logits),
        ] {
            for view in 0..views {
                for (pos, &entity) in entities.iter().enumerate() {
                    let moments = self.state.as_mut().map(|s| {
                        let p = match side {
                            Side::User => &mut s.user_logits[view],
                            Side::Item => &mut s.item_logits[view],
                        };
                        (p.m.row_mut(entity), p.v.row_mut(entity))
                    });
                    update_slice(
                        model.logits_mut(side)[view].row_mut(entity),
                        g_logits[view].row(pos),
                        moments,
                        &hyper,
                        step,
                    );
                }
            }
        }

        if let Some(bias) = &mut model.biases {
            let state_bias = self.state.as_mut().map(|s| {
                s.biases.as_mut().expect("bias moments follow model biases")
            });
            match state_bias {
                Some(sb) => {
                    update_scalar(
                        &mut bias.mu,
                        grads.mu,
                        Some((&mut sb.mu_m, &mut sb.mu_v)),
                        &hyper,
                        step,
                    );
                    for (pos, &e) in grads.users.iter().enumerate() {
                        update_scalar(
                            &mut bias.user[e],
                            grads.user_biases[pos],
                            Some((&mut sb.user.m[e], &mut sb.user.v[e])),
                            &hyper,
                            step,
                        );
                    }
                    for (pos, &e) in grads.items.iter().enumerate() {
                        update_scalar(
                            &mut bias.item[e],
                            grads.item_biases[pos],
                            Some((&mut sb.item.m[e], &mut sb.item.v[e])),
                            &hyper,
                            step,
                        );
                    }
                }
                None => {
                    update_scalar(&mut bias.mu, grads.mu, None, &hyper, step);
                    for (pos, &e) in grads.users.iter().enumerate() {
                        update_scalar(&mut bias.user[e], grads.user_biases[pos], None, &hyper, step);
                    }
                    for (pos, &e) in grads.items.iter().enumerate() {
                        update_scalar(&mut bias.item[e], grads.item_biases[pos], None, &hyper, step);
                    }
                }
            }
        }
    }

    /// Mirrors a prune's structural edits onto the moment state so moments
    /// stay row/column-aligned with their parameters.
    pub fn apply_prune(&mut self, report: &PruneReport, shared: bool) {
        let Some(state) = &mut self.state else {
            return;
        };
        for event in &report.events {
            let bank = match (event.side, &mut state.item_centers) {
                (Side::Item, Some(b)) => b,
                _ => &mut state.user_centers,
            };
            for &r in event.removed_rows.iter().rev() {
                bank[event.view].m.remove_row(r);
                bank[event.view].v.remove_row(r);
            }
            let both = [Side::User, Side::Item];
            let sides: &[Side] = if shared { &both } else { std::slice::from_ref(&event.side) };
            for &s in sides {
                let logits = match s {
                    Side::User => &mut state.user_logits,
                    Side::Item => &mut state.item_logits,
                };
                for &r in event.removed_rows.iter().rev() {
                    logits[event.view].m.remove_col(r);
                    logits[event.view].v.remove_col(r);
                }
            }
        }
    }
}

/// One epoch of the training log. Loss columns are batch-size-weighted means
/// of the per-batch terms; alive counts are taken after that epoch's prune.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub total: f64,
    pub eta: f64,
    pub gamma: f64,
    pub user_alive: Vec<usize>,
    pub item_alive: Vec<usize>,
    pub val_rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub pruned_centers: usize,
}

impl TrainReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "epoch\tloss1\tloss2\tloss3\ttotal\teta\tgamma\tuser_alive\titem_alive\tval_rmse\n",
        );
        let join = |counts: &[usize]| {
            counts
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        for r in &self.epochs {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch,
                r.loss1,
                r.loss2,
                r.loss3,
                r.total,
                r.eta,
                r.gamma,
                join(&r.user_alive),
                join(&r.item_alive),
                r.val_rmse
            )
            .expect("string write");
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

fn alive_counts(model: &MfdmcModel, side: Side) -> Vec<usize> {
    (0..model.config.views)
        .map(|v| model.alive(side, v))
        .collect()
}

/// Trains in place and returns the epoch log. The model ends at the weights
/// of its best validation epoch, not the last one.
pub fn fit(model: &mut MfdmcModel, split: &DatasetSplit, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Config(
            "training needs nonempty train and validation splits".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config, model)?;
    let mut order: Vec<RatingTriple> = split.train.clone();
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, MfdmcModel)> = None;
    let mut stale = 0usize;
    let mut pruned_total = 0usize;

    for e in 0..config.epochs {
        let (eta, gamma) = ramp_coefficients(config, e);
        let params = LossParams {
            eta,
            gamma,
            lambda: config.lambda,
            rho: config.rho,
            weight_loss: config.weight_loss,
        };
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for batch in order.chunks(config.batch_size) {
            let (grads, bd) = compute_gradients(model, batch, &params)?;
            optimizer.apply(model, &grads);
            let w = batch.len() as f64;
            sums[0] += bd.loss1 * w;
            sums[1] += bd.loss2 * w;
            sums[2] += bd.loss3 * w;
            sums[3] += bd.total * w;
        }
        let n = order.len() as f64;
        let completed = e + 1;

        let prune_report = prune_centers(model, config, completed);
        pruned_total += prune_report.removed();
        optimizer.apply_prune(&prune_report, model.is_shared());

        let val_rmse =
            crate::eval::evaluate(model, &split.validation, true, "validation")?.rmse;
        rows.push(EpochRow {
            epoch: completed,
            loss1: sums[0] / n,
            loss2: sums[1] / n,
            loss3: sums[2] / n,
            total: sums[3] / n,
            eta,
            gamma,
            user_alive: alive_counts(model, Side::User),
            item_alive: alive_counts(model, Side::Item),
            val_rmse,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_rmse < *b);
        if improved {
            best = Some((val_rmse, completed, model.clone()));
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
    Ok(TrainReport {
        epochs: rows,
        best_epoch,
        best_val_rmse,
        pruned_centers: pruned_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_dataset, DatasetMeta};
    use crate::matrix::Matrix;
    use crate::model::{CenterView, ModelConfig};

    fn meta(users: usize, items: usize, interactions: usize) -> DatasetMeta {
        DatasetMeta {
            users,
            items,
            interactions,
            range_min: 1.0,
            range_max: 5.0,
            global_mean: 3.0,
        }
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            eta_max: 0.1,
            gamma_max: 0.02,
            ramp_epochs: 2,
            prune_warmup: 1,
            early_stop_patience: 0,
            ..TrainConfig::default()
        }
    }

    /// Model with chosen per-view weight rows for a single user and item;
    /// logits ln(w) reproduce the weights exactly under softmax.
    fn weighted_model(user_weights: &[Vec<f64>], item_weights: &[Vec<f64>]) -> MfdmcModel {
        let views = user_weights.len();
        let t = user_weights[0].len();
        let cfg = ModelConfig {
            latent_dim: 2 * views,
            views,
            centers_per_view: t,
            share_centers: true,
            use_biases: false,
            range_min: 1.0,
            range_max: 5.0,
        };
        let bank = CenterBank {
            views: (0..views)
                .map(|v| CenterView {
                    centers: Matrix::from_rows(
                        &(0..t).map(|i| vec![i as f64, v as f64]).collect::<Vec<_>>(),
                    ),
                    original: (0..t).collect(),
                })
                .collect(),
        };
        let to_logits = |weights: &[Vec<f64>]| -> Vec<Matrix> {
            weights
                .iter()
                .map(|w| Matrix::from_rows(&[w.iter().map(|&x: &f64| x.ln()).collect()]))
                .collect()
        };
        MfdmcModel::from_parts(
            cfg,
            bank,
            None,
            to_logits(user_weights),
            to_logits(item_weights),
            None,
        )
        .expect("weighted model")
    }

    #[test]
    fn ramp_is_linear_then_flat() {
        let cfg = TrainConfig {
            eta_max: 0.8,
            gamma_max: 0.4,
            ramp_epochs: 40,
            ..TrainConfig::default()
        };
        assert_eq!(ramp_coefficients(&cfg, 0), (0.0, 0.0));
        assert_eq!(ramp_coefficients(&cfg, 20), (0.4, 0.2));
        assert_eq!(ramp_coefficients(&cfg, 40), (0.8, 0.4));
        assert_eq!(ramp_coefficients(&cfg, 4000), (0.8, 0.4));

        let instant = TrainConfig {
            ramp_epochs: 0,
            ..cfg
        };
        assert_eq!(ramp_coefficients(&instant, 0), (0.8, 0.4), "ramp 0 starts at max");
    }

    #[test]
    fn prune_waits_for_warmup_and_cadence() {
        let cfg = TrainConfig {
            prune_warmup: 3,
            prune_every: 2,
            min_centers: 3,
            ..TrainConfig::default()
        };
        // one dominant center, the rest starved: prunes as soon as allowed
        let weights = vec![vec![0.85, 0.05, 0.04, 0.03, 0.03]];
        for epoch in [1, 2, 3, 4, 6] {
            let mut model = weighted_model(&weights, &weights);
            let report = prune_centers(&mut model, &cfg, epoch);
            assert!(
                report.events.is_empty(),
                "epoch {epoch} should not prune (warmup 3, every 2)"
            );
        }
        let mut model = weighted_model(&weights, &weights);
        let report = prune_centers(&mut model, &cfg, 5);
        assert!(!report.events.is_empty(), "epoch 5 is on the cadence");
    }

    #[test]
    fn prune_removes_exactly_the_starved_center() {
        // alive=5, psi=0.2; only center 1 sits below it, everything else
        // clears the threshold by a margin far above softmax round-off
        let weights = vec![vec![0.30, 0.06, 0.22, 0.21, 0.21]];
        let mut model = weighted_model(&weights, &[vec![0.2; 5]]);
        let cfg = TrainConfig {
            prune_warmup: 0,
            min_centers: 3,
            ..TrainConfig::default()
        };
        let report = prune_centers(&mut model, &cfg, 1);
        // user view drops center 1; the item view (uniform weights, all at
        // psi exactly) must be untouched since the cut is strict
        assert_eq!(report.events.len(), 1);
        let event = &report.events[0];
        assert_eq!(event.side, Side::User);
        assert_eq!(event.removed_rows, vec![1]);
        assert_eq!(event.removed_original, vec![1]);
        assert!(event.mean_weights[0] < event.psi);
        assert_eq!(model.alive(Side::User, 0), 4);
        // shared bank: item logits lost the same column
        assert_eq!(model.logits(Side::Item)[0].cols(), 4);
    }

    #[test]
    fn prune_floor_keeps_top_centers_by_weight() {
        // four of six below psi=1/6; removing all four would leave two, so
        // the floor retains the best three. The 0.05 tie resolves to the
        // lower row index, which survives.
        let weights = vec![vec![0.5, 0.3, 0.05, 0.05, 0.05, 0.05]];
        let uniform = vec![vec![1.0 / 6.0; 6]];
        let mut model = weighted_model(&weights, &uniform);
        let cfg = TrainConfig {
            prune_warmup: 0,
            min_centers: 3,
            ..TrainConfig::default()
        };
        let report = prune_centers(&mut model, &cfg, 1);
        assert_eq!(model.alive(Side::User, 0), 3);
        let event = &report.events[0];
        assert_eq!(event.removed_rows, vec![3, 4, 5], "retains rows 0, 1 and the tied row 2");
        assert_eq!(model.centers(Side::User).views[0].original, vec![0, 1, 2]);
    }

    #[test]
    fn prune_never_sinks_below_the_floor() {
        let weights = vec![vec![0.9, 0.05, 0.05]];
        let mut model = weighted_model(&weights, &weights);
        let cfg = TrainConfig {
            prune_warmup: 0,
            min_centers: 3,
            ..TrainConfig::default()
        };
        let report = prune_centers(&mut model, &cfg, 1);
        assert!(report.events.is_empty(), "view already at the floor");
        assert_eq!(model.alive(Side::User, 0), 3);
    }

    #[test]
    fn removing_a_zero_weight_center_preserves_latents() {
        // logit -2000 underflows to softmax weight exactly 0
        let cfg = ModelConfig {
            latent_dim: 2,
            views: 1,
            centers_per_view: 4,
            share_centers: true,
            use_biases: false,
            range_min: 1.0,
            range_max: 5.0,
        };
        let bank = CenterBank {
            views: vec![CenterView {
                centers: Matrix::from_rows(&[
                    vec![0.1, 0.2],
                    vec![0.3, 0.4],
                    vec![0.5, 0.6],
                    vec![0.7, 0.8],
                ]),
                original: vec![0, 1, 2, 3],
            }],
        };
        let logits = vec![Matrix::from_rows(&[vec![0.4, 0.2, 0.1, -2000.0]])];
        let mut model = MfdmcModel::from_parts(
            cfg,
            bank,
            None,
            logits.clone(),
            logits,
            None,
        )
        .expect("model");
        assert_eq!(model.view_weights(Side::User, 0, 0)[3], 0.0);
        let before = model.compose_latent(Side::User, 0);

        let train_cfg = TrainConfig {
            prune_warmup: 0,
            min_centers: 3,
            ..TrainConfig::default()
        };
        let report = prune_centers(&mut model, &train_cfg, 1);
        assert_eq!(report.removed(), 1);
        assert_eq!(model.alive(Side::User, 0), 3);
        assert_eq!(
            model.logits(Side::Item)[0].cols(),
            3,
            "shared bank: the other side's logits lose the column too"
        );
        let after = model.compose_latent(Side::User, 0);
        assert_eq!(before, after, "zero-weight removal must not move the latent");
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_epoch() {
        let meta = meta(6, 5, 40);
        let triples: Vec<RatingTriple> = (0..40)
            .map(|i| RatingTriple {
                user: i % 6,
                item: (i * 7) % 5,
                rating: ((i * 3) % 5 + 1) as f64,
            })
            .collect();
        let split = split_dataset(&triples, 3).expect("split");
        let model_cfg = ModelConfig {
            latent_dim: 4,
            views: 2,
            centers_per_view: 3,
            share_centers: false,
            use_biases: true,
            range_min: 1.0,
            range_max: 5.0,
        };
        let cfg = quick_config();

        let run = || -> (TrainReport, f64) {
            let mut model = MfdmcModel::init(model_cfg, &meta, 7).expect("init");
            let report = fit(&mut model, &split, &cfg).expect("fit");
            (report, model.predict(0, 0))
        };
        let (report_a, pred_a) = run();
        let (report_b, pred_b) = run();
        assert_eq!(report_a.to_tsv(), report_b.to_tsv(), "same seed, same log");
        assert_eq!(pred_a, pred_b, "same seed, same final model");
        assert_eq!(report_a.epochs.len(), 3);
        assert_eq!(report_a.epochs[0].epoch, 1);
        assert_eq!(report_a.epochs[0].eta, 0.0, "ramp starts at zero");
        assert!(report_a.best_val_rmse.is_finite());
    }

    #[test]
    fn fit_restores_the_best_epoch_weights() {
        let meta = meta(5, 5, 30);
        let triples: Vec<RatingTriple> = (0..30)
            .map(|i| RatingTriple {
                user: i % 5,
                item: (i * 3) % 5,
                rating: ((i * 7) % 5 + 1) as f64,
            })
            .collect();
        let split = split_dataset(&triples, 1).expect("split");
        let model_cfg = ModelConfig {
            latent_dim: 4,
            views: 2,
            centers_per_view: 3,
            share_centers: true,
            use_biases: true,
            range_min: 1.0,
            range_max: 5.0,
        };
        let mut model = MfdmcModel::init(model_cfg, &meta, 2).expect("init");
        let report = fit(&mut model, &split, &quick_config()).expect("fit");
        let restored =
            crate::eval::evaluate(&model, &split.validation, true, "validation").expect("eval");
        assert!(
            (restored.rmse - report.best_val_rmse).abs() < 1e-12,
            "returned model should reproduce the best validation RMSE: {} vs {}",
            restored.rmse,
            report.best_val_rmse
        );
    }

    #[test]
    fn early_stopping_quits_after_patience_epochs() {
        // a model whose training example it already predicts exactly: every
        // gradient is zero, so validation RMSE repeats and only the first
        // epoch counts as an improvement under the strict comparison
        let weights = vec![vec![0.25, 0.5, 0.25]];
        let mut model = weighted_model(&weights, &weights);
        let rating = model.predict(0, 0);
        let triple = RatingTriple { user: 0, item: 0, rating };
        let split = DatasetSplit {
            train: vec![triple],
            validation: vec![triple],
            test: vec![],
            seed: 7,
        };
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            eta_max: 0.0,
            gamma_max: 0.0,
            lambda: 0.0,
            early_stop_patience: 3,
            prune_warmup: 100,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, &split, &cfg).expect("fit");
        assert_eq!(
            report.epochs.len(),
            4,
            "patience 3 with no improvement stops after four epochs"
        );
        assert_eq!(report.best_epoch, 1);
        for row in &report.epochs {
            assert_eq!(row.val_rmse, report.best_val_rmse, "nothing ever moves");
        }
    }

    #[test]
    fn training_continues_cleanly_after_pruning() {
        // forces prunes between update steps and checks the optimizer state
        // stays aligned (misalignment would panic in update_slice)
        let meta = meta(8, 8, 64);
        let triples: Vec<RatingTriple> = (0..64)
            .map(|i| RatingTriple {
                user: i % 8,
                item: (i * 5) % 8,
                rating: ((i * 11) % 5 + 1) as f64,
            })
            .collect();
        let split = split_dataset(&triples, 9).expect("split");
        for shared in [true, false] {
            let model_cfg = ModelConfig {
                latent_dim: 4,
                views: 2,
                centers_per_view: 6,
                share_centers: shared,
                use_biases: true,
                range_min: 1.0,
                range_max: 5.0,
            };
            let cfg = TrainConfig {
                epochs: 12,
                batch_size: 16,
                prune_warmup: 2,
                prune_every: 1,
                ramp_epochs: 2,
                eta_max: 0.2,
                gamma_max: 0.3,
                early_stop_patience: 0,
                ..TrainConfig::default()
            };
            let mut model = MfdmcModel::init(model_cfg, &meta, 4).expect("init");
            let report = fit(&mut model, &split, &cfg).expect("fit");
            for side in [Side::User, Side::Item] {
                for view in 0..2 {
                    let alive = model.alive(side, view);
                    assert!(
                        (3..=6).contains(&alive),
                        "shared={shared}: alive count {alive} out of range"
                    );
                    assert_eq!(model.logits(side)[view].cols(), alive);
                }
            }
            assert!(report.epochs.len() == 12);
        }
    }

    #[test]
    fn memorizes_a_fully_observed_toy_matrix() {
        // 4x4 with every cell observed: capacity far exceeds data, so the
        // rating loss must collapse
        let mut triples = Vec::new();
        for u in 0..4 {
            for i in 0..4 {
                triples.push(RatingTriple {
                    user: u,
                    item: i,
                    rating: ((u * i) % 5 + 1) as f64,
                });
            }
        }
        let split = DatasetSplit {
            train: triples.clone(),
            validation: triples.clone(),
            test: triples,
            seed: 0,
        };
        let model_cfg = ModelConfig {
            latent_dim: 8,
            views: 2,
            centers_per_view: 4,
            share_centers: false,
            use_biases: true,
            range_min: 1.0,
            range_max: 5.0,
        };
        let meta = meta(4, 4, 16);
        let cfg = TrainConfig {
            epochs: 2000,
            batch_size: 16,
            learning_rate: 0.01,
            eta_max: 0.0,
            gamma_max: 0.0,
            lambda: 0.0,
            prune_warmup: usize::MAX,
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        let mut model = MfdmcModel::init(model_cfg, &meta, 6).expect("init");
        let report = fit(&mut model, &split, &cfg).expect("fit");
        let final_loss3 = report.epochs.last().expect("epochs").loss3;
        assert!(
            final_loss3 < 1e-3,
            "rating loss should memorize the toy matrix, got {final_loss3}"
        );
    }
}
