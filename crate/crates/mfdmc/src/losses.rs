//! Objective terms: center spread, center proximity, weight entropy (two
//! variants), rating error, weight decay, and their weighted total.
//!
//! Entity-level terms (proximity, entropy, decay) are means over the distinct
//! entities of a batch; the rating term is a mean over the batch triples.
//! This keeps every term's scale independent of batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{CenterBank, MfdmcModel, Side};
use crate::data::RatingTriple;

/// Which sharpening loss the gamma coefficient applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightLossKind {
    /// Entropy of softmax weights passed through [`map_weight`].
    MappedEntropy,
    /// Entropy of raw softmax weights offset by the live center count.
    UniformOffset,
}

/// Coefficients for one evaluation of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub rho: f64,
    pub weight_loss: WeightLossKind,
}

/// Every term of one objective evaluation, before and after weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub spread_user: f64,
    pub spread_item: f64,
    pub proximity_user: f64,
    pub proximity_item: f64,
    /// spread_user + spread_item + proximity_user + proximity_item.
    pub loss1: f64,
    pub loss2_user: f64,
    pub loss2_item: f64,
    pub loss2: f64,
    /// Mean squared rating error over the batch.
    pub loss3: f64,
    pub weight_decay: f64,
    /// eta*loss1 + gamma*loss2 + loss3 + lambda*weight_decay.
    pub total: f64,
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

/// Σ (a_k - b_k)².
pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// max{0, rho - squared_distance(a, b)}.
pub fn pairwise_hinge(a: &[f64], b: &[f64], rho: f64) -> Result<f64> {
    Ok((rho - squared_distance(a, b)?).max(0.0))
}

/// (C - min) / (max - min) over the whole matrix; a constant matrix maps to
/// all zeros (the degenerate max = min case).
pub fn minmax_normalize_view(centers: &Matrix) -> Matrix {
    let min = centers.iter().copied().fold(f64::INFINITY, f64::min);
    let max = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = centers.clone();
    if max > min {
        let span = max - min;
        for x in out.data_mut() {
            *x = (*x - min) / span;
        }
    } else {
        out.fill(0.0);
    }
    out
}

/// Hinge penalty over unordered center pairs within each view, computed on
/// min-max normalized centers, summed across views. Views with one alive
/// center contribute 0.
pub fn spread_loss(bank: &CenterBank, rho: f64) -> f64 {
    let mut total = 0.0;
    for view in &bank.views {
        let normalized = minmax_normalize_view(&view.centers);
        let t = normalized.rows();
        for a in 0..t {
            for b in a + 1..t {
                total += pairwise_hinge(normalized.row(a), normalized.row(b), rho)
                    .expect("rows of one matrix have equal length");
            }
        }
    }
    total
}

/// Position of the largest value; ties break toward the lowest index.
pub(crate) fn argmax_tie_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate() {
        if x > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the entity's highest-weight center in a view; ties break toward
/// the lowest index.
pub fn assign_cluster(model: &MfdmcModel, side: Side, entity: usize, view: usize) -> usize {
    argmax_tie_low(&model.view_weights(side, entity, view))
}

/// Mean over batch entities of the squared distance between each view
/// sub-vector and its assigned (raw, unnormalized) center, summed over views.
pub fn proximity_loss(model: &MfdmcModel, side: Side, batch: &[usize]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for &entity in batch {
        for view in 0..model.config.views {
            let sub = model.view_subvector(side, entity, view);
            let assigned = assign_cluster(model, side, entity, view);
            let center = model.centers(side).views[view].centers.row(assigned);
            total += squared_distance(center, &sub)?;
        }
    }
    Ok(total / batch.len() as f64)
}

/// Piecewise-linear remap of a softmax weight so that the uniform value 1/t
/// lands exactly on 1/e (the maximizer of -x ln x): (t/e)w below the knee,
/// a line from (1/t, 1/e) to (1, 1) above it.
pub fn map_weight(w: f64, t: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::WeightOutOfRange(w));
    }
    if t < 2 {
        return Err(Error::Config(format!(
            "weight mapping needs at least 2 centers, got {t}"
        )));
    }
    let t = t as f64;
    let e_inv = (-1.0_f64).exp();
    if w <= 1.0 / t {
        Ok((t * e_inv) * w)
    } else {
        Ok((t * w - 1.0) / (t - 1.0) * (1.0 - e_inv) + e_inv)
    }
}

/// Slope of [`map_weight`] in w. At the knee the upper branch's slope is
/// returned (a subgradient pick; the function is continuous there).
pub fn map_weight_deriv(w: f64, t: usize) -> f64 {
    let t = t as f64;
    let e_inv = (-1.0_f64).exp();
    if w < 1.0 / t {
        t * e_inv
    } else {
        t / (t - 1.0) * (1.0 - e_inv)
    }
}

/// Mean over batch entities of Σ_views Σ_centers -w'' ln w'' with
/// w'' = map_weight(softmax weight, alive centers). Zero-weight terms follow
/// the 0 ln 0 = 0 convention; single-center views contribute 0.
pub fn entropy_weight_loss(model: &MfdmcModel, side: Side, batch: &[usize]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for &entity in batch {
        for view in 0..model.config.views {
            let alive = model.alive(side, view);
            if alive < 2 {
                continue;
            }
            for w in model.view_weights(side, entity, view) {
                let mapped = map_weight(w, alive)?;
                if mapped > 0.0 {
                    total -= mapped * mapped.ln();
                }
            }
        }
    }
    Ok(total / batch.len() as f64)
}

/// Mean over batch entities of Σ_views Σ_centers -w' ln(w'/alive): entropy of
/// the raw softmax weights plus a ln(alive) offset. Selectable replacement
/// for [`entropy_weight_loss`].
pub fn uniform_offset_entropy(model: &MfdmcModel, side: Side, batch: &[usize]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for &entity in batch {
        for view in 0..model.config.views {
            let alive = model.alive(side, view) as f64;
            for w in model.view_weights(side, entity, view) {
                if w > 0.0 {
                    total -= w * (w / alive).ln();
                }
            }
        }
    }
    Ok(total / batch.len() as f64)
}

/// Mean over batch triples of (predicted - actual)².
pub fn rating_loss(model: &MfdmcModel, batch: &[RatingTriple]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sum: f64 = batch
        .iter()
        .map(|t| {
            let err = model.predict(t.user, t.item) - t.rating;
            err * err
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Distinct users and distinct items of a batch, each in first-occurrence
/// order.
pub fn distinct_entities(batch: &[RatingTriple]) -> (Vec<usize>, Vec<usize>) {
    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut seen_users = std::collections::HashSet::new();
    let mut seen_items = std::collections::HashSet::new();
    for t in batch {
        if seen_users.insert(t.user) {
            users.push(t.user);
        }
        if seen_items.insert(t.item) {
            items.push(t.item);
        }
    }
    (users, items)
}

/// Mean squared norm of composed latents over the given users, plus the same
/// over items, plus matching bias squares when biases are on. The global
/// offset mu is not decayed.
pub fn weight_decay_term(model: &MfdmcModel, users: &[usize], items: &[usize]) -> f64 {
    let side_term = |side: Side, entities: &[usize]| -> f64 {
        if entities.is_empty() {
            return 0.0;
        }
        let sum: f64 = entities
            .iter()
            .map(|&k| {
                let latent = model.compose_latent(side, k);
                let mut sq: f64 = latent.iter().map(|x| x * x).sum();
                if let Some(bias) = &model.biases {
                    let b = match side {
                        Side::User => bias.user[k],
                        Side::Item => bias.item[k],
                    };
                    sq += b * b;
                }
                sq
            })
            .sum();
        sum / entities.len() as f64
    };
    side_term(Side::User, users) + side_term(Side::Item, items)
}

/// Evaluates every objective term on one batch and assembles the total.
pub fn total_loss(
    model: &MfdmcModel,
    batch: &[RatingTriple],
    params: &LossParams,
) -> Result<LossBreakdown> {
    if params.eta < 0.0 || params.gamma < 0.0 || params.lambda < 0.0 {
        return Err(Error::Config(format!(
            "loss coefficients must be nonnegative: eta={}, gamma={}, lambda={}",
            params.eta, params.gamma, params.lambda
        )));
    }
    if params.rho <= 0.0 {
        return Err(Error::Config(format!(
            "hinge margin must be positive, got {}",
            params.rho
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (users, items) = distinct_entities(batch);

    let spread_user = spread_loss(model.centers(Side::User), params.rho);
    let spread_item = spread_loss(model.centers(Side::Item), params.rho);
    let proximity_user = proximity_loss(model, Side::User, &users)?;
    let proximity_item = proximity_loss(model, Side::Item, &items)?;
    let loss1 = spread_user + spread_item + proximity_user + proximity_item;

    let sharpen = match params.weight_loss {
        WeightLossKind::MappedEntropy => entropy_weight_loss,
        WeightLossKind::UniformOffset => uniform_offset_entropy,
    };
    let loss2_user = sharpen(model, Side::User, &users)?;
    let loss2_item = sharpen(model, Side::Item, &items)?;
    let loss2 = loss2_user + loss2_item;

    let loss3 = rating_loss(model, batch)?;
    let weight_decay = weight_decay_term(model, &users, &items);
    let total =
        params.eta * loss1 + params.gamma * loss2 + loss3 + params.lambda * weight_decay;

    Ok(LossBreakdown {
        spread_user,
        spread_item,
        proximity_user,
        proximity_item,
        loss1,
        loss2_user,
        loss2_item,
        loss2,
        loss3,
        weight_decay,
        total,
        eta: params.eta,
        gamma: params.gamma,
        lambda: params.lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Biases, CenterView, ModelConfig};

    const E_INV: f64 = 0.36787944117144233;

    fn params(eta: f64, gamma: f64, lambda: f64) -> LossParams {
        LossParams {
            eta,
            gamma,
            lambda,
            rho: 1.0,
            weight_loss: WeightLossKind::MappedEntropy,
        }
    }

    /// One view, two centers (0,0) and (1,1), one user with given logits,
    /// one item with uniform weights.
    fn toy_model(user_logits: [f64; 2]) -> MfdmcModel {
        let cfg = ModelConfig {
            latent_dim: 2,
            views: 1,
            centers_per_view: 2,
            share_centers: true,
            use_biases: false,
            range_min: 1.0,
            range_max: 5.0,
        };
        let bank = CenterBank {
            views: vec![CenterView {
                centers: Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]),
                original: vec![0, 1],
            }],
        };
        MfdmcModel::from_parts(
            cfg,
            bank,
            None,
            vec![Matrix::from_rows(&[vec![user_logits[0], user_logits[1]]])],
            vec![Matrix::from_rows(&[vec![0.0, 0.0]])],
            None,
        )
        .expect("toy model")
    }

    #[test]
    fn squared_distance_cases() {
        assert_eq!(squared_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(squared_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        let d = squared_distance(&[0.2, 0.7], &[0.5, 0.3]).unwrap();
        assert!((d - 0.25).abs() < 1e-12, "got {d}");
        assert!(squared_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(pairwise_hinge(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 1.0);
        assert_eq!(pairwise_hinge(&[0.0], &[2.0], 1.0).unwrap(), 0.0);
        let h = pairwise_hinge(&[0.0, 0.0], &[0.5, 0.5], 1.0).unwrap();
        assert!((h - 0.5).abs() < 1e-12, "got {h}");
    }

    #[test]
    fn minmax_maps_span_to_unit_interval() {
        let m = Matrix::from_rows(&[vec![2.0, 4.0], vec![6.0, 4.0]]);
        let n = minmax_normalize_view(&m);
        assert_eq!(n.row(0), &[0.0, 0.5]);
        assert_eq!(n.row(1), &[1.0, 0.5]);

        let already = Matrix::from_rows(&[vec![0.0, 1.0]]);
        assert_eq!(minmax_normalize_view(&already), already);

        let constant = Matrix::from_rows(&[vec![3.0, 3.0], vec![3.0, 3.0]]);
        assert!(minmax_normalize_view(&constant).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spread_counts_unordered_pairs_once() {
        // identical centers: normalization maps both rows to zero, hinge = rho
        let bank = CenterBank {
            views: vec![CenterView {
                centers: Matrix::from_rows(&[vec![0.7, 0.7], vec![0.7, 0.7]]),
                original: vec![0, 1],
            }],
        };
        assert_eq!(spread_loss(&bank, 1.0), 1.0);

        // corners of the unit square: normalized distance² = 2 ≥ rho
        let far = CenterBank {
            views: vec![CenterView {
                centers: Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]),
                original: vec![0, 1],
            }],
        };
        assert_eq!(spread_loss(&far, 1.0), 0.0);

        // additivity across views
        let two_views = CenterBank {
            views: vec![
                CenterView {
                    centers: Matrix::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.5]]),
                    original: vec![0, 1],
                },
                CenterView {
                    centers: Matrix::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.5]]),
                    original: vec![0, 1],
                },
            ],
        };
        // each view normalizes to corners (0,0)/(1,1), distance² 2 → hinge 0
        assert_eq!(spread_loss(&two_views, 1.0), 0.0);
        let close = CenterBank {
            views: vec![
                CenterView {
                    centers: Matrix::from_rows(&[vec![0.2, 0.2], vec![0.2, 0.2]]),
                    original: vec![0, 1],
                },
                CenterView {
                    centers: Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]),
                    original: vec![0, 1],
                },
            ],
        };
        assert_eq!(spread_loss(&close, 0.5), 1.0, "0.5 from each view");
    }

    #[test]
    fn assignment_takes_argmax_with_low_tie() {
        let m = toy_model([0.0, 1.0]);
        assert_eq!(assign_cluster(&m, Side::User, 0, 0), 1);
        let tied = toy_model([0.3, 0.3]);
        assert_eq!(assign_cluster(&tied, Side::User, 0, 0), 0);
    }

    #[test]
    fn proximity_matches_hand_arithmetic() {
        // uniform weights → sub-vector (0.5, 0.5), tie assigns center 0 at
        // (0,0), squared distance 0.5
        let m = toy_model([0.0, 0.0]);
        let p = proximity_loss(&m, Side::User, &[0]).unwrap();
        assert!((p - 0.5).abs() < 1e-12, "got {p}");

        // near-one-hot weights → sub-vector collapses onto the center
        let sharp = toy_model([80.0, 0.0]);
        let p = proximity_loss(&sharp, Side::User, &[0]).unwrap();
        assert!(p < 1e-12, "got {p}");

        // repetition must not change a mean
        let twice = proximity_loss(&m, Side::User, &[0, 0]).unwrap();
        assert!((twice - 0.5).abs() < 1e-12);

        assert!(matches!(
            proximity_loss(&m, Side::User, &[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn map_weight_endpoints_and_knee() {
        for t in 2..=50 {
            assert_eq!(map_weight(0.0, t).unwrap(), 0.0, "t={t}");
            let at_one = map_weight(1.0, t).unwrap();
            assert!((at_one - 1.0).abs() < 1e-12, "t={t}: map(1) = {at_one}");
            let knee = map_weight(1.0 / t as f64, t).unwrap();
            assert!((knee - E_INV).abs() < 1e-12, "t={t}: map(1/t) = {knee}");
        }
        let low = map_weight(0.05, 10).unwrap();
        assert!((low - 0.5 * E_INV).abs() < 1e-12, "lower branch: {low}");
        assert!(map_weight(-0.1, 10).is_err());
        assert!(map_weight(1.1, 10).is_err());
        assert!(map_weight(0.5, 1).is_err());
    }

    #[test]
    fn map_weight_is_strictly_increasing() {
        for t in [2, 3, 10, 50] {
            let mut prev = -1.0;
            for i in 0..=1000 {
                let w = i as f64 / 1000.0;
                let mapped = map_weight(w, t).unwrap();
                assert!(mapped > prev, "t={t}: not increasing at w={w}");
                prev = mapped;
            }
        }
    }

    #[test]
    fn entropy_loss_hand_cases() {
        // near-one-hot: mapped weights ≈ (1, 0) → entropy ≈ 0
        let sharp = toy_model([80.0, 0.0]);
        let e = entropy_weight_loss(&sharp, Side::User, &[0]).unwrap();
        assert!(e < 1e-10, "got {e}");

        // uniform over t=2: each mapped weight is 1/e, each term is 1/e
        let uniform = toy_model([0.0, 0.0]);
        let e = entropy_weight_loss(&uniform, Side::User, &[0]).unwrap();
        assert!((e - 2.0 * E_INV).abs() < 1e-12, "got {e}");
    }

    #[test]
    fn uniform_offset_hand_cases() {
        // one-hot over t alive: -1 ln(1/t) = ln t
        let sharp = toy_model([800.0, 0.0]);
        let e = uniform_offset_entropy(&sharp, Side::User, &[0]).unwrap();
        assert!((e - 2.0_f64.ln()).abs() < 1e-9, "got {e}");

        // uniform over t: -Σ (1/t) ln(1/t²) = 2 ln t
        let uniform = toy_model([0.0, 0.0]);
        let e = uniform_offset_entropy(&uniform, Side::User, &[0]).unwrap();
        assert!((e - 2.0 * 2.0_f64.ln()).abs() < 1e-12, "got {e}");
    }

    #[test]
    fn rating_loss_hand_cases() {
        // toy model, uniform weights: p = q = (0.5, 0.5), r̂ = 0.5
        let m = toy_model([0.0, 0.0]);
        let batch = [RatingTriple {
            user: 0,
            item: 0,
            rating: 2.5,
        }];
        let l = rating_loss(&m, &batch).unwrap();
        assert!((l - 4.0).abs() < 1e-12, "(0.5 - 2.5)² = 4, got {l}");

        let two = [
            RatingTriple {
                user: 0,
                item: 0,
                rating: 1.5,
            },
            RatingTriple {
                user: 0,
                item: 0,
                rating: 3.5,
            },
        ];
        let l = rating_loss(&m, &two).unwrap();
        assert!((l - 5.0).abs() < 1e-12, "(1 + 9)/2 = 5, got {l}");
    }

    #[test]
    fn distinct_entities_keep_first_occurrence_order() {
        let batch = [
            RatingTriple { user: 4, item: 1, rating: 1.0 },
            RatingTriple { user: 2, item: 1, rating: 1.0 },
            RatingTriple { user: 4, item: 0, rating: 1.0 },
        ];
        let (users, items) = distinct_entities(&batch);
        assert_eq!(users, vec![4, 2]);
        assert_eq!(items, vec![1, 0]);
    }

    #[test]
    fn total_loss_identities_hold() {
        let m = toy_model([0.4, -0.2]);
        let batch = [RatingTriple {
            user: 0,
            item: 0,
            rating: 3.0,
        }];
        let bd = total_loss(&m, &batch, &params(0.3, 0.7, 0.01)).unwrap();
        let loss1 = bd.spread_user + bd.spread_item + bd.proximity_user + bd.proximity_item;
        assert!((bd.loss1 - loss1).abs() < 1e-12);
        assert!((bd.loss2 - bd.loss2_user - bd.loss2_item).abs() < 1e-12);
        let total = 0.3 * bd.loss1 + 0.7 * bd.loss2 + bd.loss3 + 0.01 * bd.weight_decay;
        assert!((bd.total - total).abs() < 1e-12);
    }

    #[test]
    fn total_loss_with_zero_coefficients_is_rating_loss() {
        let m = toy_model([0.4, -0.2]);
        let batch = [RatingTriple {
            user: 0,
            item: 0,
            rating: 3.0,
        }];
        let bd = total_loss(&m, &batch, &params(0.0, 0.0, 0.0)).unwrap();
        let l3 = rating_loss(&m, &batch).unwrap();
        assert_eq!(bd.total, l3);
    }

    #[test]
    fn total_loss_is_monotone_in_coefficients() {
        let m = toy_model([0.4, -0.2]);
        let batch = [RatingTriple {
            user: 0,
            item: 0,
            rating: 3.0,
        }];
        let base = total_loss(&m, &batch, &params(0.1, 0.1, 0.1)).unwrap();
        for bumped in [
            params(0.2, 0.1, 0.1),
            params(0.1, 0.2, 0.1),
            params(0.1, 0.1, 0.2),
        ] {
            let bd = total_loss(&m, &batch, &bumped).unwrap();
            assert!(
                bd.total >= base.total,
                "raising a coefficient lowered the total"
            );
        }
    }

    #[test]
    fn total_loss_rejects_negative_coefficients() {
        let m = toy_model([0.0, 0.0]);
        let batch = [RatingTriple {
            user: 0,
            item: 0,
            rating: 3.0,
        }];
        assert!(matches!(
            total_loss(&m, &batch, &params(-0.1, 0.0, 0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weight_decay_covers_latents_and_biases() {
        let mut m = toy_model([0.0, 0.0]);
        m.biases = Some(Biases {
            mu: 3.0,
            user: vec![0.5],
            item: vec![-1.0],
        });
        // latents are (0.5, 0.5) on both sides → ||.||² = 0.5 each
        let wd = weight_decay_term(&m, &[0], &[0]);
        let expected = (0.5 + 0.25) + (0.5 + 1.0);
        assert!((wd - expected).abs() < 1e-12, "got {wd}");
    }
}
