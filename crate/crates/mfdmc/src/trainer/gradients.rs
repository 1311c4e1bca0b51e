//! Analytic gradients of the total objective, plus a finite-difference
//! checker used by tests and the gradcheck command.
//!
//! Gradient flow per batch: the rating, decay, and proximity terms first
//! accumulate into per-entity latent-vector gradients; the entropy term
//! accumulates into per-entity weight gradients. A fold pass then pushes the
//! latent gradients through the composition (into centers via the weights,
//! into weights via the centers) and finally through the softmax into logits.
//! The spread term writes straight into the center gradients, chaining
//! through the min-max normalization (whose min/max entries pick up the
//! extra terms of the quotient rule).

use std::collections::HashMap;

use crate::data::RatingTriple;
use crate::error::{Error, Result};
use crate::losses::{
    argmax_tie_low, map_weight, map_weight_deriv, LossBreakdown, LossParams, WeightLossKind,
};
use crate::matrix::Matrix;
use crate::model::{CenterBank, MfdmcModel, Side};

/// Gradients of one batch's total loss. Logit and bias gradients are
/// row-aligned with the distinct-entity lists `users`/`items`; center
/// gradients cover whole banks (spread touches every center each step).
#[derive(Debug)]
pub struct Gradients {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub user_centers: Vec<Matrix>,
    /// `None` when the model shares one bank; item-side center gradients
    /// then accumulate into `user_centers`.
    pub item_centers: Option<Vec<Matrix>>,
    pub user_logits: Vec<Matrix>,
    pub item_logits: Vec<Matrix>,
    pub mu: f64,
    pub user_biases: Vec<f64>,
    pub item_biases: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Forward caches and gradient accumulators for one side of a batch.
struct SideWork {
    side: Side,
    entities: Vec<usize>,
    pos: HashMap<usize, usize>,
    /// weights[pos][view][center]: cached softmax weights.
    weights: Vec<Vec<Vec<f64>>>,
    /// latents[pos]: cached composed d-vector.
    latents: Vec<Vec<f64>>,
    g_latent: Vec<Vec<f64>>,
    g_weights: Vec<Vec<Vec<f64>>>,
    g_bias: Vec<f64>,
}

impl SideWork {
    fn new(model: &MfdmcModel, side: Side, entities: Vec<usize>) -> Self {
        let views = model.config.views;
        let pos = entities
            .iter()
            .enumerate()
            .map(|(p, &e)| (e, p))
            .collect();
        let mut weights = Vec::with_capacity(entities.len());
        let mut latents = Vec::with_capacity(entities.len());
        let mut g_weights = Vec::with_capacity(entities.len());
        for &entity in &entities {
            let mut per_view = Vec::with_capacity(views);
            let mut latent = Vec::with_capacity(model.config.latent_dim);
            for view in 0..views {
                let w = model.view_weights(side, entity, view);
                latent.extend(model.view_subvector_with(side, view, &w));
                per_view.push(w);
            }
            g_weights.push(per_view.iter().map(|w| vec![0.0; w.len()]).collect());
            weights.push(per_view);
            latents.push(latent);
        }
        let g_latent = vec![vec![0.0; model.config.latent_dim]; entities.len()];
        let g_bias = vec![0.0; entities.len()];
        SideWork {
            side,
            entities,
            pos,
            weights,
            latents,
            g_latent,
            g_weights,
            g_bias,
        }
    }
}

/// Spread loss of one bank with gradients (scaled by `eta`) accumulated into
/// `grads`. Returns the unscaled loss value.
///
/// A constant view matrix (max = min) contributes rho per center pair but no
/// gradient: the all-zeros normalization policy is flat almost everywhere,
/// and its boundary has no usable derivative.
fn spread_with_grad(bank: &CenterBank, rho: f64, eta: f64, grads: &mut [Matrix]) -> f64 {
    let mut total = 0.0;
    for (view_idx, view) in bank.views.iter().enumerate() {
        let c = &view.centers;
        let t = c.rows();
        if t < 2 {
            continue;
        }
        let b = c.cols();
        let data = c.data();
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut pos_min = 0;
        let mut pos_max = 0;
        for (k, &x) in data.iter().enumerate() {
            if x < min {
                min = x;
                pos_min = k;
            }
            if x > max {
                max = x;
                pos_max = k;
            }
        }
        if !(max > min) {
            total += rho * (t * (t - 1) / 2) as f64;
            continue;
        }
        let span = max - min;
        let normed: Vec<f64> = data.iter().map(|&x| (x - min) / span).collect();

        let mut g_n = vec![0.0; data.len()];
        let mut view_loss = 0.0;
        for a in 0..t {
            for bb in a + 1..t {
                let mut dist = 0.0;
                for k in 0..b {
                    let d = normed[a * b + k] - normed[bb * b + k];
                    dist += d * d;
                }
                if dist < rho {
                    view_loss += rho - dist;
                    for k in 0..b {
                        let d = normed[a * b + k] - normed[bb * b + k];
                        g_n[a * b + k] -= 2.0 * d;
                        g_n[bb * b + k] += 2.0 * d;
                    }
                }
            }
        }
        total += view_loss;

        // chain rule through N = (C - min) / (max - min): every entry gets
        // g/span; the min entry collects (S2 - S1)/span and the max entry
        // -S2/span, where S1 = Σ g and S2 = Σ g·N (the min/max entries
        // themselves are constants 0 and 1 under the normalization).
        let s1: f64 = g_n.iter().sum();
        let s2: f64 = g_n.iter().zip(&normed).map(|(g, n)| g * n).sum();
        let out = grads[view_idx].data_mut();
        for (k, g) in g_n.iter().enumerate() {
            out[k] += eta * g / span;
        }
        out[pos_min] += eta * (s2 - s1) / span;
        out[pos_max] -= eta * s2 / span;
    }
    total
}

/// Computes analytic gradients and the loss breakdown for one batch.
pub fn compute_gradients(
    model: &MfdmcModel,
    batch: &[RatingTriple],
    params: &LossParams,
) -> Result<(Gradients, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if params.eta < 0.0 || params.gamma < 0.0 || params.lambda < 0.0 {
        return Err(Error::Config(format!(
            "loss coefficients must be nonnegative: eta={}, gamma={}, lambda={}",
            params.eta, params.gamma, params.lambda
        )));
    }
    let views = model.config.views;
    let b = model.config.center_dim();
    let (users, items) = crate::losses::distinct_entities(batch);
    let mut uw = SideWork::new(model, Side::User, users);
    let mut iw = SideWork::new(model, Side::Item, items);

    let bank_shapes = |bank: &CenterBank| -> Vec<Matrix> {
        bank.views
            .iter()
            .map(|v| Matrix::zeros(v.centers.rows(), v.centers.cols()))
            .collect()
    };
    let mut g_user_centers = bank_shapes(model.centers(Side::User));
    let mut g_item_centers = (!model.is_shared()).then(|| bank_shapes(model.centers(Side::Item)));
    let mut g_mu = 0.0;

    // rating term: d/dθ of mean (r̂ - r)²
    let mut loss3_sum = 0.0;
    let inv_batch = 1.0 / batch.len() as f64;
    let has_biases = model.biases.is_some();
    for t in batch {
        let up = uw.pos[&t.user];
        let ip = iw.pos[&t.item];
        let mut pred = dot(&uw.latents[up], &iw.latents[ip]);
        if let Some(bias) = &model.biases {
            pred += bias.mu + bias.user[t.user] + bias.item[t.item];
        }
        let err = pred - t.rating;
        loss3_sum += err * err;
        let s = 2.0 * err * inv_batch;
        axpy(s, &iw.latents[ip], &mut uw.g_latent[up]);
        axpy(s, &uw.latents[up], &mut iw.g_latent[ip]);
        if has_biases {
            g_mu += s;
            uw.g_bias[up] += s;
            iw.g_bias[ip] += s;
        }
    }
    let loss3 = loss3_sum * inv_batch;

    // weight decay: mean ||latent||² (+ bias²) per side
    let mut weight_decay = 0.0;
    for work in [&mut uw, &mut iw] {
        let inv = 1.0 / work.entities.len() as f64;
        let scale = 2.0 * params.lambda * inv;
        let SideWork {
            side,
            entities,
            latents,
            g_latent,
            g_bias,
            ..
        } = work;
        for pos in 0..entities.len() {
            let latent = &latents[pos];
            weight_decay += dot(latent, latent) * inv;
            axpy(scale, latent, &mut g_latent[pos]);
            if let Some(bias) = &model.biases {
                let bval = match side {
                    Side::User => bias.user[entities[pos]],
                    Side::Item => bias.item[entities[pos]],
                };
                weight_decay += bval * bval * inv;
                g_bias[pos] += scale * bval;
            }
        }
    }

    // proximity: per entity and view, squared distance between the assigned
    // (argmax) center and the view sub-vector; the assignment is a constant
    // under differentiation
    let mut proximity = [0.0; 2];
    for (side_idx, work) in [&mut uw, &mut iw].into_iter().enumerate() {
        let bank = model.centers(work.side);
        let inv = 1.0 / work.entities.len() as f64;
        let target = match (work.side, &mut g_item_centers) {
            (Side::Item, Some(g)) => &mut *g,
            _ => &mut g_user_centers,
        };
        let mut sum = 0.0;
        for pos in 0..work.entities.len() {
            for view in 0..views {
                let w = &work.weights[pos][view];
                let assigned = argmax_tie_low(w);
                let sub = &work.latents[pos][view * b..(view + 1) * b];
                let center = bank.views[view].centers.row(assigned);
                let diff: Vec<f64> = center.iter().zip(sub).map(|(c, s)| c - s).collect();
                sum += dot(&diff, &diff);
                axpy(
                    2.0 * params.eta * inv,
                    &diff,
                    target[view].row_mut(assigned),
                );
                axpy(
                    -2.0 * params.eta * inv,
                    &diff,
                    &mut work.g_latent[pos][view * b..(view + 1) * b],
                );
            }
        }
        proximity[side_idx] = sum * inv;
    }

    // weight sharpening: entropy of mapped weights, or entropy of raw
    // weights with the uniform offset
    let mut loss2 = [0.0; 2];
    for (side_idx, work) in [&mut uw, &mut iw].into_iter().enumerate() {
        let inv = 1.0 / work.entities.len() as f64;
        let mut sum = 0.0;
        for pos in 0..work.entities.len() {
            for view in 0..views {
                let w = &work.weights[pos][view];
                let alive = w.len();
                let gw = &mut work.g_weights[pos][view];
                match params.weight_loss {
                    WeightLossKind::MappedEntropy => {
                        if alive < 2 {
                            continue;
                        }
                        for i in 0..alive {
                            let mapped = map_weight(w[i], alive)?;
                            if mapped > 0.0 {
                                sum -= mapped * mapped.ln();
                                gw[i] -= params.gamma
                                    * inv
                                    * (mapped.ln() + 1.0)
                                    * map_weight_deriv(w[i], alive);
                            }
                        }
                    }
                    WeightLossKind::UniformOffset => {
                        for i in 0..alive {
                            if w[i] > 0.0 {
                                let ratio_ln = (w[i] / alive as f64).ln();
                                sum -= w[i] * ratio_ln;
                                gw[i] -= params.gamma * inv * (ratio_ln + 1.0);
                            }
                        }
                    }
                }
            }
        }
        loss2[side_idx] = sum * inv;
    }

    // spread: user side over its bank, item side over its bank (the same
    // storage when shared, so the shared bank accumulates both sides)
    let spread_user = spread_with_grad(
        model.centers(Side::User),
        params.rho,
        params.eta,
        &mut g_user_centers,
    );
    let spread_item = match &mut g_item_centers {
        Some(g) => spread_with_grad(model.centers(Side::Item), params.rho, params.eta, g),
        None => spread_with_grad(
            model.centers(Side::Item),
            params.rho,
            params.eta,
            &mut g_user_centers,
        ),
    };

    // fold latent gradients through the composition and softmax
    let mut user_logit_grads: Vec<Matrix> = (0..views)
        .map(|v| Matrix::zeros(uw.entities.len(), model.alive(Side::User, v)))
        .collect();
    let mut item_logit_grads: Vec<Matrix> = (0..views)
        .map(|v| Matrix::zeros(iw.entities.len(), model.alive(Side::Item, v)))
        .collect();
    for (work, logit_grads) in [
        (&mut uw, &mut user_logit_grads),
        (&mut iw, &mut item_logit_grads),
    ] {
        let bank = model.centers(work.side);
        let target = match (work.side, &mut g_item_centers) {
            (Side::Item, Some(g)) => &mut *g,
            _ => &mut g_user_centers,
        };
        for pos in 0..work.entities.len() {
            for view in 0..views {
                let g_sub = &work.g_latent[pos][view * b..(view + 1) * b];
                let w = &work.weights[pos][view];
                let gw = &mut work.g_weights[pos][view];
                let centers = &bank.views[view].centers;
                for i in 0..w.len() {
                    axpy(w[i], g_sub, target[view].row_mut(i));
                    gw[i] += dot(centers.row(i), g_sub);
                }
                // softmax backward: gz_i = w_i (gw_i - Σ_l w_l gw_l)
                let inner = dot(w, gw);
                let out = logit_grads[view].row_mut(pos);
                for i in 0..w.len() {
                    out[i] = w[i] * (gw[i] - inner);
                }
            }
        }
    }

    let grads = Gradients {
        users: uw.entities,
        items: iw.entities,
        user_centers: g_user_centers,
        item_centers: g_item_centers,
        user_logits: user_logit_grads,
        item_logits: item_logit_grads,
        mu: g_mu,
        user_biases: uw.g_bias,
        item_biases: iw.g_bias,
    };
    check_finite(&grads)?;

    let loss1 = spread_user + spread_item + proximity[0] + proximity[1];
    let loss2_total = loss2[0] + loss2[1];
    let breakdown = LossBreakdown {
        spread_user,
        spread_item,
        proximity_user: proximity[0],
        proximity_item: proximity[1],
        loss1,
        loss2_user: loss2[0],
        loss2_item: loss2[1],
        loss2: loss2_total,
        loss3,
        weight_decay,
        total: params.eta * loss1 + params.gamma * loss2_total + loss3
            + params.lambda * weight_decay,
        eta: params.eta,
        gamma: params.gamma,
        lambda: params.lambda,
    };
    Ok((grads, breakdown))
}

fn check_finite(grads: &Gradients) -> Result<()> {
    let check_block = |name: &str, view: usize, m: &Matrix| -> Result<()> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}[view {view}]")));
        }
        Ok(())
    };
    for (view, m) in grads.user_centers.iter().enumerate() {
        check_block("user_centers", view, m)?;
    }
    if let Some(banks) = &grads.item_centers {
        for (view, m) in banks.iter().enumerate() {
            check_block("item_centers", view, m)?;
        }
    }
    for (view, m) in grads.user_logits.iter().enumerate() {
        check_block("user_logits", view, m)?;
    }
    for (view, m) in grads.item_logits.iter().enumerate() {
        check_block("item_logits", view, m)?;
    }
    if !grads.mu.is_finite()
        || grads.user_biases.iter().any(|x| !x.is_finite())
        || grads.item_biases.iter().any(|x| !x.is_finite())
    {
        return Err(Error::NonFiniteGradient("biases".to_string()));
    }
    Ok(())
}

/// Worst relative error of one parameter block in a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckBlock {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares every analytic partial derivative against a central finite
/// difference of the total loss (step `1e-5`), one report entry per
/// parameter block. Covers all centers, the logits and biases of batch
/// entities, and the global offset.
///
/// Relative error is |a - n| / max(|a| + |n|, 1e-8).
pub fn gradient_check(
    model: &mut MfdmcModel,
    batch: &[RatingTriple],
    params: &LossParams,
) -> Result<Vec<GradCheckBlock>> {
    const H: f64 = 1e-5;
    let (grads, _) = compute_gradients(model, batch, params)?;
    let mut report = Vec::new();

    let mut probe = |model: &mut MfdmcModel,
                     name: String,
                     slots: Vec<(usize, usize, usize, f64)>|
     -> Result<()> {
        // slots: (view, row, col, analytic) with block-specific meaning
        let mut worst = 0.0_f64;
        for &(view, row, col, analytic) in &slots {
            let read_write = |m: &mut MfdmcModel, delta: f64| -> f64 {
                let target = block_entry(m, &name, view, row, col);
                let old = *target;
                *target = old + delta;
                old
            };
            let old = read_write(model, H);
            let plus = crate::losses::total_loss(model, batch, params)?.total;
            *block_entry(model, &name, view, row, col) = old - H;
            let minus = crate::losses::total_loss(model, batch, params)?.total;
            *block_entry(model, &name, view, row, col) = old;
            let numeric = (plus - minus) / (2.0 * H);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        report.push(GradCheckBlock {
            name,
            max_rel_err: worst,
            checked: slots.len(),
        });
        Ok(())
    };

    let views = model.config.views;
    // centers
    for side in [Side::User, Side::Item] {
        if side == Side::Item && model.is_shared() {
            break;
        }
        let g_banks = match side {
            Side::User => &grads.user_centers,
            Side::Item => grads.item_centers.as_ref().expect("split banks"),
        };
        let mut slots = Vec::new();
        for view in 0..views {
            let g = &g_banks[view];
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    slots.push((view, r, c, g[(r, c)]));
                }
            }
        }
        probe(model, format!("{}_centers", side.name()), slots)?;
    }
    // logits of batch entities
    for (side, entities, g_logits) in [
        (Side::User, &grads.users, &grads.user_logits),
        (Side::Item, &grads.items, &grads.item_logits),
    ] {
        let mut slots = Vec::new();
        for view in 0..views {
            for (pos, &entity) in entities.iter().enumerate() {
                for c in 0..g_logits[view].cols() {
                    slots.push((view, entity, c, g_logits[view][(pos, c)]));
                }
            }
        }
        probe(model, format!("{}_logits", side.name()), slots)?;
    }
    // biases
    if model.biases.is_some() {
        probe(model, "mu".to_string(), vec![(0, 0, 0, grads.mu)])?;
        for (name, entities, g) in [
            ("user_bias", &grads.users, &grads.user_biases),
            ("item_bias", &grads.items, &grads.item_biases),
        ] {
            let slots: Vec<_> = entities
                .iter()
                .zip(g)
                .map(|(&e, &a)| (0, e, 0, a))
                .collect();
            probe(model, name.to_string(), slots)?;
        }
    }
    Ok(report)
}

/// Resolves one parameter slot named by a gradient-check block.
fn block_entry<'m>(
    model: &'m mut MfdmcModel,
    block: &str,
    view: usize,
    row: usize,
    col: usize,
) -> &'m mut f64 {
    match block {
        "user_centers" => &mut model.centers_mut(Side::User).views[view].centers[(row, col)],
        "item_centers" => &mut model.centers_mut(Side::Item).views[view].centers[(row, col)],
        "user_logits" => &mut model.logits_mut(Side::User)[view][(row, col)],
        "item_logits" => &mut model.logits_mut(Side::Item)[view][(row, col)],
        "mu" => &mut model.biases.as_mut().expect("biases").mu,
        "user_bias" => &mut model.biases.as_mut().expect("biases").user[row],
        "item_bias" => &mut model.biases.as_mut().expect("biases").item[row],
        other => unreachable!("unknown block {other}"),
    }
}
