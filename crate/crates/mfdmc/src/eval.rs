//! Evaluation and interpretability exports: RMSE with a clamping policy,
//! per-rating error breakdowns, cluster assignments, per-cluster rating
//! statistics, and latent coordinates for external plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::baselines::BaselineModel;
use crate::data::{DatasetSplit, ItemMetadata, RatingTriple};
use crate::error::{Error, Result};
use crate::losses::argmax_tie_low;
use crate::model::{MfdmcModel, Side};

/// Anything that can score a (user, item) pair on a bounded rating scale.
pub trait Predictor {
    fn predict(&self, user: usize, item: usize) -> f64;
    fn rating_range(&self) -> (f64, f64);
}

impl Predictor for MfdmcModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        MfdmcModel::predict(self, user, item)
    }

    fn rating_range(&self) -> (f64, f64) {
        (self.config.range_min, self.config.range_max)
    }
}

impl Predictor for BaselineModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        BaselineModel::predict(self, user, item)
    }

    fn rating_range(&self) -> (f64, f64) {
        (self.config.range_min, self.config.range_max)
    }
}

/// Root mean squared error between aligned prediction/truth slices.
pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset("nothing to score".to_string()));
    }
    let sum = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>();
    Ok((sum / predictions.len() as f64).sqrt())
}

/// Error breakdown for one group of truth values.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingBucket {
    pub label: String,
    pub count: usize,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub count: usize,
    pub clamped: bool,
    pub rmse: f64,
    pub mae: f64,
    pub buckets: Vec<RatingBucket>,
}

/// Scores every triple, optionally clamping predictions into the rating
/// range first. The bucket breakdown groups by exact truth value when there
/// are at most 16 distinct ones, and by ten equal-width bins otherwise.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    triples: &[RatingTriple],
    clamp: bool,
    split: &str,
) -> Result<EvalReport> {
    if triples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "split {split:?} has no examples to evaluate"
        )));
    }
    let (lo, hi) = model.rating_range();
    let mut predictions = Vec::with_capacity(triples.len());
    let mut truths = Vec::with_capacity(triples.len());
    for t in triples {
        let mut p = model.predict(t.user, t.item);
        if clamp {
            p = p.clamp(lo, hi);
        }
        predictions.push(p);
        truths.push(t.rating);
    }
    let overall = rmse(&predictions, &truths)?;
    let mae = predictions
        .iter()
        .zip(&truths)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / triples.len() as f64;

    let mut distinct: Vec<f64> = truths.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite ratings"));
    distinct.dedup();
    let mut buckets = Vec::new();
    if distinct.len() <= 16 {
        for &value in &distinct {
            let (ps, ts): (Vec<f64>, Vec<f64>) = predictions
                .iter()
                .zip(&truths)
                .filter(|(_, &t)| t == value)
                .map(|(&p, &t)| (p, t))
                .unzip();
            buckets.push(RatingBucket {
                label: format!("{value}"),
                count: ps.len(),
                rmse: rmse(&ps, &ts)?,
            });
        }
    } else {
        let bins = 10usize;
        let width = (hi - lo) / bins as f64;
        for bin in 0..bins {
            let left = lo + bin as f64 * width;
            let right = lo + (bin + 1) as f64 * width;
            let inside = |t: f64| {
                if bin + 1 == bins {
                    t >= left && t <= right
                } else {
                    t >= left && t < right
                }
            };
            let (ps, ts): (Vec<f64>, Vec<f64>) = predictions
                .iter()
                .zip(&truths)
                .filter(|(_, &t)| inside(t))
                .map(|(&p, &t)| (p, t))
                .unzip();
            if ps.is_empty() {
                continue;
            }
            buckets.push(RatingBucket {
                label: format!("[{left}, {right})"),
                count: ps.len(),
                rmse: rmse(&ps, &ts)?,
            });
        }
    }

    Ok(EvalReport {
        split: split.to_string(),
        count: triples.len(),
        clamped: clamp,
        rmse: overall,
        mae,
        buckets,
    })
}

/// One entity's strongest cluster in one view, with the full distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentRow {
    pub entity: usize,
    pub view: usize,
    /// Index into the view's current (post-pruning) weight vector.
    pub cluster: usize,
    pub weights: Vec<f64>,
}

/// Assignment rows for every entity of a side, entity-major then view.
pub fn assignment_rows(model: &MfdmcModel, side: Side) -> Vec<AssignmentRow> {
    let mut rows = Vec::with_capacity(model.num_entities(side) * model.config.views);
    for entity in 0..model.num_entities(side) {
        for view in 0..model.config.views {
            let weights = model.view_weights(side, entity, view);
            rows.push(AssignmentRow {
                entity,
                view,
                cluster: argmax_tie_low(&weights),
                weights,
            });
        }
    }
    rows
}

/// Writes the assignment table as TSV with the weight distribution
/// comma-joined in the final column.
pub fn export_assignments(model: &MfdmcModel, side: Side, path: &Path) -> Result<()> {
    let mut out = String::from("entity\tview\tcluster\tweights\n");
    for row in assignment_rows(model, side) {
        let weights = row
            .weights
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{}\t{}\t{}\t{}", row.entity, row.view, row.cluster, weights)
            .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    pub view: usize,
    /// Current (post-pruning) cluster index within the view.
    pub cluster: usize,
    /// The cluster's identity before any pruning.
    pub original: usize,
    pub members: usize,
    /// Mean weight its members put on this cluster; None when empty.
    pub mean_weight: Option<f64>,
    /// Mean train rating given by member users, or received by member
    /// items; None when no train triple touches a member.
    pub mean_rating: Option<f64>,
    /// Category counts for this cluster, present when metadata was supplied.
    pub histogram: Option<BTreeMap<String, usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub side: Side,
    pub clusters: Vec<ClusterStats>,
}

impl ClusterReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "view\tcluster\toriginal\tmembers\tmean_weight\tmean_rating\tcategories\n",
        );
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.clusters {
            let histogram = c.histogram.as_ref().map_or(String::new(), |h| {
                h.iter()
                    .map(|(label, n)| format!("{label}:{n}"))
                    .collect::<Vec<_>>()
                    .join(",")
            });
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.view,
                c.cluster,
                c.original,
                c.members,
                opt(c.mean_weight),
                opt(c.mean_rating),
                histogram
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

/// Per-cluster membership and rating statistics over the train split.
///
/// Mean ratings come from train triples whose user (user side) or item
/// (item side) is a member. With metadata, item clusters count their member
/// items' categories; user clusters count the categories of items their
/// members rated in train.
pub fn cluster_report(
    model: &MfdmcModel,
    split: &DatasetSplit,
    metadata: Option<&ItemMetadata>,
    side: Side,
) -> ClusterReport {
    let views = model.config.views;
    let rows = assignment_rows(model, side);
    // member lists per (view, cluster)
    let mut members: Vec<Vec<Vec<usize>>> = (0..views)
        .map(|v| vec![Vec::new(); model.alive(side, v)])
        .collect();
    let mut weight_sums: Vec<Vec<f64>> = (0..views)
        .map(|v| vec![0.0; model.alive(side, v)])
        .collect();
    for row in &rows {
        members[row.view][row.cluster].push(row.entity);
        weight_sums[row.view][row.cluster] += row.weights[row.cluster];
    }

    // train ratings and (for user-side histograms) rated items per entity
    let entity_of = |t: &RatingTriple| match side {
        Side::User => t.user,
        Side::Item => t.item,
    };
    let mut rating_sum = vec![0.0; model.num_entities(side)];
    let mut rating_count = vec![0usize; model.num_entities(side)];
    let mut rated_items: Vec<Vec<usize>> = vec![Vec::new(); model.num_entities(side)];
    for t in &split.train {
        let e = entity_of(t);
        rating_sum[e] += t.rating;
        rating_count[e] += 1;
        if side == Side::User && metadata.is_some() {
            rated_items[e].push(t.item);
        }
    }

    let mut clusters = Vec::new();
    for view in 0..views {
        let originals = &model.centers(side).views[view].original;
        for cluster in 0..model.alive(side, view) {
            let group = &members[view][cluster];
            let (sum, count) = group
                .iter()
                .fold((0.0, 0usize), |(s, n), &e| (s + rating_sum[e], n + rating_count[e]));
            let histogram = metadata.map(|md| {
                let mut h = BTreeMap::new();
                for &e in group {
                    match side {
                        Side::Item => {
                            for c in md.categories(e) {
                                *h.entry(c.clone()).or_insert(0) += 1;
                            }
                        }
                        Side::User => {
                            for &item in &rated_items[e] {
                                for c in md.categories(item) {
                                    *h.entry(c.clone()).or_insert(0) += 1;
                                }
                            }
                        }
                    }
                }
                h
            });
            clusters.push(ClusterStats {
                view,
                cluster,
                original: originals[cluster],
                members: group.len(),
                mean_weight: (!group.is_empty())
                    .then(|| weight_sums[view][cluster] / group.len() as f64),
                mean_rating: (count > 0).then(|| sum / count as f64),
                histogram,
            });
        }
    }
    ClusterReport { side, clusters }
}

/// Writes every entity's composed latent vector as TSV. A header comment
/// gives the half-open coordinate span of each view's sub-vector.
pub fn export_embeddings(model: &MfdmcModel, side: Side, path: &Path) -> Result<()> {
    let b = model.config.center_dim();
    let spans = (0..model.config.views)
        .map(|v| format!("view{v}=[{}, {})", v * b, (v + 1) * b))
        .collect::<Vec<_>>()
        .join("; ");
    let mut out = format!("# sub-vector spans: {spans}\n");
    out.push_str("entity");
    for d in 0..model.config.latent_dim {
        write!(out, "\tc{d}").expect("string write");
    }
    out.push('\n');
    for entity in 0..model.num_entities(side) {
        write!(out, "{entity}").expect("string write");
        for x in model.compose_latent(side, entity) {
            write!(out, "\t{x}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
