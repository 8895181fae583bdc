//! Exact path-dependent TreeSHAP over the boosted ensemble, a brute-force
//! Shapley oracle with the same value function, and top-K selection.
//!
//! Absent features are marginalized by mixing both branches in proportion to
//! the training covers recorded on each node.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{child_weights, predict, ClassifierError, Node, Tree, TreeEnsemble};
use crate::clustering::ClusterKind;
use crate::corpus::SentimentLabel;
use crate::exec::Execution;
use crate::featurization::{Channel, FeatureMatrix, FeatureSpace};
use crate::io::write_jsonl;

pub const DEFAULT_TOP_K: usize = 5;
pub const MAX_ORACLE_FEATURES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("tree {tree} of class {class} carries no cover counts")]
    MissingCovers { class: &'static str, tree: usize },
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("brute force supports at most {MAX_ORACLE_FEATURES} features, got {0}")]
    TooManyFeatures(usize),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AttributionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    pub user_id: String,
    pub item_id: String,
    pub target_class: SentimentLabel,
    pub phi: Vec<f64>,
    pub base_value: f64,
}

impl ShapAttribution {
    /// `base_value + sum(phi)`, which equals the target-class margin.
    pub fn reconstructed_margin(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>()
    }
}

fn checked_trees<'a>(ensemble: &'a TreeEnsemble, x: &[f64], class: SentimentLabel) -> Result<Vec<(&'a Tree, &'a [f64])>> {
    if x.len() != ensemble.feature_count() {
        return Err(AttributionError::DimensionMismatch {
            expected: ensemble.feature_count(),
            got: x.len(),
        });
    }
    ensemble
        .class_trees(class)
        .enumerate()
        .map(|(i, t)| match t.covers() {
            Some(c) => Ok((t, c)),
            None if t.nodes().len() == 1 => Ok((t, &[1.0][..])),
            None => Err(AttributionError::MissingCovers {
                class: class.as_str(),
                tree: i,
            }),
        })
        .collect()
}

fn base_value(ensemble: &TreeEnsemble, trees: &[(&Tree, &[f64])], class: SentimentLabel) -> f64 {
    let expected: f64 = trees.iter().map(|(t, c)| expectation(t, c, &[], &|_| false)).sum();
    ensemble.base_scores()[class.index()] + ensemble.eta() * expected
}

/// Tree output at `x` with features outside `present` marginalized over the
/// cover-weighted branch mix.
fn expectation(tree: &Tree, covers: &[f64], x: &[f64], present: &dyn Fn(usize) -> bool) -> f64 {
    fn walk(nodes: &[Node], covers: &[f64], idx: usize, x: &[f64], present: &dyn Fn(usize) -> bool) -> f64 {
        match nodes[idx] {
            Node::Leaf { value } => value,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if present(feature) {
                    let next = if x[feature] < threshold { left } else { right };
                    walk(nodes, covers, next, x, present)
                } else {
                    let (wl, wr) = child_weights(covers, idx, left, right);
                    wl * walk(nodes, covers, left, x, present) + wr * walk(nodes, covers, right, x, present)
                }
            }
        }
    }
    walk(tree.nodes(), covers, 0, x, present)
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: usize,
    zero: f64,
    one: f64,
    weight: f64,
}

const ROOT_FEATURE: usize = usize::MAX;

fn extend(path: &mut Vec<PathElement>, zero: f64, one: f64, feature: usize) {
    let l = path.len();
    path.push(PathElement {
        feature,
        zero,
        one,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    let lf = l as f64;
    for i in (0..l).rev() {
        let w = path[i].weight;
        path[i + 1].weight += one * w * (i + 1) as f64 / (lf + 1.0);
        path[i].weight = zero * w * (lf - i as f64) / (lf + 1.0);
    }
}

fn unwind(path: &mut Vec<PathElement>, index: usize) {
    let l = path.len() - 1;
    let lf = l as f64;
    let PathElement { zero, one, .. } = path[index];
    let mut next = path[l].weight;
    for j in (0..l).rev() {
        if one != 0.0 {
            let t = path[j].weight;
            path[j].weight = next * (lf + 1.0) / ((j + 1) as f64 * one);
            next = t - path[j].weight * zero * (lf - j as f64) / (lf + 1.0);
        } else {
            path[j].weight = path[j].weight * (lf + 1.0) / (zero * (lf - j as f64));
        }
    }
    for j in index..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero = path[j + 1].zero;
        path[j].one = path[j + 1].one;
    }
    path.pop();
}

/// Total permutation weight of the path with element `index` removed.
fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let l = path.len() - 1;
    let lf = l as f64;
    let PathElement { zero, one, .. } = path[index];
    let mut next = path[l].weight;
    let mut total = 0.0;
    for j in (0..l).rev() {
        if one != 0.0 {
            let t = next * (lf + 1.0) / ((j + 1) as f64 * one);
            total += t;
            next = path[j].weight - t * zero * (lf - j as f64) / (lf + 1.0);
        } else if zero != 0.0 {
            total += path[j].weight * (lf + 1.0) / (zero * (lf - j as f64));
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    covers: &[f64],
    x: &[f64],
    phi: &mut [f64],
    node: usize,
    mut path: Vec<PathElement>,
    zero: f64,
    one: f64,
    feature: usize,
) {
    extend(&mut path, zero, one, feature);
    match tree.nodes()[node] {
        Node::Leaf { value } => {
            for i in 1..path.len() {
                let e = path[i];
                phi[e.feature] += unwound_sum(&path, i) * (e.one - e.zero) * value;
            }
        }
        Node::Split {
            feature: split,
            threshold,
            left,
            right,
        } => {
            let (wl, wr) = child_weights(covers, node, left, right);
            let (hot, cold, w_hot, w_cold) = if x[split] < threshold {
                (left, right, wl, wr)
            } else {
                (right, left, wr, wl)
            };
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = path.iter().position(|e| e.feature == split) {
                in_zero = path[k].zero;
                in_one = path[k].one;
                unwind(&mut path, k);
            }
            if w_hot * in_zero != 0.0 || in_one != 0.0 {
                recurse(tree, covers, x, phi, hot, path.clone(), w_hot * in_zero, in_one, split);
            }
            if w_cold * in_zero != 0.0 {
                recurse(tree, covers, x, phi, cold, path, w_cold * in_zero, 0.0, split);
            }
        }
    }
}

/// Exact TreeSHAP for one class margin.
pub fn tree_shap(ensemble: &TreeEnsemble, x: &[f64], target_class: SentimentLabel) -> Result<Vec<f64>> {
    Ok(shap_with_base(ensemble, x, target_class)?.0)
}

fn shap_with_base(ensemble: &TreeEnsemble, x: &[f64], class: SentimentLabel) -> Result<(Vec<f64>, f64)> {
    let trees = checked_trees(ensemble, x, class)?;
    let mut phi = vec![0.0; x.len()];
    for (tree, covers) in &trees {
        recurse(tree, covers, x, &mut phi, 0, Vec::with_capacity(tree.depth() + 2), 1.0, 1.0, ROOT_FEATURE);
    }
    let eta = ensemble.eta();
    phi.iter_mut().for_each(|p| *p *= eta);
    Ok((phi, base_value(ensemble, &trees, class)))
}

/// Attribution of the ensemble's predicted class for one pair.
pub fn attribute(ensemble: &TreeEnsemble, user_id: &str, item_id: &str, x: &[f64]) -> Result<ShapAttribution> {
    let target_class = predict(ensemble, x)?;
    attribute_class(ensemble, user_id, item_id, x, target_class)
}

pub fn attribute_class(
    ensemble: &TreeEnsemble,
    user_id: &str,
    item_id: &str,
    x: &[f64],
    target_class: SentimentLabel,
) -> Result<ShapAttribution> {
    let (phi, base_value) = shap_with_base(ensemble, x, target_class)?;
    Ok(ShapAttribution {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        target_class,
        phi,
        base_value,
    })
}

/// Attributes every row of a matrix, one independent task per row.
pub fn attribute_matrix(ensemble: &TreeEnsemble, matrix: &FeatureMatrix, exec: Execution) -> Result<Vec<ShapAttribution>> {
    exec.try_map(&matrix.rows, |r| attribute(ensemble, &r.user_id, &r.item_id, &r.values))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley values by enumerating every coalition.
pub fn brute_force_shap(ensemble: &TreeEnsemble, x: &[f64], target_class: SentimentLabel) -> Result<Vec<f64>> {
    let m = ensemble.feature_count();
    if m > MAX_ORACLE_FEATURES {
        return Err(AttributionError::TooManyFeatures(m));
    }
    let trees = checked_trees(ensemble, x, target_class)?;
    let value: Vec<f64> = (0..1usize << m)
        .map(|mask| {
            let present = |f: usize| mask >> f & 1 == 1;
            trees.iter().map(|(t, c)| expectation(t, c, x, &present)).sum()
        })
        .collect();
    let weights: Vec<f64> = (0..m).map(|s| 1.0 / (m as f64 * binomial(m - 1, s))).collect();
    let eta = ensemble.eta();
    Ok((0..m)
        .map(|j| {
            let bit = 1usize << j;
            (0..1usize << m)
                .filter(|s| s & bit == 0)
                .map(|s| weights[s.count_ones() as usize] * (value[s | bit] - value[s]))
                .sum::<f64>()
                * eta
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub feature_index: usize,
    pub cluster_kind: ClusterKind,
    pub cluster: usize,
    pub cluster_name: String,
    pub channel: Channel,
    pub phi_value: f64,
    pub sign: Sign,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopFeatures {
    pub entries: Vec<TopEntry>,
}

impl TopFeatures {
    /// One entry per cluster, keeping the channel with the larger |phi|.
    pub fn merged_by_cluster(&self) -> Vec<TopEntry> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert((e.cluster_kind.tag(), e.cluster)))
            .cloned()
            .collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.feature_index).collect()
    }
}

/// Up to `k` nonzero features by |phi| descending, ties toward the lower
/// index.
pub fn top_k(attribution: &ShapAttribution, space: &FeatureSpace, k: usize) -> TopFeatures {
    let mut order: Vec<usize> = (0..attribution.phi.len()).filter(|&i| attribution.phi[i] != 0.0).collect();
    order.sort_by(|&a, &b| {
        attribution.phi[b]
            .abs()
            .total_cmp(&attribution.phi[a].abs())
            .then(a.cmp(&b))
    });
    let entries = order
        .into_iter()
        .filter_map(|i| {
            let slot = space.describe(i)?;
            let phi = attribution.phi[i];
            Some(TopEntry {
                feature_index: i,
                cluster_kind: slot.kind,
                cluster: slot.cluster,
                cluster_name: space.cluster_name(slot.kind, slot.cluster),
                channel: slot.channel,
                phi_value: phi,
                sign: if phi > 0.0 { Sign::Positive } else { Sign::Negative },
            })
        })
        .take(k)
        .collect();
    TopFeatures { entries }
}

/// One line of the attribution dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub review_id: String,
    pub user_id: String,
    pub item_id: String,
    pub target_class: SentimentLabel,
    pub base_value: f64,
    pub dim: usize,
    /// Nonzero entries as `(index, phi)`.
    pub phi: Vec<(usize, f64)>,
    pub top_k: TopFeatures,
}

impl AttributionRecord {
    pub fn new(review_id: &str, attribution: &ShapAttribution, top: TopFeatures) -> Self {
        AttributionRecord {
            review_id: review_id.to_string(),
            user_id: attribution.user_id.clone(),
            item_id: attribution.item_id.clone(),
            target_class: attribution.target_class,
            base_value: attribution.base_value,
            dim: attribution.phi.len(),
            phi: attribution
                .phi
                .iter()
                .enumerate()
                .filter(|(_, p)| **p != 0.0)
                .map(|(i, p)| (i, *p))
                .collect(),
            top_k: top,
        }
    }

    pub fn attribution(&self) -> ShapAttribution {
        let mut phi = vec![0.0; self.dim];
        for &(i, p) in &self.phi {
            if i < self.dim {
                phi[i] = p;
            }
        }
        ShapAttribution {
            user_id: self.user_id.clone(),
            item_id: self.item_id.clone(),
            target_class: self.target_class,
            phi,
            base_value: self.base_value,
        }
    }
}

pub fn write_dump(path: &Path, records: &[AttributionRecord]) -> Result<()> {
    Ok(write_jsonl(path, records)?)
}
