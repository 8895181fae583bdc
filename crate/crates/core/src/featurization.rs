//! Structured user, item and pair vectors.
//!
//! Every cluster contributes two positions: how many of the entity's training
//! reviews mention it, and the sum of those reviews' ratings. The user block
//! comes first (`2c` frequency, `2c + 1` rating sum), then the item block at
//! offset `2 K_u`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierError, Dataset};
use crate::clustering::{ClusterKind, ClusterModel, ClusterNaming};
use crate::corpus::{DatasetSplit, Review, SentimentLabel, SplitTag};
use crate::exec::Execution;
use crate::extraction::ExtractionResult;
use crate::io::{read_json, write_atomic, write_json};
use crate::llm::{Gateway, GatewayError};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("review {0} is not in the training split")]
    NotTrain(String),
    #[error("cluster model kind does not match {0:?}")]
    WrongKind(ClusterKind),
    #[error("matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cluster(#[from] crate::clustering::ClusterError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Frequency,
    RatingSum,
}

impl Channel {
    fn offset(self) -> usize {
        match self {
            Channel::Frequency => 0,
            Channel::RatingSum => 1,
        }
    }
}

/// What one vector position means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub kind: ClusterKind,
    pub cluster: usize,
    pub channel: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub k_u: usize,
    pub k_i: usize,
    pub need_names: Vec<String>,
    pub feature_names: Vec<String>,
}

impl FeatureSpace {
    /// Space with placeholder names.
    pub fn new(k_u: usize, k_i: usize) -> Self {
        FeatureSpace {
            k_u,
            k_i,
            need_names: (0..k_u).map(|c| ClusterKind::UserNeeds.fallback_name(c)).collect(),
            feature_names: (0..k_i).map(|c| ClusterKind::ItemFeatures.fallback_name(c)).collect(),
        }
    }

    pub fn from_namings(needs: &ClusterNaming, features: &ClusterNaming) -> Self {
        FeatureSpace {
            k_u: needs.clusters.len(),
            k_i: features.clusters.len(),
            need_names: needs.names(),
            feature_names: features.names(),
        }
    }

    pub fn dim(&self) -> usize {
        2 * (self.k_u + self.k_i)
    }

    pub fn user_dim(&self) -> usize {
        2 * self.k_u
    }

    pub fn item_dim(&self) -> usize {
        2 * self.k_i
    }

    pub fn position(&self, slot: Slot) -> usize {
        match slot.kind {
            ClusterKind::UserNeeds => 2 * slot.cluster + slot.channel.offset(),
            ClusterKind::ItemFeatures => 2 * self.k_u + 2 * slot.cluster + slot.channel.offset(),
        }
    }

    pub fn describe(&self, position: usize) -> Option<Slot> {
        if position >= self.dim() {
            return None;
        }
        let (kind, local) = if position < 2 * self.k_u {
            (ClusterKind::UserNeeds, position)
        } else {
            (ClusterKind::ItemFeatures, position - 2 * self.k_u)
        };
        let channel = if local % 2 == 0 { Channel::Frequency } else { Channel::RatingSum };
        Some(Slot {
            kind,
            cluster: local / 2,
            channel,
        })
    }

    pub fn cluster_name(&self, kind: ClusterKind, cluster: usize) -> String {
        let names = match kind {
            ClusterKind::UserNeeds => &self.need_names,
            ClusterKind::ItemFeatures => &self.feature_names,
        };
        names
            .get(cluster)
            .filter(|n| !n.trim().is_empty())
            .cloned()
            .unwrap_or_else(|| kind.fallback_name(cluster))
    }

    pub fn column_names(&self) -> Vec<String> {
        (0..self.dim())
            .map(|p| {
                let s = self.describe(p).expect("position in range");
                let ch = match s.channel {
                    Channel::Frequency => "freq",
                    Channel::RatingSum => "rating_sum",
                };
                format!("{}[{}]:{}", s.kind.tag(), s.cluster, ch)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVector {
    pub user_id: String,
    pub item_id: String,
    pub values: Vec<f64>,
}

impl PairVector {
    /// Whether every cluster satisfies `freq <= sum <= 5 freq` with integral,
    /// non-negative frequencies.
    pub fn within_rating_bounds(&self) -> bool {
        self.values.chunks(2).all(|c| {
            let (f, s) = (c[0], c[1]);
            f >= 0.0 && f.fract() == 0.0 && s >= f - 1e-9 && s <= 5.0 * f + 1e-9
        })
    }
}

pub fn pair_vector(v_u: &[f64], v_i: &[f64], space: &FeatureSpace, user_id: &str, item_id: &str) -> Result<PairVector> {
    for (v, expected) in [(v_u, space.user_dim()), (v_i, space.item_dim())] {
        if v.len() != expected {
            return Err(FeatureError::DimensionMismatch { expected, got: v.len() });
        }
    }
    let mut values = Vec::with_capacity(space.dim());
    values.extend_from_slice(v_u);
    values.extend_from_slice(v_i);
    Ok(PairVector {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        values,
    })
}

/// Phrase to cluster lookups for both kinds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhraseAssignments {
    pub needs: HashMap<String, usize>,
    pub features: HashMap<String, usize>,
}

impl PhraseAssignments {
    /// Embeds every distinct phrase in `extractions` and assigns it to the
    /// nearest centroid of the matching model.
    pub fn from_models(
        extractions: &[ExtractionResult],
        need_model: &ClusterModel,
        feature_model: &ClusterModel,
        gateway: &Gateway,
    ) -> Result<Self> {
        if need_model.kind != ClusterKind::UserNeeds {
            return Err(FeatureError::WrongKind(ClusterKind::UserNeeds));
        }
        if feature_model.kind != ClusterKind::ItemFeatures {
            return Err(FeatureError::WrongKind(ClusterKind::ItemFeatures));
        }
        let assign = |phrases: BTreeSet<&String>, model: &ClusterModel| -> Result<HashMap<String, usize>> {
            let texts: Vec<String> = phrases.into_iter().cloned().collect();
            if texts.is_empty() {
                return Ok(HashMap::new());
            }
            gateway
                .embed(&texts)?
                .into_iter()
                .map(|e| Ok((e.source_text, model.assign(&e.values)?)))
                .collect()
        };
        Ok(PhraseAssignments {
            needs: assign(extractions.iter().flat_map(|e| &e.user_needs).collect(), need_model)?,
            features: assign(extractions.iter().flat_map(|e| &e.item_features).collect(), feature_model)?,
        })
    }
}

/// A training review reduced to its rating and the clusters it mentions.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedReview {
    pub review_id: String,
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub need_clusters: BTreeSet<usize>,
    pub feature_clusters: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    reviews: Vec<AnnotatedReview>,
    by_user: HashMap<String, Vec<usize>>,
    by_item: HashMap<String, Vec<usize>>,
}

impl TrainHistory {
    /// Reviews without an extraction result, or with phrases missing from the
    /// lookups, contribute no clusters.
    pub fn build(train: &[Review], extractions: &[ExtractionResult], assignments: &PhraseAssignments) -> Result<Self> {
        let by_id: HashMap<&str, &ExtractionResult> = extractions.iter().map(|e| (e.review_id.as_str(), e)).collect();
        let mut history = TrainHistory::default();
        for r in train {
            if r.split_tag.is_some_and(|t| t != SplitTag::Train) {
                return Err(FeatureError::NotTrain(r.id.clone()));
            }
            let (needs, features) = match by_id.get(r.id.as_str()) {
                Some(e) => (
                    e.user_needs.iter().filter_map(|p| assignments.needs.get(p).copied()).collect(),
                    e.item_features.iter().filter_map(|p| assignments.features.get(p).copied()).collect(),
                ),
                None => (BTreeSet::new(), BTreeSet::new()),
            };
            let idx = history.reviews.len();
            history.by_user.entry(r.user_id.clone()).or_default().push(idx);
            history.by_item.entry(r.item_id.clone()).or_default().push(idx);
            history.reviews.push(AnnotatedReview {
                review_id: r.id.clone(),
                user_id: r.user_id.clone(),
                item_id: r.item_id.clone(),
                rating: r.rating,
                need_clusters: needs,
                feature_clusters: features,
            });
        }
        Ok(history)
    }

    pub fn reviews(&self) -> &[AnnotatedReview] {
        &self.reviews
    }

    fn aggregate(
        &self,
        indices: Option<&Vec<usize>>,
        k: usize,
        exclude: Option<&str>,
        clusters: impl Fn(&AnnotatedReview) -> &BTreeSet<usize>,
    ) -> Vec<f64> {
        let mut v = vec![0.0; 2 * k];
        for &i in indices.into_iter().flatten() {
            let r = &self.reviews[i];
            if exclude == Some(r.review_id.as_str()) {
                continue;
            }
            for &c in clusters(r).iter().filter(|&&c| c < k) {
                v[2 * c] += 1.0;
                v[2 * c + 1] += r.rating;
            }
        }
        v
    }
}

/// User block over the user's training reviews, skipping `exclude`.
pub fn build_user_vector(history: &TrainHistory, user_id: &str, space: &FeatureSpace, exclude: Option<&str>) -> Vec<f64> {
    let idx = history.by_user.get(user_id);
    if idx.is_none() {
        log::warn!("user {user_id} has no training history; using a zero vector");
    }
    history.aggregate(idx, space.k_u, exclude, |r| &r.need_clusters)
}

/// Item block over the item's training reviews, skipping `exclude`.
pub fn build_item_vector(history: &TrainHistory, item_id: &str, space: &FeatureSpace, exclude: Option<&str>) -> Vec<f64> {
    let idx = history.by_item.get(item_id);
    if idx.is_none() {
        log::warn!("item {item_id} has no training history; using a zero vector");
    }
    history.aggregate(idx, space.k_i, exclude, |r| &r.feature_clusters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub space: FeatureSpace,
    pub review_ids: Vec<String>,
    pub rows: Vec<PairVector>,
    pub labels: Vec<SentimentLabel>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let values = self.rows.iter().flat_map(|r| r.values.iter().copied()).collect();
        Ok(Dataset::new(self.space.dim(), values, self.labels.clone())?)
    }
}

/// Builds one matrix from training history. Training rows leave their own
/// review out so no row sees its label.
pub fn featurize_reviews(
    reviews: &[Review],
    history: &TrainHistory,
    space: &FeatureSpace,
    leave_one_out: bool,
    exec: Execution,
) -> FeatureMatrix {
    let rows = exec.map(reviews, |r| {
        let exclude = leave_one_out.then_some(r.id.as_str());
        let u = build_user_vector(history, &r.user_id, space, exclude);
        let i = build_item_vector(history, &r.item_id, space, exclude);
        pair_vector(&u, &i, space, &r.user_id, &r.item_id).expect("blocks sized by the space")
    });
    FeatureMatrix {
        space: space.clone(),
        review_ids: reviews.iter().map(|r| r.id.clone()).collect(),
        rows,
        labels: reviews.iter().map(Review::sentiment).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedSplit {
    pub train: FeatureMatrix,
    pub valid: FeatureMatrix,
    pub test: FeatureMatrix,
}

pub fn featurize_split(split: &DatasetSplit, history: &TrainHistory, space: &FeatureSpace, exec: Execution) -> FeaturizedSplit {
    FeaturizedSplit {
        train: featurize_reviews(&split.train, history, space, true, exec),
        valid: featurize_reviews(&split.valid, history, space, false, exec),
        test: featurize_reviews(&split.test, history, space, false, exec),
    }
}

const MATRIX_MAGIC: &[u8; 8] = b"FIREMAT\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RowKey {
    review_id: String,
    user_id: String,
    item_id: String,
}

/// Sidecar written next to the binary matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub space: FeatureSpace,
    pub columns: Vec<String>,
    rows: Vec<RowKey>,
}

impl FeatureMatrix {
    /// Column-major binary (little-endian): magic | u64 rows | u32 cols
    /// | cols x rows f64 | rows x u8 label index.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.rows.len();
        let d = self.space.dim();
        let mut out = Vec::with_capacity(20 + 8 * n * d + n);
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for c in 0..d {
            for r in &self.rows {
                out.extend_from_slice(&r.values[c].to_le_bytes());
            }
        }
        out.extend(self.labels.iter().map(|l| l.index() as u8));
        out
    }

    pub fn sidecar(&self) -> MatrixSidecar {
        MatrixSidecar {
            space: self.space.clone(),
            columns: self.space.column_names(),
            rows: self
                .rows
                .iter()
                .zip(&self.review_ids)
                .map(|(r, id)| RowKey {
                    review_id: id.clone(),
                    user_id: r.user_id.clone(),
                    item_id: r.item_id.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, bin: &Path, sidecar: &Path) -> Result<()> {
        write_atomic(bin, &self.to_bytes())?;
        write_json(sidecar, &self.sidecar())?;
        Ok(())
    }

    pub fn load(bin: &Path, sidecar: &Path) -> Result<Self> {
        let meta: MatrixSidecar = read_json(sidecar)?;
        Self::from_parts(&std::fs::read(bin)?, meta)
    }

    pub fn from_parts(bytes: &[u8], meta: MatrixSidecar) -> Result<Self> {
        let bad = |m: &str| FeatureError::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MATRIX_MAGIC {
            return Err(bad("bad header"));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        if d != meta.space.dim() || n != meta.rows.len() {
            return Err(bad("header disagrees with sidecar"));
        }
        if bytes.len() != 20 + 8 * n * d + n {
            return Err(bad("wrong length"));
        }
        let body = &bytes[20..];
        let mut rows: Vec<PairVector> = meta
            .rows
            .iter()
            .map(|k| PairVector {
                user_id: k.user_id.clone(),
                item_id: k.item_id.clone(),
                values: vec![0.0; d],
            })
            .collect();
        for c in 0..d {
            for (r, row) in rows.iter_mut().enumerate() {
                let at = 8 * (c * n + r);
                row.values[c] = f64::from_le_bytes(body[at..at + 8].try_into().unwrap());
            }
        }
        let labels = body[8 * n * d..]
            .iter()
            .map(|&b| SentimentLabel::from_index(b as usize).ok_or_else(|| bad("bad label")))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMatrix {
            space: meta.space,
            review_ids: meta.rows.into_iter().map(|k| k.review_id).collect(),
            rows,
            labels,
        })
    }
}
