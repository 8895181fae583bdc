//! Multiclass gradient-boosted decision trees over pair vectors.
//!
//! Each boosting round fits one regression tree per sentiment class to the
//! softmax cross-entropy gradients. Leaf values are Newton steps
//! `-G / (H + lambda)`; margins are `base[c] + eta * sum_r tree[r][c](x)`.

mod metrics;
mod model_io;
mod train;
mod tree;
mod tune;

pub use metrics::{confusion_matrix, per_class_recall, weighted_f1, MetricError};
pub use model_io::{ModelSummary, MODEL_MAGIC, MODEL_VERSION};
pub use train::{train, train_with_log, Trained};
pub use tree::{Node, Tree, TreeError};
pub use tune::{tune, SearchSpace, Trial, TuneResult};

pub(crate) use tree::child_weights;

use serde::{Deserialize, Serialize};

use crate::corpus::SentimentLabel;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

/// Dense row-major feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_cols: usize,
    values: Vec<f64>,
    labels: Vec<SentimentLabel>,
}

impl Dataset {
    pub fn new(n_cols: usize, values: Vec<f64>, labels: Vec<SentimentLabel>) -> Result<Self> {
        if values.len() != n_cols * labels.len() {
            return Err(ClassifierError::DimensionMismatch {
                expected: n_cols * labels.len(),
                got: values.len(),
            });
        }
        Ok(Dataset {
            n_cols,
            values,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<SentimentLabel>) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_cols) {
            return Err(ClassifierError::DimensionMismatch {
                expected: n_cols,
                got: bad.len(),
            });
        }
        Self::new(n_cols, rows.concat(), labels)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_cols.max(1)).take(self.n_rows())
    }

    pub fn labels(&self) -> &[SentimentLabel] {
        &self.labels
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols + col]
    }
}

/// Booster hyperparameters. The named constructors carry the best values
/// reported for each benchmark domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_estimators: usize,
    pub eta: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub colsample_bytree: f64,
    pub gamma: f64,
    pub use_weight: bool,
    /// L2 penalty on leaf values.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::tripadvisor()
    }
}

impl Hyperparams {
    pub fn tripadvisor() -> Self {
        Hyperparams {
            n_estimators: 1000,
            eta: 0.05,
            max_depth: 16,
            min_child_weight: 10.0,
            colsample_bytree: 0.65,
            gamma: 0.7,
            use_weight: true,
            lambda: 1.0,
        }
    }

    pub fn amazon() -> Self {
        Hyperparams {
            n_estimators: 1100,
            eta: 0.05,
            max_depth: 12,
            min_child_weight: 10.0,
            colsample_bytree: 0.7,
            gamma: 0.2,
            use_weight: true,
            lambda: 1.0,
        }
    }

    pub fn yelp() -> Self {
        Hyperparams {
            n_estimators: 1900,
            eta: 0.05,
            max_depth: 19,
            min_child_weight: 9.0,
            colsample_bytree: 0.55,
            gamma: 0.95,
            use_weight: true,
            lambda: 1.0,
        }
    }

    /// Structural validity required by the trainer.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClassifierError::InvalidParams(m.to_string()));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must be in (0, 1]");
        }
        if !(self.colsample_bytree > 0.0 && self.colsample_bytree <= 1.0) {
            return bad("colsample_bytree must be in (0, 1]");
        }
        if !(self.min_child_weight >= 0.0) || !self.min_child_weight.is_finite() {
            return bad("min_child_weight must be >= 0");
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be >= 0");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be >= 0");
        }
        Ok(())
    }

    /// Whether every tuned value lies inside the published search ranges.
    pub fn within_search_space(&self, space: &SearchSpace) -> bool {
        space.contains(self)
    }
}

/// A trained booster: `rounds[r][c]` is round `r`'s tree for class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub(crate) rounds: Vec<Vec<Tree>>,
    pub(crate) eta: f64,
    pub(crate) base_scores: [f64; NUM_CLASSES],
    pub(crate) feature_count: usize,
}

impl TreeEnsemble {
    pub fn new(
        rounds: Vec<Vec<Tree>>,
        eta: f64,
        base_scores: [f64; NUM_CLASSES],
        feature_count: usize,
    ) -> Result<Self> {
        for round in &rounds {
            if round.len() != NUM_CLASSES {
                return Err(ClassifierError::Format(format!(
                    "round has {} trees, expected {NUM_CLASSES}",
                    round.len()
                )));
            }
            for tree in round {
                if let Some(f) = tree.max_feature() {
                    if f >= feature_count {
                        return Err(ClassifierError::DimensionMismatch {
                            expected: feature_count,
                            got: f + 1,
                        });
                    }
                }
            }
        }
        Ok(TreeEnsemble {
            rounds,
            eta,
            base_scores,
            feature_count,
        })
    }

    pub fn rounds(&self) -> &[Vec<Tree>] {
        &self.rounds
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn base_scores(&self) -> [f64; NUM_CLASSES] {
        self.base_scores
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    /// Trees contributing to one class's margin, in round order.
    pub fn class_trees(&self, class: SentimentLabel) -> impl Iterator<Item = &Tree> {
        self.rounds.iter().map(move |r| &r[class.index()])
    }

    /// Drops all rounds after the first `n`.
    pub fn truncated(&self, n: usize) -> Self {
        TreeEnsemble {
            rounds: self.rounds[..n.min(self.rounds.len())].to_vec(),
            ..self.clone()
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_count {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.feature_count,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn margin_unchecked(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        let mut sums = [0.0; NUM_CLASSES];
        for round in &self.rounds {
            for (c, tree) in round.iter().enumerate() {
                sums[c] += tree.predict(x);
            }
        }
        let mut m = self.base_scores;
        for c in 0..NUM_CLASSES {
            m[c] += self.eta * sums[c];
        }
        m
    }
}

/// Raw per-class scores.
pub fn predict_margin(ensemble: &TreeEnsemble, x: &[f64]) -> Result<[f64; NUM_CLASSES]> {
    ensemble.check_dim(x)?;
    Ok(ensemble.margin_unchecked(x))
}

pub fn softmax(margins: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut total = 0.0;
    for (o, m) in out.iter_mut().zip(margins) {
        *o = (m - max).exp();
        total += *o;
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

pub fn predict_proba(ensemble: &TreeEnsemble, x: &[f64]) -> Result<[f64; NUM_CLASSES]> {
    Ok(softmax(&predict_margin(ensemble, x)?))
}

/// Argmax with exact ties resolved toward neutral, then positive, then negative.
pub fn argmax_label(scores: &[f64; NUM_CLASSES]) -> SentimentLabel {
    const PREFERENCE: [SentimentLabel; 3] = [
        SentimentLabel::Neutral,
        SentimentLabel::Positive,
        SentimentLabel::Negative,
    ];
    let mut best = PREFERENCE[0];
    for &label in &PREFERENCE[1..] {
        if scores[label.index()] > scores[best.index()] {
            best = label;
        }
    }
    best
}

pub fn predict(ensemble: &TreeEnsemble, x: &[f64]) -> Result<SentimentLabel> {
    Ok(argmax_label(&predict_margin(ensemble, x)?))
}

/// Mean softmax cross-entropy of the ensemble on a dataset.
pub fn mean_cross_entropy(ensemble: &TreeEnsemble, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in data.rows().zip(data.labels()) {
        let p = predict_proba(ensemble, x)?;
        total -= p[y.index()].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / data.n_rows().max(1) as f64)
}
