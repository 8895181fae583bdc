//! Review corpora: loading, interaction filtering, sentiment labels and the
//! coverage-preserving train/valid/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("rating {0} is outside [1, 5]")]
    RatingOutOfRange(f64),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    Empty,
    #[error("unknown corpus format {0:?} (expected jsonl or csv)")]
    UnknownFormat(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

/// One user–item interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_tag: Option<SplitTag>,
}

impl Review {
    pub fn new(
        id: impl Into<String>,
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        rating: f64,
        text: impl Into<String>,
    ) -> Result<Self> {
        let review = Review {
            id: id.into(),
            user_id: user_id.into(),
            item_id: item_id.into(),
            rating,
            text: text.into(),
            split_tag: None,
        };
        review.validate().map_err(|message| CorpusError::Record { line: 0, message })?;
        Ok(review)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.user_id.trim().is_empty() {
            return Err("empty user id".into());
        }
        if self.item_id.trim().is_empty() {
            return Err("empty item id".into());
        }
        if !(1.0..=5.0).contains(&self.rating) {
            return Err(format!("rating {} is outside [1, 5]", self.rating));
        }
        Ok(())
    }

    pub fn sentiment(&self) -> SentimentLabel {
        // validated at construction
        to_sentiment(self.rating).unwrap_or(SentimentLabel::Neutral)
    }

    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

/// Three-way sentiment class with canonical indices 0, 1, 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 3] = [
        SentimentLabel::Negative,
        SentimentLabel::Neutral,
        SentimentLabel::Positive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SentimentLabel::Negative => "negative",
            SentimentLabel::Neutral => "neutral",
            SentimentLabel::Positive => "positive",
        }
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SentimentLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "negative" => Ok(SentimentLabel::Negative),
            "neutral" => Ok(SentimentLabel::Neutral),
            "positive" => Ok(SentimentLabel::Positive),
            other => Err(format!("unknown sentiment {other:?}")),
        }
    }
}

/// Maps a 1–5 star rating to its sentiment class.
///
/// `r >= 3.5` is positive, `r <= 2.5` is negative and everything strictly in
/// between is neutral.
pub fn to_sentiment(rating: f64) -> Result<SentimentLabel> {
    if !(1.0..=5.0).contains(&rating) {
        return Err(CorpusError::RatingOutOfRange(rating));
    }
    Ok(if rating >= 3.5 {
        SentimentLabel::Positive
    } else if rating <= 2.5 {
        SentimentLabel::Negative
    } else {
        SentimentLabel::Neutral
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    JsonLines,
    Csv,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json-lines" | "jsonlines" => Ok(CorpusFormat::JsonLines),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    user: Option<serde_json::Value>,
    item: Option<serde_json::Value>,
    rating: Option<serde_json::Value>,
    text: Option<String>,
}

fn scalar_to_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_rating(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn build_review(raw: RawRecord, line: usize) -> Result<Review> {
    let err = |message: String| CorpusError::Record { line, message };
    let user = raw
        .user
        .as_ref()
        .and_then(scalar_to_string)
        .ok_or_else(|| err("missing field \"user\"".into()))?;
    let item = raw
        .item
        .as_ref()
        .and_then(scalar_to_string)
        .ok_or_else(|| err("missing field \"item\"".into()))?;
    let rating_value = raw
        .rating
        .as_ref()
        .ok_or_else(|| err("missing field \"rating\"".into()))?;
    let rating = parse_rating(rating_value)
        .ok_or_else(|| err(format!("unparsable rating {rating_value}")))?;
    let text = raw.text.ok_or_else(|| err("missing field \"text\"".into()))?;
    let id = raw
        .id
        .as_ref()
        .and_then(scalar_to_string)
        .unwrap_or_else(|| format!("L{line}"));
    let review = Review {
        id,
        user_id: user,
        item_id: item,
        rating,
        text,
        split_tag: None,
    };
    review.validate().map_err(err)?;
    Ok(review)
}

/// Loads reviews in file order. Missing ids default to `L<line>`.
pub fn load_reviews(path: &Path, format: CorpusFormat) -> Result<Vec<Review>> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let content = fs::read_to_string(path).map_err(io_err)?;
    let reviews = match format {
        CorpusFormat::JsonLines => parse_jsonl(&content)?,
        CorpusFormat::Csv => parse_csv(&content)?,
    };
    let mut seen = HashSet::new();
    for r in &reviews {
        if !seen.insert(r.id.as_str()) {
            return Err(CorpusError::DuplicateId(r.id.clone()));
        }
    }
    Ok(reviews)
}

fn parse_jsonl(content: &str) -> Result<Vec<Review>> {
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(build_review(raw, line_no)?);
    }
    Ok(out)
}

fn parse_csv(content: &str) -> Result<Vec<Review>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(content.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Record {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (c_id, c_user, c_item, c_rating, c_text) =
        (col("id"), col("user"), col("item"), col("rating"), col("text"));
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::Record {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |c: Option<usize>| {
            c.and_then(|c| record.get(c))
                .map(|s| serde_json::Value::String(s.to_string()))
        };
        let raw = RawRecord {
            id: get(c_id),
            user: get(c_user),
            item: get(c_item),
            rating: get(c_rating),
            text: c_text.and_then(|c| record.get(c)).map(str::to_string),
        };
        out.push(build_review(raw, line)?);
    }
    Ok(out)
}

/// Drops users and items with fewer than `min_count` interactions, repeating
/// until nothing changes.
pub fn filter_min_interactions(reviews: &[Review], min_count: usize) -> Vec<Review> {
    let mut current: Vec<Review> = reviews.to_vec();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|r| users[r.user_id.as_str()] >= min_count && items[r.item_id.as_str()] >= min_count)
            .collect();
        if keep.iter().all(|&k| k) {
            return current;
        }
        current = current
            .into_iter()
            .zip(keep)
            .filter_map(|(r, k)| k.then_some(r))
            .collect();
    }
}

/// Relative split sizes; defaults to 8:1:1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 8.0,
            valid: 1.0,
            test: 1.0,
        }
    }
}

impl SplitRatios {
    fn fractions(&self) -> (f64, f64) {
        let total = self.train + self.valid + self.test;
        (self.valid / total, self.test / total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Review>,
    pub valid: Vec<Review>,
    pub test: Vec<Review>,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// The persisted form of a split: record ids per partition plus the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[Review]| v.iter().map(|r| r.id.clone()).collect();
        SplitManifest {
            seed: self.seed,
            train: ids(&self.train),
            valid: ids(&self.valid),
            test: ids(&self.test),
        }
    }

    /// Rebuilds a split from a manifest and the records it refers to.
    pub fn from_manifest(manifest: &SplitManifest, reviews: &[Review]) -> Result<Self> {
        let by_id: HashMap<&str, &Review> = reviews.iter().map(|r| (r.id.as_str(), r)).collect();
        let pick = |ids: &[String], tag: SplitTag| -> Result<Vec<Review>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|r| Review {
                            split_tag: Some(tag),
                            ..(*r).clone()
                        })
                        .ok_or_else(|| CorpusError::Record {
                            line: 0,
                            message: format!("manifest refers to unknown record {id:?}"),
                        })
                })
                .collect()
        };
        Ok(DatasetSplit {
            train: pick(&manifest.train, SplitTag::Train)?,
            valid: pick(&manifest.valid, SplitTag::Valid)?,
            test: pick(&manifest.test, SplitTag::Test)?,
            seed: manifest.seed,
            warnings: Vec::new(),
        })
    }
}

/// Picks a count in `[floor(exact), ceil(exact)]` that tracks the cumulative
/// rounded target, bounded above by `cap`.
fn tracked_count(exact_share: f64, cumulative_exact: f64, assigned: usize, cap: usize) -> usize {
    let lo = exact_share.floor() as usize;
    let hi = exact_share.ceil() as usize;
    let target = (cumulative_exact.round() as i64 - assigned as i64).max(0) as usize;
    target.clamp(lo, hi).min(cap)
}

/// Splits reviews per user so that every user and item appears in train.
///
/// Each user's reviews are shuffled with the run seed; the first one goes to
/// train, then valid and test take their share (rounded so the global totals
/// track the exact ratio), and the rest go to train. Items left without a
/// training review are repaired by swapping with a same-user train review.
pub fn split_dataset(reviews: &[Review], ratios: SplitRatios, seed: u64) -> DatasetSplit {
    let (valid_frac, test_frac) = ratios.fractions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, r) in reviews.iter().enumerate() {
        by_user.entry(&r.user_id).or_default().push(idx);
    }

    let mut tags = vec![SplitTag::Train; reviews.len()];
    let mut warnings = Vec::new();
    let (mut seen, mut assigned_valid, mut assigned_test) = (0usize, 0usize, 0usize);
    for (user, indices) in by_user.iter_mut() {
        indices.shuffle(&mut rng);
        let n = indices.len();
        seen += n;
        let room = n - 1;
        let n_valid = tracked_count(valid_frac * n as f64, valid_frac * seen as f64, assigned_valid, room);
        let n_test = tracked_count(
            test_frac * n as f64,
            test_frac * seen as f64,
            assigned_test,
            room - n_valid,
        );
        if n == 1 {
            warnings.push(format!("user {user:?} has a single review; kept in train"));
        }
        for &i in &indices[1..1 + n_valid] {
            tags[i] = SplitTag::Valid;
        }
        for &i in &indices[1 + n_valid..1 + n_valid + n_test] {
            tags[i] = SplitTag::Test;
        }
        assigned_valid += n_valid;
        assigned_test += n_test;
    }

    repair_item_coverage(reviews, &by_user, &mut tags, &mut warnings);

    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        seed,
        warnings,
    };
    for (r, tag) in reviews.iter().zip(tags) {
        let tagged = Review {
            split_tag: Some(tag),
            ..r.clone()
        };
        match tag {
            SplitTag::Train => split.train.push(tagged),
            SplitTag::Valid => split.valid.push(tagged),
            SplitTag::Test => split.test.push(tagged),
        }
    }
    split
}

fn repair_item_coverage(
    reviews: &[Review],
    by_user: &BTreeMap<&str, Vec<usize>>,
    tags: &mut [SplitTag],
    warnings: &mut Vec<String>,
) {
    let mut train_per_item: HashMap<&str, usize> = HashMap::new();
    for (r, t) in reviews.iter().zip(tags.iter()) {
        if *t == SplitTag::Train {
            *train_per_item.entry(&r.item_id).or_default() += 1;
        }
    }
    let items: BTreeSet<&str> = reviews.iter().map(|r| r.item_id.as_str()).collect();
    for item in items {
        if train_per_item.get(item).copied().unwrap_or(0) > 0 {
            continue;
        }
        // First held-out review of this item, in the user's shuffled order.
        let candidate = by_user
            .values()
            .flat_map(|v| v.iter().copied())
            .find(|&i| reviews[i].item_id == item && tags[i] != SplitTag::Train);
        let Some(held_out) = candidate else { continue };
        let user = reviews[held_out].user_id.as_str();
        let partner = by_user[user].iter().copied().skip(1).find(|&j| {
            tags[j] == SplitTag::Train && train_per_item[reviews[j].item_id.as_str()] >= 2
        });
        let old_tag = tags[held_out];
        tags[held_out] = SplitTag::Train;
        *train_per_item.entry(item).or_default() += 1;
        match partner {
            Some(j) => {
                tags[j] = old_tag;
                *train_per_item.get_mut(reviews[j].item_id.as_str()).unwrap() -= 1;
            }
            None => warnings.push(format!(
                "item {item:?} forced into train without a swap partner"
            )),
        }
    }
}

/// Summary statistics in the shape of a dataset statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub records: usize,
    pub records_per_user: f64,
    pub records_per_item: f64,
    pub mean_review_tokens: f64,
    /// Counts indexed by class (negative, neutral, positive).
    pub class_counts: [usize; 3],
    /// Positive:neutral:negative normalized to negative = 1, when defined.
    pub class_ratio: Option<(f64, f64, f64)>,
}

pub fn dataset_stats(reviews: &[Review]) -> Result<DatasetStats> {
    if reviews.is_empty() {
        return Err(CorpusError::Empty);
    }
    let users: HashSet<&str> = reviews.iter().map(|r| r.user_id.as_str()).collect();
    let items: HashSet<&str> = reviews.iter().map(|r| r.item_id.as_str()).collect();
    let mut class_counts = [0usize; 3];
    for r in reviews {
        class_counts[to_sentiment(r.rating)?.index()] += 1;
    }
    let tokens: usize = reviews.iter().map(Review::token_count).sum();
    let n = reviews.len() as f64;
    let neg = class_counts[0] as f64;
    let class_ratio = (neg > 0.0).then(|| {
        (
            class_counts[2] as f64 / neg,
            class_counts[1] as f64 / neg,
            1.0,
        )
    });
    Ok(DatasetStats {
        users: users.len(),
        items: items.len(),
        records: reviews.len(),
        records_per_user: n / users.len() as f64,
        records_per_item: n / items.len() as f64,
        mean_review_tokens: tokens as f64 / n,
        class_counts,
        class_ratio,
    })
}
