//! K-means over phrase embeddings, cluster representatives and naming.
//!
//! Distances are squared Euclidean. Each restart draws `k` distinct points
//! uniformly as initial centroids and runs Lloyd iterations until the
//! assignment stops changing or `max_iter` is reached; the restart with the
//! lowest inertia wins (earliest restart on ties).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::io::write_atomic;
use crate::llm::{ChatRequest, Gateway, ResponseFormat};
use crate::prompts::DomainProfile;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("no vectors to cluster")]
    Empty,
    #[error("k = {k} exceeds the {distinct} distinct vectors")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("phrases ({phrases}) and vectors ({vectors}) differ in length")]
    LengthMismatch { phrases: usize, vectors: usize },
    #[error("cluster model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterKind {
    UserNeeds,
    ItemFeatures,
}

impl ClusterKind {
    pub fn tag(self) -> &'static str {
        match self {
            ClusterKind::UserNeeds => "need",
            ClusterKind::ItemFeatures => "feature",
        }
    }

    /// Placeholder name for clusters the namer could not label.
    pub fn fallback_name(self, index: usize) -> String {
        format!("cluster-{}-{index}", self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub kind: ClusterKind,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub seed: u64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, vector: &[f64]) -> Result<usize> {
        if vector.len() != self.dim() {
            return Err(ClusterError::DimensionMismatch {
                expected: self.dim(),
                got: vector.len(),
            });
        }
        Ok(nearest(&self.centroids, vector).0)
    }

    /// Sum of squared distances from each vector to its nearest centroid.
    pub fn inertia_of(&self, vectors: &[Vec<f64>]) -> f64 {
        vectors.iter().map(|v| nearest(&self.centroids, v).1).sum()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

/// Inertia after every assignment step of one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartLog {
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub repairs: usize,
}

impl RestartLog {
    pub fn final_inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment step")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    pub restarts: Vec<RestartLog>,
    pub best_restart: usize,
}

pub fn kmeans(
    kind: ClusterKind,
    vectors: &[Vec<f64>],
    params: &KMeansParams,
    exec: Execution,
) -> Result<ClusterModel> {
    Ok(kmeans_with_log(kind, vectors, params, exec)?.model)
}

pub fn kmeans_with_log(
    kind: ClusterKind,
    vectors: &[Vec<f64>],
    params: &KMeansParams,
    exec: Execution,
) -> Result<KMeansFit> {
    if vectors.is_empty() {
        return Err(ClusterError::Empty);
    }
    if params.k == 0 || params.max_iter == 0 || params.restarts == 0 {
        return Err(ClusterError::InvalidParams(
            "k, max_iter and restarts must be >= 1".into(),
        ));
    }
    let d = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(ClusterError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let distinct = distinct_indices(vectors);
    if params.k > distinct.len() {
        return Err(ClusterError::TooFewDistinct {
            k: params.k,
            distinct: distinct.len(),
        });
    }
    let runs = exec.map_range(params.restarts, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(r as u64));
        let mut pool = distinct.clone();
        pool.shuffle(&mut rng);
        let init: Vec<Vec<f64>> = pool[..params.k].iter().map(|&i| vectors[i].clone()).collect();
        lloyd(vectors, init, params.max_iter)
    });
    let best_restart = runs
        .iter()
        .enumerate()
        .fold(0, |b, (i, run)| if run.2.final_inertia() < runs[b].2.final_inertia() { i } else { b });
    let mut restarts = Vec::with_capacity(runs.len());
    let mut chosen = None;
    for (i, (centroids, assignments, log)) in runs.into_iter().enumerate() {
        if i == best_restart {
            chosen = Some((centroids, assignments, log.final_inertia()));
        }
        restarts.push(log);
    }
    let (centroids, assignments, inertia) = chosen.expect("best restart exists");
    Ok(KMeansFit {
        model: ClusterModel {
            kind,
            centroids,
            inertia,
            seed: params.seed,
        },
        assignments,
        restarts,
        best_restart,
    })
}

fn distinct_indices(vectors: &[Vec<f64>]) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..vectors.len())
        .filter(|&i| seen.insert(vectors[i].iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect()
}

fn assign_all(vectors: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    vectors.iter().map(|v| nearest(centroids, v)).unzip()
}

fn lloyd(
    vectors: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iter: usize,
) -> (Vec<Vec<f64>>, Vec<usize>, RestartLog) {
    let (mut assignments, mut dists) = assign_all(vectors, &centroids);
    let mut log = RestartLog {
        inertia_history: vec![dists.iter().sum()],
        iterations: 0,
        repairs: 0,
    };
    for _ in 0..max_iter {
        log.iterations += 1;
        let mut next = update_centroids(vectors, &assignments, &centroids);
        log.repairs += repair_empty_clusters(vectors, &assignments, &dists, &mut next);
        let (new_assignments, new_dists) = assign_all(vectors, &next);
        log.inertia_history.push(new_dists.iter().sum());
        centroids = next;
        let converged = new_assignments == assignments;
        assignments = new_assignments;
        dists = new_dists;
        if converged {
            break;
        }
    }
    (centroids, assignments, log)
}

fn update_centroids(vectors: &[Vec<f64>], assignments: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = previous[0].len();
    let mut sums = vec![vec![0.0; d]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (v, &a) in vectors.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(v) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect()
}

/// Moves every centroid that lost all its members onto the point farthest from
/// its nearest centroid. Returns how many centroids were moved.
pub(crate) fn repair_empty_clusters(
    vectors: &[Vec<f64>],
    assignments: &[usize],
    dists: &[f64],
    centroids: &mut [Vec<f64>],
) -> usize {
    let mut counts = vec![0usize; centroids.len()];
    for &a in assignments {
        counts[a] += 1;
    }
    let mut taken: HashSet<usize> = HashSet::new();
    let mut repairs = 0;
    for c in 0..centroids.len() {
        if counts[c] > 0 {
            continue;
        }
        let farthest = (0..vectors.len())
            .filter(|i| !taken.contains(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            });
        if let Some(i) = farthest {
            taken.insert(i);
            centroids[c] = vectors[i].clone();
            repairs += 1;
        }
    }
    repairs
}

/// Representative phrases and (once named) the label of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLabel {
    pub representatives: Vec<String>,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNaming {
    pub kind: ClusterKind,
    pub clusters: Vec<ClusterLabel>,
    /// Indices that fell back to a placeholder name.
    #[serde(default)]
    pub failures: Vec<usize>,
}

impl ClusterNaming {
    pub fn name(&self, index: usize) -> String {
        self.clusters
            .get(index)
            .and_then(|c| c.name.clone())
            .unwrap_or_else(|| self.kind.fallback_name(index))
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.clusters.len()).map(|i| self.name(i)).collect()
    }
}

/// Up to `m` member phrases per cluster, nearest to the centroid first.
pub fn representative_phrases(
    model: &ClusterModel,
    phrases: &[String],
    vectors: &[Vec<f64>],
    m: usize,
) -> Result<ClusterNaming> {
    if phrases.len() != vectors.len() {
        return Err(ClusterError::LengthMismatch {
            phrases: phrases.len(),
            vectors: vectors.len(),
        });
    }
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); model.k()];
    for (i, v) in vectors.iter().enumerate() {
        let c = model.assign(v)?;
        members[c].push((squared_distance(&model.centroids[c], v), i));
    }
    let clusters = members
        .into_iter()
        .map(|mut list| {
            list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ClusterLabel {
                representatives: list.iter().take(m).map(|&(_, i)| phrases[i].clone()).collect(),
                name: None,
            }
        })
        .collect();
    Ok(ClusterNaming {
        kind: model.kind,
        clusters,
        failures: Vec::new(),
    })
}

/// Asks the gateway for one name per cluster in a single request.
///
/// Missing or empty names fall back to `cluster-<kind>-<index>` and are
/// recorded in `failures`.
pub fn name_clusters(
    mut naming: ClusterNaming,
    profile: &DomainProfile,
    gateway: &Gateway,
) -> ClusterNaming {
    let payload: BTreeMap<String, &Vec<String>> = naming
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| (i.to_string(), &c.representatives))
        .collect();
    let system = match naming.kind {
        ClusterKind::UserNeeds => profile.need_naming.clone(),
        ClusterKind::ItemFeatures => profile.feature_naming.clone(),
    };
    let request = ChatRequest {
        system_prompt: system,
        user_payload: serde_json::to_string(&payload).expect("string map serializes"),
        temperature: gateway.default_temperature(crate::llm::TaskKind::Judge),
        max_tokens: 64 + 24 * naming.clusters.len() as u32,
        response_format: ResponseFormat::JsonObject,
    };
    let reply = gateway.chat_json(&request).ok();
    let obj = reply.as_ref().and_then(|v| v.as_object());
    naming.failures.clear();
    for (i, cluster) in naming.clusters.iter_mut().enumerate() {
        let name = obj
            .and_then(|o| o.get(&i.to_string()))
            .and_then(|v| v.as_str())
            .map(str::trim)
            .filter(|s| !s.is_empty());
        match name {
            Some(n) => cluster.name = Some(n.to_string()),
            None => {
                cluster.name = Some(naming.kind.fallback_name(i));
                naming.failures.push(i);
            }
        }
    }
    naming
}

const CLUSTER_MAGIC: &[u8; 8] = b"FIRECLU\0";

/// Binary layout (little-endian): magic | u8 kind (0 needs, 1 features)
/// | u32 k | u32 d | u64 seed | f64 inertia | k*d f64 centroids row-major
/// | u64 naming length | naming JSON.
pub fn encode_cluster_file(model: &ClusterModel, naming: &ClusterNaming) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CLUSTER_MAGIC);
    out.push(match model.kind {
        ClusterKind::UserNeeds => 0,
        ClusterKind::ItemFeatures => 1,
    });
    out.extend_from_slice(&(model.k() as u32).to_le_bytes());
    out.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&model.inertia.to_le_bytes());
    for c in &model.centroids {
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(naming).expect("naming serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

pub fn decode_cluster_file(bytes: &[u8]) -> Result<(ClusterModel, ClusterNaming)> {
    let bad = |m: &str| ClusterError::Format(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CLUSTER_MAGIC {
        return Err(bad("bad magic"));
    }
    let kind = match take(1)?[0] {
        0 => ClusterKind::UserNeeds,
        1 => ClusterKind::ItemFeatures,
        _ => return Err(bad("bad kind")),
    };
    let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let inertia = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let mut centroids = Vec::with_capacity(k);
    for _ in 0..k {
        let row = (0..d)
            .map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())))
            .collect::<Result<Vec<f64>>>()?;
        centroids.push(row);
    }
    let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let naming: ClusterNaming =
        serde_json::from_slice(take(len)?).map_err(|e| ClusterError::Format(e.to_string()))?;
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((
        ClusterModel {
            kind,
            centroids,
            inertia,
            seed,
        },
        naming,
    ))
}

pub fn save_cluster_file(path: &Path, model: &ClusterModel, naming: &ClusterNaming) -> Result<()> {
    write_atomic(path, &encode_cluster_file(model, naming))?;
    Ok(())
}

pub fn load_cluster_file(path: &Path) -> Result<(ClusterModel, ClusterNaming)> {
    decode_cluster_file(&std::fs::read(path)?)
}
