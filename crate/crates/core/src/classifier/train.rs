use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    mean_cross_entropy, softmax, ClassifierError, Dataset, Hyperparams, Node, Result, Tree,
    TreeEnsemble, NUM_CLASSES,
};
use crate::exec::Execution;

/// A trained ensemble plus the mean training cross-entropy after each round
/// (`loss[0]` is the loss of the base scores alone).
#[derive(Debug, Clone)]
pub struct Trained {
    pub ensemble: TreeEnsemble,
    pub train_loss: Vec<f64>,
}

pub fn train(data: &Dataset, params: &Hyperparams, seed: u64) -> Result<TreeEnsemble> {
    Ok(train_with_log(data, params, seed, Execution::default())?.ensemble)
}

/// Sorted distinct values of every column and each row's position among them.
struct Binned {
    uniques: Vec<Vec<f64>>,
    /// Column-major bin index of every row.
    bins: Vec<Vec<u32>>,
}

impl Binned {
    fn new(data: &Dataset) -> Self {
        let mut uniques = Vec::with_capacity(data.n_cols());
        let mut bins = Vec::with_capacity(data.n_cols());
        for col in 0..data.n_cols() {
            let mut vals: Vec<f64> = (0..data.n_rows()).map(|r| data.value(r, col)).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let b = (0..data.n_rows())
                .map(|r| {
                    let v = data.value(r, col);
                    vals.binary_search_by(|u| u.total_cmp(&v)).expect("value present") as u32
                })
                .collect();
            uniques.push(vals);
            bins.push(b);
        }
        Binned { uniques, bins }
    }
}

fn validate(data: &Dataset) -> Result<()> {
    if data.n_rows() == 0 {
        return Err(ClassifierError::EmptyData);
    }
    for row in 0..data.n_rows() {
        for col in 0..data.n_cols() {
            if !data.value(row, col).is_finite() {
                return Err(ClassifierError::NonFinite { row, col });
            }
        }
    }
    let first = data.labels()[0];
    if data.labels().iter().all(|&l| l == first) {
        return Err(ClassifierError::SingleClass);
    }
    Ok(())
}

/// Per-example weights `N / (3 * count(label))`, or all ones.
pub(crate) fn example_weights(data: &Dataset, use_weight: bool) -> Vec<f64> {
    if !use_weight {
        return vec![1.0; data.n_rows()];
    }
    let mut counts = [0usize; NUM_CLASSES];
    for l in data.labels() {
        counts[l.index()] += 1;
    }
    let n = data.n_rows() as f64;
    data.labels()
        .iter()
        .map(|l| n / (NUM_CLASSES as f64 * counts[l.index()] as f64))
        .collect()
}

pub fn train_with_log(
    data: &Dataset,
    params: &Hyperparams,
    seed: u64,
    exec: Execution,
) -> Result<Trained> {
    params.validate()?;
    validate(data)?;
    let n = data.n_rows();
    let n_cols = data.n_cols();
    let binned = Binned::new(data);
    let weights = example_weights(data, params.use_weight);
    let base_scores = [0.0; NUM_CLASSES];
    let mut margins = vec![base_scores; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sampled = ((params.colsample_bytree * n_cols as f64).ceil() as usize).clamp(1, n_cols.max(1));

    let mut ensemble = TreeEnsemble::new(Vec::new(), params.eta, base_scores, n_cols)?;
    let mut train_loss = vec![mean_cross_entropy(&ensemble, data)?];

    for _ in 0..params.n_estimators {
        let mut grad = vec![[0.0; NUM_CLASSES]; n];
        let mut hess = vec![[0.0; NUM_CLASSES]; n];
        for i in 0..n {
            let p = softmax(&margins[i]);
            let y = data.labels()[i].index();
            for c in 0..NUM_CLASSES {
                let target = if c == y { 1.0 } else { 0.0 };
                grad[i][c] = weights[i] * (p[c] - target);
                hess[i][c] = weights[i] * (p[c] * (1.0 - p[c])).max(1e-16);
            }
        }
        let columns: Vec<Vec<usize>> = (0..NUM_CLASSES)
            .map(|_| {
                if n_sampled >= n_cols {
                    (0..n_cols).collect()
                } else {
                    let mut cols = sample(&mut rng, n_cols, n_sampled).into_vec();
                    cols.sort_unstable();
                    cols
                }
            })
            .collect();
        let trees: Vec<Tree> = exec.map_range(NUM_CLASSES, |c| {
            let g: Vec<f64> = grad.iter().map(|v| v[c]).collect();
            let h: Vec<f64> = hess.iter().map(|v| v[c]).collect();
            TreeBuilder {
                binned: &binned,
                grad: &g,
                hess: &h,
                columns: &columns[c],
                params,
            }
            .build()
        });
        for (i, m) in margins.iter_mut().enumerate() {
            let x = data.row(i);
            for (c, tree) in trees.iter().enumerate() {
                m[c] += params.eta * tree.predict(x);
            }
        }
        ensemble.rounds.push(trees);
        let loss: f64 = margins
            .iter()
            .zip(data.labels())
            .map(|(m, y)| -softmax(m)[y.index()].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        train_loss.push(loss);
    }
    Ok(Trained {
        ensemble,
        train_loss,
    })
}

struct TreeBuilder<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    columns: &'a [usize],
    params: &'a Hyperparams,
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    /// Rows with bin <= this go left.
    last_left_bin: u32,
}

impl TreeBuilder<'_> {
    fn build(&self) -> Tree {
        let mut rows: Vec<u32> = (0..self.grad.len() as u32).collect();
        let mut nodes = Vec::new();
        let mut covers = Vec::new();
        self.grow(&mut rows, 0, &mut nodes, &mut covers);
        Tree::new(nodes, Some(covers)).expect("builder emits well-formed preorder trees")
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn grow(&self, rows: &mut [u32], depth: usize, nodes: &mut Vec<Node>, covers: &mut Vec<f64>) -> usize {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        let idx = nodes.len();
        nodes.push(Node::Leaf {
            value: -g / (h + self.params.lambda),
        });
        covers.push(h);
        if depth >= self.params.max_depth || rows.len() < 2 {
            return idx;
        }
        let Some(best) = self.best_split(rows, g, h) else {
            return idx;
        };
        let bins = &self.binned.bins[best.feature];
        let mid = partition(rows, |r| bins[r as usize] <= best.last_left_bin);
        let (left_rows, right_rows) = rows.split_at_mut(mid);
        let uniq = &self.binned.uniques[best.feature];
        let b = best.last_left_bin as usize;
        let mut threshold = uniq[b] + (uniq[b + 1] - uniq[b]) / 2.0;
        if threshold <= uniq[b] {
            threshold = uniq[b + 1];
        }
        let left = self.grow(left_rows, depth + 1, nodes, covers);
        let right = self.grow(right_rows, depth + 1, nodes, covers);
        nodes[idx] = Node::Split {
            feature: best.feature,
            threshold,
            left,
            right,
        };
        idx
    }

    fn best_split(&self, rows: &[u32], g: f64, h: f64) -> Option<SplitCandidate> {
        let parent = self.score(g, h);
        let mut best: Option<SplitCandidate> = None;
        for &feature in self.columns {
            let n_bins = self.binned.uniques[feature].len();
            if n_bins < 2 {
                continue;
            }
            let bins = &self.binned.bins[feature];
            let mut hist = vec![(0.0f64, 0.0f64, 0u32); n_bins];
            for &r in rows {
                let e = &mut hist[bins[r as usize] as usize];
                e.0 += self.grad[r as usize];
                e.1 += self.hess[r as usize];
                e.2 += 1;
            }
            let occupied: Vec<usize> = (0..n_bins).filter(|&b| hist[b].2 > 0).collect();
            let (mut gl, mut hl) = (0.0, 0.0);
            // Cut after every occupied bin but the last.
            for &b in occupied.iter().take(occupied.len().saturating_sub(1)) {
                gl += hist[b].0;
                hl += hist[b].1;
                let (gr, hr) = (g - gl, h - hl);
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain =
                    0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent) - self.params.gamma;
                if gain > 0.0 && best.is_none_or(|cur| gain > cur.gain) {
                    best = Some(SplitCandidate {
                        gain,
                        feature,
                        last_left_bin: b as u32,
                    });
                }
            }
        }
        best
    }
}

/// Stable-order-agnostic in-place partition; returns the count satisfying `pred`.
fn partition(rows: &mut [u32], pred: impl Fn(u32) -> bool) -> usize {
    let mut mid = 0;
    for i in 0..rows.len() {
        if pred(rows[i]) {
            rows.swap(i, mid);
            mid += 1;
        }
    }
    mid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{predict, weighted_f1};
    use crate::corpus::SentimentLabel::{self, *};

    fn params(rounds: usize, depth: usize, eta: f64) -> Hyperparams {
        Hyperparams {
            n_estimators: rounds,
            eta,
            max_depth: depth,
            min_child_weight: 0.0,
            colsample_bytree: 1.0,
            gamma: 0.0,
            use_weight: false,
            lambda: 1.0,
        }
    }

    #[test]
    fn rejects_single_class_and_nan() {
        let d = Dataset::from_rows(&[vec![1.0], vec![2.0]], vec![Positive, Positive]).unwrap();
        assert!(matches!(train(&d, &params(1, 1, 0.3), 0), Err(ClassifierError::SingleClass)));
        let d = Dataset::from_rows(&[vec![f64::NAN], vec![2.0]], vec![Positive, Negative]).unwrap();
        assert!(matches!(
            train(&d, &params(1, 1, 0.3), 0),
            Err(ClassifierError::NonFinite { row: 0, col: 0 })
        ));
    }

    #[test]
    fn newton_step_on_four_points() {
        let d = Dataset::from_rows(
            &[vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            vec![Negative, Negative, Positive, Positive],
        )
        .unwrap();
        let e = train(&d, &params(1, 1, 1.0), 0).unwrap();
        let neg = &e.rounds()[0][0];
        // Uniform start: p = 1/3, g = p - y, h = p(1 - p) = 2/9.
        // Left {0, 1}: G = -4/3, H = 4/9 -> 12/13. Right: G = 2/3 -> -6/13.
        match neg.nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 1.5);
            }
            _ => panic!("expected a split"),
        }
        assert!((neg.predict(&[0.0]) - 12.0 / 13.0).abs() < 1e-12);
        assert!((neg.predict(&[3.0]) + 6.0 / 13.0).abs() < 1e-12);
        // The neutral class has identical gradients everywhere, so no split pays off.
        assert_eq!(e.rounds()[0][1].nodes().len(), 1);
        assert!((e.rounds()[0][1].predict(&[0.0]) + 12.0 / 17.0).abs() < 1e-12);
        assert!((e.rounds()[0][0].covers().unwrap()[0] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn separable_toy_reaches_perfect_accuracy() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, (i * 7 % 3) as f64]).collect();
        let labels: Vec<SentimentLabel> =
            (0..8).map(|i| if i < 4 { Negative } else { Positive }).collect();
        let d = Dataset::from_rows(&rows, labels.clone()).unwrap();
        let e = train(&d, &params(10, 2, 0.3), 1).unwrap();
        let preds: Vec<_> = rows.iter().map(|x| predict(&e, x).unwrap()).collect();
        assert_eq!(preds, labels);
        assert_eq!(weighted_f1(&preds, &labels).unwrap(), 1.0);
    }

    #[test]
    fn depth_and_min_child_weight_are_respected() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 5) as f64]).collect();
        let labels = (0..40)
            .map(|i| SentimentLabel::from_index(i % 3).unwrap())
            .collect();
        let d = Dataset::from_rows(&rows, labels).unwrap();
        let mut p = params(5, 3, 0.3);
        p.min_child_weight = 1.5;
        let e = train(&d, &p, 0).unwrap();
        for round in e.rounds() {
            for t in round {
                assert!(t.depth() <= 3);
                let covers = t.covers().unwrap();
                for (i, node) in t.nodes().iter().enumerate() {
                    if i > 0 {
                        assert!(covers[i] >= 1.5 - 1e-12, "child cover {}", covers[i]);
                    }
                    if let Node::Split { left, right, .. } = node {
                        assert!((covers[*left] + covers[*right] - covers[i]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn column_sampling_is_seeded() {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| (0..6).map(|f| ((i * (f + 3)) % 11) as f64).collect())
            .collect();
        let labels = (0..60).map(|i| SentimentLabel::from_index(i % 3).unwrap()).collect();
        let d = Dataset::from_rows(&rows, labels).unwrap();
        let mut p = params(4, 3, 0.3);
        p.colsample_bytree = 0.5;
        let a = train(&d, &p, 7).unwrap();
        let b = train(&d, &p, 7).unwrap();
        assert_eq!(a, b);
        let seq = train_with_log(&d, &p, 7, Execution::Sequential).unwrap().ensemble;
        assert_eq!(a, seq);
        for round in a.rounds() {
            for t in round {
                let used: std::collections::BTreeSet<usize> = t
                    .nodes()
                    .iter()
                    .filter_map(|n| match n {
                        Node::Split { feature, .. } => Some(*feature),
                        _ => None,
                    })
                    .collect();
                assert!(used.len() <= 3);
            }
        }
    }

    #[test]
    fn gamma_prunes_weak_splits() {
        let d = Dataset::from_rows(
            &[vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            vec![Negative, Negative, Positive, Positive],
        )
        .unwrap();
        let mut p = params(1, 1, 1.0);
        p.gamma = 100.0;
        let e = train(&d, &p, 0).unwrap();
        assert!(e.rounds()[0].iter().all(|t| t.nodes().len() == 1));
    }

    #[test]
    fn class_weights_are_mean_normalized() {
        let d = Dataset::from_rows(
            &[vec![0.0], vec![0.0], vec![0.0], vec![1.0]],
            vec![Positive, Positive, Positive, Negative],
        )
        .unwrap();
        let w = example_weights(&d, true);
        assert_eq!(w, vec![4.0 / 9.0, 4.0 / 9.0, 4.0 / 9.0, 4.0 / 3.0]);
        assert_eq!(example_weights(&d, false), vec![1.0; 4]);
    }
}
