use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{predict, train_with_log, weighted_f1, Dataset, Hyperparams, Result};
use crate::exec::Execution;

/// Inclusive search ranges. The default matches the published ranges shared
/// by all three benchmark domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_estimators: (usize, usize),
    pub eta: (f64, f64),
    pub max_depth: (usize, usize),
    pub min_child_weight: (f64, f64),
    pub colsample_bytree: (f64, f64),
    pub gamma: (f64, f64),
    pub use_weight: Vec<bool>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_estimators: (100, 2000),
            eta: (0.05, 0.5),
            max_depth: (5, 20),
            min_child_weight: (1.0, 10.0),
            colsample_bytree: (0.5, 1.0),
            gamma: (0.0, 5.0),
            use_weight: vec![true, false],
        }
    }
}

impl SearchSpace {
    pub fn contains(&self, p: &Hyperparams) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        (self.n_estimators.0..=self.n_estimators.1).contains(&p.n_estimators)
            && within(p.eta, self.eta)
            && (self.max_depth.0..=self.max_depth.1).contains(&p.max_depth)
            && within(p.min_child_weight, self.min_child_weight)
            && within(p.colsample_bytree, self.colsample_bytree)
            && within(p.gamma, self.gamma)
            && self.use_weight.contains(&p.use_weight)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Hyperparams {
        let uniform = |rng: &mut _, (lo, hi): (f64, f64)| {
            if hi > lo {
                Rng::gen_range(rng, lo..=hi)
            } else {
                lo
            }
        };
        Hyperparams {
            n_estimators: rng.gen_range(self.n_estimators.0..=self.n_estimators.1),
            eta: uniform(rng, self.eta),
            max_depth: rng.gen_range(self.max_depth.0..=self.max_depth.1),
            min_child_weight: uniform(rng, self.min_child_weight).round(),
            colsample_bytree: uniform(rng, self.colsample_bytree),
            gamma: uniform(rng, self.gamma),
            use_weight: self.use_weight[rng.gen_range(0..self.use_weight.len().max(1))],
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Hyperparams,
    pub valid_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: Hyperparams,
    pub best_f1: f64,
    pub trials: Vec<Trial>,
}

/// Seeded random search maximizing validation weighted F1. Ties go to the
/// earliest trial.
pub fn tune(
    train: &Dataset,
    valid: &Dataset,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    exec: Execution,
) -> Result<TuneResult> {
    let budget = budget.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<Hyperparams> = (0..budget).map(|_| space.sample(&mut rng)).collect();
    let scores = exec.try_map(&candidates, |params| -> Result<f64> {
        let model = train_with_log(train, params, seed, Execution::Sequential)?.ensemble;
        let preds = valid
            .rows()
            .map(|x| predict(&model, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(weighted_f1(&preds, valid.labels()).unwrap_or(0.0))
    })?;
    let trials: Vec<Trial> = candidates
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (params, valid_f1))| Trial {
            index,
            params,
            valid_f1,
        })
        .collect();
    let best = trials
        .iter()
        .fold(&trials[0], |b, t| if t.valid_f1 > b.valid_f1 { t } else { b });
    Ok(TuneResult {
        best: best.params.clone(),
        best_f1: best.valid_f1,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentimentLabel;

    fn toy(offset: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| vec![((i + offset) % 30) as f64, ((i * 7) % 5) as f64])
            .collect();
        let labels = rows
            .iter()
            .map(|r| {
                SentimentLabel::from_index(if r[0] < 10.0 { 0 } else if r[0] < 20.0 { 1 } else { 2 })
                    .unwrap()
            })
            .collect();
        Dataset::from_rows(&rows, labels).unwrap()
    }

    fn small_space() -> SearchSpace {
        SearchSpace {
            n_estimators: (5, 20),
            eta: (0.05, 0.5),
            max_depth: (1, 4),
            min_child_weight: (0.0, 2.0),
            colsample_bytree: (0.5, 1.0),
            gamma: (0.0, 1.0),
            use_weight: vec![true, false],
        }
    }

    #[test]
    fn budget_one_returns_the_sampled_point() {
        let space = small_space();
        let r = tune(&toy(0), &toy(3), &space, 1, 42, Execution::Sequential).unwrap();
        let expected = space.sample(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(r.best, expected);
        assert_eq!(r.trials.len(), 1);
    }

    #[test]
    fn best_matches_trial_log() {
        let r = tune(&toy(0), &toy(3), &small_space(), 6, 1, Execution::Parallel).unwrap();
        let top = r
            .trials
            .iter()
            .map(|t| t.valid_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_f1, top);
        let first_best = r.trials.iter().find(|t| t.valid_f1 == top).unwrap();
        assert_eq!(first_best.params, r.best);
        let again = tune(&toy(0), &toy(3), &small_space(), 6, 1, Execution::Sequential).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn tuned_is_at_least_default() {
        let train_set = toy(0);
        let valid = toy(3);
        let default = Hyperparams {
            n_estimators: 5,
            max_depth: 1,
            min_child_weight: 1.0,
            ..Hyperparams::default()
        };
        let model = super::super::train(&train_set, &default, 0).unwrap();
        let preds: Vec<_> = valid.rows().map(|x| predict(&model, x).unwrap()).collect();
        let base = weighted_f1(&preds, valid.labels()).unwrap();
        let r = tune(&train_set, &valid, &small_space(), 8, 5, Execution::Parallel).unwrap();
        assert!(r.best_f1 >= base, "{} < {base}", r.best_f1);
    }

    #[test]
    fn samples_stay_inside_default_space() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            assert!(space.contains(&space.sample(&mut rng)));
        }
    }
}
