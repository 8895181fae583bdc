#![allow(dead_code)]

use fire_core::classifier::{Node, Tree, TreeEnsemble};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tree(rng: &mut ChaCha8Rng, used: usize, depth: usize) -> Tree {
    fn grow(rng: &mut ChaCha8Rng, used: usize, depth: usize, cover: f64, nodes: &mut Vec<Node>, covers: &mut Vec<f64>) -> usize {
        let idx = nodes.len();
        covers.push(cover);
        if depth == 0 || rng.gen_bool(0.2) {
            nodes.push(Node::Leaf {
                value: rng.gen_range(-2.0..2.0),
            });
            return idx;
        }
        nodes.push(Node::Leaf { value: 0.0 });
        let feature = rng.gen_range(0..used);
        let threshold = rng.gen_range(0..4) as f64 + 0.5;
        let share = rng.gen_range(0.05..0.95f64);
        let left = grow(rng, used, depth - 1, cover * share, nodes, covers);
        let right = grow(rng, used, depth - 1, cover * (1.0 - share), nodes, covers);
        nodes[idx] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        idx
    }
    let (mut nodes, mut covers) = (Vec::new(), Vec::new());
    grow(rng, used, depth, 100.0, &mut nodes, &mut covers);
    Tree::new(nodes, Some(covers)).unwrap()
}

/// An ensemble over `d` columns whose splits only use the first `used`.
pub fn random_ensemble(rng: &mut ChaCha8Rng, d: usize, used: usize, rounds: usize, depth: usize) -> TreeEnsemble {
    let rounds = (0..rounds)
        .map(|_| (0..3).map(|_| random_tree(rng, used, depth)).collect())
        .collect();
    let base = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    TreeEnsemble::new(rounds, rng.gen_range(0.05..1.0), base, d).unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(0..5) as f64).collect()
}
