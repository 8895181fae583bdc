//! Versioned binary model format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "FIREGBT\0" | u32 version | u32 classes | u32 rounds | f64 eta
//! | f64 base_score x classes | u32 feature_count
//! | rounds x classes trees, each:
//!     u32 node_count | u8 has_covers
//!     | node_count nodes in preorder, each:
//!         u8 tag (0 leaf, 1 split)
//!         | leaf: f64 value | split: u32 feature, f64 threshold
//!         | f64 cover (only when has_covers = 1)
//! ```
//!
//! Children are implicit: a split's left child follows it directly and its
//! right child follows the left subtree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierError, Node, Result, Tree, TreeEnsemble, NUM_CLASSES};
use crate::io::write_atomic;

pub const MODEL_MAGIC: &[u8; 8] = b"FIREGBT\0";
pub const MODEL_VERSION: u32 = 1;

fn preorder(tree: &Tree) -> Vec<usize> {
    let mut order = Vec::with_capacity(tree.nodes().len());
    let mut stack = vec![0usize];
    while let Some(idx) = stack.pop() {
        order.push(idx);
        if let Node::Split { left, right, .. } = tree.nodes()[idx] {
            stack.push(right);
            stack.push(left);
        }
    }
    order
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| ClassifierError::Format(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

impl TreeEnsemble {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(NUM_CLASSES as u32).to_le_bytes());
        out.extend_from_slice(&(self.rounds.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.eta.to_le_bytes());
        for b in self.base_scores {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&(self.feature_count as u32).to_le_bytes());
        for round in &self.rounds {
            for tree in round {
                let order = preorder(tree);
                out.extend_from_slice(&(order.len() as u32).to_le_bytes());
                out.push(tree.covers().is_some() as u8);
                for &idx in &order {
                    match tree.nodes()[idx] {
                        Node::Leaf { value } => {
                            out.push(0);
                            out.extend_from_slice(&value.to_le_bytes());
                        }
                        Node::Split {
                            feature, threshold, ..
                        } => {
                            out.push(1);
                            out.extend_from_slice(&(feature as u32).to_le_bytes());
                            out.extend_from_slice(&threshold.to_le_bytes());
                        }
                    }
                    if let Some(c) = tree.covers() {
                        out.extend_from_slice(&c[idx].to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if &r.take::<8>()? != MODEL_MAGIC {
            return Err(ClassifierError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(ClassifierError::Format(format!("unsupported version {version}")));
        }
        let classes = r.u32()? as usize;
        if classes != NUM_CLASSES {
            return Err(ClassifierError::Format(format!("expected {NUM_CLASSES} classes, got {classes}")));
        }
        let n_rounds = r.u32()? as usize;
        let eta = r.f64()?;
        let mut base_scores = [0.0; NUM_CLASSES];
        for b in &mut base_scores {
            *b = r.f64()?;
        }
        let feature_count = r.u32()? as usize;
        let mut rounds = Vec::with_capacity(n_rounds);
        for _ in 0..n_rounds {
            let mut round = Vec::with_capacity(classes);
            for _ in 0..classes {
                round.push(read_tree(&mut r)?);
            }
            rounds.push(round);
        }
        if r.pos != bytes.len() {
            return Err(ClassifierError::Format("trailing bytes".into()));
        }
        TreeEnsemble::new(rounds, eta, base_scores, feature_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn summary(&self) -> ModelSummary {
        let mut feature_usage = vec![0usize; self.feature_count];
        let mut total_nodes = 0;
        let mut max_depth = 0;
        for tree in self.rounds.iter().flatten() {
            total_nodes += tree.nodes().len();
            max_depth = max_depth.max(tree.depth());
            for node in tree.nodes() {
                if let Node::Split { feature, .. } = node {
                    feature_usage[*feature] += 1;
                }
            }
        }
        ModelSummary {
            version: MODEL_VERSION,
            classes: NUM_CLASSES,
            rounds: self.rounds.len(),
            eta: self.eta,
            base_scores: self.base_scores,
            feature_count: self.feature_count,
            total_nodes,
            max_depth,
            feature_usage,
        }
    }
}

fn read_tree(r: &mut Reader<'_>) -> Result<Tree> {
    let n = r.u32()? as usize;
    let has_covers = r.u8()? == 1;
    let mut flat = Vec::with_capacity(n);
    for _ in 0..n {
        let node = match r.u8()? {
            0 => (None, r.f64()?),
            1 => (Some(r.u32()? as usize), r.f64()?),
            t => return Err(ClassifierError::Format(format!("bad node tag {t}"))),
        };
        let cover = if has_covers { Some(r.f64()?) } else { None };
        flat.push((node, cover));
    }
    // Rebuild child links from the preorder sequence.
    let mut nodes = Vec::with_capacity(n);
    fn link(
        flat: &[((Option<usize>, f64), Option<f64>)],
        pos: &mut usize,
        nodes: &mut Vec<Node>,
    ) -> Result<usize> {
        let idx = *pos;
        let &((feature, value), _) = flat
            .get(idx)
            .ok_or_else(|| ClassifierError::Format("tree ends inside a split".into()))?;
        *pos += 1;
        nodes.push(Node::Leaf { value });
        if let Some(feature) = feature {
            let left = link(flat, pos, nodes)?;
            let right = link(flat, pos, nodes)?;
            nodes[idx] = Node::Split {
                feature,
                threshold: value,
                left,
                right,
            };
        }
        Ok(idx)
    }
    let mut pos = 0;
    link(&flat, &mut pos, &mut nodes)?;
    if pos != n {
        return Err(ClassifierError::Format("tree has unreachable nodes".into()));
    }
    let covers = has_covers.then(|| flat.iter().map(|(_, c)| c.unwrap_or(0.0)).collect());
    Ok(Tree::new(nodes, covers)?)
}

/// Human-readable description written next to the binary model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub version: u32,
    pub classes: usize,
    pub rounds: usize,
    pub eta: f64,
    pub base_scores: [f64; NUM_CLASSES],
    pub feature_count: usize,
    pub total_nodes: usize,
    pub max_depth: usize,
    pub feature_usage: Vec<usize>,
}
