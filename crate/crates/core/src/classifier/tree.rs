use serde::{Deserialize, Serialize};

/// One node of a regression tree. Children are indices into the owning
/// tree's node array and always come after their parent (preorder layout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TreeError {
    #[error("tree has no nodes")]
    Empty,
    #[error("node {node} has invalid child index {child}")]
    BadChild { node: usize, child: usize },
    #[error("node {0} is unreachable or shared")]
    BadShape(usize),
    #[error("cover array has {got} entries, tree has {expected} nodes")]
    CoverLength { expected: usize, got: usize },
    #[error("cover of node {0} is not a finite non-negative number")]
    BadCover(usize),
}

/// A binary regression tree with optional per-node cover (training mass).
///
/// Routing rule: go left iff `x[feature] < threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covers: Option<Vec<f64>>,
}

impl Tree {
    pub fn new(nodes: Vec<Node>, covers: Option<Vec<f64>>) -> Result<Self, TreeError> {
        if nodes.is_empty() {
            return Err(TreeError::Empty);
        }
        let mut parents = vec![0usize; nodes.len()];
        for (idx, node) in nodes.iter().enumerate() {
            if let Node::Split { left, right, .. } = *node {
                for child in [left, right] {
                    if child <= idx || child >= nodes.len() {
                        return Err(TreeError::BadChild { node: idx, child });
                    }
                    parents[child] += 1;
                }
            }
        }
        if let Some(bad) = parents.iter().skip(1).position(|&p| p != 1) {
            return Err(TreeError::BadShape(bad + 1));
        }
        if let Some(c) = &covers {
            if c.len() != nodes.len() {
                return Err(TreeError::CoverLength {
                    expected: nodes.len(),
                    got: c.len(),
                });
            }
            if let Some(bad) = c.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(TreeError::BadCover(bad));
            }
        }
        Ok(Tree { nodes, covers })
    }

    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
            covers: None,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn covers(&self) -> Option<&[f64]> {
        self.covers.as_deref()
    }

    pub fn without_covers(mut self) -> Self {
        self.covers = None;
        self
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            match self.nodes[idx] {
                Node::Leaf { .. } => return idx,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize) -> usize {
            match nodes[idx] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    /// Cover-weighted mean of leaf values, i.e. the expectation with every
    /// feature marginalized out.
    pub fn expected_value(&self) -> Option<f64> {
        let covers = self.covers.as_ref()?;
        fn walk(nodes: &[Node], covers: &[f64], idx: usize) -> f64 {
            match nodes[idx] {
                Node::Leaf { value } => value,
                Node::Split { left, right, .. } => {
                    let (wl, wr) = child_weights(covers, idx, left, right);
                    wl * walk(nodes, covers, left) + wr * walk(nodes, covers, right)
                }
            }
        }
        Some(walk(&self.nodes, covers, 0))
    }
}

/// Fractions of a node's cover that flow to each child. Falls back to an even
/// split when the node carries no mass.
pub(crate) fn child_weights(covers: &[f64], node: usize, left: usize, right: usize) -> (f64, f64) {
    let parent = covers[node];
    if parent > 0.0 {
        (covers[left] / parent, covers[right] / parent)
    } else {
        (0.5, 0.5)
    }
}
