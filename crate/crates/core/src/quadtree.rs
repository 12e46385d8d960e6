//! Region-quadtree codec for square observations.
//!
//! An `M`×`M` window (M a power of two) decomposes into a complete 4-ary
//! tree; the tree doubles as an unweighted graph whose node feature matrix
//! and adjacency matrix feed the graph encoders. Trimming removes the whole
//! descendant subtree of a merged node, turning it into a leaf.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CellState, Observation};

/// Width of a node feature row: normalized center row and column,
/// normalized side length, one-hot over the five node states.
pub const NODE_FEATURES: usize = 8;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("observation side {0} is not a power of two")]
    BadSide(usize),
    #[error("level {0} out of range 0..={1}")]
    BadLevel(usize, usize),
    #[error("merge mask has {0} entries, tree has {1} internal nodes")]
    MaskLength(usize, usize),
}

/// Node state: one of the four observable cell states, or `Mixed` for a
/// heterogeneous region. A region containing the destination is summarized
/// as `Destination` regardless of its other contents.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
pub enum NodeState {
    Occupied,
    Unoccupied,
    Destination,
    Unknown,
    Mixed,
}

impl NodeState {
    pub const COUNT: usize = 5;

    pub fn one_hot_index(self) -> usize {
        match self {
            NodeState::Occupied => 0,
            NodeState::Unoccupied => 1,
            NodeState::Destination => 2,
            NodeState::Unknown => 3,
            NodeState::Mixed => 4,
        }
    }
}

impl From<CellState> for NodeState {
    fn from(s: CellState) -> NodeState {
        match s {
            CellState::Occupied => NodeState::Occupied,
            CellState::Unoccupied => NodeState::Unoccupied,
            CellState::Destination => NodeState::Destination,
            CellState::Unknown => NodeState::Unknown,
        }
    }
}

/// Square sub-region covered by a node, in window coordinates.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub side: usize,
}

impl Region {
    fn quadrants(self) -> [Region; 4] {
        let h = self.side / 2;
        // Fixed quadrant order: NW, NE, SW, SE.
        [
            Region { row: self.row, col: self.col, side: h },
            Region { row: self.row, col: self.col + h, side: h },
            Region { row: self.row + h, col: self.col, side: h },
            Region { row: self.row + h, col: self.col + h, side: h },
        ]
    }
}

/// One quadtree node; `index` is its position in breadth-first order.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct QuadNode {
    pub index: usize,
    pub depth: usize,
    pub region: Region,
    pub state: NodeState,
    pub parent: Option<usize>,
    pub children: Option<[usize; 4]>,
}

impl QuadNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// A quadtree stored as a breadth-first node list over an `M`×`M` window.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct QuadTree {
    fov_side: usize,
    nodes: Vec<QuadNode>,
}

/// Per-internal-node merge (true) / keep (false) decisions, indexed like
/// [`QuadTree::internal_nodes`].
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MergeMask(pub Vec<bool>);

impl MergeMask {
    pub fn all_keep(len: usize) -> MergeMask {
        MergeMask(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Summary state of a region: destination dominates, then homogeneous
/// regions keep their state, anything else is mixed.
fn summarize(obs: &Observation, region: Region) -> NodeState {
    let first: NodeState = obs.cell(region.row, region.col).into();
    let mut homogeneous = true;
    for r in region.row..region.row + region.side {
        for c in region.col..region.col + region.side {
            let s: NodeState = obs.cell(r, c).into();
            if s == NodeState::Destination {
                return NodeState::Destination;
            }
            if s != first {
                homogeneous = false;
            }
        }
    }
    if homogeneous {
        first
    } else {
        NodeState::Mixed
    }
}

/// Decomposes an observation into the complete 4-ary tree truncated at
/// `max_depth`, in breadth-first order.
fn decompose(obs: &Observation, max_depth: usize) -> QuadTree {
    let m = obs.side();
    let mut nodes = vec![QuadNode {
        index: 0,
        depth: 0,
        region: Region { row: 0, col: 0, side: m },
        state: summarize(obs, Region { row: 0, col: 0, side: m }),
        parent: None,
        children: None,
    }];
    let mut cursor = 0;
    while cursor < nodes.len() {
        let (depth, region) = (nodes[cursor].depth, nodes[cursor].region);
        if depth < max_depth {
            let mut child_ids = [0usize; 4];
            for (slot, quadrant) in region.quadrants().into_iter().enumerate() {
                let index = nodes.len();
                child_ids[slot] = index;
                nodes.push(QuadNode {
                    index,
                    depth: depth + 1,
                    region: quadrant,
                    state: summarize(obs, quadrant),
                    parent: Some(cursor),
                    children: None,
                });
            }
            nodes[cursor].children = Some(child_ids);
        }
        cursor += 1;
    }
    QuadTree { fov_side: m, nodes }
}

/// Decomposes to the finest granularity: every leaf covers a single cell.
pub fn decompose_full(obs: &Observation) -> Result<QuadTree, QuadError> {
    let m = obs.side();
    if !m.is_power_of_two() {
        return Err(QuadError::BadSide(m));
    }
    Ok(decompose(obs, m.trailing_zeros() as usize))
}

/// Decomposes to a fixed depth; leaves summarize their region.
pub fn decompose_level(obs: &Observation, level: usize) -> Result<QuadTree, QuadError> {
    let m = obs.side();
    if !m.is_power_of_two() {
        return Err(QuadError::BadSide(m));
    }
    let max = m.trailing_zeros() as usize;
    if level > max {
        return Err(QuadError::BadLevel(level, max));
    }
    Ok(decompose(obs, level))
}

impl QuadTree {
    pub fn fov_side(&self) -> usize {
        self.fov_side
    }

    pub fn nodes(&self) -> &[QuadNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Parent→child edges in breadth-first order of the child.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| n.parent.map(|p| (p, n.index)))
    }

    /// Mergeable nodes: every non-leaf, root included, in breadth-first
    /// order. This list defines [`MergeMask`] indexing.
    pub fn internal_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| !n.is_leaf())
            .map(|n| n.index)
            .collect()
    }

    /// Frobenius norm of the adjacency matrix: √(2·|E|) for a symmetric 0/1
    /// adjacency with zero diagonal.
    pub fn tree_size(&self) -> f64 {
        (2.0 * self.edge_count() as f64).sqrt()
    }

    /// Node feature matrix, one row per node (see [`NODE_FEATURES`]).
    pub fn feature_matrix(&self) -> Vec<f64> {
        let m = self.fov_side as f64;
        let mut x = Vec::with_capacity(self.nodes.len() * NODE_FEATURES);
        for node in &self.nodes {
            let side = node.region.side as f64;
            x.push((node.region.row as f64 + side / 2.0) / m);
            x.push((node.region.col as f64 + side / 2.0) / m);
            x.push(side / m);
            let mut one_hot = [0.0; NodeState::COUNT];
            one_hot[node.state.one_hot_index()] = 1.0;
            x.extend_from_slice(&one_hot);
        }
        x
    }

    /// Neighbor lists (parent and children of each node).
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (p, c) in self.edges() {
            adj[p].push(c);
            adj[c].push(p);
        }
        adj
    }

    /// Dense symmetric 0/1 adjacency with zero diagonal, row-major.
    pub fn dense_adjacency(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut a = vec![0.0; n * n];
        for (p, c) in self.edges() {
            a[p * n + c] = 1.0;
            a[c * n + p] = 1.0;
        }
        a
    }

    /// Nested-list text form for golden-file tests, e.g.
    /// `(Mixed (Occupied) (Unoccupied) (Unknown) (Destination))`.
    pub fn to_nested_text(&self) -> String {
        fn write(tree: &QuadTree, index: usize, out: &mut String) {
            let node = &tree.nodes[index];
            out.push('(');
            out.push_str(match node.state {
                NodeState::Occupied => "Occupied",
                NodeState::Unoccupied => "Unoccupied",
                NodeState::Destination => "Destination",
                NodeState::Unknown => "Unknown",
                NodeState::Mixed => "Mixed",
            });
            if let Some(children) = node.children {
                for c in children {
                    out.push(' ');
                    write(tree, c, out);
                }
            }
            out.push(')');
        }
        let mut out = String::new();
        write(self, 0, &mut out);
        out
    }

    /// Paints each leaf's state over its region.
    pub fn reconstruct(&self) -> Vec<NodeState> {
        let m = self.fov_side;
        let mut grid = vec![NodeState::Unknown; m * m];
        for node in self.nodes.iter().filter(|n| n.is_leaf()) {
            for r in node.region.row..node.region.row + node.region.side {
                for c in node.region.col..node.region.col + node.region.side {
                    grid[r * m + c] = node.state;
                }
            }
        }
        grid
    }

    /// Checks the structural invariants: breadth-first indexing, exactly
    /// four children per non-leaf covering its region, |E| = |V| - 1 with
    /// all nodes reachable from the root.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("empty tree".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.index != i {
                return Err(format!("node {i} carries index {}", node.index));
            }
            match node.children {
                Some(children) => {
                    let quadrants = node.region.quadrants();
                    for (slot, &c) in children.iter().enumerate() {
                        let child = self
                            .nodes
                            .get(c)
                            .ok_or_else(|| format!("child {c} out of range"))?;
                        if child.parent != Some(i) {
                            return Err(format!("child {c} does not point back to {i}"));
                        }
                        if child.region != quadrants[slot] {
                            return Err(format!("child {c} covers the wrong quadrant"));
                        }
                        if child.depth != node.depth + 1 {
                            return Err(format!("child {c} has wrong depth"));
                        }
                    }
                }
                None => {
                    if node.region.side == 0 {
                        return Err(format!("leaf {i} has empty region"));
                    }
                }
            }
        }
        // Connectivity: every non-root node must reach the root by parents.
        for node in &self.nodes {
            let mut cur = node.index;
            let mut hops = 0;
            while let Some(p) = self.nodes[cur].parent {
                cur = p;
                hops += 1;
                if hops > self.nodes.len() {
                    return Err("parent cycle".into());
                }
            }
            if cur != 0 {
                return Err(format!("node {} not connected to root", node.index));
            }
        }
        Ok(())
    }
}

/// Removes the descendant subtree of every merged internal node (a merged
/// ancestor subsumes descendant decisions) and re-indexes densely in
/// breadth-first order.
pub fn trim(tree: &QuadTree, mask: &MergeMask) -> Result<QuadTree, QuadError> {
    let internal = tree.internal_nodes();
    if mask.len() != internal.len() {
        return Err(QuadError::MaskLength(mask.len(), internal.len()));
    }
    let mut merged = vec![false; tree.node_count()];
    for (&node, &m) in internal.iter().zip(&mask.0) {
        merged[node] = m;
    }
    // Breadth-first walk keeps nodes whose proper ancestors all keep.
    let mut new_index = vec![usize::MAX; tree.node_count()];
    let mut nodes: Vec<QuadNode> = Vec::new();
    let mut queue = std::collections::VecDeque::from([0usize]);
    new_index[0] = 0;
    nodes.push(QuadNode {
        index: 0,
        parent: None,
        children: None,
        ..tree.nodes()[0].clone()
    });
    while let Some(old) = queue.pop_front() {
        if merged[old] {
            continue; // children discarded; the node stays as a leaf
        }
        if let Some(children) = tree.nodes()[old].children {
            let mut ids = [0usize; 4];
            for (slot, &c) in children.iter().enumerate() {
                let index = nodes.len();
                new_index[c] = index;
                ids[slot] = index;
                nodes.push(QuadNode {
                    index,
                    parent: Some(new_index[old]),
                    children: None,
                    ..tree.nodes()[c].clone()
                });
                queue.push_back(c);
            }
            nodes[new_index[old]].children = Some(ids);
        }
    }
    Ok(QuadTree { fov_side: tree.fov_side, nodes })
}

/// Mask that reproduces the homogeneity-stopped decomposition: an internal
/// node merges exactly when every leaf under it carries the same state.
/// `trim(decompose_full(obs), homogeneity_mask(..))` matches the
/// decomposition that stops as soon as a sub-region is uniform.
pub fn homogeneity_mask(tree: &QuadTree) -> MergeMask {
    fn leaf_state(tree: &QuadTree, node: usize) -> Option<NodeState> {
        match tree.nodes()[node].children {
            None => Some(tree.nodes()[node].state),
            Some(children) => {
                let first = leaf_state(tree, children[0])?;
                for &c in &children[1..] {
                    if leaf_state(tree, c) != Some(first) {
                        return None;
                    }
                }
                Some(first)
            }
        }
    }
    MergeMask(
        tree.internal_nodes()
            .iter()
            .map(|&i| leaf_state(tree, i).is_some())
            .collect(),
    )
}
