use serde::{Deserialize, Serialize};

use crate::error::{DomainError, TreeError};
use crate::model::{Direction, Score};

/// `Q + c * sqrt(N_parent) / (1 + N_edge)` with a uniform prior.
pub fn puct_score(q: f64, n_parent: u64, n_edge: u64, c_puct: f64) -> f64 {
    q + c_puct * (n_parent as f64).sqrt() / (1.0 + n_edge as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Binary,
    #[default]
    Score,
}

impl std::str::FromStr for RewardMode {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(RewardMode::Binary),
            "score" => Ok(RewardMode::Score),
            other => Err(DomainError::Invalid(format!("unknown reward mode `{other}`"))),
        }
    }
}

/// Binary: 1 or 0. Score: `±tanh(v)` by direction, -1 when rejected.
pub fn reward(validated: bool, v: Score, direction: Direction, mode: RewardMode) -> Result<f64, DomainError> {
    match mode {
        RewardMode::Binary => Ok(if validated { 1.0 } else { 0.0 }),
        RewardMode::Score if !validated => Ok(-1.0),
        RewardMode::Score => {
            let v = v.ok_or_else(|| DomainError::Invalid("validated node has no score".into()))?;
            Ok(direction.sign() * v.tanh())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub child: usize,
    pub q: f64,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub solution_id: String,
    pub parent: Option<usize>,
    pub children: Vec<EdgeStats>,
    /// Completed simulations through this node, its own evaluation included.
    pub visits: u64,
    pub depth: u32,
    pub evaluated: bool,
}

/// Search tree with averaged edge statistics. Node ids are dense and
/// assigned in creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub max_depth: u32,
}

impl Tree {
    pub fn new(root_solution: impl Into<String>, max_depth: u32) -> Self {
        Self {
            nodes: vec![TreeNode {
                id: 0,
                solution_id: root_solution.into(),
                parent: None,
                children: Vec::new(),
                visits: 0,
                depth: 0,
                evaluated: false,
            }],
            max_depth,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.children.len()).sum()
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode, TreeError> {
        self.nodes.get(id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn add_child(&mut self, parent: usize, solution_id: impl Into<String>) -> Result<usize, TreeError> {
        let depth = self.node(parent)?.depth;
        if depth >= self.max_depth {
            return Err(TreeError::ExpansionRefused { node: parent, depth, max_depth: self.max_depth });
        }
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            solution_id: solution_id.into(),
            parent: Some(parent),
            children: Vec::new(),
            visits: 0,
            depth: depth + 1,
            evaluated: false,
        });
        self.nodes[parent].children.push(EdgeStats { child: id, q: 0.0, n: 0 });
        Ok(id)
    }

    /// Highest PUCT child among those accepted by `allow`; ties go to the
    /// lowest child id.
    pub fn select_child_where(
        &self,
        node: usize,
        c_puct: f64,
        allow: impl Fn(usize) -> bool,
    ) -> Result<Option<usize>, TreeError> {
        let n = self.node(node)?;
        if n.children.is_empty() {
            return Err(TreeError::LeafNode(node));
        }
        let mut best: Option<(usize, f64)> = None;
        for e in n.children.iter().filter(|e| allow(e.child)) {
            let u = puct_score(e.q, n.visits, e.n, c_puct);
            if best.is_none_or(|(id, b)| u > b || (u == b && e.child < id)) {
                best = Some((e.child, u));
            }
        }
        Ok(best.map(|(id, _)| id))
    }

    pub fn select_child(&self, node: usize, c_puct: f64) -> Result<usize, TreeError> {
        Ok(self.select_child_where(node, c_puct, |_| true)?.expect("unfiltered selection over a non-empty child list"))
    }

    /// True while some leaf below `node` can still be expanded.
    pub fn expandable(&self, node: usize) -> bool {
        let Ok(n) = self.node(node) else { return false };
        if n.depth >= self.max_depth {
            return false;
        }
        n.children.is_empty() || n.children.iter().any(|e| self.expandable(e.child))
    }

    /// PUCT descent from the root through expandable subtrees. Returns the
    /// child-id path to the chosen leaf, or `None` when nothing is left.
    pub fn select_leaf(&self, c_puct: f64) -> Option<Vec<usize>> {
        if !self.expandable(0) {
            return None;
        }
        let mut path = Vec::new();
        let mut node = 0;
        while !self.nodes[node].children.is_empty() {
            node = self.select_child_where(node, c_puct, |c| self.expandable(c)).ok()??;
            path.push(node);
        }
        Some(path)
    }

    /// Path of child ids from the root down to `node`.
    pub fn path_to(&self, node: usize) -> Result<Vec<usize>, TreeError> {
        let mut path = Vec::new();
        let mut cur = node;
        while let Some(p) = self.node(cur)?.parent {
            path.push(cur);
            cur = p;
        }
        path.reverse();
        Ok(path)
    }

    /// Records a completed simulation: the root and every node on `path`
    /// gain a visit and each edge averages in `r`. The last node on the path
    /// (or the root for an empty path) is marked evaluated.
    pub fn backprop(&mut self, path: &[usize], r: f64) -> Result<(), TreeError> {
        let mut parent = 0usize;
        for &child in path {
            let edge = self.nodes[parent]
                .children
                .iter_mut()
                .find(|e| e.child == child)
                .ok_or(TreeError::UnknownNode(child))?;
            edge.q = (edge.n as f64 * edge.q + r) / (edge.n as f64 + 1.0);
            edge.n += 1;
            parent = child;
        }
        self.nodes[0].visits += 1;
        for &child in path {
            self.nodes[child].visits += 1;
        }
        self.nodes[parent].evaluated = true;
        Ok(())
    }

    /// Checks parent links, depths and visit accounting.
    pub fn well_formed(&self) -> Result<(), String> {
        for n in &self.nodes {
            match n.parent {
                None if n.id != 0 => return Err(format!("node {} has no parent", n.id)),
                Some(p) => {
                    let parent = self.nodes.get(p).ok_or(format!("node {} has unknown parent {p}", n.id))?;
                    if parent.depth + 1 != n.depth {
                        return Err(format!("node {} depth {} under parent depth {}", n.id, n.depth, parent.depth));
                    }
                    if parent.children.iter().filter(|e| e.child == n.id).count() != 1 {
                        return Err(format!("node {} is not listed exactly once under {p}", n.id));
                    }
                }
                None => {}
            }
            if n.depth > self.max_depth {
                return Err(format!("node {} deeper than {}", n.id, self.max_depth));
            }
            let through: u64 = n.children.iter().map(|e| e.n).sum();
            if n.visits != through + u64::from(n.evaluated) {
                return Err(format!("node {} visits {} != {} + own evaluation", n.id, n.visits, through));
            }
            for e in &n.children {
                if !(-1.0..=1.0).contains(&e.q) {
                    return Err(format!("edge {}->{} has Q {}", n.id, e.child, e.q));
                }
            }
        }
        Ok(())
    }
}
