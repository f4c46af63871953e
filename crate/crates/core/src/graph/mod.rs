//! Multi-view graph data model: one node set shared by several directed edge
//! sets (views), with dense node features and per-node roles.

mod io;
mod planted;

pub use io::{load_instances, load_multiview_graph, write_graph_files, write_instances, LoadedGraph};
pub use planted::{generate_planted_synergy, plant_rule_holds, PlantedSpec};

use crate::autodiff::Matrix;
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("edge ({src}, {dst}) in view {view} references node {node} outside [0, {count})")]
    DanglingNode {
        view: usize,
        src: usize,
        dst: usize,
        node: usize,
        count: usize,
    },
    #[error("duplicate edge ({src}, {dst}) in view {view}")]
    DuplicateEdge { view: usize, src: usize, dst: usize },
    #[error("edge ({src}, {dst}) not present in view {view}")]
    MissingEdge { view: usize, src: usize, dst: usize },
    #[error("node index {node} out of range for graph with {count} nodes")]
    NodeOutOfRange { node: usize, count: usize },
    #[error("feature matrix has {rows} rows, expected {expected}")]
    FeatureRows { rows: usize, expected: usize },
    #[error("feature dimension must be at least 1")]
    EmptyFeatures,
    #[error("graph must have at least one view")]
    NoViews,
    #[error("role list has {got} entries, expected {expected}")]
    RoleCount { got: usize, expected: usize },
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    User,
    Item,
    Attr,
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRole::User => write!(f, "user"),
            NodeRole::Item => write!(f, "item"),
            NodeRole::Attr => write!(f, "attr"),
        }
    }
}

impl std::str::FromStr for NodeRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(NodeRole::User),
            "item" => Ok(NodeRole::Item),
            "attr" => Ok(NodeRole::Attr),
            other => Err(format!("unknown role '{other}' (expected user|item|attr)")),
        }
    }
}

/// A recommendation instance: predict whether `user` links to `item`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Instance {
    pub user: usize,
    pub item: usize,
    /// Dataset label, 0 or 1.
    pub label: u8,
    /// Identifier of the computational subgraph this instance is explained on.
    pub graph_ref: Option<String>,
    /// For planted synthetic data: the intermediate friend node of the
    /// planted cross-view pair, when this instance was planted positive.
    pub planted_friend: Option<usize>,
}

impl Instance {
    pub fn new(user: usize, item: usize, label: u8) -> Self {
        Self {
            user,
            item,
            label,
            graph_ref: None,
            planted_friend: None,
        }
    }
}

/// One node set, `K` directed edge sets, an `n x d` feature matrix and
/// per-node roles. Immutable after construction; every constructor validates
/// the full invariant set.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewGraph {
    node_count: usize,
    roles: Vec<NodeRole>,
    views: Vec<Vec<(usize, usize)>>,
    features: Matrix,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GraphSummary {
    pub entities: usize,
    pub relations: usize,
    pub views: usize,
    pub per_view: Vec<usize>,
    pub feature_dim: usize,
}

impl MultiViewGraph {
    pub fn new(
        node_count: usize,
        roles: Vec<NodeRole>,
        views: Vec<Vec<(usize, usize)>>,
        features: Matrix,
    ) -> Result<Self, GraphError> {
        if views.is_empty() {
            return Err(GraphError::NoViews);
        }
        if roles.len() != node_count {
            return Err(GraphError::RoleCount {
                got: roles.len(),
                expected: node_count,
            });
        }
        if features.nrows() != node_count {
            return Err(GraphError::FeatureRows {
                rows: features.nrows(),
                expected: node_count,
            });
        }
        if features.ncols() == 0 {
            return Err(GraphError::EmptyFeatures);
        }
        let mut sorted_views = Vec::with_capacity(views.len());
        for (k, edges) in views.into_iter().enumerate() {
            let mut edges = edges;
            edges.sort_unstable();
            for pair in edges.windows(2) {
                if pair[0] == pair[1] {
                    return Err(GraphError::DuplicateEdge {
                        view: k,
                        src: pair[0].0,
                        dst: pair[0].1,
                    });
                }
            }
            for &(src, dst) in &edges {
                for node in [src, dst] {
                    if node >= node_count {
                        return Err(GraphError::DanglingNode {
                            view: k,
                            src,
                            dst,
                            node,
                            count: node_count,
                        });
                    }
                }
            }
            sorted_views.push(edges);
        }
        Ok(Self {
            node_count,
            roles,
            views: sorted_views,
            features,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }

    pub fn role(&self, node: usize) -> NodeRole {
        self.roles[node]
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Edges of view `k`, sorted by `(src, dst)`.
    pub fn view_edges(&self, k: usize) -> &[(usize, usize)] {
        &self.views[k]
    }

    pub fn views(&self) -> &[Vec<(usize, usize)>] {
        &self.views
    }

    pub fn has_edge(&self, view: usize, src: usize, dst: usize) -> bool {
        self.views[view].binary_search(&(src, dst)).is_ok()
    }

    /// Total edge count across views.
    pub fn edge_count(&self) -> usize {
        self.views.iter().map(Vec::len).sum()
    }

    /// Dense 0/1 adjacency matrix of one view.
    pub fn adjacency(&self, view: usize) -> Matrix {
        let mut a = Matrix::zeros((self.node_count, self.node_count));
        for &(s, d) in &self.views[view] {
            a[(s, d)] = 1.0;
        }
        a
    }

    pub fn adjacencies(&self) -> Vec<Matrix> {
        (0..self.view_count()).map(|k| self.adjacency(k)).collect()
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            entities: self.node_count,
            relations: self.edge_count(),
            views: self.view_count(),
            per_view: self.views.iter().map(Vec::len).collect(),
            feature_dim: self.feature_dim(),
        }
    }

    /// Same nodes, roles and features, different edge sets.
    pub fn with_views(&self, views: Vec<Vec<(usize, usize)>>) -> Result<Self, GraphError> {
        Self::new(
            self.node_count,
            self.roles.clone(),
            views,
            self.features.clone(),
        )
    }

    fn check_node(&self, node: usize) -> Result<(), GraphError> {
        if node >= self.node_count {
            return Err(GraphError::NodeOutOfRange {
                node,
                count: self.node_count,
            });
        }
        Ok(())
    }
}

/// An induced computational subgraph with its mapping back to the host graph.
#[derive(Debug, Clone)]
pub struct SubgraphExtraction {
    pub graph: MultiViewGraph,
    /// `node_map[local] = original`.
    pub node_map: Vec<usize>,
    /// Local index of the instance user node.
    pub user: usize,
    /// Local index of the instance item node.
    pub item: usize,
}

impl SubgraphExtraction {
    pub fn to_original(&self, local: usize) -> usize {
        self.node_map[local]
    }

    pub fn to_local(&self, original: usize) -> Option<usize> {
        self.node_map.binary_search(&original).ok()
    }
}

/// Induced subgraph on the union of the `h`-hop neighborhoods of `u` and `i`,
/// with reachability taken over all views jointly and edge direction ignored.
/// Selected nodes are densely re-indexed in ascending original order.
pub fn extract_computational_subgraph(
    g: &MultiViewGraph,
    u: usize,
    i: usize,
    h: usize,
) -> Result<SubgraphExtraction, GraphError> {
    g.check_node(u)?;
    g.check_node(i)?;

    // undirected union-of-views adjacency for reachability
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); g.node_count()];
    for view in g.views() {
        for &(s, d) in view {
            neighbors[s].insert(d);
            neighbors[d].insert(s);
        }
    }

    let mut selected: BTreeSet<usize> = BTreeSet::new();
    selected.insert(u);
    selected.insert(i);
    let mut frontier: BTreeSet<usize> = selected.clone();
    for _ in 0..h {
        let mut next = BTreeSet::new();
        for &node in &frontier {
            for &nb in &neighbors[node] {
                if selected.insert(nb) {
                    next.insert(nb);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    let node_map: Vec<usize> = selected.into_iter().collect();
    let local_of = |original: usize| node_map.binary_search(&original).ok();

    let mut views = Vec::with_capacity(g.view_count());
    for view in g.views() {
        let mut edges = Vec::new();
        for &(s, d) in view {
            if let (Some(ls), Some(ld)) = (local_of(s), local_of(d)) {
                edges.push((ls, ld));
            }
        }
        views.push(edges);
    }

    let mut features = Matrix::zeros((node_map.len(), g.feature_dim()));
    for (local, &original) in node_map.iter().enumerate() {
        features.row_mut(local).assign(&g.features().row(original));
    }
    let roles = node_map.iter().map(|&o| g.role(o)).collect();

    let graph = MultiViewGraph::new(node_map.len(), roles, views, features)?;
    let user = local_of(u).expect("u is always selected");
    let item = local_of(i).expect("i is always selected");
    Ok(SubgraphExtraction {
        graph,
        node_map,
        user,
        item,
    })
}

/// Removes exactly the edges of `sub` from `g`, per view; node set unchanged.
pub fn complement_subgraph(
    g: &MultiViewGraph,
    sub: &[Vec<(usize, usize)>],
) -> Result<MultiViewGraph, GraphError> {
    assert_eq!(sub.len(), g.view_count(), "view count mismatch");
    let mut views = Vec::with_capacity(g.view_count());
    for (k, removal) in sub.iter().enumerate() {
        for &(s, d) in removal {
            if !g.has_edge(k, s, d) {
                return Err(GraphError::MissingEdge {
                    view: k,
                    src: s,
                    dst: d,
                });
            }
        }
        let gone: BTreeSet<(usize, usize)> = removal.iter().copied().collect();
        let kept = g
            .view_edges(k)
            .iter()
            .copied()
            .filter(|e| !gone.contains(e))
            .collect();
        views.push(kept);
    }
    g.with_views(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_graph() -> MultiViewGraph {
        // single view chain 0-1-2-3
        MultiViewGraph::new(
            4,
            vec![
                NodeRole::User,
                NodeRole::User,
                NodeRole::User,
                NodeRole::Item,
            ],
            vec![vec![(0, 1), (1, 2), (2, 3)]],
            Matrix::from_elem((4, 2), 1.0),
        )
        .unwrap()
    }

    #[test]
    fn rejects_out_of_range_edge() {
        let err = MultiViewGraph::new(
            3,
            vec![NodeRole::User, NodeRole::User, NodeRole::Item],
            vec![vec![(0, 5)]],
            Matrix::from_elem((3, 2), 0.0),
        )
        .unwrap_err();
        match err {
            GraphError::DanglingNode { node, .. } => assert_eq!(node, 5),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_edge() {
        let err = MultiViewGraph::new(
            3,
            vec![NodeRole::User, NodeRole::User, NodeRole::Item],
            vec![vec![(0, 1), (0, 1)]],
            Matrix::from_elem((3, 2), 0.0),
        )
        .unwrap_err();
        match err {
            GraphError::DuplicateEdge { src, dst, .. } => assert_eq!((src, dst), (0, 1)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_hop_subgraph_is_endpoints_only() {
        let g = chain_graph();
        let sub = extract_computational_subgraph(&g, 0, 3, 0).unwrap();
        assert_eq!(sub.node_map, vec![0, 3]);
        assert_eq!(sub.graph.edge_count(), 0); // no 0-3 edge in the chain
    }

    #[test]
    fn zero_hop_subgraph_keeps_direct_edge() {
        let g = MultiViewGraph::new(
            3,
            vec![NodeRole::User, NodeRole::Item, NodeRole::Attr],
            vec![vec![(0, 1)], vec![(1, 2)]],
            Matrix::from_elem((3, 1), 0.0),
        )
        .unwrap();
        let sub = extract_computational_subgraph(&g, 0, 1, 0).unwrap();
        assert_eq!(sub.graph.view_edges(0), &[(0, 1)]);
        assert_eq!(sub.graph.view_edges(1), &[] as &[(usize, usize)]);
    }

    #[test]
    fn one_hop_chain_closure_matches_bfs_oracle() {
        // u=0, i=3, chain 0-1-2-3: 1-hop union is {0,1,2,3}; the induced
        // closure must include the interior (1,2) edge.
        let g = chain_graph();
        let sub = extract_computational_subgraph(&g, 0, 3, 1).unwrap();

        // independent breadth-first oracle over the chain
        let mut expected: BTreeSet<usize> = BTreeSet::new();
        for start in [0usize, 3] {
            expected.insert(start);
            let mut frontier = vec![start];
            for _ in 0..1 {
                let mut next = vec![];
                for &n in &frontier {
                    for &(s, d) in g.view_edges(0) {
                        if s == n && expected.insert(d) {
                            next.push(d);
                        }
                        if d == n && expected.insert(s) {
                            next.push(s);
                        }
                    }
                }
                frontier = next;
            }
        }
        assert_eq!(sub.node_map, expected.into_iter().collect::<Vec<_>>());
        assert_eq!(sub.graph.view_edges(0), &[(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn saturated_hops_reproduce_graph() {
        let g = chain_graph();
        let sub = extract_computational_subgraph(&g, 0, 3, 10).unwrap();
        assert_eq!(sub.node_map, vec![0, 1, 2, 3]);
        assert_eq!(sub.graph.view_edges(0), g.view_edges(0));
        assert_eq!(sub.graph.features(), g.features());
    }

    #[test]
    fn hop_monotonicity() {
        let g = chain_graph();
        let mut prev: Vec<usize> = vec![];
        for h in 0..4 {
            let sub = extract_computational_subgraph(&g, 0, 0, h).unwrap();
            assert!(
                prev.iter().all(|n| sub.node_map.contains(n)),
                "h={h} lost nodes"
            );
            prev = sub.node_map;
        }
    }

    #[test]
    fn reindex_round_trip_recovers_original_edges() {
        let g = chain_graph();
        let sub = extract_computational_subgraph(&g, 1, 2, 1).unwrap();
        let restored: Vec<(usize, usize)> = sub
            .graph
            .view_edges(0)
            .iter()
            .map(|&(s, d)| (sub.to_original(s), sub.to_original(d)))
            .collect();
        for edge in &restored {
            assert!(g.view_edges(0).contains(edge));
        }
        // every original edge among selected nodes is present
        for &(s, d) in g.view_edges(0) {
            if sub.to_local(s).is_some() && sub.to_local(d).is_some() {
                assert!(restored.contains(&(s, d)));
            }
        }
    }

    #[test]
    fn complement_of_everything_is_empty() {
        let g = chain_graph();
        let c = complement_subgraph(&g, &[g.view_edges(0).to_vec()]).unwrap();
        assert_eq!(c.edge_count(), 0);
        assert_eq!(c.node_count(), g.node_count());
    }

    #[test]
    fn complement_of_nothing_is_identity() {
        let g = chain_graph();
        let c = complement_subgraph(&g, &[vec![]]).unwrap();
        assert_eq!(c, g);
    }

    #[test]
    fn complement_is_set_difference() {
        let g = MultiViewGraph::new(
            3,
            vec![NodeRole::User, NodeRole::User, NodeRole::Item],
            vec![vec![(0, 1), (1, 2)]],
            Matrix::from_elem((3, 1), 0.0),
        )
        .unwrap();
        let c = complement_subgraph(&g, &[vec![(0, 1)]]).unwrap();
        assert_eq!(c.view_edges(0), &[(1, 2)]);
    }

    #[test]
    fn complement_rejects_absent_edge() {
        let g = chain_graph();
        let err = complement_subgraph(&g, &[vec![(3, 0)]]).unwrap_err();
        assert!(matches!(err, GraphError::MissingEdge { src: 3, dst: 0, .. }));
    }

    #[test]
    fn complement_partitions_edges() {
        let g = chain_graph();
        let sub = vec![vec![(0, 1), (2, 3)]];
        let c = complement_subgraph(&g, &sub).unwrap();
        let mut union: Vec<(usize, usize)> = c.view_edges(0).to_vec();
        union.extend(&sub[0]);
        union.sort_unstable();
        assert_eq!(union, g.view_edges(0));
        assert!(c.view_edges(0).iter().all(|e| !sub[0].contains(e)));
    }
}
