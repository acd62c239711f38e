//! Per-class kNN affinity graphs with local scaling.
//!
//! Each class gets its own graph: nodes are that class's feature vectors,
//! edges are the union of directed kNN relations, and edge weights come from
//! a Gaussian kernel whose bandwidth is the product of the two endpoints'
//! adaptive scales (distance to the k-th nearest neighbor). The row-stochastic
//! transition operator P = D^-1 W drives everything downstream.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    /// Neighbor count for both edge construction and adaptive bandwidths.
    pub k: usize,
    /// Per-node bandwidth (distance to k-th neighbor) when on; a single
    /// global bandwidth (median k-th-neighbor distance) when off.
    pub local_scaling: bool,
    /// Relative bandwidth floor: scales are clamped below by
    /// `epsilon_sigma * feature-space diameter` (diameter 0 falls back to 1),
    /// so duplicate points cannot produce a zero bandwidth.
    pub epsilon_sigma: f64,
    /// Bridge disconnected components with minimum-distance edges.
    pub connect_components: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 20,
            local_scaling: true,
            epsilon_sigma: 1e-12,
            connect_components: true,
        }
    }
}

/// Sparse symmetric-pattern matrix as sorted adjacency rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub n: usize,
    /// Row i holds (column, value) sorted by column; diagonal included.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by(|&(c, _)| c.cmp(&j))
            .map(|pos| self.rows[i][pos].1)
            .unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            y[i] = row.iter().map(|&(j, v)| v * x[j]).sum();
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out[[i, j]] = v;
            }
        }
        out
    }
}

/// Fitted affinity structure for one class.
#[derive(Debug, Clone)]
pub struct ClassGraph {
    /// Symmetric affinity W with unit diagonal.
    pub affinity: SparseRows,
    /// Row sums of W; strictly positive (the self-loop guarantees it).
    pub degrees: Array1<f64>,
    /// Row-stochastic transition P = D^-1 W.
    pub transition: SparseRows,
    /// Per-node bandwidths, clamped below by `sigma_floor`.
    pub scales: Array1<f64>,
    /// The node features the graph was built over (n x D).
    pub node_features: Array2<f64>,
    /// Absolute bandwidth floor used during construction.
    pub sigma_floor: f64,
    /// Cross-component repair edges added outside the kNN relation; the
    /// out-of-sample support must honor them at their endpoints.
    pub bridge_edges: Vec<(usize, usize)>,
    pub cfg: GraphConfig,
}

impl ClassGraph {
    pub fn n(&self) -> usize {
        self.affinity.n
    }

    pub fn dim(&self) -> usize {
        self.node_features.ncols()
    }

    /// Undirected off-diagonal edge count.
    pub fn edge_count(&self) -> usize {
        (self.affinity.nnz() - self.n()) / 2
    }
}

/// Euclidean distance; the one helper shared by graph construction and
/// out-of-sample extension so in-sample kernel rows reproduce exactly.
pub fn euclid(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Build the affinity graph over one class's features.
pub fn build_class_graph(features: Array2<f64>, cfg: &GraphConfig) -> Result<ClassGraph> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if cfg.k < 1 || cfg.k > n - 1 {
        return Err(Error::KTooLarge { k: cfg.k, n });
    }
    if cfg.epsilon_sigma <= 0.0 {
        return Err(Error::DegenerateScale(cfg.epsilon_sigma));
    }

    // Full pairwise distances; class sizes stay at landmark scale.
    let mut dist = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclid(features.row(i), features.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }

    let diameter = dist.iter().cloned().fold(0.0, f64::max);
    let sigma_floor = cfg.epsilon_sigma * if diameter > 0.0 { diameter } else { 1.0 };

    // kNN by (distance, index); the k-th neighbor distance is the raw scale.
    let mut knn: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut raw_scale = vec![0.0; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dist[[i, a]]
                .partial_cmp(&dist[[i, b]])
                .unwrap()
                .then(a.cmp(&b))
        });
        order.truncate(cfg.k);
        raw_scale[i] = dist[[i, order[cfg.k - 1]]];
        knn.push(order);
    }

    let scales: Vec<f64> = if cfg.local_scaling {
        raw_scale.iter().map(|&s| s.max(sigma_floor)).collect()
    } else {
        let mut sorted = raw_scale.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        vec![median.max(sigma_floor); n]
    };

    // Union of directed kNN relations.
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (i, nbrs) in knn.iter().enumerate() {
        for &j in nbrs {
            edges.insert((i.min(j), i.max(j)));
        }
    }

    let mut bridge_edges = Vec::new();
    if cfg.connect_components {
        let mut uf = UnionFind::new(n);
        let mut components = n;
        for &(i, j) in &edges {
            if uf.union(i, j) {
                components -= 1;
            }
        }
        while components > 1 {
            // Minimum-distance cross-component pair, ties broken by index.
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..n {
                for j in (i + 1)..n {
                    if uf.find(i) != uf.find(j) {
                        let d = dist[[i, j]];
                        if best.map_or(true, |(bd, _, _)| d < bd) {
                            best = Some((d, i, j));
                        }
                    }
                }
            }
            let (_, i, j) = best.expect("disconnected graph must have a cross pair");
            edges.insert((i, j));
            bridge_edges.push((i, j));
            uf.union(i, j);
            components -= 1;
        }
    }

    // Kernel weights on edges plus unit self-loops.
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
    for &(i, j) in &edges {
        let d = dist[[i, j]];
        let w = (-(d * d) / (scales[i] * scales[j])).exp();
        rows[i].push((j, w));
        rows[j].push((i, w));
    }
    for row in rows.iter_mut() {
        row.sort_by_key(|&(c, _)| c);
    }
    let affinity = SparseRows { n, rows };

    let degrees: Array1<f64> = Array1::from_iter(
        affinity
            .rows
            .iter()
            .map(|r| r.iter().map(|&(_, v)| v).sum()),
    );

    let transition = SparseRows {
        n,
        rows: affinity
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|&(j, v)| (j, v / degrees[i])).collect())
            .collect(),
    };

    Ok(ClassGraph {
        affinity,
        degrees,
        transition,
        scales: Array1::from_vec(scales),
        node_features: features,
        sigma_floor,
        bridge_edges,
        cfg: cfg.clone(),
    })
}

/// Maximum deviation of any transition row sum from 1.
pub fn transition_rows_check(g: &ClassGraph) -> f64 {
    g.transition
        .rows
        .iter()
        .map(|row| (row.iter().map(|&(_, v)| v).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDiagnostics {
    pub components: usize,
    /// Mean unweighted shortest-path length over node pairs of the largest
    /// component; 0 when that component is a single node.
    pub avg_path_length: f64,
}

/// Connected components and average path length over the off-diagonal edges.
pub fn graph_diagnostics(g: &ClassGraph) -> GraphDiagnostics {
    let n = g.n();
    let adj: Vec<Vec<usize>> = g
        .affinity
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|&(j, _)| j).filter(|&j| j != i).collect())
        .collect();

    // Component labels via BFS.
    let mut label = vec![usize::MAX; n];
    let mut components = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([start]);
        label[start] = components;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if label[v] == usize::MAX {
                    label[v] = components;
                    queue.push_back(v);
                }
            }
        }
        components += 1;
    }

    // Largest component, ties toward the one seen first (lowest label).
    let mut sizes = vec![0usize; components];
    for &l in &label {
        sizes[l] += 1;
    }
    let largest = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .unwrap_or(0);

    let members: Vec<usize> = (0..n).filter(|&i| label[i] == largest).collect();
    if members.len() < 2 {
        return GraphDiagnostics {
            components,
            avg_path_length: 0.0,
        };
    }

    let mut total = 0u64;
    let mut pairs = 0u64;
    for (mi, &src) in members.iter().enumerate() {
        // BFS distances from src; count unordered pairs once.
        let mut seen = vec![u32::MAX; n];
        seen[src] = 0;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if seen[v] == u32::MAX {
                    seen[v] = seen[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for &dst in members.iter().skip(mi + 1) {
            total += seen[dst] as u64;
            pairs += 1;
        }
    }
    GraphDiagnostics {
        components,
        avg_path_length: total as f64 / pairs as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_points(d: f64) -> Array2<f64> {
        array![[0.0, 0.0], [d, 0.0]]
    }

    #[test]
    fn two_point_weight_is_inverse_e() {
        // sigma_1 = sigma_2 = d, so w_12 = exp(-d^2/d^2) = e^-1.
        let g = build_class_graph(two_points(3.5), &GraphConfig::default_k(1)).unwrap();
        let w = g.affinity.get(0, 1);
        assert!((w - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w - 0.367_879_441_171_442_33).abs() < 1e-12);
        assert_eq!(g.affinity.get(0, 0), 1.0);
        assert_eq!(g.affinity.get(1, 1), 1.0);
    }

    #[test]
    fn identical_points_clamp_scale_and_saturate_weights() {
        let x = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let g = build_class_graph(x, &GraphConfig::default_k(1)).unwrap();
        // Diameter is 0, so the floor falls back to epsilon_sigma itself.
        assert!((g.sigma_floor - 1e-12).abs() < 1e-25);
        for i in 0..3 {
            assert_eq!(g.scales[i], g.sigma_floor);
        }
        for (i, row) in g.affinity.rows.iter().enumerate() {
            for &(j, w) in row {
                assert_eq!(w, 1.0, "w[{i},{j}]");
            }
        }
    }

    #[test]
    fn transition_rows_sum_to_one_two_node_case() {
        let g = build_class_graph(two_points(1.0), &GraphConfig::default_k(1)).unwrap();
        // Hand-normalized 2x2: each row is (1, e^-1) / (1 + e^-1).
        let e1 = (-1.0f64).exp();
        assert!((g.transition.get(0, 0) - 1.0 / (1.0 + e1)).abs() < 1e-15);
        assert!((g.transition.get(0, 1) - e1 / (1.0 + e1)).abs() < 1e-15);
        assert!(transition_rows_check(&g) <= 1e-10);
    }

    #[test]
    fn transition_check_accepts_identity_affinity() {
        // Hand-built graph of isolated self-loops.
        let n = 4;
        let rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
        let affinity = SparseRows { n, rows };
        let degrees = Array1::from_elem(n, 1.0);
        let transition = affinity.clone();
        let g = ClassGraph {
            affinity,
            degrees,
            transition,
            scales: Array1::from_elem(n, 1.0),
            node_features: Array2::zeros((n, 2)),
            sigma_floor: 1e-12,
            bridge_edges: Vec::new(),
            cfg: GraphConfig::default(),
        };
        assert_eq!(transition_rows_check(&g), 0.0);
        let diag = graph_diagnostics(&g);
        assert_eq!(diag.components, 4);
    }

    #[test]
    fn bridging_two_far_clusters() {
        // 200 points in two far-apart chains (each chain internally
        // connected at k=3); verified against a union-find oracle over the
        // resulting edge list.
        let mut pts = Vec::new();
        let mut state = 11u64;
        let mut unit = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for i in 0..200 {
            let cx = if i < 100 { 0.0 } else { 1000.0 };
            pts.push([cx + (i % 100) as f64 * 0.1, 0.02 * unit()]);
        }
        let x = Array2::from_shape_vec((200, 2), pts.into_iter().flatten().collect()).unwrap();

        let mut cfg = GraphConfig::default_k(3);
        cfg.connect_components = false;
        let g_off = build_class_graph(x.clone(), &cfg).unwrap();
        assert_eq!(component_oracle(&g_off), 2);
        assert_eq!(graph_diagnostics(&g_off).components, 2);

        cfg.connect_components = true;
        let g_on = build_class_graph(x, &cfg).unwrap();
        assert_eq!(component_oracle(&g_on), 1);
        assert_eq!(graph_diagnostics(&g_on).components, 1);
        // The bridge is one extra undirected edge.
        assert_eq!(g_on.edge_count(), g_off.edge_count() + 1);
    }

    /// Independent component count: union-find over the off-diagonal edges.
    fn component_oracle(g: &ClassGraph) -> usize {
        let n = g.n();
        let mut uf = UnionFind::new(n);
        let mut comps = n;
        for (i, row) in g.affinity.rows.iter().enumerate() {
            for &(j, _) in row {
                if j != i && uf.union(i, j) {
                    comps -= 1;
                }
            }
        }
        comps
    }

    #[test]
    fn path_graph_avg_path_length() {
        // 3 collinear points, k=1: edges (0,1) and (1,2); pairs 1+1+2.
        let x = array![[0.0], [1.0], [2.0]];
        let g = build_class_graph(x, &GraphConfig::default_k(1)).unwrap();
        let diag = graph_diagnostics(&g);
        assert_eq!(diag.components, 1);
        assert!((diag.avg_path_length - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn triangle_avg_path_length_is_one() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.5, 0.8]];
        let g = build_class_graph(x, &GraphConfig::default_k(2)).unwrap();
        let diag = graph_diagnostics(&g);
        assert_eq!(diag.components, 1);
        assert!((diag.avg_path_length - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_disjoint_edges_have_two_components() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [100.0, 0.0], [101.0, 0.0]];
        let mut cfg = GraphConfig::default_k(1);
        cfg.connect_components = false;
        let g = build_class_graph(x, &cfg).unwrap();
        assert_eq!(graph_diagnostics(&g).components, 2);
    }

    #[test]
    fn error_paths() {
        let one = array![[0.0, 0.0]];
        assert!(matches!(
            build_class_graph(one, &GraphConfig::default_k(1)),
            Err(Error::TooFewSamples(1))
        ));
        let two = two_points(1.0);
        assert!(matches!(
            build_class_graph(two.clone(), &GraphConfig::default_k(5)),
            Err(Error::KTooLarge { k: 5, n: 2 })
        ));
        let mut cfg = GraphConfig::default_k(1);
        cfg.epsilon_sigma = 0.0;
        assert!(matches!(
            build_class_graph(two, &cfg),
            Err(Error::DegenerateScale(_))
        ));
    }

    impl GraphConfig {
        fn default_k(k: usize) -> Self {
            GraphConfig {
                k,
                ..GraphConfig::default()
            }
        }
    }
}
