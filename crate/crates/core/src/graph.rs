//! Undirected graphs, their normalized operators, generators and edge
//! perturbation.

use std::collections::BTreeSet;
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::spectral::Permutation;

/// An undirected simple graph (self-loops allowed) with optional node features.
///
/// Edges are stored once as `(min, max)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    features: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeInfo {
    pub degrees: Vec<usize>,
    pub d_max: usize,
}

/// Dense symmetric matrix. Every constructor mirrors writes, so
/// `m[(i, j)] == m[(j, i)]` holds bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(Mat);

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix(Mat::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Mat::identity(n))
    }

    /// Symmetrizes `m` by averaging it with its transpose.
    pub fn from_mat(m: &Mat) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let n = m.rows();
        let mut s = Mat::zeros(n, n);
        for i in 0..n {
            s[(i, i)] = m[(i, i)];
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(SymMatrix(s))
    }

    pub fn diag(values: &[f64]) -> Self {
        SymMatrix(Mat::diag(values))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0[(i, j)] = v;
        self.0[(j, i)] = v;
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(self.0.add(&other.0))
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(self.0.sub(&other.0))
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(self.0.scale(s))
    }

    /// `P B Pᵀ`, entry `(i, j)` is `B[m(i)][m(j)]`.
    pub fn permute(&self, perm: &Permutation) -> SymMatrix {
        let m = perm.mapping();
        let n = self.size();
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = self.0[(m[i], m[j])];
            }
        }
        SymMatrix(out)
    }
}

impl Deref for SymMatrix {
    type Target = Mat;

    fn deref(&self) -> &Mat {
        &self.0
    }
}

impl Graph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u}, {v}) has an endpoint outside [0, {n})"
                )));
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(Graph { n, edges: set, features: None })
    }

    pub fn with_features(mut self, x: Mat) -> Result<Self> {
        if x.rows() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "feature matrix has {} rows for {} nodes",
                x.rows(),
                self.n
            )));
        }
        self.features = Some(x);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_vec(&self) -> Vec<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    pub fn features(&self) -> Option<&Mat> {
        self.features.as_ref()
    }

    pub fn degrees(&self) -> DegreeInfo {
        let mut degrees = vec![0usize; self.n];
        for &(u, v) in &self.edges {
            degrees[u] += 1;
            if u != v {
                degrees[v] += 1;
            }
        }
        let d_max = degrees.iter().copied().max().unwrap_or(0);
        DegreeInfo { degrees, d_max }
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            if u != v {
                adj[v].push(u);
            }
        }
        adj
    }

    pub fn adjacency(&self) -> SymMatrix {
        let mut a = SymMatrix::zeros(self.n);
        for &(u, v) in &self.edges {
            a.set(u, v, 1.0);
        }
        a
    }

    /// Relabels node `u` as `m(u)`. With `P[i][m(i)] = 1` this gives
    /// `L(self) = P L(out) Pᵀ` and `X(self) = P X(out)`.
    pub fn permuted(&self, perm: &Permutation) -> Graph {
        let m = perm.mapping();
        let edges = self.edges.iter().map(|&(u, v)| (m[u].min(m[v]), m[u].max(m[v]))).collect();
        let features = self.features.as_ref().map(|x| {
            let mut out = Mat::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                out.row_mut(m[i]).copy_from_slice(x.row(i));
            }
            out
        });
        Graph { n: self.n, edges, features }
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for &(u, v) in &self.edges {
            s.push_str(&format!("{u} {v}\n"));
        }
        s
    }
}

fn check_degrees(g: &Graph) -> Result<DegreeInfo> {
    let info = g.degrees();
    if let Some(v) = info.degrees.iter().position(|&d| d == 0) {
        return Err(Error::IsolatedNode(v));
    }
    Ok(info)
}

/// `Â = D^{-1/2} A D^{-1/2}`.
pub fn normalized_adjacency(g: &Graph) -> Result<SymMatrix> {
    let info = check_degrees(g)?;
    let inv_sqrt: Vec<f64> = info.degrees.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut a = SymMatrix::zeros(g.n());
    for (u, v) in g.edges() {
        a.set(u, v, inv_sqrt[u] * inv_sqrt[v]);
    }
    Ok(a)
}

/// `L = I − Â`.
pub fn normalized_laplacian(g: &Graph) -> Result<SymMatrix> {
    let a_hat = normalized_adjacency(g)?;
    Ok(SymMatrix::identity(g.n()).sub(&a_hat))
}

/// `‖L¹ − P L² Pᵀ‖_F + ‖X¹ − P X²‖_F`.
pub fn graph_distance(g1: &Graph, g2: &Graph, perm: &Permutation) -> Result<f64> {
    if g1.n() != g2.n() || perm.len() != g1.n() {
        return Err(Error::SizeMismatch(format!(
            "graphs of {} and {} nodes with a permutation of {}",
            g1.n(),
            g2.n(),
            perm.len()
        )));
    }
    let l1 = normalized_laplacian(g1)?;
    let l2 = normalized_laplacian(g2)?;
    let structural = l1.sub(&l2.permute(perm)).frobenius();
    let feature = match (g1.features(), g2.features()) {
        (None, None) => 0.0,
        (Some(x1), Some(x2)) => {
            if x1.cols() != x2.cols() {
                return Err(Error::SizeMismatch(format!(
                    "feature dims {} and {}",
                    x1.cols(),
                    x2.cols()
                )));
            }
            perm.apply_rows(x2).sub(x1).frobenius()
        }
        _ => return Err(Error::SizeMismatch("features present on only one graph".into())),
    };
    Ok(structural + feature)
}

fn check_prob(p: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// Stochastic block model. Nodes are numbered block by block.
pub fn sbm_generate(block_sizes: &[usize], p_in: f64, p_out: f64, seed: u64) -> Result<Graph> {
    check_prob(p_in, "p_in")?;
    check_prob(p_out, "p_out")?;
    let block = block_labels(block_sizes);
    let n = block.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block[u] == block[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, edges)
}

pub fn block_labels(block_sizes: &[usize]) -> Vec<usize> {
    block_sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect()
}

/// Drops `round(drop_ratio·|E|)` edges and adds `round(add_ratio·|E|)`
/// non-edges. Node ids are preserved and no node is left without edges.
pub fn perturb_edges(g: &Graph, add_ratio: f64, drop_ratio: f64, seed: u64) -> Result<Graph> {
    for (r, name) in [(add_ratio, "add_ratio"), (drop_ratio, "drop_ratio")] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("{name} = {r} must lie in [0, 1)")));
        }
    }
    let m = g.num_edges() as f64;
    let n_drop = (drop_ratio * m).round() as usize;
    let n_add = (add_ratio * m).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut degrees = g.degrees().degrees;
    let mut order = g.edge_vec();
    order.shuffle(&mut rng);
    let mut dropped = BTreeSet::new();
    for &(u, v) in &order {
        if dropped.len() == n_drop {
            break;
        }
        let ok = if u == v { degrees[u] > 1 } else { degrees[u] > 1 && degrees[v] > 1 };
        if ok {
            degrees[u] -= 1;
            if u != v {
                degrees[v] -= 1;
            }
            dropped.insert((u, v));
        }
    }
    if dropped.len() < n_drop {
        return Err(Error::Infeasible(format!(
            "only {} of {n_drop} edges can be dropped without isolating a node",
            dropped.len()
        )));
    }

    let mut edges: BTreeSet<(usize, usize)> = g.edges.difference(&dropped).copied().collect();
    if n_add > 0 {
        let n = g.n();
        let non_edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))
            .filter(|&(u, v)| !g.has_edge(u, v))
            .collect();
        if non_edges.len() < n_add {
            return Err(Error::Infeasible(format!(
                "{n_add} additions requested but only {} non-edges exist",
                non_edges.len()
            )));
        }
        for i in rand::seq::index::sample(&mut rng, non_edges.len(), n_add) {
            edges.insert(non_edges[i]);
        }
    }
    Ok(Graph { n: g.n(), edges, features: g.features.clone() })
}

pub fn complete_graph(n: usize) -> Graph {
    Graph::new(n, (0..n).flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))).expect("valid ids")
}

pub fn path_graph(n: usize) -> Graph {
    Graph::new(n, (1..n).map(|v| (v - 1, v))).expect("valid ids")
}

pub fn cycle_graph(n: usize) -> Graph {
    Graph::new(n, (0..n).map(|v| (v, (v + 1) % n))).expect("valid ids")
}

/// Star with `leaves` leaves; the center is node 0.
pub fn star_graph(leaves: usize) -> Graph {
    Graph::new(leaves + 1, (1..=leaves).map(|v| (0, v))).expect("valid ids")
}

pub fn disjoint_union(a: &Graph, b: &Graph) -> Graph {
    let off = a.n();
    let edges = a.edges().chain(b.edges().map(|(u, v)| (u + off, v + off)));
    Graph::new(a.n() + b.n(), edges).expect("valid ids")
}

/// Two `k`-cliques joined by a single bridge edge.
pub fn barbell_graph(k: usize) -> Graph {
    let c = complete_graph(k);
    let u = disjoint_union(&c, &c);
    let mut edges = u.edge_vec();
    edges.push((k - 1, k));
    Graph::new(2 * k, edges).expect("valid ids")
}

/// A ring over all nodes plus each remaining pair independently with
/// probability `p`. Always connected.
pub fn random_connected_graph(n: usize, p: f64, seed: u64) -> Result<Graph> {
    check_prob(p, "p")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize)> = Vec::new();
    if n >= 2 {
        edges.extend((0..n).map(|v| (v, (v + 1) % n)));
    }
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, edges)
}

/// Parses a whitespace separated "u v" edge list. `#` starts a comment.
/// The node count is one past the largest id.
pub fn parse_edge_list(text: &str) -> Result<Graph> {
    let mut edges = Vec::new();
    let mut n = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected two node ids, found {}", parts.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("'{s}' is not a node id"),
            })
        };
        let (u, v) = (parse(parts[0])?, parse(parts[1])?);
        n = n.max(u + 1).max(v + 1);
        edges.push((u, v));
    }
    Graph::new(n, edges)
}

/// Parses a CSV feature file, one row per node.
pub fn parse_features_csv(text: &str) -> Result<Mat> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("'{}' is not a number", s.trim()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("feature file has no rows".into()));
    }
    Ok(Mat::from_rows(&rows))
}

pub fn read_edge_list(path: &Path) -> Result<Graph> {
    parse_edge_list(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::sym_eig;

    #[test]
    fn k3_normalized_entries() {
        let a = normalized_adjacency(&complete_graph(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 1.0 / (2.0f64 * 2.0).sqrt() };
                assert!((a[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn star_center_leaf_entries() {
        let a = normalized_adjacency(&star_graph(3)).unwrap();
        for leaf in 1..4 {
            assert!((a[(0, leaf)] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_node_rejected() {
        let g = Graph::new(3, [(0, 1)]).unwrap();
        assert_eq!(normalized_laplacian(&g), Err(Error::IsolatedNode(2)));
    }

    #[test]
    fn self_loop_counts_once() {
        let g = Graph::new(2, [(0, 0), (0, 1)]).unwrap();
        assert_eq!(g.degrees().degrees, vec![2, 1]);
    }

    #[test]
    fn path_laplacian_spectrum() {
        let l = normalized_laplacian(&path_graph(3)).unwrap();
        let e = sym_eig(&l).unwrap();
        for (got, want) in e.values.iter().zip([0.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn two_components_have_double_zero() {
        let g = disjoint_union(&complete_graph(2), &complete_graph(2));
        let e = sym_eig(&normalized_laplacian(&g).unwrap()).unwrap();
        assert!(e.values[0].abs() < 1e-12 && e.values[1].abs() < 1e-12);
        assert!(e.values[2] > 0.5);
    }

    #[test]
    fn path_vs_triangle_distance() {
        let p3 = path_graph(3);
        let tri = complete_graph(3);
        let d = graph_distance(&p3, &tri, &Permutation::identity(3)).unwrap();
        // Hand arithmetic: L_path has off-diagonals -1/√2 on (0,1),(1,2); L_tri has -1/2
        // everywhere off the diagonal; both diagonals are 1.
        let s = -1.0 / 2f64.sqrt() + 0.5;
        let want = (4.0 * s * s + 2.0 * 0.25f64).sqrt();
        assert!((d - want).abs() < 1e-14);
    }

    #[test]
    fn sbm_degenerate_probabilities() {
        let g = sbm_generate(&[3, 3], 1.0, 0.0, 1).unwrap();
        assert_eq!(g, disjoint_union(&complete_graph(3), &complete_graph(3)));
    }

    #[test]
    fn sbm_intra_block_count_within_three_sigma() {
        let g = sbm_generate(&[100, 100], 0.3, 0.1, 11).unwrap();
        let labels = block_labels(&[100, 100]);
        let intra = g.edges().filter(|&(u, v)| labels[u] == labels[v]).count() as f64;
        let trials: f64 = 2.0 * (100.0 * 99.0 / 2.0);
        let mean = 0.3 * trials;
        let sd = (trials * 0.3 * 0.7).sqrt();
        assert!((intra - mean).abs() < 3.0 * sd);
    }

    #[test]
    fn sbm_is_deterministic() {
        let a = sbm_generate(&[20, 20], 0.3, 0.1, 5).unwrap();
        let b = sbm_generate(&[20, 20], 0.3, 0.1, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_counts() {
        let g = random_connected_graph(30, 0.2, 4).unwrap();
        assert_eq!(perturb_edges(&g, 0.0, 0.0, 1).unwrap(), g);
        // Trim to exactly 100 edges.
        let g = Graph::new(30, g.edge_vec().into_iter().take(100)).unwrap();
        assert_eq!(g.num_edges(), 100);
        let d = perturb_edges(&g, 0.0, 0.1, 2).unwrap();
        assert_eq!(d.num_edges(), 90);
        assert!(d.edges().all(|(u, v)| g.has_edge(u, v)));
        let a = perturb_edges(&g, 0.1, 0.0, 3).unwrap();
        assert_eq!(a.num_edges(), 110);
        assert_eq!(a.edges().filter(|&(u, v)| !g.has_edge(u, v)).count(), 10);
    }

    #[test]
    fn perturb_infeasible_drop() {
        let g = complete_graph(2);
        let err = perturb_edges(&g, 0.0, 0.9, 1).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn parse_reports_line() {
        let err = parse_edge_list("0 1\n# note\n1 x\n").unwrap_err();
        assert_eq!(err, Error::Parse { line: 3, msg: "'x' is not a node id".into() });
        let g = parse_edge_list("0 1 # trailing\n\n1 2\n").unwrap();
        assert_eq!(g, path_graph(3));
    }

    #[test]
    fn features_csv() {
        let x = parse_features_csv("1,2\n3,4\n").unwrap();
        assert_eq!(x.shape(), (2, 2));
        assert!(parse_features_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn barbell_is_connected() {
        let g = barbell_graph(5);
        assert!(g.is_connected());
        assert_eq!(g.num_edges(), 2 * 10 + 1);
    }
}
