//! Brute-force ground truth used to cross-check the fast paths.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{Graph, SymMatrix};
use crate::linalg::Mat;
use crate::spectral::Permutation;

pub const MAX_BRUTE_FORCE_N: usize = 9;

/// Next permutation in lexicographic order, `false` after the last one.
fn next_permutation(a: &mut [usize]) -> bool {
    let n = a.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && a[i - 1] >= a[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while a[j] <= a[i - 1] {
        j -= 1;
    }
    a.swap(i - 1, j);
    a[i..].reverse();
    true
}

/// Every permutation of `[0, n)` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Permutation> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![Permutation::new(cur.clone()).expect("identity")];
    while next_permutation(&mut cur) {
        out.push(Permutation::new(cur.clone()).expect("bijection"));
    }
    out
}

/// Exhaustive `min_P ‖L¹ − P L² Pᵀ‖_F + ‖X¹ − P X²‖_F`. Ties go to the
/// lexicographically smallest mapping.
pub fn brute_force_matching(
    l1: &SymMatrix,
    l2: &SymMatrix,
    x1: Option<&Mat>,
    x2: Option<&Mat>,
) -> Result<(Permutation, f64)> {
    let n = l1.size();
    if l2.size() != n {
        return Err(Error::SizeMismatch(format!("{n} vs {} nodes", l2.size())));
    }
    if n > MAX_BRUTE_FORCE_N {
        return Err(Error::TooLarge(n));
    }
    let mut cur: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += (l1[(i, j)] - l2[(cur[i], cur[j])]).powi(2);
            }
        }
        let mut d = s.sqrt();
        if let (Some(a), Some(b)) = (x1, x2) {
            let mut f = 0.0;
            for i in 0..n {
                for (p, q) in a.row(i).iter().zip(b.row(cur[i])) {
                    f += (p - q).powi(2);
                }
            }
            d += f.sqrt();
        }
        if best.as_ref().is_none_or(|(_, bd)| d < bd - 1e-12) {
            best = Some((cur.clone(), d));
        }
        if !next_permutation(&mut cur) {
            break;
        }
    }
    let (m, d) = best.expect("at least one permutation");
    Ok((Permutation::new(m)?, d))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleCounts {
    pub k: usize,
    pub total: usize,
    pub per_node: Vec<usize>,
}

/// Simple cycles of length `k ∈ {3, 4, 5}`, each counted once regardless of
/// starting point or direction.
pub fn count_cycles(g: &Graph, k: usize) -> Result<CycleCounts> {
    if !(3..=5).contains(&k) {
        return Err(Error::InvalidArgument(format!("cycle length {k} not in 3..=5")));
    }
    if g.n() > 200 {
        return Err(Error::TooLarge(g.n()));
    }
    let adj: Vec<BTreeSet<usize>> = g
        .neighbors()
        .into_iter()
        .enumerate()
        .map(|(u, ns)| ns.into_iter().filter(|&v| v != u).collect())
        .collect();
    let mut total = 0;
    let mut per_node = vec![0; g.n()];
    let mut path = Vec::with_capacity(k);
    for start in 0..g.n() {
        path.clear();
        path.push(start);
        extend(&adj, start, k, &mut path, &mut total, &mut per_node);
    }
    Ok(CycleCounts { k, total, per_node })
}

// Cycles are rooted at their smallest vertex; of the two directions only the
// one whose second vertex is smaller than its last is kept.
fn extend(
    adj: &[BTreeSet<usize>],
    start: usize,
    k: usize,
    path: &mut Vec<usize>,
    total: &mut usize,
    per_node: &mut [usize],
) {
    let last = *path.last().expect("nonempty");
    if path.len() == k {
        if adj[last].contains(&start) && path[1] < path[k - 1] {
            *total += 1;
            for &v in path.iter() {
                per_node[v] += 1;
            }
        }
        return;
    }
    for &v in adj[last].range(start + 1..) {
        if !path.contains(&v) {
            path.push(v);
            extend(adj, start, k, path, total, per_node);
            path.pop();
        }
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
    }
    let mut xp = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        let g = (fp - fm) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Mann–Whitney estimate of ROC AUC with tie-averaged ranks.
pub fn auc(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.is_empty() || scores_neg.is_empty() {
        return Err(Error::Empty("AUC needs positive and negative scores".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_pos
        .iter()
        .map(|&s| (s, true))
        .chain(scores_neg.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite("AUC score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * all[i..=j].iter().filter(|(_, p)| *p).count() as f64;
        i = j + 1;
    }
    let np = scores_pos.len() as f64;
    let nn = scores_neg.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{complete_graph, cycle_graph, normalized_laplacian, path_graph};

    #[test]
    fn permutations_are_lexicographic() {
        let ps = all_permutations(3);
        let maps: Vec<Vec<usize>> = ps.iter().map(|p| p.mapping().to_vec()).collect();
        assert_eq!(
            maps,
            vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]]
        );
    }

    #[test]
    fn identity_among_minimizers() {
        let l = normalized_laplacian(&path_graph(4)).unwrap();
        let (p, d) = brute_force_matching(&l, &l, None, None).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(p, Permutation::identity(4));
    }

    #[test]
    fn path_vs_triangle_by_hand() {
        let l1 = normalized_laplacian(&path_graph(3)).unwrap();
        let l2 = normalized_laplacian(&complete_graph(3)).unwrap();
        let (_, d) = brute_force_matching(&l1, &l2, None, None).unwrap();
        // K3 is invariant under every relabeling, so all six candidates agree.
        let s = -1.0 / 2f64.sqrt() + 0.5;
        let want = (4.0 * s * s + 0.5f64).sqrt();
        assert!((d - want).abs() < 1e-14);
    }

    #[test]
    fn too_large_rejected() {
        let l = SymMatrix::identity(10);
        assert_eq!(brute_force_matching(&l, &l, None, None).unwrap_err(), Error::TooLarge(10));
    }

    #[test]
    fn cycle_counts_small_graphs() {
        let k4 = complete_graph(4);
        assert_eq!(count_cycles(&k4, 3).unwrap().total, 4);
        assert_eq!(count_cycles(&k4, 4).unwrap().total, 3);
        let c5 = cycle_graph(5);
        assert_eq!(count_cycles(&c5, 5).unwrap().total, 1);
        assert_eq!(count_cycles(&c5, 3).unwrap().total, 0);
        assert_eq!(count_cycles(&k4, 3).unwrap().per_node, vec![3; 4]);
        // K5 has 12 five-cycles: 4!/2.
        assert_eq!(count_cycles(&complete_graph(5), 5).unwrap().total, 12);
    }

    #[test]
    fn finite_diff_quadratic_and_linear() {
        let x = [0.3, -1.2, 2.0];
        let g = finite_diff(|v| v.iter().map(|a| a * a).sum::<f64>() / 2.0, &x, 1e-5).unwrap();
        for (a, b) in g.iter().zip(x) {
            assert!((a - b).abs() < 1e-8);
        }
        let g = finite_diff(|v| 3.0 * v[0] - 2.0 * v[1], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(g, vec![3.0, -2.0]);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0; 4], &[1.0; 3]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4], &[0.5]).unwrap(), 0.5);
        assert!(auc(&[], &[1.0]).is_err());
    }
}
