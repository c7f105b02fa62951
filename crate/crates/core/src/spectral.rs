//! Symmetric eigendecomposition, matrix norms, Procrustes and sign matching,
//! and eigengap reporting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::SymMatrix;
use crate::linalg::{dot, gram_schmidt, norm, Mat};

pub const JACOBI_MAX_SWEEPS: usize = 100;
const POWER_SEED: u64 = 0x5eed_0f_9e;

/// Ascending eigenvalues with matching orthonormal eigenvector columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl EigenDecomposition {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> Mat {
        let mut scaled = self.vectors.clone();
        for i in 0..scaled.rows() {
            for (j, v) in scaled.row_mut(i).iter_mut().enumerate() {
                *v *= self.values[j];
            }
        }
        scaled.matmul(&self.vectors.transpose())
    }

    /// `max |BV − V diag(λ)|`.
    pub fn residual(&self, b: &Mat) -> f64 {
        let bv = b.matmul(&self.vectors);
        let mut worst = 0.0f64;
        for i in 0..bv.rows() {
            for j in 0..bv.cols() {
                worst = worst.max((bv[(i, j)] - self.vectors[(i, j)] * self.values[j]).abs());
            }
        }
        worst
    }
}

/// A bijection on `[0, n)`. As a matrix, `P[i][m(i)] = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut sorted = mapping.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &v)| i != v) {
            return Err(Error::InvalidArgument("mapping is not a bijection on [0, n)".into()));
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation { mapping: (0..n).collect() }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Permutation { mapping }
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    /// `P X`: row `i` of the result is row `m(i)` of `x`.
    pub fn apply_rows(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows(), x.cols());
        for (i, &m) in self.mapping.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(m));
        }
        out
    }

    pub fn to_mat(&self) -> Mat {
        let mut p = Mat::zeros(self.len(), self.len());
        for (i, &m) in self.mapping.iter().enumerate() {
            p[(i, m)] = 1.0;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalMatrix(Mat);

impl OrthogonalMatrix {
    pub fn new(q: Mat) -> Result<Self> {
        if q.rows() != q.cols() {
            return Err(Error::ShapeMismatch(format!("{}x{} is not square", q.rows(), q.cols())));
        }
        let defect = q.orthonormality_defect();
        if defect > 1e-9 {
            return Err(Error::NonOrthonormal(defect));
        }
        Ok(OrthogonalMatrix(q))
    }

    pub fn identity(p: usize) -> Self {
        OrthogonalMatrix(Mat::identity(p))
    }

    /// Haar-ish random orthogonal matrix from an orthonormalized Gaussian.
    pub fn random<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Self {
        let (q, _) = gram_schmidt(&Mat::random_gaussian(p, p, rng));
        OrthogonalMatrix(q)
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }
}

/// Diagonal `±1` matrix stored as its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignMatrix {
    pub signs: Vec<f64>,
}

impl SignMatrix {
    pub fn to_mat(&self) -> Mat {
        Mat::diag(&self.signs)
    }
}

/// Cyclic Jacobi eigensolver. Sweeps visit `(p, q)` pairs in row order and
/// stop once every off-diagonal entry is below `1e-12·‖B‖_F`.
pub fn sym_eig(b: &SymMatrix) -> Result<EigenDecomposition> {
    sym_eig_with(b, JACOBI_MAX_SWEEPS)
}

pub fn sym_eig_with(b: &SymMatrix, max_sweeps: usize) -> Result<EigenDecomposition> {
    let n = b.size();
    let mut a = b.as_slice().to_vec();
    let mut v = Mat::identity(n).into_vec();
    let thresh = 1e-12 * b.frobenius();

    let mut converged = false;
    for _sweep in 0..=max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off < thresh || off == 0.0 {
            converged = true;
            break;
        }
        if _sweep == max_sweeps {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence("jacobi", max_sweeps));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("eigenvalues".into()));
    }

    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps original column order among exact ties.
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));
    let v = Mat::from_vec(n, n, v).expect("square");
    Ok(EigenDecomposition {
        values: order.iter().map(|&i| diag[i]).collect(),
        vectors: v.select_columns(&order),
    })
}

fn check_same_shape(z1: &Mat, z2: &Mat) -> Result<()> {
    if z1.shape() != z2.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            z1.rows(),
            z1.cols(),
            z2.rows(),
            z2.cols()
        )));
    }
    Ok(())
}

/// Polar factor `U Vᵀ` of a square matrix `m = U Σ Vᵀ`.
///
/// `V` and `Σ²` come from the eigendecomposition of `mᵀm`; `U` is recovered
/// as `m v_i / σ_i`. Directions with vanishing `σ` reuse `v_i`, so a zero
/// matrix maps to the identity.
pub fn polar_factor(m: &Mat) -> Result<Mat> {
    let p = m.cols();
    let gram = SymMatrix::from_mat(&m.t_matmul(m))?;
    let eig = sym_eig(&gram)?;
    // Descending singular values.
    let idx: Vec<usize> = (0..p).rev().collect();
    let v = eig.vectors.select_columns(&idx);
    let sigma: Vec<f64> = idx.iter().map(|&i| eig.values[i].max(0.0).sqrt()).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let mut u = Mat::zeros(m.rows(), p);
    for k in 0..p {
        let vk = v.column(k);
        if smax > 0.0 && sigma[k] > 1e-10 * smax {
            let mut uk = m.matvec(&vk);
            uk.iter_mut().for_each(|x| *x /= sigma[k]);
            u.set_column(k, &uk);
        } else {
            u.set_column(k, &vk);
        }
    }
    let (u, _) = gram_schmidt(&u);
    Ok(u.matmul(&v.transpose()))
}

/// `min_{Q ∈ O(p)} ‖Z1 − Z2 Q‖_F` and its minimizer.
pub fn eta_distance(z1: &Mat, z2: &Mat) -> Result<(f64, OrthogonalMatrix)> {
    check_same_shape(z1, z2)?;
    let q = polar_factor(&z2.t_matmul(z1))?;
    let dist = z1.sub(&z2.matmul(&q)).frobenius();
    Ok((dist, OrthogonalMatrix(q)))
}

/// `min_{S ∈ SN(p)} ‖Z1 − Z2 S‖_F`, solved column by column.
pub fn sign_match_distance(z1: &Mat, z2: &Mat) -> Result<(f64, SignMatrix)> {
    check_same_shape(z1, z2)?;
    let mut total = 0.0;
    let mut signs = Vec::with_capacity(z1.cols());
    for j in 0..z1.cols() {
        let a = z1.column(j);
        let b = z2.column(j);
        let s = if dot(&a, &b) >= 0.0 { 1.0 } else { -1.0 };
        total += a.iter().zip(&b).map(|(x, y)| (x - s * y).powi(2)).sum::<f64>();
        signs.push(s);
    }
    Ok((total.sqrt(), SignMatrix { signs }))
}

/// Largest singular value by power iteration on `BᵀB` from a fixed-seed start.
pub fn operator_norm(b: &Mat) -> Result<f64> {
    const MAX_ITERS: usize = 10_000;
    if b.max_abs() == 0.0 || b.rows() == 0 || b.cols() == 0 {
        return Ok(0.0);
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("operator_norm input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = Mat::random_gaussian(b.cols(), 1, &mut rng).into_vec();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut prev = 0.0;
    for _ in 0..MAX_ITERS {
        let bv = b.matvec(&v);
        let mu = dot(&bv, &bv);
        let w = b.t_matvec(&bv);
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if (mu - prev).abs() <= 1e-9 * mu {
            // One more Rayleigh quotient on the refined vector.
            let bv = b.matvec(&v);
            return Ok(dot(&bv, &bv).max(mu).sqrt());
        }
        prev = mu;
    }
    Err(Error::NoConvergence("power iteration", MAX_ITERS))
}

/// Runs of consecutive values closer than `tol`, as `(start, len)`.
pub fn eigen_blocks(values: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        if i == values.len() || values[i] - values[i - 1] >= tol {
            blocks.push((start, i - start));
            start = i;
        }
    }
    blocks
}

/// A random element of `O(λ) = ⊕ O(d_i)`: block diagonal, one orthogonal
/// block per run of (numerically) equal eigenvalues.
pub fn block_orthogonal_sample(values: &[f64], tol: f64, seed: u64) -> OrthogonalMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut q = Mat::zeros(n, n);
    for (start, len) in eigen_blocks(values, tol) {
        if len == 1 {
            q[(start, start)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
            continue;
        }
        let block = OrthogonalMatrix::random(len, &mut rng);
        for i in 0..len {
            for j in 0..len {
                q[(start + i, start + j)] = block.as_mat()[(i, j)];
            }
        }
    }
    OrthogonalMatrix(q)
}

pub(crate) fn serialize_f64_inf<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_infinite() && *x > 0.0 {
        s.serialize_str("inf")
    } else if x.is_infinite() {
        s.serialize_str("-inf")
    } else {
        s.serialize_f64(*x)
    }
}

/// Eigengap at the cut `p` and the stability ratio `ρ_p = gap_p / min_gap`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub p: usize,
    pub eigenvalues: Vec<f64>,
    pub gap_p: f64,
    pub min_gap: f64,
    #[serde(serialize_with = "serialize_f64_inf")]
    pub rho: f64,
    pub rho_infinite: bool,
}

pub fn eigengap_report(values: &[f64], p: usize) -> Result<GapReport> {
    if p == 0 || p >= values.len() {
        return Err(Error::InvalidArgument(format!(
            "p = {p} must satisfy 1 <= p < n = {}",
            values.len()
        )));
    }
    let gap_p = values[p] - values[p - 1];
    let min_gap = (0..p).map(|k| values[k + 1] - values[k]).fold(f64::INFINITY, f64::min);
    let rho = if min_gap <= 1e-12 { f64::INFINITY } else { gap_p / min_gap };
    Ok(GapReport {
        p,
        eigenvalues: values.to_vec(),
        gap_p,
        min_gap,
        rho,
        rho_infinite: rho.is_infinite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{complete_graph, disjoint_union, normalized_laplacian, path_graph};

    fn random_sym(n: usize, seed: u64) -> SymMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SymMatrix::from_mat(&Mat::random_gaussian(n, n, &mut rng)).unwrap()
    }

    #[test]
    fn diagonal_input() {
        let e = sym_eig(&SymMatrix::diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
        let want = Mat::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(e.vectors, want);
    }

    #[test]
    fn complete_graph_spectrum() {
        let e = sym_eig(&normalized_laplacian(&complete_graph(3)).unwrap()).unwrap();
        for (got, want) in e.values.iter().zip([0.0, 1.5, 1.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn path_zero_eigenvector() {
        let e = sym_eig(&normalized_laplacian(&path_graph(3)).unwrap()).unwrap();
        let z = e.vectors.column(0);
        let want = [1.0 / 2.0, 2f64.sqrt() / 2.0, 1.0 / 2.0];
        let s = dot(&z, &want).signum();
        for (a, b) in z.iter().zip(want) {
            assert!((s * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_and_orthonormality() {
        for seed in 0..10 {
            let b = random_sym(12, seed);
            let e = sym_eig(&b).unwrap();
            assert!(e.vectors.orthonormality_defect() < 1e-9);
            assert!(e.residual(&b) < 1e-8 * b.frobenius());
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn zero_and_empty_matrices() {
        let e = sym_eig(&SymMatrix::zeros(3)).unwrap();
        assert_eq!(e.values, vec![0.0; 3]);
        assert_eq!(sym_eig(&SymMatrix::zeros(0)).unwrap().n(), 0);
    }

    #[test]
    fn eta_identity_and_orbit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Mat::random_gaussian(8, 3, &mut rng);
        let (d, q) = eta_distance(&z, &z).unwrap();
        assert!(d < 1e-12);
        assert!(q.as_mat().sub(&Mat::identity(3)).max_abs() < 1e-10);
        let q0 = OrthogonalMatrix::random(3, &mut rng);
        let (d, _) = eta_distance(&z, &z.matmul(q0.as_mat())).unwrap();
        assert!(d <= 1e-8);
    }

    #[test]
    fn eta_one_dimensional_tie() {
        let z1 = Mat::column_vector(&[1.0, 0.0]);
        let z2 = Mat::column_vector(&[0.0, 1.0]);
        let (d, q) = eta_distance(&z1, &z2).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(q.as_mat()[(0, 0)], 1.0);
    }

    #[test]
    fn sign_match_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Mat::random_gaussian(6, 3, &mut rng);
        let (d, s) = sign_match_distance(&z, &z.scale(-1.0)).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(s.signs, vec![-1.0; 3]);
        let mut z2 = z.clone();
        let col: Vec<f64> = z.column(1).iter().map(|x| -x).collect();
        z2.set_column(1, &col);
        assert_eq!(sign_match_distance(&z, &z2).unwrap().0, 0.0);
    }

    #[test]
    fn sign_match_agrees_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in 1..=6 {
            let z1 = Mat::random_gaussian(7, p, &mut rng);
            let z2 = Mat::random_gaussian(7, p, &mut rng);
            let (d, _) = sign_match_distance(&z1, &z2).unwrap();
            let mut best = f64::INFINITY;
            for mask in 0..(1u32 << p) {
                let signs: Vec<f64> =
                    (0..p).map(|j| if mask >> j & 1 == 1 { -1.0 } else { 1.0 }).collect();
                best = best.min(z1.sub(&z2.matmul(&Mat::diag(&signs))).frobenius());
            }
            assert!((d - best).abs() < 1e-12);
        }
    }

    #[test]
    fn operator_norm_cases() {
        assert!((operator_norm(&Mat::diag(&[2.0, -3.0])).unwrap() - 3.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Permutation::random(6, &mut rng).to_mat();
        assert!((operator_norm(&p).unwrap() - 1.0).abs() < 1e-9);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Mat::random_gaussian(5, 5, &mut rng);
            let gram = SymMatrix::from_mat(&b.t_matmul(&b)).unwrap();
            let want = sym_eig(&gram).unwrap().values[4].sqrt();
            assert!((operator_norm(&b).unwrap() - want).abs() < 1e-7);
        }
    }

    #[test]
    fn block_sample_structure() {
        let q = block_orthogonal_sample(&[0.3, 0.3, 0.7], 1e-6, 1);
        assert_eq!(eigen_blocks(&[0.3, 0.3, 0.7], 1e-6), vec![(0, 2), (2, 1)]);
        let m = q.as_mat();
        assert_eq!(m[(0, 2)], 0.0);
        assert_eq!(m[(2, 0)], 0.0);
        assert_eq!(m[(2, 2)].abs(), 1.0);
        let d = block_orthogonal_sample(&[0.1, 0.2, 0.3], 1e-6, 2);
        for i in 0..3 {
            for j in 0..3 {
                let x = d.as_mat()[(i, j)];
                if i == j {
                    assert_eq!(x.abs(), 1.0);
                } else {
                    assert_eq!(x, 0.0);
                }
            }
        }
        for seed in 0..100 {
            let q = block_orthogonal_sample(&[0.0, 0.5, 0.5, 0.5, 1.0, 1.0], 1e-9, seed);
            assert!(q.as_mat().orthonormality_defect() < 1e-9);
        }
    }

    #[test]
    fn gap_reports() {
        let g = disjoint_union(&complete_graph(3), &complete_graph(3));
        let e = sym_eig(&normalized_laplacian(&g).unwrap()).unwrap();
        let r = eigengap_report(&e.values, 2).unwrap();
        assert!((r.gap_p - 1.5).abs() < 1e-12);
        assert!(r.rho_infinite && r.rho.is_infinite());
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["rho"], "inf");

        let r = eigengap_report(&[0.0, 1.0, 2.0], 1).unwrap();
        assert_eq!((r.gap_p, r.min_gap, r.rho), (1.0, 1.0, 1.0));

        let r = eigengap_report(&[0.0, 0.1, 0.11, 1.0], 3).unwrap();
        assert!((r.gap_p - 0.89).abs() < 1e-12);
        assert!((r.min_gap - 0.01).abs() < 1e-12);
        assert!((r.rho - 89.0).abs() < 1e-9);
    }
}
