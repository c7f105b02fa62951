//! Positional encodings: Laplacian eigenmaps and the matrix-factorization
//! family (LINE, DeepWalk objective forms).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DegreeInfo, Graph, SymMatrix};
use crate::linalg::{gram_schmidt, Mat};
use crate::spectral::{serialize_f64_inf, sym_eig, EigenDecomposition};

/// Eigenvalues at or below this are treated as zero by `SkipZero`.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMethod {
    Le,
    Line,
    DeepWalk,
}

impl std::str::FromStr for PeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "le" => Ok(PeMethod::Le),
            "line" => Ok(PeMethod::Line),
            "deepwalk" => Ok(PeMethod::DeepWalk),
            other => Err(Error::InvalidArgument(format!("unknown PE method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeConvention {
    #[default]
    IncludeZero,
    SkipZero,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionalEncoding {
    #[serde(skip)]
    pub z: Mat,
    pub method: PeMethod,
    pub n: usize,
    pub p: usize,
    pub convention: Option<LeConvention>,
    /// Eigenvalues of the selected columns (LE only).
    pub spectrum: Option<Vec<f64>>,
    /// `λ_{p+1} − λ_p` at the cut, `inf` when the cut is at the end (LE only).
    #[serde(serialize_with = "serialize_opt_inf")]
    pub eigengap: Option<f64>,
    /// Factor applied by the row-norm guard, 1 when untouched.
    pub scale: f64,
    pub achieved_rank: Option<usize>,
    pub rank_deficient: bool,
    pub optimized: bool,
}

fn serialize_opt_inf<S: serde::Serializer>(
    x: &Option<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => serialize_f64_inf(v, s),
        None => s.serialize_none(),
    }
}

impl PositionalEncoding {
    pub fn to_csv(&self) -> String {
        mat_to_csv(&self.z)
    }

    pub fn metadata_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializable");
        v["schema"] = serde_json::json!(1);
        v
    }
}

pub fn mat_to_csv(m: &Mat) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Eigenvectors of the `p` smallest (or smallest positive) eigenvalues.
pub fn laplacian_eigenmap(l: &SymMatrix, p: usize, convention: LeConvention) -> Result<PositionalEncoding> {
    let eig = sym_eig(l)?;
    laplacian_eigenmap_from(&eig, p, convention)
}

pub fn laplacian_eigenmap_from(
    eig: &EigenDecomposition,
    p: usize,
    convention: LeConvention,
) -> Result<PositionalEncoding> {
    let n = eig.n();
    let start = match convention {
        LeConvention::IncludeZero => 0,
        LeConvention::SkipZero => eig.values.iter().take_while(|&&v| v <= ZERO_EIGENVALUE_TOL).count(),
    };
    let available = n - start;
    if p > available || p == 0 {
        return Err(Error::RankDeficient { requested: p, available });
    }
    let end = start + p;
    let eigengap = if end < n { eig.values[end] - eig.values[end - 1] } else { f64::INFINITY };
    Ok(PositionalEncoding {
        z: eig.vectors.columns_range(start, end),
        method: PeMethod::Le,
        n,
        p,
        convention: Some(convention),
        spectrum: Some(eig.values[start..end].to_vec()),
        eigengap: Some(eigengap),
        scale: 1.0,
        achieved_rank: Some(p),
        rank_deficient: false,
        optimized: true,
    })
}

/// Rescales both encodings by a common `s = min(1, 1/max_u ‖Z_u‖)` so every
/// row has norm at most 1. Returns the factor.
pub fn row_norm_guard(z1: &mut Mat, z2: &mut Mat) -> f64 {
    let worst = z1.row_norms().into_iter().chain(z2.row_norms()).fold(0.0, f64::max);
    let s = if worst > 1.0 { 1.0 / worst } else { 1.0 };
    if s != 1.0 {
        *z1 = z1.scale(s);
        *z2 = z2.scale(s);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Line,
    DeepWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeObjectiveFamily {
    pub kind: FamilyKind,
    pub c: f64,
    /// Walk length, DeepWalk only.
    pub t: usize,
}

impl PeObjectiveFamily {
    pub fn line() -> Self {
        PeObjectiveFamily { kind: FamilyKind::Line, c: 1.0, t: 1 }
    }

    pub fn deepwalk(t: usize) -> Self {
        PeObjectiveFamily { kind: FamilyKind::DeepWalk, c: 1.0, t }
    }

    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || self.t == 0 {
            return Err(Error::InvalidArgument(format!(
                "objective family needs c > 0 and T >= 1, got c = {}, T = {}",
                self.c, self.t
            )));
        }
        Ok(())
    }
}

fn check_positive_degrees(d: &DegreeInfo) -> Result<()> {
    match d.degrees.iter().position(|&x| x == 0) {
        Some(v) => Err(Error::IsolatedNode(v)),
        None => Ok(()),
    }
}

/// LINE: `A`. DeepWalk: `Σ_{k=1..T} (DΦᵏ + (Φᵀ)ᵏD)` with `Φ = D⁻¹A`.
pub fn f_plus(a: &SymMatrix, d: &DegreeInfo, family: &PeObjectiveFamily) -> Result<Mat> {
    family.validate()?;
    check_positive_degrees(d)?;
    match family.kind {
        FamilyKind::Line => Ok(a.as_mat().clone()),
        FamilyKind::DeepWalk => {
            let n = a.size();
            let deg: Vec<f64> = d.degrees.iter().map(|&x| x as f64).collect();
            let mut phi = a.as_mat().clone();
            for i in 0..n {
                phi.row_mut(i).iter_mut().for_each(|x| *x /= deg[i]);
            }
            let mut power = phi.clone();
            let mut out = Mat::zeros(n, n);
            for k in 1..=family.t {
                if k > 1 {
                    power = power.matmul(&phi);
                }
                let mut d_phi = power.clone();
                for i in 0..n {
                    d_phi.row_mut(i).iter_mut().for_each(|x| *x *= deg[i]);
                }
                out = out.add(&d_phi).add(&d_phi.transpose());
            }
            Ok(out)
        }
    }
}

/// LINE: `c·𝟙𝟙ᵀD^{3/4}`. DeepWalk: `c·D𝟙𝟙ᵀD`.
pub fn f_minus(d: &DegreeInfo, family: &PeObjectiveFamily) -> Result<Mat> {
    family.validate()?;
    check_positive_degrees(d)?;
    let n = d.degrees.len();
    let deg: Vec<f64> = d.degrees.iter().map(|&x| x as f64).collect();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = match family.kind {
                FamilyKind::Line => family.c * deg[j].powf(0.75),
                FamilyKind::DeepWalk => family.c * deg[i] * deg[j],
            };
        }
    }
    Ok(out)
}

/// `log σ(x) = x − log(1 + eˣ)`, branch-stable for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x <= 0.0 {
        x - x.exp().ln_1p()
    } else {
        -(-x).exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn objective_with(fp: &Mat, fm: &Mat, m: &Mat) -> f64 {
    // tr(F g(M)) = Σ_ij F[j][i] g(M[i][j])
    let n = m.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = m[(i, j)];
            total += fp[(j, i)] * log_sigmoid(x) + fm[(j, i)] * log_sigmoid(-x);
        }
    }
    total
}

/// `tr(f₊(A) g(M) + f₋(D) g(−M))` with `g` the elementwise log-sigmoid.
pub fn pe_objective(a: &SymMatrix, d: &DegreeInfo, family: &PeObjectiveFamily, m: &Mat) -> Result<f64> {
    if m.shape() != (a.size(), a.size()) {
        return Err(Error::ShapeMismatch(format!(
            "M is {}x{} for a graph of {} nodes",
            m.rows(),
            m.cols(),
            a.size()
        )));
    }
    let fp = f_plus(a, d, family)?;
    let fm = f_minus(d, family)?;
    Ok(objective_with(&fp, &fm, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub z_prime: Mat,
    /// Orthonormal columns.
    pub z: Mat,
    pub history: Vec<f64>,
    pub achieved_rank: usize,
    pub rank_deficient: bool,
    pub optimized: bool,
}

impl Factorization {
    pub fn into_encoding(self, method: PeMethod) -> PositionalEncoding {
        let (n, p) = self.z.shape();
        PositionalEncoding {
            z: self.z,
            method,
            n,
            p,
            convention: None,
            spectrum: None,
            eigengap: None,
            scale: 1.0,
            achieved_rank: Some(self.achieved_rank),
            rank_deficient: self.rank_deficient,
            optimized: self.optimized,
        }
    }
}

/// Seeded Gaussian initialization `(Z′, Z)` scaled by `1/√n`.
pub fn factorization_init(n: usize, p: usize, seed: u64) -> (Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (n.max(1) as f64).sqrt();
    let zp = Mat::random_gaussian(n, p, &mut rng).scale(s);
    let z = Mat::random_gaussian(n, p, &mut rng).scale(s);
    (zp, z)
}

/// Gradient ascent on the unified objective over `M = Z′Zᵀ`.
pub fn factorize_lowrank(
    a: &SymMatrix,
    d: &DegreeInfo,
    family: &PeObjectiveFamily,
    p: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Factorization> {
    let n = a.size();
    if p > n || p == 0 {
        return Err(Error::RankDeficient { requested: p, available: n });
    }
    let (zp, z) = factorization_init(n, p, seed);
    factorize_from_init(a, d, family, zp, z, steps, lr)
}

/// Same as [`factorize_lowrank`] from an explicit starting point.
pub fn factorize_from_init(
    a: &SymMatrix,
    d: &DegreeInfo,
    family: &PeObjectiveFamily,
    mut zp: Mat,
    mut z: Mat,
    steps: usize,
    lr: f64,
) -> Result<Factorization> {
    let n = a.size();
    if zp.shape() != z.shape() || zp.rows() != n {
        return Err(Error::ShapeMismatch("factor shapes disagree with the graph".into()));
    }
    let fp = f_plus(a, d, family)?;
    let fm = f_minus(d, family)?;
    let mut current = objective_with(&fp, &fm, &zp.matmul(&z.transpose()));
    if !current.is_finite() {
        return Err(Error::NonFinite("initial objective".into()));
    }
    let mut history = vec![current];
    let mut step = lr;
    for _ in 0..steps {
        let m = zp.matmul(&z.transpose());
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let x = m[(i, j)];
                g[(i, j)] = fp[(j, i)] * sigmoid(-x) - fm[(j, i)] * sigmoid(x);
            }
        }
        let d_zp = g.matmul(&z);
        let d_z = g.t_matmul(&zp);
        let mut accepted = false;
        for _ in 0..40 {
            let mut zp_new = zp.clone();
            zp_new.add_assign_scaled(&d_zp, step);
            let mut z_new = z.clone();
            z_new.add_assign_scaled(&d_z, step);
            let value = objective_with(&fp, &fm, &zp_new.matmul(&z_new.transpose()));
            if value.is_finite() && value >= current {
                zp = zp_new;
                z = z_new;
                current = value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !current.is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        history.push(current);
        if !accepted {
            break;
        }
        step *= 1.25;
    }

    let (q, r) = gram_schmidt(&z);
    let zp = zp.matmul(&r.transpose());
    let gram = SymMatrix::from_mat(&zp.t_matmul(&zp))?;
    let sv = sym_eig(&gram)?.values;
    let achieved_rank = sv.iter().filter(|&&v| v.max(0.0).sqrt() > 1e-8).count();
    let p = z.cols();
    Ok(Factorization {
        z_prime: zp,
        z: q,
        history,
        achieved_rank,
        rank_deficient: achieved_rank < p,
        optimized: steps > 0,
    })
}

/// Laplacian eigenmap of a graph.
pub fn encode_le(g: &Graph, p: usize, convention: LeConvention) -> Result<PositionalEncoding> {
    laplacian_eigenmap(&crate::graph::normalized_laplacian(g)?, p, convention)
}

/// How a positional encoding is produced for a graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeConfig {
    pub method: PeMethod,
    pub p: usize,
    pub convention: LeConvention,
    /// Ascent steps for the factorization methods.
    pub steps: usize,
    pub lr: f64,
    /// Walk length for DeepWalk.
    pub walk_length: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            method: PeMethod::Le,
            p: 8,
            convention: LeConvention::IncludeZero,
            steps: 200,
            lr: 0.05,
            walk_length: 3,
        }
    }
}

pub fn encode(g: &Graph, cfg: &PeConfig, seed: u64) -> Result<PositionalEncoding> {
    match cfg.method {
        PeMethod::Le => encode_le(g, cfg.p, cfg.convention),
        PeMethod::Line | PeMethod::DeepWalk => {
            let family = if cfg.method == PeMethod::Line {
                PeObjectiveFamily::line()
            } else {
                PeObjectiveFamily::deepwalk(cfg.walk_length)
            };
            let f = factorize_lowrank(&g.adjacency(), &g.degrees(), &family, cfg.p, cfg.steps, cfg.lr, seed)?;
            Ok(f.into_encoding(cfg.method))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{complete_graph, normalized_laplacian, path_graph, random_connected_graph};
    use crate::spectral::Permutation;

    #[test]
    fn le_on_k2() {
        let pe = encode_le(&complete_graph(2), 1, LeConvention::IncludeZero).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((pe.z[(0, 0)].abs() - h).abs() < 1e-12);
        assert_eq!(pe.z[(0, 0)], pe.z[(1, 0)]);
    }

    #[test]
    fn le_on_p3() {
        let pe = encode_le(&path_graph(3), 2, LeConvention::IncludeZero).unwrap();
        let spec = pe.spectrum.unwrap();
        assert!(spec[0].abs() < 1e-12 && (spec[1] - 1.0).abs() < 1e-12);
        assert!((pe.eigengap.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skip_zero_starts_positive() {
        let g = random_connected_graph(12, 0.3, 3).unwrap();
        let pe = encode_le(&g, 3, LeConvention::SkipZero).unwrap();
        assert!(pe.spectrum.unwrap()[0] > 1e-9);
        assert!(matches!(
            encode_le(&g, 12, LeConvention::SkipZero),
            Err(Error::RankDeficient { requested: 12, available: 11 })
        ));
    }

    #[test]
    fn le_column_residuals() {
        let g = random_connected_graph(15, 0.2, 6).unwrap();
        let l = normalized_laplacian(&g).unwrap();
        let pe = laplacian_eigenmap(&l, 5, LeConvention::IncludeZero).unwrap();
        assert!(pe.z.orthonormality_defect() < 1e-8);
        let spec = pe.spectrum.unwrap();
        for j in 0..5 {
            let z = pe.z.column(j);
            let lz = l.matvec(&z);
            let r: f64 = lz.iter().zip(&z).map(|(a, b)| (a - spec[j] * b).powi(2)).sum();
            assert!(r.sqrt() < 1e-7);
        }
    }

    #[test]
    fn f_plus_forms() {
        let k3 = complete_graph(3);
        let a = k3.adjacency();
        assert_eq!(&f_plus(&a, &k3.degrees(), &PeObjectiveFamily::line()).unwrap(), a.as_mat());
        let k2 = complete_graph(2);
        let fp = f_plus(&k2.adjacency(), &k2.degrees(), &PeObjectiveFamily::deepwalk(1)).unwrap();
        assert_eq!(fp, k2.adjacency().scale(2.0).into_mat());
    }

    #[test]
    fn deepwalk_f_plus_symmetric() {
        let g = random_connected_graph(10, 0.3, 1).unwrap();
        let fp = f_plus(&g.adjacency(), &g.degrees(), &PeObjectiveFamily::deepwalk(4)).unwrap();
        assert!(fp.sub(&fp.transpose()).max_abs() < 1e-10);
    }

    #[test]
    fn f_minus_forms() {
        let ones = DegreeInfo { degrees: vec![1; 3], d_max: 1 };
        assert_eq!(f_minus(&ones, &PeObjectiveFamily::line()).unwrap(), Mat::filled(3, 3, 1.0));
        let d = DegreeInfo { degrees: vec![1, 2], d_max: 2 };
        let fm = f_minus(&d, &PeObjectiveFamily::deepwalk(1)).unwrap();
        assert_eq!(fm, Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]));
    }

    #[test]
    fn f_forms_are_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_connected_graph(9, 0.3, 8).unwrap();
        let perm = Permutation::random(9, &mut rng);
        let h = g.permuted(&perm);
        // A(g) = P A(h) Pᵀ, so f(g) must equal P f(h) Pᵀ.
        for fam in [PeObjectiveFamily::line(), PeObjectiveFamily::deepwalk(3)] {
            let f_g = f_plus(&g.adjacency(), &g.degrees(), &fam).unwrap();
            let f_h = SymMatrix::from_mat(&f_plus(&h.adjacency(), &h.degrees(), &fam).unwrap()).unwrap();
            assert!(f_g.sub(&f_h.permute(&perm)).max_abs() < 1e-10);
            let m_g = f_minus(&g.degrees(), &fam).unwrap();
            let m_h = f_minus(&h.degrees(), &fam).unwrap();
            let pm = perm.to_mat();
            assert!(m_g.sub(&pm.matmul(&m_h).matmul(&pm.transpose())).max_abs() < 1e-10);
        }
    }

    #[test]
    fn log_sigmoid_values() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(20.0) + 2.061_153_6e-9).abs() < 1e-15);
        assert!((log_sigmoid(-20.0) + 20.0).abs() < 1e-8);
        assert!(log_sigmoid(-800.0).is_finite() && log_sigmoid(800.0) == 0.0);
    }

    #[test]
    fn objective_at_zero() {
        let g = path_graph(4);
        let fam = PeObjectiveFamily::line();
        let a = g.adjacency();
        let d = g.degrees();
        let j = pe_objective(&a, &d, &fam, &Mat::zeros(4, 4)).unwrap();
        let fp = f_plus(&a, &d, &fam).unwrap();
        let fm = f_minus(&d, &fam).unwrap();
        let want = (fp.as_slice().iter().sum::<f64>() + fm.as_slice().iter().sum::<f64>()) * log_sigmoid(0.0);
        assert!((j - want).abs() < 1e-12);
    }

    #[test]
    fn ascent_history_and_orthonormality() {
        let g = random_connected_graph(20, 0.2, 2).unwrap();
        for fam in [PeObjectiveFamily::line(), PeObjectiveFamily::deepwalk(2)] {
            let f = factorize_lowrank(&g.adjacency(), &g.degrees(), &fam, 4, 50, 0.05, 3).unwrap();
            assert!(f.history.windows(2).all(|w| w[1] >= w[0]));
            assert!(f.history.last().unwrap() > &f.history[0]);
            assert!(f.z.orthonormality_defect() < 1e-8);
            assert!(f.optimized);
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let g = path_graph(5);
        let f = factorize_lowrank(&g.adjacency(), &g.degrees(), &PeObjectiveFamily::line(), 2, 0, 0.1, 1)
            .unwrap();
        assert!(!f.optimized);
        assert_eq!(f.history.len(), 1);
    }
}
