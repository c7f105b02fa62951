//! Numerical verifiers for the perturbation bounds, and the constructions
//! that show where unstable encodings break.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, normalized_laplacian, perturb_edges, random_connected_graph, sbm_generate, Graph, SymMatrix};
use crate::linalg::Mat;
use crate::nn::{certified_opnorm, lipschitz_upper, Activation, Mlp};
use crate::pe::{encode_le, laplacian_eigenmap_from, row_norm_guard, LeConvention};
use crate::peg::{peg_stability_constant, PegArch, PegLayer, PegModel, XiMode};
use crate::spe::{spe_constants, spe_encode, spe_forward, spe_stability_bound, spectral_input, SpeConfig, SpeParams};
use crate::spectral::{
    block_orthogonal_sample, eta_distance, serialize_f64_inf, sign_match_distance, sym_eig, EigenDecomposition,
    OrthogonalMatrix, Permutation,
};

/// Relative slack allowed on every inequality.
pub const REL_SLACK: f64 = 1e-9;
/// Absolute slack allowed on every inequality.
pub const ABS_SLACK: f64 = 1e-12;
/// Gaps at or below this count as equal eigenvalues.
pub const GAP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Holds,
    Violated,
    /// The bound's premises fail (an infinite constant), so nothing is claimed.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub bound_name: String,
    pub lhs: f64,
    #[serde(serialize_with = "serialize_f64_inf")]
    pub rhs: f64,
    #[serde(serialize_with = "serialize_map_inf")]
    pub constants: BTreeMap<String, f64>,
    pub holds: bool,
    pub status: Status,
    pub inputs_digest: String,
}

fn serialize_map_inf<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    struct Inf(f64);
    impl Serialize for Inf {
        fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
            serialize_f64_inf(&self.0, s)
        }
    }
    s.collect_map(m.iter().map(|(k, v)| (k, Inf(*v))))
}

/// `lhs ≤ rhs (1 + 1e-9) + 1e-12`.
pub fn within_bound(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs * (1.0 + REL_SLACK) + ABS_SLACK
}

/// SHA-256 over the bound name and the raw bytes of every input matrix.
pub fn inputs_digest(name: &str, inputs: &[&Mat]) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for m in inputs {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for x in m.as_slice() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl StabilityReport {
    pub fn new(name: &str, lhs: f64, rhs: f64, constants: BTreeMap<String, f64>, inputs: &[&Mat]) -> Self {
        let holds = within_bound(lhs, rhs);
        StabilityReport {
            bound_name: name.to_string(),
            lhs,
            rhs,
            constants,
            holds,
            status: if holds { Status::Holds } else { Status::Violated },
            inputs_digest: inputs_digest(name, inputs),
        }
    }

    fn not_applicable(mut self) -> Self {
        self.status = Status::NotApplicable;
        self
    }

    /// `false` only for a genuine violation.
    pub fn passes(&self) -> bool {
        self.status != Status::Violated
    }
}

fn consts(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

/// `‖S‖_op = max |eig(S)|` for symmetric `S`.
pub fn sym_opnorm(s: &SymMatrix) -> Result<f64> {
    Ok(sym_eig(s)?.values.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Rotates eigenvectors `k` and `k+1` by the angle with sine `eps` and
/// rebuilds `Σ λ_i u'_i u'_iᵀ`. Returns the matrix and the rotated basis.
pub fn rotate_eigenpair(eig: &EigenDecomposition, k: usize, eps: f64) -> Result<(SymMatrix, Mat)> {
    let n = eig.n();
    if k + 1 >= n {
        return Err(Error::InvalidArgument(format!("pair ({k}, {}) out of range for n = {n}", k + 1)));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} must lie in (0, 1)")));
    }
    let c = (1.0 - eps * eps).sqrt();
    let uk = eig.vectors.column(k);
    let uk1 = eig.vectors.column(k + 1);
    let mut u = eig.vectors.clone();
    let new_k: Vec<f64> = uk.iter().zip(&uk1).map(|(a, b)| c * a + eps * b).collect();
    let new_k1: Vec<f64> = uk.iter().zip(&uk1).map(|(a, b)| -eps * a + c * b).collect();
    u.set_column(k, &new_k);
    u.set_column(k + 1, &new_k1);
    let mut ud = u.clone();
    for i in 0..n {
        for (x, l) in ud.row_mut(i).iter_mut().zip(&eig.values) {
            *x *= l;
        }
    }
    Ok((SymMatrix::from_mat(&ud.matmul(&u.transpose()))?, u))
}

#[derive(Debug, Clone)]
pub struct AdversarialPerturbation {
    pub b_pert: SymMatrix,
    /// The rotated pair is `(k, k+1)`, zero-based.
    pub k: usize,
    pub gap: f64,
    pub delta_b_f: f64,
    pub original: EigenDecomposition,
    pub rotated: Mat,
}

/// Rotates the closest pair among the first `p + 1` eigenvectors of `b`.
pub fn adversarial_perturbation(b: &SymMatrix, p: usize, eps: f64) -> Result<AdversarialPerturbation> {
    let n = b.size();
    if p == 0 || p >= n {
        return Err(Error::InvalidArgument(format!("p = {p} must satisfy 1 <= p < n = {n}")));
    }
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} must lie in (0, 0.1)")));
    }
    let eig = sym_eig(b)?;
    let mut k = 0;
    for i in 0..p {
        let gap = eig.values[i + 1] - eig.values[i];
        if gap <= GAP_TOL {
            return Err(Error::MultipleEigenvalues(p + 1));
        }
        if gap < eig.values[k + 1] - eig.values[k] {
            k = i;
        }
    }
    let gap = eig.values[k + 1] - eig.values[k];
    let (b_pert, rotated) = rotate_eigenpair(&eig, k, eps)?;
    let delta_b_f = b_pert.sub(b).frobenius();
    Ok(AdversarialPerturbation { b_pert, k, gap, delta_b_f, original: eig, rotated })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstabilityPoint {
    pub eps: f64,
    pub k: usize,
    pub gap: f64,
    pub delta_b_f: f64,
    pub sign_distance: f64,
    pub eta: f64,
    /// `sign_distance / ‖ΔB‖_F`.
    pub ratio: f64,
    /// `|sign_distance² − 2ε²| / ε²`.
    pub residual_over_eps2: f64,
}

/// Compares the first `p` eigenvectors returned by the eigensolver for `b`
/// and for its adversarial perturbation.
pub fn instability_point(b: &SymMatrix, p: usize, eps: f64) -> Result<InstabilityPoint> {
    let adv = adversarial_perturbation(b, p, eps)?;
    let idx: Vec<usize> = (0..p).collect();
    let z1 = adv.original.vectors.select_columns(&idx);
    let z2 = sym_eig(&adv.b_pert)?.vectors.select_columns(&idx);
    let (sign_distance, _) = sign_match_distance(&z1, &z2)?;
    let (eta, _) = eta_distance(&z1, &z2)?;
    Ok(InstabilityPoint {
        eps,
        k: adv.k,
        gap: adv.gap,
        delta_b_f: adv.delta_b_f,
        sign_distance,
        eta,
        ratio: sign_distance / adv.delta_b_f,
        residual_over_eps2: (sign_distance * sign_distance - 2.0 * eps * eps).abs() / (eps * eps),
    })
}

pub fn instability_curve(b: &SymMatrix, p: usize, eps: &[f64]) -> Result<Vec<InstabilityPoint>> {
    eps.iter().map(|&e| instability_point(b, p, e)).collect()
}

/// `eps,lhs,rhs` rows: the sign-matched distance against `‖ΔB‖_F / gap`.
pub fn curve_csv(points: &[InstabilityPoint]) -> String {
    let mut s = String::from("eps,lhs,rhs\n");
    for pt in points {
        s.push_str(&format!("{},{},{}\n", pt.eps, pt.sign_distance, pt.delta_b_f / pt.gap));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastReport {
    pub k: usize,
    pub sign_distance: f64,
    pub eta: f64,
    #[serde(serialize_with = "serialize_f64_inf")]
    pub ratio: f64,
}

/// Rotates the closest pair inside the first `p` Laplacian eigenvectors of
/// `g` and measures how far the rotated basis moves under sign matching and
/// under orthogonal matching. On a disconnected graph the pair shares the
/// zero eigenvalue, so both bases are valid encodings of the same graph.
pub fn eigenbasis_contrast(g: &Graph, p: usize, eps: f64) -> Result<ContrastReport> {
    let eig = sym_eig(&normalized_laplacian(g)?)?;
    if p < 2 || p > eig.n() {
        return Err(Error::InvalidArgument(format!("p = {p} must satisfy 2 <= p <= n")));
    }
    let k = (0..p - 1)
        .min_by(|&a, &b| {
            (eig.values[a + 1] - eig.values[a]).total_cmp(&(eig.values[b + 1] - eig.values[b]))
        })
        .expect("p >= 2");
    let (_, rotated) = rotate_eigenpair(&eig, k, eps)?;
    let idx: Vec<usize> = (0..p).collect();
    let z1 = eig.vectors.select_columns(&idx);
    let z2 = rotated.select_columns(&idx);
    let (sign_distance, _) = sign_match_distance(&z1, &z2)?;
    let (eta, _) = eta_distance(&z1, &z2)?;
    let ratio = if eta == 0.0 { f64::INFINITY } else { sign_distance / eta };
    Ok(ContrastReport { k, sign_distance, eta, ratio })
}

/// `min_Q ‖X_J − X'_J Q‖_F ≤ √8 min(√d ‖Δ‖_op, ‖Δ‖_F) / min(λ_s − λ_{s−1}, λ_{t+1} − λ_t)`
/// for the zero-based column interval `J = [s, t]`, with gaps taken from `b1`.
pub fn davis_kahan_verify(b1: &SymMatrix, b2: &SymMatrix, s: usize, t: usize) -> Result<StabilityReport> {
    davis_kahan_named("davis_kahan", b1, b2, s, t)
}

fn davis_kahan_named(name: &str, b1: &SymMatrix, b2: &SymMatrix, s: usize, t: usize) -> Result<StabilityReport> {
    let n = b1.size();
    if b2.size() != n {
        return Err(Error::SizeMismatch(format!("{n} vs {}", b2.size())));
    }
    if s > t || t >= n {
        return Err(Error::InvalidArgument(format!("interval [{s}, {t}] invalid for n = {n}")));
    }
    let e1 = sym_eig(b1)?;
    let e2 = sym_eig(b2)?;
    let lo = if s == 0 { f64::INFINITY } else { e1.values[s] - e1.values[s - 1] };
    let hi = if t + 1 == n { f64::INFINITY } else { e1.values[t + 1] - e1.values[t] };
    let den = lo.min(hi);
    if den <= GAP_TOL {
        return Err(Error::ZeroDenominator(s, t));
    }
    let idx: Vec<usize> = (s..=t).collect();
    let (lhs, _) = eta_distance(&e1.vectors.select_columns(&idx), &e2.vectors.select_columns(&idx))?;
    let delta = b1.sub(b2);
    let op = sym_opnorm(&delta)?;
    let fro = delta.frobenius();
    let d = (t - s + 1) as f64;
    let num = 8f64.sqrt() * (d.sqrt() * op).min(fro);
    let rhs = if den.is_infinite() { 0.0 } else { num / den };
    Ok(StabilityReport::new(
        name,
        lhs,
        rhs,
        consts(&[("d", d), ("delta_op", op), ("delta_f", fro), ("denominator", den)]),
        &[b1.as_mat(), b2.as_mat()],
    ))
}

/// The first-`p` Laplacian eigenmap bound
/// `η(Z¹, Z²) ≤ 2^{3/2} δ min(√p ‖ΔL‖_op, ‖ΔL‖_F)` with `δ = 1/(λ_{p+1} − λ_p)`.
pub fn le_stability_verify(l1: &SymMatrix, l2: &SymMatrix, p: usize) -> Result<StabilityReport> {
    if p == 0 {
        return Err(Error::InvalidArgument("p must be positive".into()));
    }
    davis_kahan_named("le_stability", l1, l2, 0, p - 1)
}

/// Weyl (`max_i |λ_i − λ'_i| ≤ ‖Δ‖_op`) and Hoffman–Wielandt
/// (`‖λ − λ'‖_2 ≤ ‖Δ‖_F`).
pub fn eigvalue_perturbation_verify(b1: &SymMatrix, b2: &SymMatrix) -> Result<(StabilityReport, StabilityReport)> {
    if b1.size() != b2.size() {
        return Err(Error::SizeMismatch(format!("{} vs {}", b1.size(), b2.size())));
    }
    let v1 = sym_eig(b1)?.values;
    let v2 = sym_eig(b2)?.values;
    let diffs: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| (a - b).abs()).collect();
    let delta = b1.sub(b2);
    let op = sym_opnorm(&delta)?;
    let fro = delta.frobenius();
    let max_gap = diffs.iter().copied().fold(0.0, f64::max);
    let l2 = diffs.iter().map(|x| x * x).sum::<f64>().sqrt();
    let inputs = [b1.as_mat(), b2.as_mat()];
    Ok((
        StabilityReport::new("weyl", max_gap, op, consts(&[("delta_op", op)]), &inputs),
        StabilityReport::new("hoffman_wielandt", l2, fro, consts(&[("delta_f", fro)]), &inputs),
    ))
}

/// First-`p` eigenvectors and the gap `λ_{p+1} − λ_p` after them.
fn le_with_gap(l: &SymMatrix, p: usize) -> Result<(Mat, f64)> {
    let eig = sym_eig(l)?;
    if p == 0 || p >= eig.n() {
        return Err(Error::InvalidArgument(format!("p = {p} must satisfy 1 <= p < n = {}", eig.n())));
    }
    let gap = eig.values[p] - eig.values[p - 1];
    Ok((laplacian_eigenmap_from(&eig, p, LeConvention::IncludeZero)?.z, gap))
}

/// One PEG layer on two node-identified graphs with shared features `x`:
/// `‖X̂¹ − X̂²‖_F + η(Ẑ¹, Ẑ²) ≤ C ‖L¹ − L²‖_F`. Both encodings are rescaled by
/// a common factor so every row has norm at most 1.
pub fn verify_peg_stability(layer: &PegLayer, g1: &Graph, g2: &Graph, x: &Mat, p: usize) -> Result<StabilityReport> {
    if g1.n() != g2.n() {
        return Err(Error::SizeMismatch(format!("{} vs {} nodes", g1.n(), g2.n())));
    }
    let l1 = normalized_laplacian(g1)?;
    let l2 = normalized_laplacian(g2)?;
    let (mut z1, gap1) = le_with_gap(&l1, p)?;
    let (mut z2, gap2) = le_with_gap(&l2, p)?;
    if gap1 <= GAP_TOL || gap2 <= GAP_TOL {
        return Err(Error::InfiniteDelta);
    }
    let delta = (1.0 / gap1).min(1.0 / gap2);
    let scale = row_norm_guard(&mut z1, &mut z2);
    let xh1 = layer.forward(&normalized_adjacency(g1)?, x, &z1)?;
    let xh2 = layer.forward(&normalized_adjacency(g2)?, x, &z2)?;
    let (eta, _) = eta_distance(&z1, &z2)?;
    let lhs = xh1.sub(&xh2).frobenius() + eta;
    let dist = l1.sub(&l2).frobenius();
    let x_op = certified_opnorm(x);
    let d_max = g2.degrees().d_max as f64;
    let l_psi = layer.psi.lipschitz();
    let l_phi = lipschitz_upper(&layer.phi).value;
    let w_op = certified_opnorm(&layer.w);
    let c = peg_stability_constant(delta, x_op, d_max, l_psi, l_phi, w_op)?;
    Ok(StabilityReport::new(
        "peg_theorem",
        lhs,
        c * dist,
        consts(&[
            ("delta", delta),
            ("gap1", gap1),
            ("gap2", gap2),
            ("x_opnorm", x_op),
            ("d_max", d_max),
            ("l_psi", l_psi),
            ("l_phi", l_phi),
            ("w_opnorm", w_op),
            ("C", c),
            ("graph_distance", dist),
            ("z_scale", scale),
            ("phi_at_zero", layer.phi.eval_scalar(0.0)),
        ]),
        &[l1.as_mat(), l2.as_mat(), x, &layer.w],
    ))
}

/// `‖SPE(L¹) − SPE(L²)‖_F` against the Hölder bound, with `ρ` fixed to the
/// adjacency of `g1` on both sides. Channels without a finite Lipschitz
/// constant make the report not applicable.
pub fn verify_spe_stability(params: &SpeParams, g1: &Graph, g2: &Graph, d: usize) -> Result<StabilityReport> {
    if g1.n() != g2.n() {
        return Err(Error::SizeMismatch(format!("{} vs {} nodes", g1.n(), g2.n())));
    }
    let l1 = normalized_laplacian(g1)?;
    let l2 = normalized_laplacian(g2)?;
    let in1 = spectral_input(&sym_eig(&l1)?, d)?;
    let in2 = spectral_input(&sym_eig(&l2)?, d)?;
    let a = g1.adjacency();
    let out1 = spe_forward(params, &in1.v, &in1.lambda, &a)?;
    let out2 = spe_forward(params, &in2.v, &in2.lambda, &a)?;
    let lhs = out1.sub(&out2).frobenius();
    let delta_l = l1.sub(&l2).frobenius();
    let c = spe_constants(params, &a, d, in1.gamma)?;
    let applicable = c.is_applicable();
    let rhs = if applicable { spe_stability_bound(&c, d, delta_l)? } else { f64::INFINITY };
    let mut pairs = vec![
        ("J", c.j),
        ("alpha1", c.alpha1),
        ("alpha2", c.alpha2),
        ("alpha3", c.alpha3),
        ("gamma", c.gamma),
        ("delta_l", delta_l),
    ];
    if delta_l > 0.0 {
        pairs.push(("lhs_per_delta_l", lhs / delta_l));
    }
    let report = StabilityReport::new("spe_theorem", lhs, rhs, consts(&pairs), &[l1.as_mat(), l2.as_mat()]);
    Ok(if applicable { report } else { report.not_applicable() })
}

fn random_sym(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> SymMatrix {
    SymMatrix::from_mat(&Mat::random_gaussian(n, n, rng).scale(scale)).expect("square")
}

/// Random symmetric `B` and `B + 1e-3 E` over random column intervals with
/// a positive denominator.
pub fn davis_kahan_sweep(trials: usize, seed: u64) -> Result<Vec<StabilityReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let n = rng.random_range(4..=16);
        let b1 = random_sym(n, 1.0, &mut rng);
        let b2 = b1.add(&random_sym(n, 1e-3, &mut rng));
        let s = rng.random_range(0..n);
        let t = rng.random_range(s..n);
        match davis_kahan_verify(&b1, &b2, s, t) {
            Err(Error::ZeroDenominator(..)) => continue,
            r => out.push(r?),
        }
    }
    Ok(out)
}

/// Random connected graphs against 5%-add / 5%-drop perturbations, cutting
/// at a random `p` with a nonzero gap.
pub fn le_stability_sweep(trials: usize, seed: u64) -> Result<Vec<StabilityReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let n = rng.random_range(10..=24);
        let g1 = random_connected_graph(n, 0.25, rng.random())?;
        let g2 = perturb_edges(&g1, 0.05, 0.05, rng.random())?;
        let p = rng.random_range(1..n / 2);
        match le_stability_verify(&normalized_laplacian(&g1)?, &normalized_laplacian(&g2)?, p) {
            Err(Error::ZeroDenominator(..)) => continue,
            r => out.push(r?),
        }
    }
    Ok(out)
}

/// Weyl and Hoffman–Wielandt on random symmetric pairs, `n ≤ 20`.
pub fn eigvalue_sweep(trials: usize, seed: u64) -> Result<Vec<StabilityReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * trials);
    for _ in 0..trials {
        let n = rng.random_range(2..=20);
        let b1 = random_sym(n, 1.0, &mut rng);
        let scale = 10f64.powf(rng.random_range(-4.0..0.0));
        let b2 = b1.add(&random_sym(n, scale, &mut rng));
        let (w, h) = eigvalue_perturbation_verify(&b1, &b2)?;
        out.push(w);
        out.push(h);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PegSweepConfig {
    pub blocks: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub p: usize,
    pub features: usize,
    pub hidden: usize,
    pub add_ratio: f64,
    pub drop_ratio: f64,
}

impl Default for PegSweepConfig {
    fn default() -> Self {
        PegSweepConfig {
            blocks: vec![50, 50],
            p_in: 0.3,
            p_out: 0.1,
            p: 4,
            features: 4,
            hidden: 8,
            add_ratio: 0.0,
            drop_ratio: 0.1,
        }
    }
}

/// A PEG layer with `φ(0) = 0` (bias-free tanh MLP) and ReLU `ψ`.
pub fn stable_peg_layer(f_in: usize, f_out: usize, hidden: usize, seed: u64) -> PegLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Mat::random_gaussian(f_in, f_out, &mut rng).scale(1.0 / (f_in as f64).sqrt());
    let phi = Mlp::random(&[1, hidden, 1], Activation::Tanh, 1.0, &mut rng);
    PegLayer { w, phi, psi: Activation::Relu, xi_mode: XiMode::Distance }
}

/// SBM graphs against edge-perturbed copies, fresh layer and features per
/// trial. Features are Gaussian scaled by `1/√n`.
pub fn peg_sweep(trials: usize, seed: u64, cfg: &PegSweepConfig) -> Result<Vec<StabilityReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = cfg.blocks.iter().sum();
    let mut out = Vec::with_capacity(trials);
    let mut attempts = 0;
    while out.len() < trials {
        attempts += 1;
        if attempts > 10 * trials + 10 {
            return Err(Error::Infeasible("too many graphs without an eigengap at p".into()));
        }
        let g1 = sbm_generate(&cfg.blocks, cfg.p_in, cfg.p_out, rng.random())?;
        if g1.degrees().degrees.contains(&0) {
            continue;
        }
        let g2 = perturb_edges(&g1, cfg.add_ratio, cfg.drop_ratio, rng.random())?;
        let layer = stable_peg_layer(cfg.features, cfg.hidden, cfg.hidden, rng.random());
        let x = Mat::random_gaussian(n, cfg.features, &mut rng).scale(1.0 / (n as f64).sqrt());
        match verify_peg_stability(&layer, &g1, &g2, &x, cfg.p) {
            Err(Error::InfiniteDelta) => continue,
            r => out.push(r?),
        }
    }
    Ok(out)
}

/// Random connected graphs against 5%-add / 5%-drop perturbations with
/// randomly initialized SPE networks.
pub fn spe_sweep(trials: usize, seed: u64, n: usize, cfg: &SpeConfig) -> Result<Vec<StabilityReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    let mut attempts = 0;
    while out.len() < trials {
        attempts += 1;
        if attempts > 10 * trials + 10 {
            return Err(Error::Infeasible("too many graphs with fewer than d positive eigenvalues".into()));
        }
        let g1 = random_connected_graph(n, 0.2, rng.random())?;
        let g2 = perturb_edges(&g1, 0.05, 0.05, rng.random())?;
        let params = SpeParams::random(cfg, rng.random())?;
        match verify_spe_stability(&params, &g1, &g2, cfg.d) {
            Err(Error::RankDeficient { .. }) => continue,
            r => out.push(r?),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Le,
    Peg,
    Spe,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivarianceCheck {
    pub test: String,
    pub seed: u64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivarianceReport {
    pub subject: Subject,
    pub checks: Vec<EquivarianceCheck>,
    pub max_deviation: f64,
}

/// `g` relabelled so that its Laplacian becomes `P L Pᵀ` for `perm`.
fn relabel(g: &Graph, perm: &Permutation) -> Graph {
    g.permuted(&perm.inverse())
}

/// Permutation tests for every subject, plus `O(p)` invariance of PEG
/// outputs and logits and block-orthogonal basis invariance of SPE.
pub fn equivariance_suite(subject: Subject, g: &Graph, p: usize, seeds: &[u64]) -> Result<EquivarianceReport> {
    let n = g.n();
    let mut checks = Vec::new();
    let mut push = |test: &str, seed: u64, deviation: f64| {
        checks.push(EquivarianceCheck { test: test.to_string(), seed, deviation });
    };
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = Permutation::random(n, &mut rng);
        let g2 = relabel(g, &perm);
        match subject {
            Subject::Le => {
                let z1 = encode_le(g, p, LeConvention::IncludeZero)?.z;
                let z2 = encode_le(&g2, p, LeConvention::IncludeZero)?.z;
                push("permutation", seed, eta_distance(&perm.apply_rows(&z1), &z2)?.0);
            }
            Subject::Peg => {
                let mut model = PegModel::init(3, &[4], p, &PegArch::default(), seed)?;
                let dims = model.head.dims();
                model.head = Mlp::random_with_bias(&dims, Activation::Relu, 1.0, &mut rng);
                let x = Mat::random_gaussian(n, 3, &mut rng);
                let z1 = encode_le(g, p, LeConvention::IncludeZero)?.z;
                let a1 = normalized_adjacency(g)?;
                let out1 = model.forward(&a1, &x, &z1)?;

                let z2 = encode_le(&g2, p, LeConvention::IncludeZero)?.z;
                let out2 = model.forward(&normalized_adjacency(&g2)?, &perm.apply_rows(&x), &z2)?;
                push("permutation", seed, out2.sub(&perm.apply_rows(&out1)).max_abs());

                let q = OrthogonalMatrix::random(p, &mut rng);
                let zq = z1.matmul(q.as_mat());
                let outq = model.forward(&a1, &x, &zq)?;
                push("orthogonal", seed, outq.sub(&out1).max_abs());
                let mut dev: f64 = 0.0;
                for u in 0..n {
                    for v in u + 1..n {
                        let l1 = model.link_logit(&out1, &z1, u, v)?;
                        let lq = model.link_logit(&outq, &zq, u, v)?;
                        dev = dev.max((l1 - lq).abs());
                    }
                }
                push("orthogonal_logits", seed, dev);
            }
            Subject::Spe => {
                let cfg = SpeConfig { d: p, ..Default::default() };
                let params = SpeParams::random(&cfg, seed)?;
                let out1 = spe_encode(&params, g, p)?;
                let out2 = spe_encode(&params, &g2, p)?;
                push("permutation", seed, out2.sub(&perm.apply_rows(&out1)).max_abs());

                let inp = spectral_input(&sym_eig(&normalized_laplacian(g)?)?, p)?;
                let q = block_orthogonal_sample(&inp.lambda, 1e-9, seed);
                let a = g.adjacency();
                let base = spe_forward(&params, &inp.v, &inp.lambda, &a)?;
                let rot = spe_forward(&params, &inp.v.matmul(q.as_mat()), &inp.lambda, &a)?;
                push("basis", seed, rot.sub(&base).max_abs());
            }
        }
    }
    let max_deviation = checks.iter().map(|c| c.deviation).fold(0.0, f64::max);
    Ok(EquivarianceReport { subject, checks, max_deviation })
}

/// Appends one JSON object per report.
pub fn append_jsonl(path: &Path, reports: &[StabilityReport]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{barbell_graph, complete_graph, cycle_graph, disjoint_union, path_graph};

    fn diag(values: &[f64]) -> SymMatrix {
        SymMatrix::diag(values)
    }

    #[test]
    fn report_slack() {
        assert!(within_bound(1.0, 1.0));
        assert!(within_bound(1.0 + 5e-10, 1.0));
        assert!(!within_bound(1.0 + 1e-8, 1.0));
        assert!(within_bound(5e-13, 0.0));
        let r = StabilityReport::new("x", 2.0, 1.0, BTreeMap::new(), &[]);
        assert!(!r.holds && r.status == Status::Violated);
        let a = inputs_digest("x", &[&Mat::identity(2)]);
        assert_eq!(a, inputs_digest("x", &[&Mat::identity(2)]));
        assert_ne!(a, inputs_digest("y", &[&Mat::identity(2)]));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn adversarial_spectrum_and_size() {
        let b = diag(&[0.0, 0.01, 1.0, 2.0]);
        let adv = adversarial_perturbation(&b, 2, 1e-3).unwrap();
        assert_eq!(adv.k, 0);
        let v1 = sym_eig(&b).unwrap().values;
        let v2 = sym_eig(&adv.b_pert).unwrap().values;
        assert!(v1.iter().zip(&v2).all(|(a, c)| (a - c).abs() < 1e-9));
        let want = 2f64.sqrt() * 0.01 * 1e-3;
        assert!((adv.delta_b_f - want).abs() < 0.01 * want);
        assert!(matches!(
            adversarial_perturbation(&diag(&[0.0, 0.0, 1.0]), 1, 1e-3),
            Err(Error::MultipleEigenvalues(2))
        ));
        assert!(adversarial_perturbation(&b, 2, 0.2).is_err());
    }

    #[test]
    fn sign_distance_closed_form() {
        // The constructor rejects eps = 0.1 itself, so the boundary value
        // goes through the raw rotation.
        let b = diag(&[0.0, 0.5, 1.0, 2.0]);
        let eig = sym_eig(&b).unwrap();
        let (b_pert, _) = rotate_eigenpair(&eig, 0, 0.1).unwrap();
        let z1 = eig.vectors.select_columns(&[0, 1]);
        let z2 = sym_eig(&b_pert).unwrap().vectors.select_columns(&[0, 1]);
        let d2 = sign_match_distance(&z1, &z2).unwrap().0.powi(2);
        assert!((d2 - 4.0 * (1.0 - 0.99f64.sqrt())).abs() < 1e-12);
        assert!((d2 - 0.020050).abs() < 1e-6);
        let pt = instability_point(&b, 2, 0.0999).unwrap();
        assert!((pt.sign_distance.powi(2) - 4.0 * (1.0 - (1.0 - 0.0999f64 * 0.0999).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn instability_ratio_and_curve() {
        let b = diag(&[0.0, 0.01, 1.0, 2.0]);
        let pt = instability_point(&b, 2, 1e-3).unwrap();
        assert!(pt.ratio >= 0.99 / pt.gap, "{} vs {}", pt.ratio, 1.0 / pt.gap);
        // The rotated pair stays inside the first two columns: no subspace moves.
        assert!(pt.eta < 1e-9);
        let curve = instability_curve(&b, 2, &[1e-2, 1e-3, 1e-4]).unwrap();
        assert!(curve.windows(2).all(|w| w[1].residual_over_eps2 < w[0].residual_over_eps2));
        let csv = curve_csv(&curve);
        assert!(csv.starts_with("eps,lhs,rhs\n") && csv.lines().count() == 4);
    }

    #[test]
    fn contrast_on_disconnected_graph() {
        let g = disjoint_union(&complete_graph(4), &cycle_graph(5));
        let c = eigenbasis_contrast(&g, 3, 1e-2).unwrap();
        assert!(c.ratio >= 10.0, "{c:?}");
    }

    #[test]
    fn davis_kahan_cases() {
        let b = diag(&[0.0, 1.0, 2.0, 3.0]);
        let r = davis_kahan_verify(&b, &b, 0, 1).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        assert!(r.holds);
        assert!(matches!(davis_kahan_verify(&diag(&[0.0, 1.0, 2.0]), &b, 0, 1), Err(Error::SizeMismatch(_))));
        assert!(matches!(
            davis_kahan_verify(&diag(&[0.0, 1.0, 1.0]), &diag(&[0.0, 1.0, 1.0]), 0, 1),
            Err(Error::ZeroDenominator(0, 1))
        ));
        let b1 = diag(&[0.0, 0.01, 1.0, 2.0]);
        let adv = adversarial_perturbation(&b1, 2, 1e-3).unwrap();
        assert!(davis_kahan_verify(&b1, &adv.b_pert, 0, 0).unwrap().holds);
        assert!(davis_kahan_sweep(100, 1).unwrap().iter().all(|r| r.holds));
    }

    #[test]
    fn le_stability_sweep_holds() {
        let reports = le_stability_sweep(30, 2).unwrap();
        assert!(reports.iter().all(|r| r.holds), "{:?}", reports.iter().find(|r| !r.holds));
    }

    #[test]
    fn weyl_and_hw() {
        let b = diag(&[1.0, 2.0, 5.0]);
        let shifted = b.add(&SymMatrix::identity(3).scale(0.1));
        let (w, h) = eigvalue_perturbation_verify(&b, &shifted).unwrap();
        assert!((w.lhs - 0.1).abs() < 1e-12 && (w.rhs - 0.1).abs() < 1e-12 && w.holds);
        assert!(h.holds);
        let (w, _) = eigvalue_perturbation_verify(&diag(&[1.0, 2.0]), &diag(&[1.1, 2.0])).unwrap();
        assert!((w.lhs - 0.1).abs() < 1e-12 && (w.rhs - 0.1).abs() < 1e-12);
        assert!(eigvalue_sweep(200, 3).unwrap().iter().all(|r| r.holds));
    }

    #[test]
    fn peg_identical_and_perturbed() {
        let g = sbm_generate(&[20, 20], 0.4, 0.1, 1).unwrap();
        let layer = stable_peg_layer(3, 4, 6, 2);
        let x = Mat::random_gaussian(40, 3, &mut ChaCha8Rng::seed_from_u64(3)).scale(0.2);
        let r = verify_peg_stability(&layer, &g, &g, &x, 3).unwrap();
        assert!(r.lhs < 1e-9 && r.rhs == 0.0 && r.holds);
        let cfg = PegSweepConfig { blocks: vec![20, 20], p: 3, ..Default::default() };
        let reports = peg_sweep(5, 4, &cfg).unwrap();
        assert!(reports.iter().all(|r| r.holds));
        assert_eq!(reports[0].constants["phi_at_zero"], 0.0);
    }

    #[test]
    fn peg_degenerate_gap_is_infinite_delta() {
        // The 6-cycle's second and third eigenvalues coincide.
        let g = cycle_graph(6);
        let layer = stable_peg_layer(1, 2, 3, 0);
        let x = Mat::filled(6, 1, 0.1);
        assert_eq!(verify_peg_stability(&layer, &g, &g, &x, 2).unwrap_err(), Error::InfiniteDelta);
    }

    #[test]
    fn spe_identical_and_indicator() {
        let g = random_connected_graph(12, 0.3, 5).unwrap();
        let params = SpeParams::random(&SpeConfig { d: 3, ..Default::default() }, 1).unwrap();
        let r = verify_spe_stability(&params, &g, &g, 3).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        let reports = spe_sweep(5, 6, 14, &SpeConfig { d: 3, ..Default::default() }).unwrap();
        assert!(reports.iter().all(|r| r.holds && r.status == Status::Holds));

        let inp = spectral_input(&sym_eig(&normalized_laplacian(&g).unwrap()).unwrap(), 3).unwrap();
        let rho = crate::spe::GinStack::random(&[1, 2], 3, &mut ChaCha8Rng::seed_from_u64(0));
        let ind = SpeParams::new(vec![crate::spe::Phi::Indicator { center: inp.lambda[1], tol: 1e-12 }], rho).unwrap();
        let g2 = perturb_edges(&g, 0.0, 0.05, 9).unwrap();
        let r = verify_spe_stability(&ind, &g, &g2, 3).unwrap();
        assert_eq!(r.status, Status::NotApplicable);
        assert!(r.passes());
    }

    #[test]
    fn equivariance_small() {
        let g = barbell_graph(4);
        let _ = path_graph(3);
        let seeds = [0, 1, 2];
        for s in [Subject::Le, Subject::Peg, Subject::Spe] {
            let g = if s == Subject::Spe { random_connected_graph(10, 0.3, 1).unwrap() } else { g.clone() };
            let r = equivariance_suite(s, &g, 2, &seeds).unwrap();
            assert!(r.max_deviation < 1e-6, "{s:?}: {:?}", r.checks);
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = std::env::temp_dir().join(format!("spectral-pe-lab-{}", std::process::id()));
        let _ = std::fs::remove_file(&dir);
        let mut c = BTreeMap::new();
        c.insert("gamma".to_string(), f64::INFINITY);
        let r = StabilityReport::new("x", 0.0, f64::INFINITY, c, &[]);
        append_jsonl(&dir, &[r.clone(), r]).unwrap();
        let text = std::fs::read_to_string(&dir).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["rhs"], "inf");
        assert_eq!(v["constants"]["gamma"], "inf");
        std::fs::remove_file(&dir).unwrap();
    }
}
