//! Stable and expressive positional encodings: `ρ(V diag(φ_ℓ(λ)) Vᵀ)_ℓ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_laplacian, Graph, SymMatrix};
use crate::linalg::Mat;
use crate::nn::{lipschitz_upper, mlp_grad, Activation, CubicSpline, FlatParams, Mlp, MlpCache, MlpGrad};
use crate::pe::ZERO_EIGENVALUE_TOL;
use crate::spectral::{eigen_blocks, serialize_f64_inf, sym_eig, EigenDecomposition};

/// Largest allowed `|VᵀV − I|` entry.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Tent function on a strictly increasing grid: 1 at `grid[ell]`, linear
/// down to 0 at the neighbouring grid points, 0 beyond them. The end hats
/// stay at 1 past the ends of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HatFunction {
    grid: Vec<f64>,
    ell: usize,
}

impl HatFunction {
    pub fn center(&self) -> f64 {
        self.grid[self.ell]
    }

    pub fn eval(&self, x: f64) -> f64 {
        let c = self.grid[self.ell];
        if x == c {
            return 1.0;
        }
        if x < c {
            match self.ell.checked_sub(1).map(|k| self.grid[k]) {
                Some(left) if x > left => (x - left) / (c - left),
                Some(_) => 0.0,
                None => 1.0,
            }
        } else {
            match self.grid.get(self.ell + 1) {
                Some(&right) if x < right => (right - x) / (right - c),
                Some(_) => 0.0,
                None => 1.0,
            }
        }
    }

    /// One over the smallest gap to a neighbouring grid point; infinite for
    /// a single-point grid.
    pub fn lipschitz(&self) -> f64 {
        let c = self.grid[self.ell];
        let mut gap = f64::INFINITY;
        if self.ell > 0 {
            gap = gap.min(c - self.grid[self.ell - 1]);
        }
        if let Some(&r) = self.grid.get(self.ell + 1) {
            gap = gap.min(r - c);
        }
        1.0 / gap
    }
}

/// The hat channel centred at `values[ell]`; `values` must be strictly
/// increasing.
pub fn hard_partition_phi(values: &[f64], ell: usize) -> Result<HatFunction> {
    if ell >= values.len() {
        return Err(Error::InvalidArgument(format!("index {ell} out of {} grid points", values.len())));
    }
    if values.windows(2).any(|w| !(w[1] > w[0])) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("hat grid must be finite and strictly increasing".into()));
    }
    Ok(HatFunction { grid: values.to_vec(), ell })
}

/// Distinct eigenvalues, one representative (the block mean) per group of
/// values within `tol` of their neighbour.
pub fn distinct_values(sorted: &[f64], tol: f64) -> Vec<f64> {
    eigen_blocks(sorted, tol)
        .into_iter()
        .map(|(s, len)| sorted[s..s + len].iter().sum::<f64>() / len as f64)
        .collect()
}

/// A channel function `R^d → R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    /// The same scalar MLP on every eigenvalue.
    Elementwise(Mlp),
    Spline(CubicSpline),
    /// `φ(λ)_i = g(λ_i, mean_j h(λ_j))` with `g: R² → R` and `h: R → R`.
    DeepSet { g: Mlp, h: Mlp },
    /// A full MLP on the eigenvalue vector. Not permutation equivariant in
    /// general; used by the eigenvalue-separation construction.
    Vector(Mlp),
    Hat(HatFunction),
    /// `1` within `tol` of `center`, else `0`. Discontinuous.
    Indicator { center: f64, tol: f64 },
}

impl Phi {
    pub fn apply(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            Phi::Elementwise(m) => lambda.iter().map(|&x| m.eval_scalar(x)).collect(),
            Phi::Spline(s) => lambda.iter().map(|&x| s.eval(x)).collect(),
            Phi::DeepSet { g, h } => {
                let mean = deepset_mean(h, lambda);
                lambda.iter().map(|&x| crate::nn::mlp_forward(g, &[x, mean]).map(|o| o[0])).collect::<Result<_>>()?
            }
            Phi::Vector(m) => crate::nn::mlp_forward(m, lambda)?,
            Phi::Hat(hat) => lambda.iter().map(|&x| hat.eval(x)).collect(),
            Phi::Indicator { center, tol } => {
                lambda.iter().map(|&x| if (x - center).abs() <= *tol { 1.0 } else { 0.0 }).collect()
            }
        })
    }

    /// Certified `K` with `‖φ(λ) − φ(λ')‖ ≤ K ‖λ − λ'‖`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Phi::Elementwise(m) | Phi::Vector(m) => lipschitz_upper(m).value,
            Phi::Spline(s) => s.lipschitz(),
            Phi::DeepSet { g, h } => {
                let lh = lipschitz_upper(h).value;
                lipschitz_upper(g).value * (1.0 + lh * lh).sqrt()
            }
            Phi::Hat(hat) => hat.lipschitz(),
            Phi::Indicator { .. } => f64::INFINITY,
        }
    }

    /// Certified `M ≥ ‖φ(λ)‖` over `λ ∈ [0, 2]^d`.
    pub fn bound(&self, d: usize) -> Result<f64> {
        let sd = (d as f64).sqrt();
        Ok(match self {
            Phi::Spline(s) => sd * s.bound(),
            Phi::Hat(_) | Phi::Indicator { .. } => sd,
            _ => {
                let at_zero = crate::linalg::norm(&self.apply(&vec![0.0; d])?);
                at_zero + self.lipschitz() * 2.0 * sd
            }
        })
    }

    /// Flat parameter gradient of `⟨upstream, φ(λ)⟩`.
    pub fn backward(&self, lambda: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_params());
        match self {
            Phi::Elementwise(m) => {
                let mut acc = MlpGrad::zeros_like(m);
                for (&x, &u) in lambda.iter().zip(upstream) {
                    acc.add_assign(&mlp_grad(m, &[x], &[u])?.0);
                }
                acc.write_flat(&mut out);
            }
            Phi::Spline(s) => {
                out.resize(s.num_params(), 0.0);
                for (&x, &u) in lambda.iter().zip(upstream) {
                    let (k, basis) = s.coeff_grad(x);
                    for (j, b) in basis.iter().enumerate() {
                        out[4 * k + j] += u * b;
                    }
                }
            }
            Phi::DeepSet { g, h } => {
                let mean = deepset_mean(h, lambda);
                let mut gg = MlpGrad::zeros_like(g);
                let mut dmean = 0.0;
                for (&x, &u) in lambda.iter().zip(upstream) {
                    let (pg, dx) = mlp_grad(g, &[x, mean], &[u])?;
                    gg.add_assign(&pg);
                    dmean += dx[1];
                }
                let mut hg = MlpGrad::zeros_like(h);
                let share = dmean / lambda.len() as f64;
                for &x in lambda {
                    hg.add_assign(&mlp_grad(h, &[x], &[share])?.0);
                }
                gg.write_flat(&mut out);
                hg.write_flat(&mut out);
            }
            Phi::Vector(m) => mlp_grad(m, lambda, upstream)?.0.write_flat(&mut out),
            Phi::Hat(_) | Phi::Indicator { .. } => {}
        }
        Ok(out)
    }
}

fn deepset_mean(h: &Mlp, lambda: &[f64]) -> f64 {
    if lambda.is_empty() {
        return 0.0;
    }
    lambda.iter().map(|&x| h.eval_scalar(x)).sum::<f64>() / lambda.len() as f64
}

impl FlatParams for Phi {
    fn num_params(&self) -> usize {
        match self {
            Phi::Elementwise(m) | Phi::Vector(m) => m.num_params(),
            Phi::Spline(s) => s.num_params(),
            Phi::DeepSet { g, h } => g.num_params() + h.num_params(),
            Phi::Hat(_) | Phi::Indicator { .. } => 0,
        }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        match self {
            Phi::Elementwise(m) | Phi::Vector(m) => m.write_flat(out),
            Phi::Spline(s) => s.write_flat(out),
            Phi::DeepSet { g, h } => {
                g.write_flat(out);
                h.write_flat(out);
            }
            Phi::Hat(_) | Phi::Indicator { .. } => {}
        }
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        match self {
            Phi::Elementwise(m) | Phi::Vector(m) => m.read_flat(src),
            Phi::Spline(s) => s.read_flat(src),
            Phi::DeepSet { g, h } => {
                let k = g.read_flat(src);
                k + h.read_flat(&src[k..])
            }
            Phi::Hat(_) | Phi::Indicator { .. } => 0,
        }
    }
}

/// GIN layers `H ← MLP((1 + ε) H + A H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinStack {
    pub layers: Vec<Mlp>,
    pub epsilon: Vec<f64>,
}

struct GinLayerCache {
    h: Mat,
    rows: Vec<MlpCache>,
}

impl GinStack {
    pub fn new(layers: Vec<Mlp>, epsilon: Vec<f64>) -> Result<Self> {
        if layers.is_empty() || layers.len() != epsilon.len() {
            return Err(Error::InvalidArgument("GIN needs one epsilon per layer and at least one layer".into()));
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::DimMismatch(format!("GIN layer {k} does not chain into layer {}", k + 1)));
            }
        }
        Ok(GinStack { layers, epsilon })
    }

    /// `dims = [in, …, out]`, each layer an MLP `[in, hidden, out]` with ε = 0.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], hidden: usize, rng: &mut R) -> Self {
        let layers: Vec<Mlp> = dims
            .windows(2)
            .map(|w| Mlp::random_with_bias(&[w[0], hidden, w[1]], Activation::Relu, 1.0, rng))
            .collect();
        let epsilon = vec![0.0; layers.len()];
        GinStack { layers, epsilon }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    fn aggregate(a: &SymMatrix, h: &Mat, eps: f64) -> Mat {
        let mut u = a.matmul(h);
        u.add_assign_scaled(h, 1.0 + eps);
        u
    }

    pub fn forward(&self, a: &SymMatrix, x: &Mat) -> Result<Mat> {
        Ok(self.forward_cached(a, x)?.0)
    }

    fn forward_cached(&self, a: &SymMatrix, x: &Mat) -> Result<(Mat, Vec<GinLayerCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (mlp, &eps) in self.layers.iter().zip(&self.epsilon) {
            let u = Self::aggregate(a, &h, eps);
            let mut out = Mat::zeros(h.rows(), mlp.output_dim());
            let mut rows = Vec::with_capacity(h.rows());
            for j in 0..u.rows() {
                let (o, c) = mlp.forward_cached(u.row(j))?;
                out.row_mut(j).copy_from_slice(&o);
                rows.push(c);
            }
            caches.push(GinLayerCache { h, rows });
            h = out;
        }
        Ok((h, caches))
    }

    /// Adds the parameter gradient of `⟨d_out, GIN(x)⟩` into `grads`
    /// (per-layer MLP grads and dε) and returns the input gradient.
    fn backward(
        &self,
        a: &SymMatrix,
        caches: &[GinLayerCache],
        d_out: &Mat,
        grads: &mut [(MlpGrad, f64)],
    ) -> Result<Mat> {
        let mut d = d_out.clone();
        for (k, cache) in caches.iter().enumerate().rev() {
            let mlp = &self.layers[k];
            let mut du = Mat::zeros(cache.h.rows(), cache.h.cols());
            for (j, rc) in cache.rows.iter().enumerate() {
                let (g, dx) = mlp.backward(rc, d.row(j))?;
                grads[k].0.add_assign(&g);
                du.row_mut(j).copy_from_slice(&dx);
            }
            grads[k].1 += crate::linalg::dot(du.as_slice(), cache.h.as_slice());
            let mut dh = a.matmul(&du);
            dh.add_assign_scaled(&du, 1.0 + self.epsilon[k]);
            d = dh;
        }
        Ok(d)
    }

    /// `Π_k ‖(1 + ε_k) I + A‖_op · Lip(MLP_k)` for the row-wise Frobenius norm.
    pub fn lipschitz(&self, a: &SymMatrix) -> Result<f64> {
        let spectrum = sym_eig(a)?.values;
        Ok(self
            .layers
            .iter()
            .zip(&self.epsilon)
            .map(|(m, &eps)| {
                let agg = spectrum.iter().map(|mu| (1.0 + eps + mu).abs()).fold(0.0, f64::max);
                agg * lipschitz_upper(m).value
            })
            .product())
    }
}

impl FlatParams for GinStack {
    fn num_params(&self) -> usize {
        self.layers.iter().map(|m| m.num_params() + 1).sum()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for (m, &e) in self.layers.iter().zip(&self.epsilon) {
            m.write_flat(out);
            out.push(e);
        }
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for (m, e) in self.layers.iter_mut().zip(&mut self.epsilon) {
            k += m.read_flat(&src[k..]);
            *e = src[k];
            k += 1;
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeParams {
    pub phis: Vec<Phi>,
    pub rho: GinStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiKind {
    #[default]
    Mlp,
    Spline,
    DeepSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeConfig {
    /// Number of eigenpairs.
    pub d: usize,
    /// Number of channels.
    pub m: usize,
    pub phi: PhiKind,
    pub phi_hidden: usize,
    pub spline_pieces: usize,
    pub gin_dims: Vec<usize>,
    pub gin_hidden: usize,
}

impl Default for SpeConfig {
    fn default() -> Self {
        SpeConfig {
            d: 4,
            m: 2,
            phi: PhiKind::Mlp,
            phi_hidden: 8,
            spline_pieces: 8,
            gin_dims: vec![4],
            gin_hidden: 8,
        }
    }
}

impl SpeParams {
    pub fn new(phis: Vec<Phi>, rho: GinStack) -> Result<Self> {
        if phis.is_empty() {
            return Err(Error::Empty("SPE needs at least one channel".into()));
        }
        if rho.input_dim() != phis.len() {
            return Err(Error::DimMismatch(format!(
                "{} channels but rho expects {} input features",
                phis.len(),
                rho.input_dim()
            )));
        }
        Ok(SpeParams { phis, rho })
    }

    pub fn random(cfg: &SpeConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phis = (0..cfg.m)
            .map(|_| match cfg.phi {
                PhiKind::Mlp => Phi::Elementwise(Mlp::random_with_bias(
                    &[1, cfg.phi_hidden, 1],
                    Activation::Tanh,
                    1.0,
                    &mut rng,
                )),
                PhiKind::Spline => Phi::Spline(CubicSpline::random(cfg.spline_pieces, 1.0, &mut rng)),
                PhiKind::DeepSet => Phi::DeepSet {
                    g: Mlp::random_with_bias(&[2, cfg.phi_hidden, 1], Activation::Tanh, 1.0, &mut rng),
                    h: Mlp::random_with_bias(&[1, cfg.phi_hidden, 1], Activation::Tanh, 1.0, &mut rng),
                },
            })
            .collect();
        let mut dims = vec![cfg.m];
        dims.extend(&cfg.gin_dims);
        if dims.len() < 2 {
            dims.push(cfg.m);
        }
        SpeParams::new(phis, GinStack::random(&dims, cfg.gin_hidden, &mut rng))
    }

    pub fn m(&self) -> usize {
        self.phis.len()
    }
}

impl FlatParams for SpeParams {
    fn num_params(&self) -> usize {
        self.phis.iter().map(|p| p.num_params()).sum::<usize>() + self.rho.num_params()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for p in &self.phis {
            p.write_flat(out);
        }
        self.rho.write_flat(out);
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for p in &mut self.phis {
            k += p.read_flat(&src[k..]);
        }
        k + self.rho.read_flat(&src[k..])
    }
}

fn check_inputs(v: &Mat, lambda: &[f64], n: usize) -> Result<()> {
    if v.rows() != n || v.cols() != lambda.len() {
        return Err(Error::ShapeMismatch(format!(
            "V is {}x{}, expected {n}x{}",
            v.rows(),
            v.cols(),
            lambda.len()
        )));
    }
    let defect = v.orthonormality_defect();
    if defect > ORTHONORMAL_TOL {
        return Err(Error::NonOrthonormal(defect));
    }
    if lambda.iter().any(|&x| !(-1e-9..=2.0 + 1e-9).contains(&x)) {
        return Err(Error::InvalidArgument("eigenvalues must lie in [0, 2]".into()));
    }
    Ok(())
}

/// `V diag(w) Vᵀ`.
fn weighted_gram(v: &Mat, w: &[f64]) -> Mat {
    let mut vw = v.clone();
    for i in 0..vw.rows() {
        for (x, s) in vw.row_mut(i).iter_mut().zip(w) {
            *x *= s;
        }
    }
    vw.matmul(&v.transpose())
}

/// The channel matrices `V diag(φ_ℓ(λ)) Vᵀ`, one per `φ_ℓ`.
pub fn spe_channels(params: &SpeParams, v: &Mat, lambda: &[f64]) -> Result<Vec<Mat>> {
    check_inputs(v, lambda, v.rows())?;
    params.phis.iter().map(|phi| Ok(weighted_gram(v, &phi.apply(lambda)?))).collect()
}

/// Node features seen by `ρ` for source node `i`: row `j`, column `ℓ` is
/// `C_ℓ[i][j]`.
fn source_slice(channels: &[Mat], i: usize) -> Mat {
    let n = channels[0].rows();
    let mut f = Mat::zeros(n, channels.len());
    for (l, c) in channels.iter().enumerate() {
        for j in 0..n {
            f[(j, l)] = c[(i, j)];
        }
    }
    f
}

/// `Σ_i GIN(slice_i)` over the adjacency `a`.
pub fn spe_forward(params: &SpeParams, v: &Mat, lambda: &[f64], a: &SymMatrix) -> Result<Mat> {
    check_inputs(v, lambda, a.size())?;
    let channels = spe_channels(params, v, lambda)?;
    let n = a.size();
    let mut out = Mat::zeros(n, params.rho.output_dim());
    for i in 0..n {
        out.add_assign_scaled(&params.rho.forward(a, &source_slice(&channels, i))?, 1.0);
    }
    Ok(out)
}

/// Flat parameter gradient of `⟨d_out, spe_forward(…)⟩`.
pub fn spe_backward(params: &SpeParams, v: &Mat, lambda: &[f64], a: &SymMatrix, d_out: &Mat) -> Result<Vec<f64>> {
    check_inputs(v, lambda, a.size())?;
    let n = a.size();
    if d_out.shape() != (n, params.rho.output_dim()) {
        return Err(Error::ShapeMismatch("upstream gradient has the wrong shape".into()));
    }
    let channels = spe_channels(params, v, lambda)?;
    let mut rho_grads: Vec<(MlpGrad, f64)> =
        params.rho.layers.iter().map(|m| (MlpGrad::zeros_like(m), 0.0)).collect();
    let mut dch: Vec<Mat> = (0..params.m()).map(|_| Mat::zeros(n, n)).collect();
    for i in 0..n {
        let (_, caches) = params.rho.forward_cached(a, &source_slice(&channels, i))?;
        let df = params.rho.backward(a, &caches, d_out, &mut rho_grads)?;
        for (l, dc) in dch.iter_mut().enumerate() {
            for j in 0..n {
                dc[(i, j)] += df[(j, l)];
            }
        }
    }
    let mut flat = Vec::with_capacity(params.num_params());
    for (phi, dc) in params.phis.iter().zip(&dch) {
        // ∂⟨dC, V diag(w) Vᵀ⟩/∂w_k = (Vᵀ dC V)_kk.
        let vt_dc_v = v.t_matmul(&dc.matmul(v));
        let dw: Vec<f64> = (0..lambda.len()).map(|k| vt_dc_v[(k, k)]).collect();
        flat.extend(phi.backward(lambda, &dw)?);
    }
    for (g, de) in &rho_grads {
        g.write_flat(&mut flat);
        flat.push(*de);
    }
    Ok(flat)
}

/// The `d` smallest positive eigenpairs of `L` and the gap
/// `λ_{d+1} − λ_d` after them (infinite when nothing follows).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralInput {
    pub v: Mat,
    pub lambda: Vec<f64>,
    pub gamma: f64,
}

pub fn spectral_input(eig: &EigenDecomposition, d: usize) -> Result<SpectralInput> {
    let n = eig.n();
    let zeros = eig.values.iter().take_while(|&&x| x <= ZERO_EIGENVALUE_TOL).count();
    if d == 0 || zeros + d > n {
        return Err(Error::RankDeficient { requested: d, available: n - zeros });
    }
    let idx: Vec<usize> = (zeros..zeros + d).collect();
    let gamma = if zeros + d == n { f64::INFINITY } else { eig.values[zeros + d] - eig.values[zeros + d - 1] };
    Ok(SpectralInput { v: eig.vectors.select_columns(&idx), lambda: eig.values[zeros..zeros + d].to_vec(), gamma })
}

/// SPE of a graph from its normalized Laplacian, with `ρ` run over the
/// graph's own adjacency.
pub fn spe_encode(params: &SpeParams, g: &Graph, d: usize) -> Result<Mat> {
    let inp = spectral_input(&sym_eig(&normalized_laplacian(g)?)?, d)?;
    spe_forward(params, &inp.v, &inp.lambda, &g.adjacency())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeConstants {
    pub j: f64,
    pub k: Vec<f64>,
    pub m: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    #[serde(serialize_with = "serialize_f64_inf")]
    pub gamma: f64,
}

impl SpeConstants {
    pub fn from_parts(j: f64, k: Vec<f64>, m: Vec<f64>, gamma: f64) -> Self {
        let sk: f64 = k.iter().sum();
        let sm: f64 = m.iter().sum();
        SpeConstants {
            j,
            alpha1: 2.0 * j * sk,
            alpha2: 4.0 * 2f64.sqrt() * j * sm,
            alpha3: j * sk,
            k,
            m,
            gamma,
        }
    }

    /// Every constant finite, i.e. the stability premises hold.
    pub fn is_applicable(&self) -> bool {
        [self.j, self.alpha1, self.alpha2, self.alpha3].iter().all(|x| x.is_finite())
    }
}

/// Certified constants of `params` with `ρ` acting over `a`:
/// `J = √n · Lip(GIN)`, `K_ℓ`, `M_ℓ` from the channel certificates.
pub fn spe_constants(params: &SpeParams, a: &SymMatrix, d: usize, gamma: f64) -> Result<SpeConstants> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("eigengap {gamma} must be positive or infinite")));
    }
    // Σ_i over source slices costs a factor √n against the stacked Frobenius norm.
    let j = (a.size() as f64).sqrt() * params.rho.lipschitz(a)?;
    let k = params.phis.iter().map(|p| p.lipschitz()).collect();
    let m = params.phis.iter().map(|p| p.bound(d)).collect::<Result<_>>()?;
    Ok(SpeConstants::from_parts(j, k, m, gamma))
}

/// `(α1 + α2) d^{5/4} √ΔL + (α2 d/γ + α3) ΔL`.
pub fn spe_stability_bound(c: &SpeConstants, d: usize, delta_l: f64) -> Result<f64> {
    if !(delta_l >= 0.0) {
        return Err(Error::InvalidArgument(format!("‖ΔL‖_F = {delta_l} must be nonnegative")));
    }
    if delta_l == 0.0 {
        return Ok(0.0);
    }
    let d = d as f64;
    let gap_term = if c.gamma.is_infinite() { 0.0 } else { c.alpha2 * d / c.gamma };
    Ok((c.alpha1 + c.alpha2) * d.powf(1.25) * delta_l.sqrt() + (gap_term + c.alpha3) * delta_l)
}

/// `2C(1 + α2 d/γ + α3) W + 2C d^{5/4} (α1 + α2) √W`.
pub fn ood_gap_bound(c_gnn: f64, c: &SpeConstants, d: usize, gamma: f64, wasserstein: f64) -> Result<f64> {
    if !(c_gnn >= 0.0 && gamma > 0.0 && wasserstein >= 0.0) {
        return Err(Error::InvalidArgument("C, γ and W must be nonnegative (γ positive)".into()));
    }
    let d = d as f64;
    let gap_term = if gamma.is_infinite() { 0.0 } else { c.alpha2 * d / gamma };
    Ok(2.0 * c_gnn * (1.0 + gap_term + c.alpha3) * wasserstein
        + 2.0 * c_gnn * d.powf(1.25) * (c.alpha1 + c.alpha2) * wasserstein.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GramReport {
    pub recovered: Vec<f64>,
    pub eigenvalue_error: f64,
    /// `‖V_J V_Jᵀ − V'_J V'_Jᵀ‖_F` per group of equal eigenvalues.
    pub projector_distances: Vec<f64>,
    pub max_projector_distance: f64,
}

/// Rebuilds `G = V diag(λ) Vᵀ`, re-decomposes it and compares eigenvalues
/// and eigenspace projectors. Eigenvalues within `1e-9` form one group.
pub fn gram_roundtrip(v: &Mat, lambda: &[f64]) -> Result<GramReport> {
    let d = lambda.len();
    if v.cols() != d || d == 0 || d > v.rows() {
        return Err(Error::ShapeMismatch(format!("V is {}x{} with {d} eigenvalues", v.rows(), v.cols())));
    }
    if lambda.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument("eigenvalues must be positive".into()));
    }
    let defect = v.orthonormality_defect();
    if defect > ORTHONORMAL_TOL {
        return Err(Error::NonOrthonormal(defect));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| lambda[a].total_cmp(&lambda[b]));
    let sorted: Vec<f64> = order.iter().map(|&k| lambda[k]).collect();
    let v_sorted = v.select_columns(&order);

    let eig = sym_eig(&SymMatrix::from_mat(&weighted_gram(v, lambda))?)?;
    let n = eig.n();
    let top: Vec<usize> = (n - d..n).collect();
    let recovered: Vec<f64> = top.iter().map(|&k| eig.values[k]).collect();
    let v_rec = eig.vectors.select_columns(&top);
    let eigenvalue_error = recovered.iter().zip(&sorted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut projector_distances = Vec::new();
    for (s, len) in eigen_blocks(&sorted, 1e-9) {
        let a = v_sorted.columns_range(s, s + len);
        let b = v_rec.columns_range(s, s + len);
        let pa = a.matmul(&a.transpose());
        let pb = b.matmul(&b.transpose());
        projector_distances.push(pa.sub(&pb).frobenius());
    }
    let max_projector_distance = projector_distances.iter().copied().fold(0.0, f64::max);
    Ok(GramReport { recovered, eigenvalue_error, projector_distances, max_projector_distance })
}

/// Networks separating `(V, λ)` from `(VQ, λ')` when `λ ≠ λ'`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatingPair {
    /// `R^d → R^d`, ReLU, two layers: `φ(λ) = e_1` and `φ(λ') = 0`.
    pub phi: Mlp,
    /// `R → R`, ReLU, two layers, applied entrywise and summed.
    pub rho: Mlp,
}

/// Builds the two-layer `φ` and `ρ` that send `(V, λ)` to 1 and any
/// `(VQ, λ')` to 0.
pub fn separating_networks(v: &Mat, lambda: &[f64], lambda_prime: &[f64]) -> Result<SeparatingPair> {
    let d = lambda.len();
    if lambda_prime.len() != d || v.cols() != d || d == 0 {
        return Err(Error::DimMismatch("λ, λ' and V must share d".into()));
    }
    let i = (0..d)
        .find(|&k| lambda[k] != lambda_prime[k])
        .ok_or_else(|| Error::InvalidArgument("λ and λ' must differ".into()))?;
    let (li, lpi) = (lambda[i], lambda_prime[i]);
    let s = (lpi - li).signum();
    // Hidden unit i fires only on λ': relu(s (x_i − midpoint)).
    let mut w1 = Mat::zeros(d, d);
    w1[(i, i)] = s;
    let mut b1 = vec![0.0; d];
    b1[i] = -s * (li + lpi) / 2.0;
    let target = {
        let mut t = vec![0.0; d];
        t[0] = 1.0;
        t
    };
    let mut w2 = Mat::zeros(d, d);
    for r in 0..d {
        w2[(r, i)] = 2.0 * (0.0 - target[r]) / (lpi - li).abs();
    }
    let phi = Mlp::from_layers(
        vec![crate::nn::Layer { w: w1, b: b1 }, crate::nn::Layer { w: w2, b: target.clone() }],
        Activation::Relu,
    )?;
    let c = weighted_gram(v, &target);
    let total: f64 = c.as_slice().iter().map(|x| x.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("V has a zero first column".into()));
    }
    let rho = Mlp::from_layers(
        vec![
            crate::nn::Layer { w: Mat::from_rows(&[vec![1.0]]), b: vec![0.0] },
            crate::nn::Layer { w: Mat::from_rows(&[vec![1.0 / total]]), b: vec![0.0] },
        ],
        Activation::Relu,
    )?;
    Ok(SeparatingPair { phi, rho })
}

/// `Σ_ij ρ([V diag(φ(λ)) Vᵀ]_ij)` with scalar `ρ`.
pub fn entrywise_sum_encoding(pair: &SeparatingPair, v: &Mat, lambda: &[f64]) -> Result<f64> {
    let w = crate::nn::mlp_forward(&pair.phi, lambda)?;
    weighted_gram(v, &w).as_slice().iter().map(|&x| crate::nn::mlp_forward(&pair.rho, &[x]).map(|o| o[0])).sum()
}
