//! The PEG layer: message passing reweighted by a function of positional
//! distances, with positional features passed through untouched.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, Graph, SymMatrix};
use crate::linalg::{dot, Mat};
use crate::nn::{Activation, FlatParams, Mlp, MlpGrad};
use crate::oracles::auc;
use crate::pe::{encode, log_sigmoid, sigmoid, PeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiMode {
    /// `Ξ_uv = φ(‖Z_u − Z_v‖)`.
    #[default]
    Distance,
    /// `Ξ_uv = φ(⟨Z_u, Z_v⟩)`.
    InnerProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    /// `(⟨X̂_u, X̂_v⟩, ⟨Z_u, Z_v⟩)`.
    #[default]
    InnerProduct,
    /// `(X̂_u ⊙ X̂_v, Z_u ⊙ Z_v)`.
    Hadamard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PegLayer {
    /// F_in × F_out.
    pub w: Mat,
    /// Scalar to scalar.
    pub phi: Mlp,
    pub psi: Activation,
    pub xi_mode: XiMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PegLayerGrad {
    pub w: Mat,
    pub phi: MlpGrad,
}

/// Forward intermediates of one layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Nonzero entries `(u, v, Â_uv)` of the upper triangle, diagonal included.
    edges: Vec<(usize, usize, f64)>,
    phi_in: Vec<f64>,
    xi: Vec<f64>,
    x: Mat,
    sx: Mat,
    pre: Mat,
}

impl LayerCache {
    /// `Ξ` on the stored edges, as `(u, v, Ξ_uv)`.
    pub fn xi(&self) -> Vec<(usize, usize, f64)> {
        self.edges.iter().zip(&self.xi).map(|(&(u, v, _), &x)| (u, v, x)).collect()
    }
}

fn upper_nonzeros(a: &SymMatrix) -> Vec<(usize, usize, f64)> {
    let n = a.size();
    let mut out = Vec::new();
    for u in 0..n {
        for v in u..n {
            let x = a[(u, v)];
            if x != 0.0 {
                out.push((u, v, x));
            }
        }
    }
    out
}

impl PegLayer {
    pub fn new(w: Mat, phi: Mlp, psi: Activation, xi_mode: XiMode) -> Result<Self> {
        if phi.input_dim() != 1 || phi.output_dim() != 1 {
            return Err(Error::DimMismatch(format!(
                "phi must map R -> R, got R^{} -> R^{}",
                phi.input_dim(),
                phi.output_dim()
            )));
        }
        Ok(PegLayer { w, phi, psi, xi_mode })
    }

    /// Glorot-scaled `W` and a `φ` that starts close to the constant 1.
    pub fn init<R: Rng + ?Sized>(
        f_in: usize,
        f_out: usize,
        phi_hidden: usize,
        psi: Activation,
        xi_mode: XiMode,
        rng: &mut R,
    ) -> Self {
        let scale = (2.0 / (f_in + f_out) as f64).sqrt();
        let w = Mat::random_gaussian(f_in, f_out, rng).scale(scale);
        let mut phi = Mlp::random(&[1, phi_hidden, 1], Activation::Tanh, 0.1, rng);
        phi.layers.last_mut().expect("two layers").b[0] = 1.0;
        PegLayer { w, phi, psi, xi_mode }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    fn phi_input(&self, z: &Mat, u: usize, v: usize) -> f64 {
        match self.xi_mode {
            XiMode::Distance => {
                z.row(u).iter().zip(z.row(v)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            }
            XiMode::InnerProduct => dot(z.row(u), z.row(v)),
        }
    }

    pub fn forward(&self, a_hat: &SymMatrix, x: &Mat, z: &Mat) -> Result<Mat> {
        Ok(self.forward_cached(a_hat, x, z)?.0)
    }

    /// `ψ((Â ⊙ Ξ) X W)` with `Ξ` evaluated only where `Â` is nonzero.
    pub fn forward_cached(&self, a_hat: &SymMatrix, x: &Mat, z: &Mat) -> Result<(Mat, LayerCache)> {
        let n = a_hat.size();
        if x.rows() != n || z.rows() != n {
            return Err(Error::DimMismatch(format!(
                "Â is {n}x{n} but X has {} rows and Z has {}",
                x.rows(),
                z.rows()
            )));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "X has {} columns, layer expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let edges = upper_nonzeros(a_hat);
        let phi_in: Vec<f64> = edges.iter().map(|&(u, v, _)| self.phi_input(z, u, v)).collect();
        let xi: Vec<f64> = phi_in.iter().map(|&d| self.phi.eval_scalar(d)).collect();
        let f = x.cols();
        let mut sx = Mat::zeros(n, f);
        for (&(u, v, a), &xv) in edges.iter().zip(&xi) {
            let s = a * xv;
            for k in 0..f {
                sx[(u, k)] += s * x[(v, k)];
            }
            if u != v {
                for k in 0..f {
                    sx[(v, k)] += s * x[(u, k)];
                }
            }
        }
        let pre = sx.matmul(&self.w);
        let out = pre.map(|t| self.psi.apply(t));
        Ok((out, LayerCache { edges, phi_in, xi, x: x.clone(), sx, pre }))
    }

    /// Gradients of `⟨d_out, layer(X)⟩` with respect to `W`, `φ` and `X`.
    pub fn backward(&self, cache: &LayerCache, d_out: &Mat) -> (PegLayerGrad, Mat) {
        let psi = self.psi;
        let mut dpre = d_out.clone();
        for (d, &p) in dpre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *d *= psi.derivative(p);
        }
        let dw = cache.sx.t_matmul(&dpre);
        let dsx = dpre.matmul(&self.w.transpose());
        let x = &cache.x;
        let mut dx = Mat::zeros(x.rows(), x.cols());
        let mut dphi = MlpGrad::zeros_like(&self.phi);
        for ((&(u, v, a), &xi), &d_in) in cache.edges.iter().zip(&cache.xi).zip(&cache.phi_in) {
            let s = a * xi;
            let mut ds = dot(dsx.row(u), x.row(v));
            for k in 0..x.cols() {
                dx[(v, k)] += s * dsx[(u, k)];
            }
            if u != v {
                ds += dot(dsx.row(v), x.row(u));
                for k in 0..x.cols() {
                    dx[(u, k)] += s * dsx[(v, k)];
                }
            }
            let dxi = ds * a;
            if dxi != 0.0 {
                let (g, _) = self.phi.forward_cached(&[d_in]).and_then(|(_, c)| self.phi.backward(&c, &[dxi]))
                    .expect("scalar phi");
                dphi.add_assign(&g);
            }
        }
        (PegLayerGrad { w: dw, phi: dphi }, dx)
    }
}

/// `(X̂, Z)` for one layer; `Z` is returned unchanged.
pub fn peg_layer_forward(layer: &PegLayer, a_hat: &SymMatrix, x: &Mat, z: &Mat) -> Result<(Mat, Mat)> {
    Ok((layer.forward(a_hat, x, z)?, z.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PegModel {
    pub layers: Vec<PegLayer>,
    pub head: Mlp,
    pub head_input: HeadInput,
}

impl FlatParams for PegModel {
    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * l.w.cols() + l.phi.num_params()).sum::<usize>()
            + self.head.num_params()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            l.phi.write_flat(out);
        }
        self.head.write_flat(out);
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.w.rows() * l.w.cols();
            l.w.as_mut_slice().copy_from_slice(&src[k..k + nw]);
            k += nw;
            k += l.phi.read_flat(&src[k..]);
        }
        k + self.head.read_flat(&src[k..])
    }
}

impl PegModel {
    pub fn new(layers: Vec<PegLayer>, head: Mlp, head_input: HeadInput) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("a PEG model needs at least one layer".into()));
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::DimMismatch(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    w[0].output_dim(),
                    k + 1,
                    w[1].input_dim()
                )));
            }
        }
        if head.output_dim() != 1 {
            return Err(Error::DimMismatch("link head must output a single logit".into()));
        }
        Ok(PegModel { layers, head, head_input })
    }

    /// Layers `f_in → dims[0] → …`, φ close to 1 and a ReLU head whose
    /// output layer starts at zero.
    pub fn init(
        f_in: usize,
        dims: &[usize],
        p: usize,
        arch: &PegArch,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = f_in;
        for &d in dims {
            layers.push(PegLayer::init(prev, d, arch.phi_hidden, arch.psi, arch.xi_mode, &mut rng));
            prev = d;
        }
        let head_in = match arch.head_input {
            HeadInput::InnerProduct => 2,
            HeadInput::Hadamard => prev + p,
        };
        let mut head = Mlp::random_with_bias(&[head_in, arch.head_hidden, 1], Activation::Relu, 1.0, &mut rng);
        // A zero output layer makes the untrained model score every pair alike.
        let out = head.layers.last_mut().expect("two layers");
        out.w = Mat::zeros(1, arch.head_hidden);
        out.b[0] = 0.0;
        PegModel::new(layers, head, arch.head_input)
    }

    /// Same architecture with every head weight and bias zeroed, so all
    /// logits are equal.
    pub fn zero_head(mut self) -> Self {
        for l in &mut self.head.layers {
            l.w = Mat::zeros(l.w.rows(), l.w.cols());
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        self
    }

    pub fn forward(&self, a_hat: &SymMatrix, x: &Mat, z: &Mat) -> Result<Mat> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(a_hat, &h, z)?;
        }
        Ok(h)
    }

    fn forward_all(&self, a_hat: &SymMatrix, x: &Mat, z: &Mat) -> Result<(Mat, Vec<LayerCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (out, c) = l.forward_cached(a_hat, &h, z)?;
            caches.push(c);
            h = out;
        }
        Ok((h, caches))
    }

    pub fn head_features(&self, xhat: &Mat, z: &Mat, u: usize, v: usize) -> Vec<f64> {
        match self.head_input {
            HeadInput::InnerProduct => vec![dot(xhat.row(u), xhat.row(v)), dot(z.row(u), z.row(v))],
            HeadInput::Hadamard => xhat
                .row(u)
                .iter()
                .zip(xhat.row(v))
                .map(|(a, b)| a * b)
                .chain(z.row(u).iter().zip(z.row(v)).map(|(a, b)| a * b))
                .collect(),
        }
    }

    /// Link logit for the pair `(u, v)`; symmetric in its arguments.
    pub fn link_logit(&self, xhat: &Mat, z: &Mat, u: usize, v: usize) -> Result<f64> {
        Ok(crate::nn::mlp_forward(&self.head, &self.head_features(xhat, z, u, v))?[0])
    }

    pub fn logits(&self, a_hat: &SymMatrix, x: &Mat, z: &Mat, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let xhat = self.forward(a_hat, x, z)?;
        pairs.iter().map(|&(u, v)| self.link_logit(&xhat, z, u, v)).collect()
    }

    /// Mean binary cross-entropy over positive and negative pairs.
    pub fn loss(&self, a_hat: &SymMatrix, x: &Mat, z: &Mat, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Result<f64> {
        let xhat = self.forward(a_hat, x, z)?;
        let total = (pos.len() + neg.len()) as f64;
        let mut l = 0.0;
        for (pairs, label) in [(pos, true), (neg, false)] {
            for &(u, v) in pairs {
                let s = self.link_logit(&xhat, z, u, v)?;
                l -= if label { log_sigmoid(s) } else { log_sigmoid(-s) };
            }
        }
        Ok(l / total)
    }

    /// Loss and its gradient in the [`FlatParams`] layout.
    pub fn loss_and_grad(
        &self,
        a_hat: &SymMatrix,
        x: &Mat,
        z: &Mat,
        pos: &[(usize, usize)],
        neg: &[(usize, usize)],
    ) -> Result<(f64, Vec<f64>)> {
        let total = pos.len() + neg.len();
        if total == 0 {
            return Err(Error::EmptySplit("no training pairs".into()));
        }
        let (xhat, caches) = self.forward_all(a_hat, x, z)?;
        let f = xhat.cols();
        let mut dxhat = Mat::zeros(xhat.rows(), f);
        let mut dhead = MlpGrad::zeros_like(&self.head);
        let mut loss = 0.0;
        for (pairs, label) in [(pos, true), (neg, false)] {
            for &(u, v) in pairs {
                let feats = self.head_features(&xhat, z, u, v);
                let (out, cache) = self.head.forward_cached(&feats)?;
                let s = out[0];
                let (l, ds) = if label { (-log_sigmoid(s), -sigmoid(-s)) } else { (-log_sigmoid(-s), sigmoid(s)) };
                loss += l;
                let ds = ds / total as f64;
                let (g, dfeat) = self.head.backward(&cache, &[ds])?;
                dhead.add_assign(&g);
                match self.head_input {
                    HeadInput::InnerProduct => {
                        for k in 0..f {
                            let (xu, xv) = (xhat[(u, k)], xhat[(v, k)]);
                            dxhat[(u, k)] += dfeat[0] * xv;
                            dxhat[(v, k)] += dfeat[0] * xu;
                        }
                    }
                    HeadInput::Hadamard => {
                        for k in 0..f {
                            let (xu, xv) = (xhat[(u, k)], xhat[(v, k)]);
                            dxhat[(u, k)] += dfeat[k] * xv;
                            dxhat[(v, k)] += dfeat[k] * xu;
                        }
                    }
                }
            }
        }
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut d = dxhat;
        for (l, c) in self.layers.iter().zip(&caches).rev() {
            let (g, dx) = l.backward(c, &d);
            layer_grads.push(g);
            d = dx;
        }
        layer_grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for g in &layer_grads {
            flat.extend_from_slice(g.w.as_slice());
            g.phi.write_flat(&mut flat);
        }
        dhead.write_flat(&mut flat);
        Ok((loss / total as f64, flat))
    }
}

/// Lipschitz-type constant of a PEG layer:
/// `C = (7δ‖X‖_op + 2 d_max) ℓψ ℓφ ‖W‖_op + 3δ`.
pub fn peg_stability_constant(
    delta: f64,
    x_opnorm: f64,
    d_max: f64,
    l_psi: f64,
    l_phi: f64,
    w_opnorm: f64,
) -> Result<f64> {
    if !delta.is_finite() {
        return Err(Error::InfiniteDelta);
    }
    for (v, name) in [
        (delta, "delta"),
        (x_opnorm, "X_opnorm"),
        (d_max, "d_max"),
        (l_psi, "l_psi"),
        (l_phi, "l_phi"),
        (w_opnorm, "W_opnorm"),
    ] {
        if v < 0.0 || v.is_nan() {
            return Err(Error::InvalidArgument(format!("{name} = {v} must be nonnegative")));
        }
    }
    Ok((7.0 * delta * x_opnorm + 2.0 * d_max) * l_psi * l_phi * w_opnorm + 3.0 * delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Graph features when present, otherwise `PeProjector`.
    #[default]
    Auto,
    Given,
    Ones,
    /// `X = Z`.
    Pe,
    /// `X = Z Zᵀ`, unchanged by any orthogonal change of basis of `Z`.
    PeProjector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PegArch {
    pub phi_hidden: usize,
    pub head_hidden: usize,
    pub psi: Activation,
    pub xi_mode: XiMode,
    pub head_input: HeadInput,
}

impl Default for PegArch {
    fn default() -> Self {
        PegArch {
            phi_hidden: 8,
            head_hidden: 16,
            psi: Activation::Relu,
            xi_mode: XiMode::Distance,
            head_input: HeadInput::InnerProduct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PegConfig {
    pub layers: usize,
    pub hidden_dims: Vec<usize>,
    pub pe: PeConfig,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub folds: Option<usize>,
    pub arch: PegArch,
    pub features: FeatureMode,
    /// Propagate over `A + I` instead of `A`.
    pub add_self_loops: bool,
    pub val_frac: f64,
    pub test_frac: f64,
    pub eval_every: usize,
}

impl Default for PegConfig {
    fn default() -> Self {
        PegConfig {
            layers: 1,
            hidden_dims: vec![32],
            pe: PeConfig::default(),
            epochs: 100,
            lr: 0.01,
            seed: 0,
            folds: None,
            arch: PegArch::default(),
            features: FeatureMode::Auto,
            add_self_loops: true,
            val_frac: 0.05,
            test_frac: 0.10,
            eval_every: 5,
        }
    }
}

impl PegConfig {
    /// Hidden widths resized to `layers` entries, repeating the last width.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = self.hidden_dims.clone();
        if d.is_empty() {
            d.push(32);
        }
        let last = *d.last().expect("nonempty");
        d.resize(self.layers.max(1), last);
        d
    }
}

/// Positive and negative pairs for training, validation and testing, and
/// the input graph of each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSplit {
    pub full: Graph,
    pub train_pos: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
    /// Validation and test links removed.
    pub train_graph: Graph,
    /// Training plus validation links.
    pub val_graph: Graph,
    /// Training plus test links; validation links stay hidden.
    pub test_graph: Graph,
}

fn remove_edges(g: &Graph, drop: &HashSet<(usize, usize)>) -> Result<Graph> {
    let base = Graph::new(g.n(), g.edges().filter(|e| !drop.contains(e)))?;
    match g.features() {
        Some(x) => base.with_features(x.clone()),
        None => Ok(base),
    }
}

/// Splits the positive pool (every non-loop edge, or only intra-block edges
/// when `labels` is given) into train/val/test. Held-out links never leave a
/// node without edges in the training graph. Negatives are drawn from
/// non-edges of `g`.
pub fn split_links(
    g: &Graph,
    val_frac: f64,
    test_frac: f64,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<LinkSplit> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::InvalidArgument("split fractions must be in [0, 1) and sum below 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<(usize, usize)> = g
        .edges()
        .filter(|&(u, v)| u != v && labels.is_none_or(|l| l[u] == l[v]))
        .collect();
    pool.shuffle(&mut rng);
    let n_val = (val_frac * pool.len() as f64).round() as usize;
    let n_test = (test_frac * pool.len() as f64).round() as usize;
    let mut degrees = g.degrees().degrees;
    let mut held = Vec::new();
    let mut kept = Vec::new();
    for e in pool {
        if held.len() < n_val + n_test && degrees[e.0] > 1 && degrees[e.1] > 1 {
            degrees[e.0] -= 1;
            degrees[e.1] -= 1;
            held.push(e);
        } else {
            kept.push(e);
        }
    }
    let val_pos: Vec<_> = held.iter().take(n_val).copied().collect();
    let test_pos: Vec<_> = held.iter().skip(n_val).copied().collect();
    if kept.is_empty() || val_pos.is_empty() || test_pos.is_empty() {
        return Err(Error::EmptySplit(format!(
            "train/val/test positives: {}/{}/{}",
            kept.len(),
            val_pos.len(),
            test_pos.len()
        )));
    }
    let val_set: HashSet<_> = val_pos.iter().copied().collect();
    let test_set: HashSet<_> = test_pos.iter().copied().collect();
    let all: HashSet<_> = val_set.union(&test_set).copied().collect();

    let mut taken = HashSet::new();
    let val_neg = sample_non_edges(g, val_pos.len(), &taken, &mut rng)?;
    taken.extend(val_neg.iter().copied());
    let test_neg = sample_non_edges(g, test_pos.len(), &taken, &mut rng)?;

    Ok(LinkSplit {
        full: g.clone(),
        train_pos: kept,
        train_graph: remove_edges(g, &all)?,
        val_graph: remove_edges(g, &test_set)?,
        test_graph: remove_edges(g, &val_set)?,
        val_pos,
        test_pos,
        val_neg,
        test_neg,
    })
}

/// Uniform non-edges `(u < v)` of `g` outside `exclude`, without repeats.
pub fn sample_non_edges<R: Rng + ?Sized>(
    g: &Graph,
    count: usize,
    exclude: &HashSet<(usize, usize)>,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let n = g.n();
    let capacity = n * n.saturating_sub(1) / 2;
    let non_loop_edges = g.edges().filter(|(u, v)| u != v).count();
    if capacity < non_loop_edges + exclude.len() + count {
        return Err(Error::EmptySplit("not enough non-edges to sample negatives".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    while out.len() < count {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let e = (u.min(v), u.max(v));
        if g.has_edge(e.0, e.1) || exclude.contains(&e) || !seen.insert(e) {
            continue;
        }
        out.push(e);
    }
    Ok(out)
}

/// Everything one stage (train, validation, test) feeds the model.
#[derive(Debug, Clone)]
pub struct StageInput {
    pub a_hat: SymMatrix,
    pub x: Mat,
    pub z: Mat,
}

fn with_self_loops(g: &Graph) -> Graph {
    let mut edges = g.edge_vec();
    edges.extend((0..g.n()).map(|v| (v, v)));
    Graph::new(g.n(), edges).expect("valid ids")
}

pub fn prepare_stage(g: &Graph, cfg: &PegConfig) -> Result<StageInput> {
    let pe = encode(g, &cfg.pe, cfg.seed)?;
    let z = pe.z;
    let a_hat = if cfg.add_self_loops { normalized_adjacency(&with_self_loops(g))? } else { normalized_adjacency(g)? };
    let mode = match (cfg.features, g.features()) {
        (FeatureMode::Auto, Some(_)) => FeatureMode::Given,
        (FeatureMode::Auto, None) => FeatureMode::PeProjector,
        (m, _) => m,
    };
    let x = match mode {
        FeatureMode::Given => g
            .features()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("feature mode 'given' on a graph without features".into()))?,
        FeatureMode::Ones => Mat::filled(g.n(), 1, 1.0),
        FeatureMode::Pe => z.clone(),
        FeatureMode::PeProjector => z.matmul(&z.transpose()),
        FeatureMode::Auto => unreachable!("resolved above"),
    };
    Ok(StageInput { a_hat, x, z })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainMetrics {
    /// Entry 0 is the loss at initialization; entry `e` is the loss on
    /// epoch `e`'s batch after its update.
    pub train_loss: Vec<f64>,
    pub val_auc: f64,
    pub test_auc: f64,
    pub best_epoch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: PegModel,
    pub metrics: TrainMetrics,
}

pub fn evaluate_auc(model: &PegModel, stage: &StageInput, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Result<f64> {
    let xhat = model.forward(&stage.a_hat, &stage.x, &stage.z)?;
    let sp: Vec<f64> = pos.iter().map(|&(u, v)| model.link_logit(&xhat, &stage.z, u, v)).collect::<Result<_>>()?;
    let sn: Vec<f64> = neg.iter().map(|&(u, v)| model.link_logit(&xhat, &stage.z, u, v)).collect::<Result<_>>()?;
    auc(&sp, &sn)
}

/// Builds a model sized for `cfg` and the feature width of `stage`.
pub fn model_for(cfg: &PegConfig, stage: &StageInput) -> Result<PegModel> {
    PegModel::init(stage.x.cols(), &cfg.dims(), stage.z.cols(), &cfg.arch, cfg.seed)
}

/// Full-batch training with Adam and per-epoch negative resampling. The
/// model with the best validation AUC is kept and scored on the test stage.
pub fn train_link_predictor(model: PegModel, split: &LinkSplit, cfg: &PegConfig) -> Result<TrainedModel> {
    if split.train_pos.is_empty() || split.val_pos.is_empty() || split.test_pos.is_empty() {
        return Err(Error::EmptySplit("a split stage has no positives".into()));
    }
    let train = prepare_stage(&split.train_graph, cfg)?;
    let val = prepare_stage(&split.val_graph, cfg)?;
    let test = prepare_stage(&split.test_graph, cfg)?;

    // With folds, epoch e trains on fold e mod k over the graph without it.
    let fold_stages: Vec<(Vec<(usize, usize)>, StageInput)> = match cfg.folds {
        Some(k) if k >= 2 => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf01d);
            let mut order = split.train_pos.clone();
            order.shuffle(&mut rng);
            let mut out = Vec::with_capacity(k);
            for f in 0..k {
                let fold: Vec<_> = order.iter().skip(f).step_by(k).copied().collect();
                let mut degrees = split.train_graph.degrees().degrees;
                let mut drop = HashSet::new();
                for &(u, v) in &fold {
                    if degrees[u] > 1 && degrees[v] > 1 {
                        degrees[u] -= 1;
                        degrees[v] -= 1;
                        drop.insert((u, v));
                    }
                }
                let g = remove_edges(&split.train_graph, &drop)?;
                out.push((fold, prepare_stage(&g, cfg)?));
            }
            out
        }
        _ => Vec::new(),
    };

    let mut exclude: HashSet<(usize, usize)> = split.val_neg.iter().copied().collect();
    exclude.extend(split.test_neg.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));

    let mut model = model;
    let mut params = model.to_flat();
    let mut adam = crate::nn::Adam::new(params.len(), cfg.lr);
    let mut train_loss = Vec::with_capacity(cfg.epochs + 1);
    let mut best = (f64::NEG_INFINITY, model.clone(), 0usize);

    for epoch in 0..cfg.epochs {
        let (pos, stage) = if fold_stages.is_empty() {
            (&split.train_pos, &train)
        } else {
            let (p, s) = &fold_stages[epoch % fold_stages.len()];
            (p, s)
        };
        let neg = sample_non_edges(&split.full, pos.len(), &exclude, &mut rng)?;
        let (loss, grad) = model.loss_and_grad(&stage.a_hat, &stage.x, &stage.z, pos, &neg)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        if epoch == 0 {
            train_loss.push(loss);
        }
        adam.step(&mut params, &grad);
        model.read_flat(&params);
        train_loss.push(model.loss(&stage.a_hat, &stage.x, &stage.z, pos, &neg)?);
        if (epoch + 1) % cfg.eval_every.max(1) == 0 || epoch + 1 == cfg.epochs {
            let v = evaluate_auc(&model, &val, &split.val_pos, &split.val_neg)?;
            if v > best.0 {
                best = (v, model.clone(), epoch + 1);
            }
        }
    }
    if cfg.epochs == 0 {
        best = (evaluate_auc(&model, &val, &split.val_pos, &split.val_neg)?, model.clone(), 0);
    }
    let (val_auc, model, best_epoch) = best;
    let test_auc = evaluate_auc(&model, &test, &split.test_pos, &split.test_neg)?;
    Ok(TrainedModel {
        model,
        metrics: TrainMetrics { train_loss, val_auc, test_auc, best_epoch, seed: cfg.seed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{complete_graph, normalized_adjacency, random_connected_graph};
    use crate::oracles::finite_diff;
    use crate::spectral::{OrthogonalMatrix, Permutation};

    fn setup(seed: u64) -> (Graph, SymMatrix, Mat, Mat) {
        let g = random_connected_graph(10, 0.3, seed).unwrap();
        let a = normalized_adjacency(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = Mat::random_gaussian(10, 3, &mut rng);
        let z = Mat::random_gaussian(10, 2, &mut rng);
        (g, a, x, z)
    }

    fn live_head(mut m: PegModel, seed: u64) -> PegModel {
        let dims = m.head.dims();
        m.head = Mlp::random_with_bias(&dims, Activation::Relu, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        m
    }

    fn constant_phi(c: f64) -> Mlp {
        let mut phi = Mlp::random(&[1, 4, 1], Activation::Tanh, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        phi.layers[1].w = Mat::zeros(1, 4);
        phi.layers[1].b = vec![c];
        phi
    }

    #[test]
    fn constant_phi_is_gcn() {
        let (_, a, x, z) = setup(1);
        let w = Mat::random_gaussian(3, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let layer = PegLayer::new(w.clone(), constant_phi(1.0), Activation::Relu, XiMode::Distance).unwrap();
        let got = layer.forward(&a, &x, &z).unwrap();
        let want = a.matmul(&x).matmul(&w).map(|t| t.max(0.0));
        assert!(got.sub(&want).max_abs() < 1e-12);
    }

    #[test]
    fn identical_z_scales_by_phi_zero() {
        let (_, a, x, _) = setup(2);
        let z = Mat::filled(10, 2, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = PegLayer::init(3, 4, 5, Activation::Identity, XiMode::Distance, &mut rng);
        let phi0 = layer.phi.eval_scalar(0.0);
        let got = layer.forward(&a, &x, &z).unwrap();
        let want = a.matmul(&x).matmul(&layer.w).scale(phi0);
        assert!(got.sub(&want).max_abs() < 1e-12);
    }

    #[test]
    fn layer_permutation_equivariance() {
        let (g, a, x, z) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = PegLayer::init(3, 4, 5, Activation::Tanh, XiMode::Distance, &mut rng);
        let perm = Permutation::random(10, &mut rng);
        let out = layer.forward(&a, &x, &z).unwrap();
        let a2 = normalized_adjacency(&g.permuted(&perm.inverse())).unwrap();
        assert!(a2.sub(&a.permute(&perm)).max_abs() < 1e-15);
        let out2 = layer.forward(&a2, &perm.apply_rows(&x), &perm.apply_rows(&z)).unwrap();
        assert!(out2.sub(&perm.apply_rows(&out)).max_abs() < 1e-9);
    }

    #[test]
    fn orthogonal_invariance_and_shapes() {
        let (_, a, x, z) = setup(4);
        let arch = PegArch::default();
        let model = live_head(PegModel::init(3, &[5, 6], 2, &arch, 7).unwrap(), 1);
        let out = model.forward(&a, &x, &z).unwrap();
        assert_eq!(out.shape(), (10, 6));
        let q = OrthogonalMatrix::random(2, &mut ChaCha8Rng::seed_from_u64(9));
        let zq = z.matmul(q.as_mat());
        let out_q = model.forward(&a, &x, &zq).unwrap();
        assert!(out.sub(&out_q).max_abs() < 1e-9);
        let l1 = model.link_logit(&out, &z, 1, 4).unwrap();
        let l2 = model.link_logit(&out_q, &zq, 1, 4).unwrap();
        assert!(l1 != 0.0 && (l1 - l2).abs() < 1e-10);
    }

    #[test]
    fn single_layer_model_matches_layer() {
        let (_, a, x, z) = setup(5);
        let model = PegModel::init(3, &[4], 2, &PegArch::default(), 1).unwrap();
        let (y, zz) = peg_layer_forward(&model.layers[0], &a, &x, &z).unwrap();
        assert_eq!(y, model.forward(&a, &x, &z).unwrap());
        assert_eq!(zz, z);
    }

    #[test]
    fn logit_symmetry_and_zero_head() {
        let (_, a, x, z) = setup(6);
        let model = live_head(PegModel::init(3, &[4], 2, &PegArch::default(), 2).unwrap(), 2);
        let xhat = model.forward(&a, &x, &z).unwrap();
        assert_eq!(model.link_logit(&xhat, &z, 2, 7).unwrap(), model.link_logit(&xhat, &z, 7, 2).unwrap());
        let fresh = PegModel::init(3, &[4], 2, &PegArch::default(), 2).unwrap();
        let scores = fresh.logits(&a, &x, &z, &[(0, 1), (2, 7), (3, 3)]).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
        let mut zero = model.zero_head();
        zero.head.layers.last_mut().unwrap().b[0] = 0.25;
        assert_eq!(zero.link_logit(&xhat, &z, 2, 7).unwrap(), 0.25);
    }

    #[test]
    fn constant_example() {
        let c = peg_stability_constant(2.0, 1.0, 3.0, 1.0, 0.5, 1.0).unwrap();
        assert!((c - 16.0).abs() < 1e-12);
        assert_eq!(peg_stability_constant(0.0, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
        let first = |w| peg_stability_constant(2.0, 1.0, 3.0, 1.0, 0.5, w).unwrap() - 6.0;
        assert!((first(2.0) - 2.0 * first(1.0)).abs() < 1e-12);
        assert_eq!(peg_stability_constant(f64::INFINITY, 1.0, 1.0, 1.0, 1.0, 1.0), Err(Error::InfiniteDelta));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, a, x, z) = setup(7);
        for (head_input, xi_mode, psi) in [
            (HeadInput::InnerProduct, XiMode::Distance, Activation::Tanh),
            (HeadInput::Hadamard, XiMode::InnerProduct, Activation::Tanh),
        ] {
            let arch = PegArch { phi_hidden: 3, head_hidden: 4, psi, xi_mode, head_input };
            let model = live_head(PegModel::init(3, &[4, 3], 2, &arch, 11).unwrap(), 3);
            let pos = [(0, 1), (2, 5), (3, 9)];
            let neg = [(0, 7), (4, 8)];
            let (_, grad) = model.loss_and_grad(&a, &x, &z, &pos, &neg).unwrap();
            let theta = model.to_flat();
            let fd = finite_diff(
                |t| {
                    let mut m = model.clone();
                    m.read_flat(t);
                    m.loss(&a, &x, &z, &pos, &neg).unwrap()
                },
                &theta,
                1e-5,
            )
            .unwrap();
            for (g, f) in grad.iter().zip(&fd) {
                assert!((g - f).abs() <= 1e-3 * f.abs().max(1e-3), "{g} vs {f}");
            }
        }
    }

    #[test]
    fn split_is_disjoint() {
        let g = crate::graph::sbm_generate(&[30, 30], 0.3, 0.1, 4).unwrap();
        let labels = crate::graph::block_labels(&[30, 30]);
        let s = split_links(&g, 0.05, 0.1, Some(&labels), 1).unwrap();
        for &(u, v) in s.val_pos.iter().chain(&s.test_pos) {
            assert_eq!(labels[u], labels[v]);
            assert!(!s.train_graph.has_edge(u, v));
        }
        for &(u, v) in &s.test_pos {
            assert!(s.test_graph.has_edge(u, v));
        }
        for &(u, v) in &s.val_pos {
            assert!(!s.test_graph.has_edge(u, v));
        }
        for &(u, v) in s.val_neg.iter().chain(&s.test_neg) {
            assert!(!g.has_edge(u, v));
        }
        assert!(s.train_graph.degrees().degrees.iter().all(|&d| d > 0));
        assert!(split_links(&complete_graph(2), 0.05, 0.1, None, 1).is_err());
    }
}
