//! Small neural building blocks with hand-written gradients and certified
//! Lipschitz upper bounds.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::graph::SymMatrix;
use crate::spectral::{operator_norm, sym_eig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at `x`. ReLU'(0) is taken as 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

/// Affine layer `y = W x + b` with `W` of shape out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Layer { w: Mat::zeros(output, input), b: vec![0.0; output] }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }
}

/// Multilayer perceptron. The activation sits between layers; the last
/// layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Gradients with the same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Layer>,
}

/// Parameters laid out as one flat vector: per layer, `W` row-major then `b`.
pub trait FlatParams {
    fn num_params(&self) -> usize;
    fn write_flat(&self, out: &mut Vec<f64>);
    /// Reads parameters from the front of `src`, returns how many were used.
    fn read_flat(&mut self, src: &[f64]) -> usize;

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.write_flat(&mut v);
        v
    }
}

fn layers_num(layers: &[Layer]) -> usize {
    layers.iter().map(|l| l.w.rows() * l.w.cols() + l.b.len()).sum()
}

fn layers_write(layers: &[Layer], out: &mut Vec<f64>) {
    for l in layers {
        out.extend_from_slice(l.w.as_slice());
        out.extend_from_slice(&l.b);
    }
}

fn layers_read(layers: &mut [Layer], src: &[f64]) -> usize {
    let mut k = 0;
    for l in layers {
        let nw = l.w.rows() * l.w.cols();
        l.w.as_mut_slice().copy_from_slice(&src[k..k + nw]);
        k += nw;
        let nb = l.b.len();
        l.b.copy_from_slice(&src[k..k + nb]);
        k += nb;
    }
    k
}

impl FlatParams for Mlp {
    fn num_params(&self) -> usize {
        layers_num(&self.layers)
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        layers_write(&self.layers, out)
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        layers_read(&mut self.layers, src)
    }
}

impl FlatParams for MlpGrad {
    fn num_params(&self) -> usize {
        layers_num(&self.layers)
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        layers_write(&self.layers, out)
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        layers_read(&mut self.layers, src)
    }
}

impl MlpGrad {
    pub fn zeros_like(m: &Mlp) -> Self {
        MlpGrad { layers: m.layers.iter().map(|l| Layer::zeros(l.input_dim(), l.output_dim())).collect() }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.add_assign_scaled(&b.w, 1.0);
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
    }
}

/// Intermediate values kept by the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("an MLP needs at least one layer".into()));
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
        for l in &layers {
            if l.b.len() != l.output_dim() {
                return Err(Error::DimMismatch("bias length differs from layer width".into()));
            }
            if !l.w.is_finite() || l.b.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("MLP parameters".into()));
            }
        }
        Ok(Mlp { layers, activation })
    }

    /// Gaussian weights with variance `gain²/fan_in`, zero biases.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], activation: Activation, gain: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let s = gain / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
                Layer { w: Mat::from_vec(w[1], w[0], data).expect("shape"), b: vec![0.0; w[1]] }
            })
            .collect();
        Mlp { layers, activation }
    }

    /// Like [`Mlp::random`] with small Gaussian biases as well.
    pub fn random_with_bias<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut m = Mlp::random(dims, activation, gain, rng);
        for l in &mut m.layers {
            l.b.iter_mut().for_each(|b| *b = 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        m
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.output_dim()));
        d
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        let mut cache = MlpCache { inputs: Vec::new(), pre: Vec::new() };
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = l.w.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(&l.b) {
                *zi += bi;
            }
            cache.inputs.push(h);
            h = if k == last { z.clone() } else { z.iter().map(|&v| self.activation.apply(v)).collect() };
            cache.pre.push(z);
        }
        Ok((h, cache))
    }

    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimMismatch(format!(
                "upstream has {} entries, network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads = MlpGrad::zeros_like(self);
        let mut g = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            if k != last {
                for (gi, &zi) in g.iter_mut().zip(&cache.pre[k]) {
                    *gi *= self.activation.derivative(zi);
                }
            }
            let input = &cache.inputs[k];
            let gw = &mut grads.layers[k].w;
            for (i, &gi) in g.iter().enumerate() {
                if gi == 0.0 {
                    continue;
                }
                for (w, &xj) in gw.row_mut(i).iter_mut().zip(input) {
                    *w = gi * xj;
                }
            }
            grads.layers[k].b.copy_from_slice(&g);
            g = self.layers[k].w.t_matvec(&g);
        }
        Ok((grads, g))
    }

    /// Scalar-to-scalar convenience for one-dimensional networks.
    pub fn eval_scalar(&self, x: f64) -> f64 {
        mlp_forward(self, &[x]).expect("scalar network")[0]
    }
}

pub fn mlp_forward(m: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    Ok(m.forward_cached(x)?.0)
}

/// Parameter gradients and input gradient of `⟨upstream, m(x)⟩`.
pub fn mlp_grad(m: &Mlp, x: &[f64], upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
    let (_, cache) = m.forward_cached(x)?;
    m.backward(&cache, upstream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertMethod {
    WeightProduct,
    SplineDerivative,
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCert {
    pub value: f64,
    pub method: CertMethod,
}

/// Largest singular value from the Jacobi spectrum of the smaller Gram
/// matrix, never below the power-iteration estimate. Falls back to the
/// Frobenius norm, which is always an upper bound.
pub fn certified_opnorm(w: &Mat) -> f64 {
    let gram = if w.rows() < w.cols() { w.matmul(&w.transpose()) } else { w.t_matmul(w) };
    let exact = SymMatrix::from_mat(&gram)
        .and_then(|g| sym_eig(&g))
        .map(|e| e.values.last().copied().unwrap_or(0.0).max(0.0).sqrt());
    match exact {
        Ok(v) => v.max(operator_norm(w).unwrap_or(0.0)),
        Err(_) => w.frobenius(),
    }
}

/// `Π_k ‖W_k‖_op` times the activation's Lipschitz constant per hidden layer.
pub fn lipschitz_upper(m: &Mlp) -> LipschitzCert {
    let hidden = m.layers.len().saturating_sub(1) as i32;
    let value = m.layers.iter().map(|l| certified_opnorm(&l.w)).product::<f64>()
        * m.activation.lipschitz().powi(hidden);
    LipschitzCert { value, method: CertMethod::WeightProduct }
}

/// Piecewise cubic on `[0, 2]` with uniform pieces. Piece `k` is
/// `a + b t + c t² + d t³` with `t = x − 2k/N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSpline {
    pub coeffs: Vec<[f64; 4]>,
}

pub const SPLINE_DOMAIN: (f64, f64) = (0.0, 2.0);

impl CubicSpline {
    pub fn new(coeffs: Vec<[f64; 4]>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Empty("spline needs at least one piece".into()));
        }
        Ok(CubicSpline { coeffs })
    }

    pub fn constant(value: f64, pieces: usize) -> Self {
        CubicSpline { coeffs: vec![[value, 0.0, 0.0, 0.0]; pieces.max(1)] }
    }

    /// C¹ Hermite interpolant through `values` with end slopes `slopes` at the
    /// `N + 1` uniform knots.
    pub fn hermite(values: &[f64], slopes: &[f64]) -> Result<Self> {
        if values.len() < 2 || values.len() != slopes.len() {
            return Err(Error::DimMismatch("hermite spline needs matching knot data".into()));
        }
        let pieces = values.len() - 1;
        let h = (SPLINE_DOMAIN.1 - SPLINE_DOMAIN.0) / pieces as f64;
        let coeffs = (0..pieces)
            .map(|k| {
                let (y0, y1, m0, m1) = (values[k], values[k + 1], slopes[k], slopes[k + 1]);
                let c = (3.0 * (y1 - y0) / h - 2.0 * m0 - m1) / h;
                let d = (2.0 * (y0 - y1) / h + m0 + m1) / (h * h);
                [y0, m0, c, d]
            })
            .collect();
        Ok(CubicSpline { coeffs })
    }

    pub fn random<R: Rng + ?Sized>(pieces: usize, scale: f64, rng: &mut R) -> Self {
        let values: Vec<f64> = (0..=pieces).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let slopes: Vec<f64> = (0..=pieces).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        CubicSpline::hermite(&values, &slopes).expect("valid knots")
    }

    pub fn num_pieces(&self) -> usize {
        self.coeffs.len()
    }

    pub fn piece_width(&self) -> f64 {
        (SPLINE_DOMAIN.1 - SPLINE_DOMAIN.0) / self.num_pieces() as f64
    }

    /// Piece index and local coordinate of a clamped input.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let x = x.clamp(SPLINE_DOMAIN.0, SPLINE_DOMAIN.1);
        let h = self.piece_width();
        let k = (((x - SPLINE_DOMAIN.0) / h).floor() as usize).min(self.num_pieces() - 1);
        (k, x - SPLINE_DOMAIN.0 - k as f64 * h)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (k, t) = self.locate(x);
        let [a, b, c, d] = self.coeffs[k];
        a + t * (b + t * (c + t * d))
    }

    /// Derivative in `x`; zero outside the domain where the input is clamped.
    pub fn derivative(&self, x: f64) -> f64 {
        if !(SPLINE_DOMAIN.0..=SPLINE_DOMAIN.1).contains(&x) {
            return 0.0;
        }
        let (k, t) = self.locate(x);
        let [_, b, c, d] = self.coeffs[k];
        b + t * (2.0 * c + 3.0 * t * d)
    }

    /// `max |s'|` over the domain from the closed-form extrema of each
    /// piece's quadratic derivative.
    pub fn lipschitz(&self) -> f64 {
        let h = self.piece_width();
        let mut best = 0.0f64;
        for &[_, b, c, d] in &self.coeffs {
            let dv = |t: f64| b + 2.0 * c * t + 3.0 * d * t * t;
            best = best.max(dv(0.0).abs()).max(dv(h).abs());
            if d != 0.0 {
                let t = -c / (3.0 * d);
                if (0.0..=h).contains(&t) {
                    best = best.max(dv(t).abs());
                }
            }
        }
        best
    }

    /// `max |s|` over the domain: endpoints plus stationary points per piece.
    pub fn bound(&self) -> f64 {
        let h = self.piece_width();
        let mut best = 0.0f64;
        for &[a, b, c, d] in &self.coeffs {
            let v = |t: f64| a + t * (b + t * (c + t * d));
            best = best.max(v(0.0).abs()).max(v(h).abs());
            for t in quadratic_roots(3.0 * d, 2.0 * c, b) {
                if (0.0..=h).contains(&t) {
                    best = best.max(v(t).abs());
                }
            }
        }
        best
    }

    pub fn lipschitz_cert(&self) -> LipschitzCert {
        LipschitzCert { value: self.lipschitz(), method: CertMethod::SplineDerivative }
    }

    /// `∂s(x)/∂coeffs` for the piece containing `x`: `(piece, [1, t, t², t³])`.
    pub fn coeff_grad(&self, x: f64) -> (usize, [f64; 4]) {
        let (k, t) = self.locate(x);
        (k, [1.0, t, t * t, t * t * t])
    }
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a == 0.0 {
        if b == 0.0 {
            return vec![];
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return vec![];
    }
    let s = disc.sqrt();
    vec![(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)]
}

impl FlatParams for CubicSpline {
    fn num_params(&self) -> usize {
        4 * self.coeffs.len()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for c in &self.coeffs {
            out.extend_from_slice(c);
        }
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        for (k, c) in self.coeffs.iter_mut().enumerate() {
            c.copy_from_slice(&src[4 * k..4 * k + 4]);
        }
        4 * self.coeffs.len()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
