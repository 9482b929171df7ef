//! The learnable velocity field `s(x, t, d)`: a small SiLU MLP over the
//! point and Fourier features of time and step size, with hand-written
//! reverse mode, Adam and an EMA shadow.
//!
//! `d = 0` is the plain flow-matching field `v(x, t)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    /// Sinusoidal frequencies per scalar input; each contributes a sin and a cos.
    pub features: usize,
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            data_dim: 2,
            features: 8,
            hidden: vec![128, 128, 128],
        }
    }
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.data_dim + 4 * self.features
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`, applied as `h . W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All trainable tensors of the network; also used for gradients and
/// optimizer moments, which share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Dense>,
}

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Dense {
                    weight: Array2::zeros((i, o)),
                    bias: Array1::zeros(o),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat iteration: per layer, weights row-major then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn get(&self, idx: usize) -> f64 {
        *self.iter().nth(idx).expect("parameter index out of range")
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        *self.iter_mut().nth(idx).expect("parameter index out of range") = value;
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }
}

/// Activations kept by [`VectorFieldNet::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
struct ForwardCache {
    /// Input to each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct VectorFieldNet {
    arch: Architecture,
    params: Params,
    cache: Option<ForwardCache>,
}

impl PartialEq for VectorFieldNet {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Frequency of the `j`-th sinusoidal feature.
#[inline]
pub fn feature_frequency(j: usize) -> f64 {
    std::f64::consts::PI * (j + 1) as f64
}

impl VectorFieldNet {
    /// Fan-in scaled uniform hidden weights, zero biases, zero output layer.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut params = Params::zeros(&arch);
        let last = params.layers.len() - 1;
        for layer in &mut params.layers[..last] {
            let bound = (3.0 / layer.weight.nrows() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Self {
            arch,
            params,
            cache: None,
        }
    }

    pub fn from_params(arch: Architecture, params: Params) -> Result<Self> {
        if !Params::zeros(&arch).same_shape(&params) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", arch.layer_shapes()),
                found: format!(
                    "{:?}",
                    params.layers.iter().map(|l| l.weight.dim()).collect::<Vec<_>>()
                ),
            });
        }
        Ok(Self {
            arch,
            params,
            cache: None,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        self.cache = None;
        &mut self.params
    }

    fn check_inputs(&self, x: &ArrayView2<f64>, t: &[f64], d: &[f64]) -> Result<()> {
        if x.ncols() != self.arch.data_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", self.arch.data_dim),
                found: format!("{} columns", x.ncols()),
            });
        }
        if t.len() != x.nrows() || d.len() != x.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} time/step values", x.nrows()),
                found: format!("{} times, {} steps", t.len(), d.len()),
            });
        }
        Ok(())
    }

    /// Network input rows: `[x, sin(w t), cos(w t), sin(w d), cos(w d)]`.
    pub fn embed(&self, x: &ArrayView2<f64>, t: &[f64], d: &[f64]) -> Array2<f64> {
        let f = self.arch.features;
        let dim = self.arch.data_dim;
        let mut h = Array2::zeros((x.nrows(), self.arch.input_dim()));
        for (i, mut row) in h.rows_mut().into_iter().enumerate() {
            row.slice_mut(s![..dim]).assign(&x.row(i));
            for j in 0..f {
                let w = feature_frequency(j);
                row[dim + j] = (w * t[i]).sin();
                row[dim + f + j] = (w * t[i]).cos();
                row[dim + 2 * f + j] = (w * d[i]).sin();
                row[dim + 3 * f + j] = (w * d[i]).cos();
            }
        }
        h
    }

    fn forward_rows(&self, x: &ArrayView2<f64>, t: &[f64], d: &[f64], cache: Option<&mut ForwardCache>) -> Array2<f64> {
        let mut h = self.embed(x, t, d);
        let last = self.params.layers.len() - 1;
        let mut cache = cache;
        for (l, layer) in self.params.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if l == last {
                if let Some(c) = cache.as_deref_mut() {
                    c.inputs.push(h);
                }
                return z;
            }
            let next = z.mapv(silu);
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(h);
                c.pre.push(z);
            }
            h = next;
        }
        unreachable!("network has at least one layer")
    }

    /// Velocities for each row. Rows are evaluated in fixed-size chunks,
    /// concurrently when the `parallel` feature is on.
    pub fn forward(&self, x: ArrayView2<f64>, t: &[f64], d: &[f64]) -> Result<Array2<f64>> {
        self.check_inputs(&x, t, d)?;
        let chunks = par::row_chunks(x.nrows());
        let parts = par::map_range(chunks.len(), |c| {
            let r = chunks[c].clone();
            self.forward_rows(&x.slice(s![r.clone(), ..]), &t[r.clone()], &d[r], None)
        });
        let mut out = Array2::zeros((x.nrows(), self.arch.data_dim));
        for (r, part) in chunks.into_iter().zip(parts) {
            out.slice_mut(s![r, ..]).assign(&part);
        }
        Ok(out)
    }

    /// Same as [`forward`](Self::forward) with scalar `t` and `d` for every row.
    pub fn forward_uniform(&self, x: ArrayView2<f64>, t: f64, d: f64) -> Result<Array2<f64>> {
        let n = x.nrows();
        self.forward(x, &vec![t; n], &vec![d; n])
    }

    /// Forward pass that keeps activations for a following [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: ArrayView2<f64>, t: &[f64], d: &[f64]) -> Result<Array2<f64>> {
        self.check_inputs(&x, t, d)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.params.layers.len()),
            pre: Vec::with_capacity(self.params.layers.len()),
        };
        let out = self.forward_rows(&x, t, d, Some(&mut cache));
        self.cache = Some(cache);
        Ok(out)
    }

    /// Gradients of a scalar loss given `dLoss/dOutput` for the cached batch.
    /// Consumes the cache.
    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Result<Params> {
        let cache = self.cache.take().ok_or(Error::NoCachedForward)?;
        let rows = cache.inputs[0].nrows();
        if grad_out.dim() != (rows, self.arch.data_dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{}", self.arch.data_dim),
                found: format!("{}x{}", grad_out.nrows(), grad_out.ncols()),
            });
        }
        let n = self.params.layers.len();
        let mut grads: Vec<Dense> = Vec::with_capacity(n);
        let mut g = grad_out.clone();
        for l in (0..n).rev() {
            if l < n - 1 {
                Zip::from(&mut g).and(&cache.pre[l]).for_each(|gi, &z| *gi *= silu_grad(z));
            }
            let weight = cache.inputs[l].t().dot(&g);
            let bias = g.sum_axis(Axis(0));
            if l > 0 {
                g = g.dot(&self.params.layers[l].weight.t());
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok(Params { layers: grads })
    }

    pub fn has_cached_forward(&self) -> bool {
        self.cache.is_some()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_params(&mut w, &self.arch, &self.params)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let (arch, params) = read_params(&mut r)?;
        Self::from_params(arch, params)
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Params,
    pub second: Params,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 5e-4;

    pub fn new(like: &Params, lr: f64) -> Self {
        Self {
            first: like.zeros_like(),
            second: like.zeros_like(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. Non-finite gradients leave parameters and state untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        if !grads.same_shape(params) || !self.first.same_shape(params) {
            return Err(Error::ShapeMismatch {
                expected: "gradients shaped like parameters".into(),
                found: "mismatched layer shapes".into(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Exponential moving average of the live parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams {
    shadow: VectorFieldNet,
    pub decay: f64,
}

impl EmaParams {
    pub const DEFAULT_DECAY: f64 = 0.999;

    pub fn new(live: &VectorFieldNet, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "EMA decay must lie in [0, 1)");
        Self {
            shadow: VectorFieldNet::from_params(live.arch.clone(), live.params.clone()).expect("same shapes"),
            decay,
        }
    }

    pub fn from_shadow(shadow: VectorFieldNet, decay: f64) -> Self {
        Self { shadow, decay }
    }

    pub fn update(&mut self, live: &VectorFieldNet) {
        let decay = self.decay;
        for (s, &p) in self.shadow.params.iter_mut().zip(live.params.iter()) {
            *s = decay * *s + (1.0 - decay) * p;
        }
    }

    /// The shadow as an evaluable network.
    pub fn model(&self) -> &VectorFieldNet {
        &self.shadow
    }
}

const MAGIC: &[u8; 8] = b"MACFNET1";

/// Binary parameter layout, all integers and floats little-endian:
///
/// ```text
/// magic "MACFNET1"
/// u32 data_dim, u32 features, u32 n_layers
/// n_layers x (u32 fan_in, u32 fan_out)
/// per layer: fan_in*fan_out f64 weights (row-major), fan_out f64 biases
/// ```
pub fn write_params<W: Write>(w: &mut W, arch: &Architecture, params: &Params) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [arch.data_dim, arch.features, params.layers.len()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for l in &params.layers {
        w.write_all(&(l.weight.nrows() as u32).to_le_bytes())?;
        w.write_all(&(l.weight.ncols() as u32).to_le_bytes())?;
    }
    for v in params.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<(Architecture, Params)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut u32_buf = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf) as usize)
    };
    let data_dim = next_u32(r)?;
    let features = next_u32(r)?;
    let n_layers = next_u32(r)?;
    if n_layers == 0 {
        return Err(Error::Checkpoint("no layers".into()));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        shapes.push((next_u32(r)?, next_u32(r)?));
    }
    let hidden: Vec<usize> = shapes[..n_layers - 1].iter().map(|s| s.1).collect();
    let arch = Architecture {
        data_dim,
        features,
        hidden,
    };
    if arch.layer_shapes() != shapes {
        return Err(Error::Checkpoint(format!("inconsistent layer shapes {shapes:?}")));
    }
    let mut params = Params::zeros(&arch);
    let mut f64_buf = [0u8; 8];
    for v in params.iter_mut() {
        r.read_exact(&mut f64_buf)?;
        *v = f64::from_le_bytes(f64_buf);
    }
    Ok((arch, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            data_dim: 2,
            features: 3,
            hidden: vec![7, 5],
        }
    }

    fn randomized(arch: Architecture, seed: u64) -> VectorFieldNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = VectorFieldNet::new(arch, &mut rng);
        for v in net.params_mut().iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        net
    }

    fn random_inputs(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-3.0..3.0));
        let t = (0..n).map(|_| rng.random::<f64>()).collect();
        let d = (0..n).map(|_| rng.random::<f64>()).collect();
        (x, t, d)
    }

    /// Straightforward per-row loops over the same arithmetic.
    fn reference_forward(net: &VectorFieldNet, x: &[f64], t: f64, d: f64) -> Vec<f64> {
        let f = net.arch.features;
        let mut h: Vec<f64> = x.to_vec();
        for scalar in [t, d] {
            let ws: Vec<f64> = (0..f).map(feature_frequency).collect();
            h.extend(ws.iter().map(|w| (w * scalar).sin()));
            h.extend(ws.iter().map(|w| (w * scalar).cos()));
        }
        let n = net.params.layers.len();
        for (l, layer) in net.params.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.weight.ncols()];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for (i, hi) in h.iter().enumerate() {
                    acc += hi * layer.weight[[i, o]];
                }
                *zo = acc;
            }
            h = if l + 1 == n {
                z
            } else {
                z.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
            };
        }
        h
    }

    #[test]
    fn default_architecture_shapes() {
        let arch = Architecture::default();
        assert_eq!(arch.input_dim(), 34);
        assert_eq!(arch.layer_shapes(), vec![(34, 128), (128, 128), (128, 128), (128, 2)]);
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = VectorFieldNet::new(Architecture::default(), &mut rng);
        let (x, t, d) = random_inputs(33, 1);
        let out = net.forward(x.view(), &t, &d).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let net = randomized(small_arch(), 2);
        let x = Array2::from_shape_fn((5, 2), |(_, j)| [0.3, -1.2][j]);
        let out = net.forward(x.view(), &[0.4; 5], &[0.25; 5]).unwrap();
        for r in 1..5 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn forward_matches_reference_loops() {
        let net = randomized(small_arch(), 3);
        let (x, t, d) = random_inputs(150, 4);
        let out = net.forward(x.view(), &t, &d).unwrap();
        let mut cached = net.clone();
        let train_out = cached.forward_train(x.view(), &t, &d).unwrap();
        for i in 0..150 {
            let expected = reference_forward(&net, &[x[[i, 0]], x[[i, 1]]], t[i], d[i]);
            for k in 0..2 {
                assert!((out[[i, k]] - expected[k]).abs() < 1e-12);
                assert!((train_out[[i, k]] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_not_linear() {
        let net = randomized(small_arch(), 5);
        let a = array![[0.7, -0.4]];
        let b = array![[1.9, 2.2]];
        let fa = net.forward_uniform(a.view(), 0.3, 0.0).unwrap();
        let fb = net.forward_uniform(b.view(), 0.3, 0.0).unwrap();
        let fab = net.forward_uniform((&a + &b).view(), 0.3, 0.0).unwrap();
        assert!((&fab - &(fa + fb)).iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn shape_errors() {
        let mut net = randomized(small_arch(), 6);
        let x = Array2::zeros((3, 3));
        assert!(matches!(net.forward(x.view(), &[0.0; 3], &[0.0; 3]), Err(Error::ShapeMismatch { .. })));
        let x = Array2::zeros((3, 2));
        assert!(net.forward(x.view(), &[0.0; 2], &[0.0; 3]).is_err());
        assert!(matches!(net.backward(&Array2::zeros((3, 2))), Err(Error::NoCachedForward)));
        net.forward_train(x.view(), &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(net.backward(&Array2::zeros((4, 2))).is_err());
    }

    #[test]
    fn backward_requires_fresh_forward() {
        let mut net = randomized(small_arch(), 7);
        let (x, t, d) = random_inputs(4, 8);
        net.forward_train(x.view(), &t, &d).unwrap();
        net.backward(&Array2::ones((4, 2))).unwrap();
        assert!(matches!(net.backward(&Array2::ones((4, 2))), Err(Error::NoCachedForward)));
    }

    #[test]
    fn zero_loss_gradient_is_zero() {
        let mut net = randomized(small_arch(), 9);
        let (x, t, d) = random_inputs(6, 10);
        net.forward_train(x.view(), &t, &d).unwrap();
        let g = net.backward(&Array2::zeros((6, 2))).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_least_squares_gradient() {
        let arch = Architecture {
            data_dim: 2,
            features: 1,
            hidden: vec![],
        };
        let mut net = randomized(arch, 11);
        let (x, t, d) = random_inputs(9, 12);
        let y = Array2::from_shape_fn((9, 2), |(i, j)| (i as f64 * 0.3 - j as f64).sin());
        let out = net.forward_train(x.view(), &t, &d).unwrap();
        let b = 9.0;
        let grad_out = (&out - &y) * (2.0 / b);
        let g = net.backward(&grad_out).unwrap();
        // closed form: X^T (X w + b - y) 2 / B with X the embedded inputs
        let xe = net.embed(&x.view(), &t, &d);
        let resid = xe.dot(&net.params.layers[0].weight) + &net.params.layers[0].bias - &y;
        let expected_w = xe.t().dot(&resid) * (2.0 / b);
        let expected_b = resid.sum_axis(Axis(0)) * (2.0 / b);
        for (a, e) in g.layers[0].weight.iter().zip(expected_w.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in g.layers[0].bias.iter().zip(expected_b.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    fn loss_of(net: &VectorFieldNet, x: &Array2<f64>, t: &[f64], d: &[f64], y: &Array2<f64>) -> f64 {
        let out = net.forward(x.view(), t, d).unwrap();
        (&out - y).mapv(|v| v * v).sum() / x.nrows() as f64
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = randomized(Architecture { data_dim: 2, features: 4, hidden: vec![16, 16, 16] }, 13);
        let (x, t, d) = random_inputs(12, 14);
        let y = Array2::from_shape_fn((12, 2), |(i, j)| ((i + 2 * j) as f64).cos());
        let out = net.forward_train(x.view(), &t, &d).unwrap();
        let grad_out = (&out - &y) * (2.0 / 12.0);
        let g = net.backward(&grad_out).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = 1e-5;
        for _ in 0..100 {
            let idx = rng.random_range(0..net.params.len());
            let orig = net.params.get(idx);
            net.params.set(idx, orig + h);
            let lp = loss_of(&net, &x, &t, &d, &y);
            net.params.set(idx, orig - h);
            let lm = loss_of(&net, &x, &t, &d, &y);
            net.params.set(idx, orig);
            let fd = (lp - lm) / (2.0 * h);
            let an = g.get(idx);
            let rel = (an - fd).abs() / (an.abs() + fd.abs() + 1e-8);
            assert!(rel < 1e-4, "param {idx}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut net = randomized(small_arch(), 16);
        let before = net.params.clone();
        let mut adam = AdamState::new(&net.params, 5e-4);
        let zero = net.params.zeros_like();
        for _ in 0..5 {
            adam.step(net.params_mut(), &zero).unwrap();
        }
        assert_eq!(net.params, before);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn adam_constant_gradient_step_size_approaches_lr() {
        let mut p = Params { layers: vec![Dense { weight: array![[1.0, -1.0]], bias: array![0.0, 0.0] }] };
        let g = Params { layers: vec![Dense { weight: array![[0.3, -2.0]], bias: array![1e-3, -5.0] }] };
        let mut adam = AdamState::new(&p, 1e-3);
        let mut prev = p.clone();
        for _ in 0..2000 {
            prev = p.clone();
            adam.step(&mut p, &g).unwrap();
        }
        for ((a, b), gv) in p.iter().zip(prev.iter()).zip(g.iter()) {
            let delta = a - b;
            assert!((delta + 1e-3 * gv.signum()).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn adam_scalar_trace_matches_recurrence() {
        let gs = [0.5, -1.0, 2.0, 0.1, -0.3, 0.0, 4.0, -2.5, 1.5, 0.7];
        let mut p = Params { layers: vec![Dense { weight: array![[0.2]], bias: array![0.0] }] };
        let mut adam = AdamState::new(&p, 5e-4);
        let (mut theta, mut m, mut v) = (0.2f64, 0.0f64, 0.0f64);
        for (k, &g) in gs.iter().enumerate() {
            let grads = Params { layers: vec![Dense { weight: array![[g]], bias: array![0.0] }] };
            adam.step(&mut p, &grads).unwrap();
            let step = (k + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(step));
            let vh = v / (1.0 - 0.999f64.powi(step));
            theta -= 5e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((p.layers[0].weight[[0, 0]] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = Params { layers: vec![Dense { weight: array![[0.2]], bias: array![0.0] }] };
        let before = p.clone();
        let mut adam = AdamState::new(&p, 5e-4);
        let bad = Params { layers: vec![Dense { weight: array![[f64::NAN]], bias: array![0.0] }] };
        assert!(matches!(adam.step(&mut p, &bad), Err(Error::NonFiniteGradient)));
        assert_eq!(p, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn ema_zero_decay_copies_live() {
        let live = randomized(small_arch(), 17);
        let mut ema = EmaParams::new(&randomized(small_arch(), 18), 0.0);
        ema.update(&live);
        assert_eq!(ema.model().params(), live.params());
    }

    #[test]
    fn ema_converges_geometrically_to_constant_live() {
        let live = randomized(small_arch(), 19);
        let start = randomized(small_arch(), 20);
        let mut ema = EmaParams::new(&start, 0.9);
        for k in 1..=20 {
            ema.update(&live);
            let ratio = 0.9f64.powi(k);
            for ((s, l), s0) in ema.model().params().iter().zip(live.params().iter()).zip(start.params().iter()) {
                assert!(((s - l) - ratio * (s0 - l)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_scalar_trace_matches_recurrence() {
        let arch = Architecture { data_dim: 1, features: 0, hidden: vec![] };
        let mk = |w: f64| VectorFieldNet::from_params(arch.clone(), Params { layers: vec![Dense { weight: array![[w]], bias: array![0.0] }] }).unwrap();
        let mut ema = EmaParams::new(&mk(1.0), 0.999);
        let mut shadow = 1.0f64;
        for live in [3.0, -2.0, 0.5, 7.25, -1.0] {
            ema.update(&mk(live));
            shadow = 0.999 * shadow + (1.0 - 0.999) * live;
            assert!((ema.model().params().layers[0].weight[[0, 0]] - shadow).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = randomized(Architecture::default(), 21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.save(&path).unwrap();
        let back = VectorFieldNet::load(&path).unwrap();
        assert_eq!(back.arch(), net.arch());
        assert!(back.params().iter().zip(net.params().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 12 + 8 * 4 + 8 * net.params().len());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut bytes: &[u8] = b"NOTANETxxxxxxxxxxxxxxxxx";
        assert!(read_params(&mut bytes).is_err());
    }
}
