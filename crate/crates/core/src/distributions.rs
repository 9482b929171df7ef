//! Identity-covariance Gaussian mixtures used as source and target
//! distributions of the 2-D benchmark.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A batch of `B` points in `D` dimensions, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch(Array2<f64>);

impl SampleBatch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Empty("sample batch"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("data", "non-finite entry in sample batch"));
        }
        Ok(Self(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::Empty("sample batch"))?;
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("rows of length {dim}"),
                found: format!("row of length {}", bad.len()),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((rows.len(), dim), flat).expect("shape checked"))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// New batch whose row `i` is row `idx[i]` of `self`.
    pub fn select_rows(&self, idx: &[usize]) -> SampleBatch {
        SampleBatch(self.0.select(ndarray::Axis(0), idx))
    }
}

/// `p(x) = sum_i w_i N(x | mu_i, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(components: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        let dim = components
            .first()
            .map(|(_, m)| m.len())
            .ok_or_else(|| Error::InvalidMixture("no components".into()))?;
        if dim == 0 {
            return Err(Error::InvalidMixture("zero-dimensional means".into()));
        }
        let mut weights = Vec::with_capacity(components.len());
        let mut means = Vec::with_capacity(components.len());
        for (w, mu) in components {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidMixture(format!("weight {w} is not strictly positive")));
            }
            if mu.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "mean of length {} in a {dim}-dimensional mixture",
                    mu.len()
                )));
            }
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture("non-finite mean".into()));
            }
            weights.push(w);
            means.push(mu);
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { dim, weights, means })
    }

    /// Equal-weight mixture over the given means.
    pub fn uniform(means: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(means.into_iter().map(|m| (w, m)).collect())
    }

    /// Four unit Gaussians at `(±4, ±4)`.
    pub fn four_corners() -> Self {
        Self::uniform(vec![
            vec![-4.0, 4.0],
            vec![4.0, 4.0],
            vec![-4.0, -4.0],
            vec![4.0, -4.0],
        ])
        .expect("valid mixture")
    }

    /// Two unit Gaussians at `(-4, 0)` and `(4, 0)`.
    pub fn two_modes() -> Self {
        Self::uniform(vec![vec![-4.0, 0.0], vec![4.0, 0.0]]).expect("valid mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Index of the component selected by a uniform draw `u` in `[0, 1)`.
    fn component_for(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Draw `n` i.i.d. points.
    ///
    /// Per point the generator is consumed as: one uniform for the component,
    /// then `ceil(D / 2)` Box-Muller pairs (two uniforms each) for the noise.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> SampleBatch {
        self.sample_labeled(n, rng).0
    }

    /// Like [`sample`](Self::sample) but also returns each point's component.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (SampleBatch, Vec<usize>) {
        assert!(n >= 1, "sample size must be at least 1");
        let mut data = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for mut row in data.rows_mut() {
            let c = self.component_for(rng.random::<f64>());
            labels.push(c);
            let mean = &self.means[c];
            let mut k = 0;
            while k < self.dim {
                let (z0, z1) = box_muller(rng);
                row[k] = mean[k] + z0;
                if k + 1 < self.dim {
                    row[k + 1] = mean[k + 1] + z1;
                }
                k += 2;
            }
        }
        (SampleBatch(data), labels)
    }

    /// `log p(x)` with log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "point dimension does not match mixture");
        let log_norm = -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, mu)| {
                let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() + log_norm - 0.5 * sq
            })
            .collect();
        log_sum_exp(&terms)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Two independent standard normals from two uniforms.
pub fn box_muller<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    // 1 - U lies in (0, 1], keeping the log finite.
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}
