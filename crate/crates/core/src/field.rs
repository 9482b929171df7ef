//! Anything that can be integrated or scored as a velocity field.

use ndarray::{Array2, ArrayView2};

use crate::error::Result;
use crate::net::VectorFieldNet;

/// `s(x, t, d)` evaluated for every row of `x` at a shared `t` and `d`.
pub trait VelocityField: Sync {
    fn velocity(&self, x: ArrayView2<f64>, t: f64, d: f64) -> Result<Array2<f64>>;
}

impl VelocityField for VectorFieldNet {
    fn velocity(&self, x: ArrayView2<f64>, t: f64, d: f64) -> Result<Array2<f64>> {
        self.forward_uniform(x, t, d)
    }
}

impl<F: VelocityField> VelocityField for &F {
    fn velocity(&self, x: ArrayView2<f64>, t: f64, d: f64) -> Result<Array2<f64>> {
        (**self).velocity(x, t, d)
    }
}

/// Same velocity everywhere.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn velocity(&self, x: ArrayView2<f64>, _t: f64, _d: f64) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn(x.raw_dim(), |(_, j)| self.0[j]))
    }
}

/// `v(x) = rate * x`.
#[derive(Debug, Clone, Copy)]
pub struct LinearField(pub f64);

impl VelocityField for LinearField {
    fn velocity(&self, x: ArrayView2<f64>, _t: f64, _d: f64) -> Result<Array2<f64>> {
        Ok(x.mapv(|v| self.0 * v))
    }
}

/// Wraps a closure `(row, t, d) -> velocity row`.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, f64) -> Vec<f64> + Sync,
{
    fn velocity(&self, x: ArrayView2<f64>, t: f64, d: f64) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let v = (self.0)(&row.to_vec(), t, d);
            for (j, vj) in v.into_iter().enumerate() {
                out[[i, j]] = vj;
            }
        }
        Ok(out)
    }
}
