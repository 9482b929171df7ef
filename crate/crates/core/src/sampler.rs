//! Fixed-step generation by integrating a velocity field from source samples.

use std::io::Write;

use ndarray::Array2;

use crate::distributions::SampleBatch;
use crate::error::{Error, Result};
use crate::field::VelocityField;

/// States visited by a fixed-step integration, `n_steps + 1` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Array2<f64>>,
    pub times: Vec<f64>,
    /// Step-size input the field was queried with (0 for plain Euler).
    pub step_input: f64,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn start(&self) -> &Array2<f64> {
        &self.states[0]
    }

    pub fn end(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn endpoint(&self) -> SampleBatch {
        SampleBatch::new(self.end().clone()).expect("states are finite")
    }

    /// CSV rows `sample_id,step,t,coord0,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.start().ncols();
        write!(w, "sample_id,step,t")?;
        for k in 0..dim {
            write!(w, ",coord{k}")?;
        }
        writeln!(w)?;
        for sample in 0..self.start().nrows() {
            for (step, (state, t)) in self.states.iter().zip(&self.times).enumerate() {
                write!(w, "{sample},{step},{t}")?;
                for v in state.row(sample) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn integrate<F: VelocityField>(field: &F, x0: &SampleBatch, n_steps: usize, step_input: f64) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::param("n_steps", "need at least one step"));
    }
    let h = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut x = x0.as_array().clone();
    states.push(x.clone());
    times.push(0.0);
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let v = field.velocity(x.view(), t, step_input)?;
        x.scaled_add(h, &v);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sampler state",
                step: k as u64,
            });
        }
        states.push(x.clone());
        times.push((k + 1) as f64 / n_steps as f64);
    }
    Ok(Trajectory {
        states,
        times,
        step_input,
    })
}

/// `x <- x + v(x, t, 0) / n` for `t = 0, 1/n, ..., (n-1)/n`.
pub fn euler_sample<F: VelocityField>(field: &F, x0: &SampleBatch, n_steps: usize) -> Result<Trajectory> {
    integrate(field, x0, n_steps, 0.0)
}

/// Output of [`shortcut_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutSample {
    pub trajectory: Trajectory,
    /// `1 / n_steps` was not a trained step size.
    pub extrapolated: bool,
}

/// `n_steps` updates `x <- x + d s(x, t, d)` with `d = 1 / n_steps`.
/// Step sizes outside `grid` are still used but flagged.
pub fn shortcut_sample<F: VelocityField>(field: &F, x0: &SampleBatch, n_steps: usize, grid: &[f64]) -> Result<ShortcutSample> {
    if n_steps == 0 {
        return Err(Error::param("n_steps", "need at least one step"));
    }
    let d = 1.0 / n_steps as f64;
    let extrapolated = !grid.iter().any(|g| (g - d).abs() < 1e-12);
    let trajectory = integrate(field, x0, n_steps, d)?;
    Ok(ShortcutSample {
        trajectory,
        extrapolated,
    })
}

/// How a trained network is turned into samples.
#[derive(Debug, Clone, PartialEq)]
pub enum Integrator {
    /// Plain Euler on the flow field (`d = 0`).
    Euler,
    /// Shortcut steps `d = 1/n` when `1/n` is in the grid, otherwise Euler
    /// on the flow field.
    Shortcut(Vec<f64>),
}

impl Integrator {
    pub fn sample<F: VelocityField>(&self, field: &F, x0: &SampleBatch, n_steps: usize) -> Result<Trajectory> {
        match self {
            Integrator::Euler => euler_sample(field, x0, n_steps),
            Integrator::Shortcut(grid) => {
                let d = 1.0 / n_steps as f64;
                if grid.iter().any(|g| (g - d).abs() < 1e-12) {
                    Ok(shortcut_sample(field, x0, n_steps, grid)?.trajectory)
                } else {
                    euler_sample(field, x0, n_steps)
                }
            }
        }
    }
}
