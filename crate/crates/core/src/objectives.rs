//! Training losses with their parameter gradients: weighted linear-path flow
//! matching and the shortcut objective (flow matching at `d = 0`,
//! self-consistency against an EMA bootstrap target, and optional one-step
//! supervision of selected pairs).

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{floor_fraction, CouplingBatch};
use crate::error::{Error, Result};
use crate::net::{Params, VectorFieldNet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub fm_term: f64,
    pub sc_term: f64,
    pub one_step_term: f64,
    pub selected_fraction: f64,
}

/// `(1 - t_i) x0_i + t_i x1_i` per row.
pub fn interpolate(x0: ArrayView2<f64>, x1: ArrayView2<f64>, t: &[f64]) -> Array2<f64> {
    assert_eq!(x0.dim(), x1.dim(), "endpoint batches differ in shape");
    assert_eq!(t.len(), x0.nrows(), "one time per row");
    let mut out = Array2::zeros(x0.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let ti = t[i];
        for k in 0..row.len() {
            row[k] = (1.0 - ti) * x0[[i, k]] + ti * x1[[i, k]];
        }
    }
    out
}

fn check_times(coupling: &CouplingBatch, t: &[f64]) -> Result<()> {
    if t.len() != coupling.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} times", coupling.len()),
            found: format!("{} times", t.len()),
        });
    }
    if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::param("t", "times must lie in [0, 1]"));
    }
    Ok(())
}

fn selected_fraction(coupling: &CouplingBatch) -> f64 {
    coupling.selected_count() as f64 / coupling.len() as f64
}

/// `(1/B) sum_i w_i |v(x_t_i, t_i) - (x1_i - x0_i)|^2` with the step-size
/// input held at 0.
pub fn fm_loss(net: &mut VectorFieldNet, coupling: &CouplingBatch, t: &[f64]) -> Result<(LossBreakdown, Params)> {
    check_times(coupling, t)?;
    let b = coupling.len() as f64;
    let xt = interpolate(coupling.x0.view(), coupling.x1.view(), t);
    let target = coupling.displacement();
    let out = net.forward_train(xt.view(), t, &vec![0.0; t.len()])?;
    let mut resid = out - &target;
    let mut fm = 0.0;
    for (i, mut row) in resid.rows_mut().into_iter().enumerate() {
        let w = coupling.weight[i];
        fm += w * row.iter().map(|r| r * r).sum::<f64>();
        row.mapv_inplace(|r| 2.0 * w * r / b);
    }
    let fm = fm / b;
    let grads = net.backward(&resid)?;
    Ok((
        LossBreakdown {
            total: fm,
            fm_term: fm,
            sc_term: 0.0,
            one_step_term: 0.0,
            selected_fraction: selected_fraction(coupling),
        },
        grads,
    ))
}

/// Time used by the one-step supervision term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OneStepTime {
    /// The pair's own sampled `t`.
    Sampled,
    /// Always `t = 0`.
    Zero,
}

impl FromStr for OneStepTime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sampled" => Ok(OneStepTime::Sampled),
            "zero" => Ok(OneStepTime::Zero),
            other => Err(format!("expected sampled | zero, got `{other}`")),
        }
    }
}

impl fmt::Display for OneStepTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OneStepTime::Sampled => "sampled",
            OneStepTime::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutParams {
    /// Fraction of pairs that also receive the self-consistency term.
    pub m: f64,
    /// Step sizes the model is trained for, e.g. `{1/8, 1/4, 1/2, 1}`.
    pub grid: Vec<f64>,
    pub one_step_t: OneStepTime,
}

impl Default for ShortcutParams {
    fn default() -> Self {
        Self {
            m: 1.0 / 8.0,
            grid: vec![0.125, 0.25, 0.5, 1.0],
            one_step_t: OneStepTime::Sampled,
        }
    }
}

impl ShortcutParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.m) {
            return Err(Error::param("m", format!("must lie in [0, 1], got {}", self.m)));
        }
        if self.grid.is_empty() {
            return Err(Error::param("d_grid", "empty step-size grid"));
        }
        for &d in &self.grid {
            let n = 1.0 / d;
            if !(d > 0.0 && d <= 1.0) || (n - n.round()).abs() > 1e-9 {
                return Err(Error::param("d_grid", format!("step {d} is not 1/n for a positive integer n")));
            }
        }
        Ok(())
    }

    fn min_step(&self) -> f64 {
        self.grid.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Step-size input used for the bootstrap half steps of a query step `2d`.
    /// Half steps below the grid fall back to the flow field (`d = 0`).
    pub fn bootstrap_input(&self, half: f64) -> f64 {
        if half + 1e-12 < self.min_step() {
            0.0
        } else {
            half
        }
    }
}

/// Per-step random draws of the shortcut objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutDraw {
    /// Time per pair (self-consistency pairs are re-drawn on their step grid).
    pub t: Vec<f64>,
    /// Pairs carrying the self-consistency term, ascending.
    pub sc_rows: Vec<usize>,
    /// Query step size `2d` per self-consistency pair, drawn from the grid.
    pub query_step: Vec<f64>,
}

impl ShortcutDraw {
    /// Choose `floor(m B)` self-consistency pairs, a grid step `2d` for each,
    /// and re-draw their time from `{0, 2d, 4d, ..., 1 - 2d}` so that
    /// `t + 2d <= 1`.
    pub fn sample<R: Rng + ?Sized>(mut t: Vec<f64>, params: &ShortcutParams, rng: &mut R) -> Self {
        let b = t.len();
        let n_sc = floor_fraction(params.m, b);
        let mut order: Vec<usize> = (0..b).collect();
        for i in 0..n_sc {
            let j = rng.random_range(i..b);
            order.swap(i, j);
        }
        let mut sc_rows = order[..n_sc].to_vec();
        sc_rows.sort_unstable();
        let mut query_step = Vec::with_capacity(n_sc);
        for &row in &sc_rows {
            let step = params.grid[rng.random_range(0..params.grid.len())];
            let slots = (1.0 / step).round() as usize;
            t[row] = rng.random_range(0..slots) as f64 * step;
            query_step.push(step);
        }
        Self { t, sc_rows, query_step }
    }

    /// No self-consistency pairs.
    pub fn plain(t: Vec<f64>) -> Self {
        Self {
            t,
            sc_rows: Vec::new(),
            query_step: Vec::new(),
        }
    }
}

/// Bootstrap target `½ s(x_t, t, d) + ½ s(x_t + d s(x_t, t, d), t + d, d)`
/// from the EMA network, for each self-consistency pair.
pub fn bootstrap_targets(
    ema: &VectorFieldNet,
    xt: ArrayView2<f64>,
    t: &[f64],
    half: &[f64],
    half_input: &[f64],
) -> Result<Array2<f64>> {
    let first = ema.forward(xt, t, half_input)?;
    let mut x_mid = xt.to_owned();
    for (i, mut row) in x_mid.rows_mut().into_iter().enumerate() {
        row.scaled_add(half[i], &first.row(i));
    }
    let t_mid: Vec<f64> = t.iter().zip(half).map(|(a, b)| a + b).collect();
    let second = ema.forward(x_mid.view(), &t_mid, half_input)?;
    Ok((first + second) * 0.5)
}

/// Shortcut objective on a coupling batch.
///
/// Live-network rows, evaluated in one pass: every pair at `d = 0` (flow
/// matching, weighted), self-consistency pairs at their query step `2d`
/// against the EMA bootstrap (weighted), and one-step-supervised pairs at
/// `d = 1` against `x1 - x0` (unweighted). Each term is normalised by `B`.
pub fn shortcut_loss(
    net: &mut VectorFieldNet,
    ema: &VectorFieldNet,
    coupling: &CouplingBatch,
    draw: &ShortcutDraw,
    params: &ShortcutParams,
) -> Result<(LossBreakdown, Params)> {
    check_times(coupling, &draw.t)?;
    let n = coupling.len();
    let b = n as f64;
    let dim = coupling.x0.dim();
    let t = &draw.t;
    let xt = interpolate(coupling.x0.view(), coupling.x1.view(), t);
    let delta = coupling.displacement();

    let sc = &draw.sc_rows;
    let one_step_rows: Vec<usize> = (0..n).filter(|&i| coupling.one_step_supervised[i]).collect();
    let total_rows = n + sc.len() + one_step_rows.len();

    let mut x_in = Array2::zeros((total_rows, dim));
    let mut t_in = Vec::with_capacity(total_rows);
    let mut d_in = Vec::with_capacity(total_rows);
    let mut target = Array2::zeros((total_rows, dim));
    let mut row_weight = Vec::with_capacity(total_rows);

    x_in.slice_mut(s![..n, ..]).assign(&xt);
    target.slice_mut(s![..n, ..]).assign(&delta);
    t_in.extend_from_slice(t);
    d_in.extend(std::iter::repeat_n(0.0, n));
    row_weight.extend_from_slice(&coupling.weight);

    if !sc.is_empty() {
        let xt_sc = xt.select(ndarray::Axis(0), sc);
        let t_sc: Vec<f64> = sc.iter().map(|&i| t[i]).collect();
        let half: Vec<f64> = draw.query_step.iter().map(|q| 0.5 * q).collect();
        let half_input: Vec<f64> = half.iter().map(|&h| params.bootstrap_input(h)).collect();
        let boot = bootstrap_targets(ema, xt_sc.view(), &t_sc, &half, &half_input)?;
        x_in.slice_mut(s![n..n + sc.len(), ..]).assign(&xt_sc);
        target.slice_mut(s![n..n + sc.len(), ..]).assign(&boot);
        t_in.extend_from_slice(&t_sc);
        d_in.extend_from_slice(&draw.query_step);
        row_weight.extend(sc.iter().map(|&i| coupling.weight[i]));
    }

    let base = n + sc.len();
    for (k, &i) in one_step_rows.iter().enumerate() {
        let t_os = match params.one_step_t {
            OneStepTime::Sampled => t[i],
            OneStepTime::Zero => 0.0,
        };
        let x_os = if t_os == t[i] {
            xt.row(i).to_owned()
        } else {
            coupling.x0.row(i).to_owned()
        };
        x_in.row_mut(base + k).assign(&x_os);
        target.row_mut(base + k).assign(&delta.row(i));
        t_in.push(t_os);
        d_in.push(1.0);
        row_weight.push(1.0);
    }

    let out = net.forward_train(x_in.view(), &t_in, &d_in)?;
    let mut resid = out - &target;
    let mut terms = [0.0f64; 3];
    for (r, mut row) in resid.rows_mut().into_iter().enumerate() {
        let w = row_weight[r];
        let term = if r < n {
            0
        } else if r < base {
            1
        } else {
            2
        };
        terms[term] += w * row.iter().map(|v| v * v).sum::<f64>();
        row.mapv_inplace(|v| 2.0 * w * v / b);
    }
    let grads = net.backward(&resid)?;
    let [fm, sc_term, one_step] = terms.map(|v| v / b);
    Ok((
        LossBreakdown {
            total: fm + sc_term + one_step,
            fm_term: fm,
            sc_term,
            one_step_term: one_step,
            selected_fraction: selected_fraction(coupling),
        },
        grads,
    ))
}
