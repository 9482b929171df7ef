//! Source/target couplings: random pairing, exact minibatch OT (Hungarian),
//! entropic OT (log-domain Sinkhorn), and model-aligned couplings scored by
//! the network's prediction error at the path endpoints.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::SampleBatch;
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::par;

/// How training pairs are formed each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    BatchOt,
    SinkhornOt,
    MacTopk,
    MacFull,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::BatchOt,
        Strategy::SinkhornOt,
        Strategy::MacTopk,
        Strategy::MacFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::BatchOt => "batch_ot",
            Strategy::SinkhornOt => "sinkhorn_ot",
            Strategy::MacTopk => "mac_topk",
            Strategy::MacFull => "mac_full",
        }
    }

    pub fn is_model_aligned(self) -> bool {
        matches!(self, Strategy::MacTopk | Strategy::MacFull)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown coupling `{s}` (expected random | batch_ot | sinkhorn_ot | mac_topk | mac_full)"))
    }
}

/// Paired batches: row `i` of `x0` goes with row `i` of `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBatch {
    pub x0: SampleBatch,
    pub x1: SampleBatch,
    pub weight: Vec<f64>,
    pub selected: Vec<bool>,
    pub one_step_supervised: Vec<bool>,
    /// Per-pair prediction error, when the pairs were scored.
    pub pair_error: Option<Vec<f64>>,
}

impl CouplingBatch {
    /// Unit weights and empty masks.
    pub fn plain(x0: SampleBatch, x1: SampleBatch) -> Result<Self> {
        if x0.len() != x1.len() {
            return Err(Error::SizeMismatch {
                left: x0.len(),
                right: x1.len(),
            });
        }
        if x0.dim() != x1.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", x0.dim()),
                found: format!("{} columns", x1.dim()),
            });
        }
        let n = x0.len();
        Ok(Self {
            x0,
            x1,
            weight: vec![1.0; n],
            selected: vec![false; n],
            one_step_supervised: vec![false; n],
            pair_error: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// `x1_i - x0_i` per row.
    pub fn displacement(&self) -> Array2<f64> {
        self.x1.as_array() - self.x0.as_array()
    }

    /// Apply `1 + lambda` to the top-`k` pairs by `errors` and mark the first
    /// `floor(r * |S|)` of them (by error rank) for one-step supervision.
    pub fn apply_selection(&mut self, errors: Vec<f64>, k: f64, lambda: f64, r: f64) -> Result<()> {
        let ranked = rank_topk(&errors, k)?;
        let n_one_step = floor_fraction(r, ranked.len());
        self.selected = vec![false; self.len()];
        self.one_step_supervised = vec![false; self.len()];
        for (rank, &i) in ranked.iter().enumerate() {
            self.selected[i] = true;
            if rank < n_one_step {
                self.one_step_supervised[i] = true;
            }
        }
        self.weight = self.selected.iter().map(|&s| if s { 1.0 + lambda } else { 1.0 }).collect();
        self.pair_error = Some(errors);
        Ok(())
    }
}

/// What a cost matrix measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    SquaredDistance,
    PredictionError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
    pub kind: CostKind,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>, kind: CostKind) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::param("cost", "entries must be finite and nonnegative"));
        }
        Ok(Self { values, kind })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// `sum_i C[i][perm[i]]`, accumulated in row order.
    pub fn assignment_cost(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.values[[i, j]]).sum()
    }
}

/// Entropic transport plan.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max absolute deviation of a row or column sum from `1/B`.
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        (&self.plan * &cost.values).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub reg: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Warm-start the potentials with a decreasing regularisation schedule.
    pub anneal: bool,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            reg: 0.5,
            tol: 1e-6,
            max_iters: 1000,
            anneal: true,
        }
    }
}

/// Which field scores the endpoints of a candidate pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `v(x, t)`, i.e. step-size input 0.
    Endpoint,
    /// One-step shortcut field `s(x, t, 1)`.
    D1,
}

impl ScoreMode {
    pub fn step_input(self) -> f64 {
        match self {
            ScoreMode::Endpoint => 0.0,
            ScoreMode::D1 => 1.0,
        }
    }
}

/// `floor(frac * n)` with a small guard against representation error
/// (`0.29 * 100` is 29, not 28).
pub fn floor_fraction(frac: f64, n: usize) -> usize {
    ((frac * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Number of pairs the top-`k` rule keeps: `floor(k B)`, at least 1.
pub fn topk_count(k: f64, n: usize) -> usize {
    floor_fraction(k, n).max(1).min(n)
}

pub fn random_coupling(x0: SampleBatch, x1: SampleBatch) -> Result<CouplingBatch> {
    CouplingBatch::plain(x0, x1)
}

pub fn squared_cost(x0: &SampleBatch, x1: &SampleBatch) -> Result<CostMatrix> {
    if x0.dim() != x1.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} columns", x0.dim()),
            found: format!("{} columns", x1.dim()),
        });
    }
    let (a, b) = (x0.view(), x1.view());
    let rows = par::map_range(a.nrows(), |i| {
        b.rows()
            .into_iter()
            .map(|bj| a.row(i).iter().zip(bj).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    CostMatrix::new(from_rows(rows, b.nrows()), CostKind::SquaredDistance)
}

fn from_rows(rows: Vec<Vec<f64>>, ncols: usize) -> Array2<f64> {
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect()).expect("rectangular rows")
}

/// Minimum-cost perfect matching; returns `perm` with row `i` assigned to
/// column `perm[i]`. Among optimal assignments the lexicographically
/// smallest permutation is returned.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<Vec<usize>> {
    assign(cost.values.view())
}

fn assign(c: ArrayView2<f64>) -> Result<Vec<usize>> {
    let (n, m) = c.dim();
    if n != m {
        return Err(Error::NotSquare { rows: n, cols: m });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("cost", "non-finite entry"));
    }
    // Shortest augmenting paths with row/column potentials (1-indexed,
    // index 0 is a sentinel column).
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }

    // Every optimal assignment uses only edges that are tight under the
    // optimal potentials, so the lexicographically smallest optimum is the
    // lexicographically smallest perfect matching of the tight subgraph.
    let scale = c.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let eps = 1e-10 * scale;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| c[[i, j]] - u[i + 1] - v[j + 1] <= eps).collect())
        .collect();
    lexicographic_matching(&tight, row_to_col)
        .ok_or_else(|| Error::param("cost", "assignment refinement failed"))
}

/// Rewrites a perfect matching of `adj` into the lexicographically smallest
/// one, row by row.
fn lexicographic_matching(adj: &[Vec<usize>], mut row_to_col: Vec<usize>) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut col_to_row = vec![usize::MAX; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    for i in 0..n {
        for &j in &adj[i] {
            if j == row_to_col[i] {
                break;
            }
            let owner = col_to_row[j];
            if owner < i {
                continue;
            }
            // Give j to i; the displaced owner must reach i's old column
            // through rows after i.
            let freed = row_to_col[i];
            let saved_r2c = row_to_col.clone();
            let saved_c2r = col_to_row.clone();
            row_to_col[i] = j;
            col_to_row[j] = i;
            col_to_row[freed] = usize::MAX;
            let mut seen = vec![false; n];
            if augment(owner, i, adj, &mut row_to_col, &mut col_to_row, &mut seen) {
                break;
            }
            row_to_col = saved_r2c;
            col_to_row = saved_c2r;
        }
    }
    let ok = row_to_col.iter().enumerate().all(|(i, &j)| adj[i].contains(&j));
    ok.then_some(row_to_col)
}

fn augment(
    row: usize,
    fixed_upto: usize,
    adj: &[Vec<usize>],
    row_to_col: &mut [usize],
    col_to_row: &mut [usize],
    seen: &mut [bool],
) -> bool {
    for &j in &adj[row] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        let owner = col_to_row[j];
        if owner == usize::MAX
            || (owner > fixed_upto && augment(owner, fixed_upto, adj, row_to_col, col_to_row, seen))
        {
            row_to_col[row] = j;
            col_to_row[j] = row;
            return true;
        }
    }
    false
}

/// Log-domain Sinkhorn with uniform marginals.
///
/// Iterates `f <- reg (log a - LSE_j((g_j - C_ij)/reg))` then the column
/// update, stopping once every row sum is within `tol` of `1/B` (column sums
/// are exact after each column update). With `anneal` set, the potentials are
/// first warmed up at `reg_k = max C / 2^k` down to `reg`; the fixed point is
/// the same, only reached in far fewer iterations when `max C / reg` is
/// large. `iterations` counts every sweep, warm-up included.
pub fn sinkhorn(cost: &CostMatrix, params: SinkhornParams) -> Result<TransportPlan> {
    let (n, m) = cost.values.dim();
    if n != m {
        return Err(Error::NotSquare { rows: n, cols: m });
    }
    if n == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    if !(params.reg > 0.0 && params.reg.is_finite()) {
        return Err(Error::param("reg", format!("must be positive, got {}", params.reg)));
    }
    let c = cost.values.as_standard_layout().into_owned();
    let ct = c.t().as_standard_layout().into_owned();
    let mass = 1.0 / n as f64;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut iterations = 0;

    if params.anneal {
        let c_max = c.iter().copied().fold(0.0, f64::max);
        let mut reg = c_max;
        while reg > 2.0 * params.reg && iterations < params.max_iters {
            let budget = ANNEAL_STAGE_ITERS.min(params.max_iters - iterations);
            iterations += sinkhorn_sweeps(&c, &ct, reg, &mut f, &mut g, budget, params.tol).0;
            reg *= 0.5;
        }
    }
    let (used, row_err) = sinkhorn_sweeps(&c, &ct, params.reg, &mut f, &mut g, params.max_iters - iterations, params.tol);
    iterations += used;

    let reg = params.reg;
    let plan = Array2::from_shape_fn((n, n), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / reg).exp());
    let row_dev = plan.rows().into_iter().map(|r| (r.sum() - mass).abs()).fold(0.0, f64::max);
    let col_dev = plan.columns().into_iter().map(|r| (r.sum() - mass).abs()).fold(0.0, f64::max);
    let marginal_error = row_dev.max(col_dev);
    Ok(TransportPlan {
        plan,
        converged: row_err < params.tol,
        iterations,
        marginal_error,
    })
}

const ANNEAL_STAGE_ITERS: usize = 20;

/// `reg * (log(1/n) - LSE_j((other_j - c_ij) / reg))` for every row of `c`.
fn soft_min_rows(c: &Array2<f64>, other: &[f64], reg: f64) -> Vec<f64> {
    let n = c.nrows();
    let log_mass = -(n as f64).ln();
    par::map_range(n, |i| {
        let row = c.row(i);
        let row = row.as_slice().expect("standard layout");
        let mut hi = f64::NEG_INFINITY;
        for (o, cij) in other.iter().zip(row) {
            hi = hi.max((o - cij) / reg);
        }
        let mut sum = 0.0;
        for (o, cij) in other.iter().zip(row) {
            sum += ((o - cij) / reg - hi).exp();
        }
        reg * (log_mass - (hi + sum.ln()))
    })
}

/// `exp((f_i + g_j - c_ij) / reg)`.
fn absorbed_kernel(c: &Array2<f64>, f: &[f64], g: &[f64], reg: f64) -> Array2<f64> {
    let n = c.nrows();
    let rows = par::map_range(n, |i| {
        c.row(i)
            .iter()
            .zip(g)
            .map(|(cij, gj)| ((f[i] + gj - cij) / reg).exp())
            .collect::<Vec<f64>>()
    });
    Array2::from_shape_vec((n, n), rows.concat()).expect("square")
}

/// Scalings beyond `exp(±ABSORB_LOG)` are folded back into the potentials.
const ABSORB_LOG: f64 = 50.0;

/// Up to `budget` row/column sweeps from the given potentials. Returns the
/// sweeps done and the last row-marginal error (infinite if never checked
/// or the budget ran out).
///
/// One log-domain sweep puts the potentials on the right scale; after that
/// the sweeps run on the kernel `K = exp((f + g - C) / reg)` with scalings
/// `u, v`, which are absorbed into `f, g` whenever they grow large.
fn sinkhorn_sweeps(
    c: &Array2<f64>,
    ct: &Array2<f64>,
    reg: f64,
    f: &mut Vec<f64>,
    g: &mut Vec<f64>,
    budget: usize,
    tol: f64,
) -> (usize, f64) {
    let n = c.nrows();
    let mass = 1.0 / n as f64;
    if budget == 0 {
        return (0, f64::INFINITY);
    }
    *f = soft_min_rows(c, g, reg);
    *g = soft_min_rows(ct, f, reg);
    let mut done = 1;

    let mut k = absorbed_kernel(c, f, g, reg);
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(n);
    let absorb = |f: &mut Vec<f64>, g: &mut Vec<f64>, u: &Array1<f64>, v: &Array1<f64>| {
        for (fi, ui) in f.iter_mut().zip(u) {
            *fi += reg * ui.ln();
        }
        for (gj, vj) in g.iter_mut().zip(v) {
            *gj += reg * vj.ln();
        }
    };
    loop {
        let kv = k.dot(&v);
        // Row sums of the current plan: u_i (K v)_i.
        let row_err = u.iter().zip(&kv).map(|(ui, s)| (ui * s - mass).abs()).fold(0.0, f64::max);
        if row_err < tol || done == budget || kv.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            absorb(f, g, &u, &v);
            let err = if row_err < tol { row_err } else { f64::INFINITY };
            if err.is_finite() || done == budget {
                return (done, err);
            }
            // kernel under/overflow: restart from the absorbed potentials
            return {
                let (more, err) = sinkhorn_sweeps(c, ct, reg, f, g, budget - done, tol);
                (done + more, err)
            };
        }
        u = kv.mapv(|s| mass / s);
        let ktu = k.t().dot(&u);
        v = ktu.mapv(|s| mass / s);
        done += 1;
        let big = |x: &Array1<f64>| x.iter().any(|s| !(s.ln().abs() < ABSORB_LOG));
        if big(&u) || big(&v) {
            absorb(f, g, &u, &v);
            u.fill(1.0);
            v.fill(1.0);
            k = absorbed_kernel(c, f, g, reg);
        }
    }
}

/// `½ (|v(x0_i, 0) - Δ_ij|² + |v(x1_j, 1) - Δ_ij|²)` with `Δ_ij = x1_j - x0_i`,
/// from `2B` field evaluations shared across all pairs.
pub fn prediction_error_cost<F: VelocityField>(
    field: &F,
    x0: &SampleBatch,
    x1: &SampleBatch,
    mode: ScoreMode,
) -> Result<CostMatrix> {
    if x0.len() != x1.len() {
        return Err(Error::SizeMismatch { left: x0.len(), right: x1.len() });
    }
    let d = mode.step_input();
    let v0 = field.velocity(x0.view(), 0.0, d)?;
    let v1 = field.velocity(x1.view(), 1.0, d)?;
    let (a, b) = (x0.view(), x1.view());
    let dim = x0.dim();
    let rows = par::map_range(a.nrows(), |i| {
        (0..b.nrows())
            .map(|j| {
                let (mut e0, mut e1) = (0.0, 0.0);
                for k in 0..dim {
                    let delta = b[[j, k]] - a[[i, k]];
                    e0 += (v0[[i, k]] - delta).powi(2);
                    e1 += (v1[[j, k]] - delta).powi(2);
                }
                0.5 * (e0 + e1)
            })
            .collect::<Vec<f64>>()
    });
    CostMatrix::new(from_rows(rows, b.nrows()), CostKind::PredictionError)
}

/// Endpoint prediction error of the given pairs only (the diagonal of
/// [`prediction_error_cost`]).
pub fn pair_errors<F: VelocityField>(field: &F, x0: &SampleBatch, x1: &SampleBatch, mode: ScoreMode) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::SizeMismatch { left: x0.len(), right: x1.len() });
    }
    let d = mode.step_input();
    let v0 = field.velocity(x0.view(), 0.0, d)?;
    let v1 = field.velocity(x1.view(), 1.0, d)?;
    let delta = x1.as_array() - x0.as_array();
    Ok((0..x0.len())
        .map(|i| {
            let e0: f64 = (&v0.row(i) - &delta.row(i)).mapv(|v| v * v).sum();
            let e1: f64 = (&v1.row(i) - &delta.row(i)).mapv(|v| v * v).sum();
            0.5 * (e0 + e1)
        })
        .collect())
}

/// Diagnostic: prediction error averaged over `n_t` midpoint times along
/// each pair's path instead of the two endpoints.
pub fn pair_errors_along_path<F: VelocityField>(
    field: &F,
    x0: &SampleBatch,
    x1: &SampleBatch,
    mode: ScoreMode,
    n_t: usize,
) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::SizeMismatch { left: x0.len(), right: x1.len() });
    }
    if n_t == 0 {
        return Err(Error::param("n_t", "need at least one time sample"));
    }
    let delta = x1.as_array() - x0.as_array();
    let mut acc = vec![0.0; x0.len()];
    for k in 0..n_t {
        let t = (k as f64 + 0.5) / n_t as f64;
        let xt = x0.as_array() * (1.0 - t) + x1.as_array() * t;
        let v = field.velocity(xt.view(), t, mode.step_input())?;
        for (i, a) in acc.iter_mut().enumerate() {
            *a += (&v.row(i) - &delta.row(i)).mapv(|e| e * e).sum();
        }
    }
    Ok(acc.into_iter().map(|a| a / n_t as f64).collect())
}

/// Indices of the `topk_count(k, n)` smallest errors, smallest first; ties
/// go to the lower index.
fn rank_topk(errors: &[f64], k: f64) -> Result<Vec<usize>> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::param("k", format!("must lie in (0, 1], got {k}")));
    }
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    order.truncate(topk_count(k, errors.len()));
    Ok(order)
}

/// Mask of the top-`k` fraction of pairs with the smallest error.
pub fn select_topk(errors: &[f64], k: f64) -> Result<Vec<bool>> {
    let mut mask = vec![false; errors.len()];
    for i in rank_topk(errors, k)? {
        mask[i] = true;
    }
    Ok(mask)
}

/// Score the drawn (diagonal) pairs with the EMA field and up-weight the
/// top-`k` by `1 + lambda`.
pub fn mac_topk_coupling<F: VelocityField>(
    ema: &F,
    x0: SampleBatch,
    x1: SampleBatch,
    k: f64,
    lambda: f64,
    r: f64,
    mode: ScoreMode,
) -> Result<CouplingBatch> {
    if lambda < 0.0 {
        return Err(Error::param("lambda", "must be nonnegative"));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::param("r", format!("must lie in [0, 1], got {r}")));
    }
    let errors = pair_errors(ema, &x0, &x1, mode)?;
    let mut batch = CouplingBatch::plain(x0, x1)?;
    batch.apply_selection(errors, k, lambda, r)?;
    Ok(batch)
}

/// Result of a plan-based coupling.
#[derive(Debug, Clone)]
pub struct PlanCoupling {
    pub coupling: CouplingBatch,
    pub plan: TransportPlan,
    /// Chosen target row for each source row.
    pub assignment: Vec<usize>,
    /// True when Sinkhorn did not converge and rows were paired by argmax.
    pub fell_back: bool,
}

/// Realize a plan as pairs: each source row draws one target row with
/// probability proportional to its plan row. An unconverged plan is rounded
/// by row argmax instead.
pub fn realize_plan<R: Rng + ?Sized>(plan: &TransportPlan, rng: &mut R) -> (Vec<usize>, bool) {
    let fell_back = !plan.converged;
    let assignment = plan
        .plan
        .rows()
        .into_iter()
        .map(|row| {
            if fell_back {
                argmax(row.iter().copied())
            } else {
                let total: f64 = row.sum();
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = row.len() - 1;
                for (j, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                pick
            }
        })
        .collect();
    (assignment, fell_back)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn plan_coupling<R: Rng + ?Sized>(
    x0: SampleBatch,
    x1: SampleBatch,
    cost: &CostMatrix,
    params: SinkhornParams,
    rng: &mut R,
) -> Result<PlanCoupling> {
    let plan = sinkhorn(cost, params)?;
    let (assignment, fell_back) = realize_plan(&plan, rng);
    let x1 = x1.select_rows(&assignment);
    Ok(PlanCoupling {
        coupling: CouplingBatch::plain(x0, x1)?,
        plan,
        assignment,
        fell_back,
    })
}

/// Exact minibatch OT: targets permuted by the Hungarian assignment of the
/// squared-distance cost.
pub fn batch_ot_coupling(x0: SampleBatch, x1: SampleBatch) -> Result<CouplingBatch> {
    let cost = squared_cost(&x0, &x1)?;
    let perm = hungarian_assign(&cost)?;
    let x1 = x1.select_rows(&perm);
    CouplingBatch::plain(x0, x1)
}

/// Entropic OT over squared distances, realized by per-row sampling.
pub fn sinkhorn_ot_coupling<R: Rng + ?Sized>(
    x0: SampleBatch,
    x1: SampleBatch,
    params: SinkhornParams,
    rng: &mut R,
) -> Result<PlanCoupling> {
    let cost = squared_cost(&x0, &x1)?;
    plan_coupling(x0, x1, &cost, params, rng)
}

/// Sinkhorn over the all-pairs prediction-error cost of the EMA field.
pub fn mac_full_coupling<F: VelocityField, R: Rng + ?Sized>(
    ema: &F,
    x0: SampleBatch,
    x1: SampleBatch,
    params: SinkhornParams,
    mode: ScoreMode,
    rng: &mut R,
) -> Result<PlanCoupling> {
    let cost = prediction_error_cost(ema, &x0, &x1, mode)?;
    let mut out = plan_coupling(x0, x1, &cost, params, rng)?;
    let errors = out.assignment.iter().enumerate().map(|(i, &j)| cost.values[[i, j]]).collect();
    out.coupling.pair_error = Some(errors);
    Ok(out)
}
