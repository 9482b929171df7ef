//! Sample-quality measures: exact and sliced W2, straightness, coupling cost.

use std::io::Write;

use ndarray::Array1;
use rand::Rng;

use crate::coupling::{hungarian_assign, squared_cost, CouplingBatch};
use crate::distributions::{box_muller, SampleBatch};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::par;
use crate::distributions::GaussianMixture;
use crate::sampler::{Integrator, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_same_shape(a: &SampleBatch, b: &SampleBatch) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {}", a.dim()),
            found: format!("dim {}", b.dim()),
        });
    }
    Ok(())
}

/// Exact W2 between two equal-size empirical distributions.
/// Cubic in `n`; intended for a few hundred points.
pub fn w2_exact(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    check_same_shape(a, b)?;
    let cost = squared_cost(a, b)?;
    let perm = hungarian_assign(&cost)?;
    Ok((cost.assignment_cost(&perm) / a.len() as f64).sqrt())
}

/// Squared 1-D W2 between two equal-size samples.
pub fn w2_squared_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Draws `n` unit directions in `dim` dimensions.
pub fn random_directions<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Array1<f64>> {
    (0..n)
        .map(|_| loop {
            let mut v = Vec::with_capacity(dim + 1);
            while v.len() < dim {
                let (z0, z1) = box_muller(rng);
                v.push(z0);
                v.push(z1);
            }
            v.truncate(dim);
            let v = Array1::from(v);
            let norm = v.dot(&v).sqrt();
            if norm > 1e-12 {
                break v / norm;
            }
        })
        .collect()
}

/// Root-mean over random directions of the squared W2 of the projections.
pub fn w2_sliced<R: Rng + ?Sized>(a: &SampleBatch, b: &SampleBatch, n_projections: usize, rng: &mut R) -> Result<f64> {
    check_same_shape(a, b)?;
    if n_projections == 0 {
        return Err(Error::param("n_projections", "must be positive"));
    }
    let dirs = random_directions(n_projections, a.dim(), rng);
    let per_dir = par::map_range(dirs.len(), |j| {
        let pa = a.view().dot(&dirs[j]).to_vec();
        let pb = b.view().dot(&dirs[j]).to_vec();
        w2_squared_1d(pa, pb)
    });
    Ok((per_dir.iter().sum::<f64>() / n_projections as f64).sqrt())
}

/// Mean over samples and steps of `|v(x_k, t_k, 0) - (x_end - x_start)|^2`.
pub fn straightness<F: VelocityField>(field: &F, traj: &Trajectory) -> Result<f64> {
    let n = traj.n_steps();
    if n < 2 {
        return Err(Error::param("trajectory", "need at least two steps"));
    }
    let chord = traj.end() - traj.start();
    let mut total = 0.0;
    for k in 0..n {
        let v = field.velocity(traj.states[k].view(), traj.times[k], 0.0)?;
        total += (&v - &chord).iter().map(|e| e * e).sum::<f64>();
    }
    Ok(total / (n * chord.nrows()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, min and max of `|x1 - x0|^2` over the pairs of a coupling.
pub fn coupling_cost_stats(coupling: &CouplingBatch) -> CostStats {
    let disp = coupling.displacement();
    let costs: Vec<f64> = disp.rows().into_iter().map(|r| r.dot(&r)).collect();
    CostStats {
        mean: costs.iter().sum::<f64>() / costs.len() as f64,
        min: costs.iter().copied().fold(f64::INFINITY, f64::min),
        max: costs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// One row of `eval.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub strategy: String,
    pub n_steps: usize,
    pub w2: f64,
    pub straightness: Option<f64>,
    pub coupling_cost_mean: f64,
}

pub const EVAL_HEADER: &str = "model,strategy,n_steps,w2,straightness,coupling_cost_mean";

pub fn write_eval_csv<W: Write>(mut w: W, rows: &[EvalRow]) -> Result<()> {
    writeln!(w, "{EVAL_HEADER}")?;
    for r in rows {
        let s = r.straightness.map(|s| s.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", r.model, r.strategy, r.n_steps, r.w2, s, r.coupling_cost_mean)?;
    }
    Ok(())
}

/// Fixed evaluation draw: `samples` source and target points and
/// `projections` sliced-W2 directions, all from `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub samples: usize,
    pub projections: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            samples: 4096,
            projections: 256,
            seed: 20_240_917,
        }
    }
}

/// Quality of one model at one step count.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub n_steps: usize,
    pub w2: f64,
    /// Only for Euler trajectories on the flow field with at least 2 steps.
    pub straightness: Option<f64>,
    /// Step-size input used while sampling.
    pub step_input: f64,
}

/// Generate from the protocol's source draw with each step count and
/// compare against its target draw. Every model and step count sees the
/// same points and projection directions.
pub fn evaluate<F: VelocityField>(
    field: &F,
    integrator: &Integrator,
    source: &GaussianMixture,
    target: &GaussianMixture,
    steps: &[usize],
    protocol: &EvalProtocol,
) -> Result<Vec<EvalPoint>> {
    if steps.is_empty() {
        return Err(Error::param("steps", "no step counts given"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let x0 = source.sample(protocol.samples, &mut rng);
    let x1 = target.sample(protocol.samples, &mut rng);
    let mut out = Vec::with_capacity(steps.len());
    for &n in steps {
        let traj = integrator.sample(field, &x0, n)?;
        let mut proj_rng = ChaCha8Rng::seed_from_u64(protocol.seed ^ PROJECTION_STREAM);
        let w2 = w2_sliced(&traj.endpoint(), &x1, protocol.projections, &mut proj_rng)?;
        let straightness = if traj.step_input == 0.0 && n >= 2 {
            Some(straightness(field, &traj)?)
        } else {
            None
        };
        out.push(EvalPoint {
            n_steps: n,
            w2,
            straightness,
            step_input: traj.step_input,
        });
    }
    Ok(out)
}

const PROJECTION_STREAM: u64 = 0x5eed_d1ec_7105;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, FnField};
    use crate::sampler::euler_sample;
    use ndarray::Array2;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(n: usize, dim: usize, r: &mut ChaCha8Rng) -> SampleBatch {
        SampleBatch::new(Array2::from_shape_fn((n, dim), |_| r.random_range(-3.0..3.0))).unwrap()
    }

    fn brute_w2(a: &SampleBatch, b: &SampleBatch) -> f64 {
        fn rec(a: &SampleBatch, b: &SampleBatch, i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if i == a.len() {
                *best = best.min(acc);
                return;
            }
            for j in 0..b.len() {
                if !used[j] {
                    used[j] = true;
                    let d = &a.row(i) - &b.row(j);
                    rec(a, b, i + 1, used, acc + d.dot(&d), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(a, b, 0, &mut vec![false; b.len()], 0.0, &mut best);
        (best / a.len() as f64).sqrt()
    }

    #[test]
    fn exact_w2_of_permuted_copy_is_zero() {
        let mut r = rng(1);
        let a = random_batch(20, 2, &mut r);
        let idx: Vec<usize> = (0..20).rev().collect();
        assert_eq!(w2_exact(&a, &a.select_rows(&idx)).unwrap(), 0.0);
    }

    #[test]
    fn exact_w2_translation() {
        let mut r = rng(2);
        let a = random_batch(30, 2, &mut r);
        let b = SampleBatch::new(a.as_array() + &ndarray::array![3.0, -4.0]).unwrap();
        assert!((w2_exact(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn exact_w2_matches_brute_force() {
        let mut r = rng(3);
        for _ in 0..100 {
            let n = r.random_range(1..=7);
            let a = random_batch(n, 2, &mut r);
            let b = random_batch(n, 2, &mut r);
            let w = w2_exact(&a, &b).unwrap();
            assert!((w - brute_w2(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_w2_is_a_metric() {
        let mut r = rng(4);
        for _ in 0..50 {
            let a = random_batch(12, 2, &mut r);
            let b = random_batch(12, 2, &mut r);
            let c = random_batch(12, 2, &mut r);
            let ab = w2_exact(&a, &b).unwrap();
            assert!((ab - w2_exact(&b, &a).unwrap()).abs() < 1e-12);
            assert!(ab > 0.0);
            assert!(w2_exact(&a, &c).unwrap() <= ab + w2_exact(&b, &c).unwrap() + 1e-12);
        }
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let mut r = rng(5);
        let a = random_batch(4, 2, &mut r);
        let b = random_batch(5, 2, &mut r);
        assert!(w2_exact(&a, &b).is_err());
        assert!(w2_sliced(&a, &b, 8, &mut r).is_err());
    }

    #[test]
    fn sliced_w2_identical_is_zero() {
        let mut r = rng(6);
        let a = random_batch(100, 2, &mut r);
        assert_eq!(w2_sliced(&a, &a, 32, &mut r).unwrap(), 0.0);
    }

    #[test]
    fn sliced_w2_in_one_dimension_is_exact() {
        let mut r = rng(7);
        let a = random_batch(40, 1, &mut r);
        let b = random_batch(40, 1, &mut r);
        let exact = w2_exact(&a, &b).unwrap();
        for seed in 0..5 {
            let s = w2_sliced(&a, &b, 3, &mut rng(seed)).unwrap();
            assert!((s - exact).abs() < 1e-12, "{s} vs {exact}");
        }
    }

    #[test]
    fn sliced_w2_tracks_exact_on_shifted_gaussians() {
        // For a pure shift s, sliced W2 -> |s| / sqrt(D) while W2 -> |s|.
        // A 256-point exact subsample swings by ~8% across seeds, so the
        // cross-check uses 1024 points.
        let p = GaussianMixture::new(vec![(1.0, vec![0.0, 0.0])]).unwrap();
        let q = GaussianMixture::new(vec![(1.0, vec![2.0, 1.0])]).unwrap();
        let mut r = rng(8);
        let a = p.sample(4096, &mut r);
        let b = q.sample(4096, &mut r);
        let sliced = w2_sliced(&a, &b, 256, &mut r).unwrap();
        let analytic = (5.0f64 / 2.0).sqrt();
        assert!((sliced - analytic).abs() <= 0.03 * analytic, "{sliced} vs {analytic}");
        let sub: Vec<usize> = (0..1024).collect();
        let exact = w2_exact(&a.select_rows(&sub), &b.select_rows(&sub)).unwrap();
        let scaled = sliced * 2f64.sqrt();
        assert!((scaled - exact).abs() <= 0.05 * exact, "{scaled} vs {exact}");
    }

    #[test]
    fn sliced_w2_is_deterministic_given_rng() {
        let mut r = rng(9);
        let a = random_batch(300, 2, &mut r);
        let b = random_batch(300, 2, &mut r);
        let x = w2_sliced(&a, &b, 64, &mut rng(1)).unwrap();
        let y = w2_sliced(&a, &b, 64, &mut rng(1)).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn directions_are_unit() {
        for d in random_directions(50, 3, &mut rng(10)) {
            assert!((d.dot(&d) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn straightness_zero_for_constant_field() {
        let mut r = rng(11);
        let x0 = random_batch(10, 2, &mut r);
        let c = ConstantField(vec![1.0, 2.0]);
        let traj = euler_sample(&c, &x0, 8).unwrap();
        assert!(straightness(&c, &traj).unwrap() < 1e-24);
        let short = euler_sample(&c, &x0, 1).unwrap();
        assert!(straightness(&c, &short).is_err());
    }

    #[test]
    fn straightness_scales_quadratically() {
        // a field linear in x maps scaled starts to scaled trajectories
        let mut r = rng(12);
        let x0 = random_batch(16, 2, &mut r);
        let f = FnField(|x: &[f64], t: f64, _d: f64| vec![x[1] * t, -x[0]]);
        let base = straightness(&f, &euler_sample(&f, &x0, 6).unwrap()).unwrap();
        let c = 3.0;
        let scaled = SampleBatch::new(x0.as_array() * c).unwrap();
        let s = straightness(&f, &euler_sample(&f, &scaled, 6).unwrap()).unwrap();
        assert!((s - c * c * base).abs() <= 1e-10 * s);
    }

    #[test]
    fn straightness_matches_loop_oracle() {
        let mut r = rng(13);
        let x0 = random_batch(5, 2, &mut r);
        let f = FnField(|x: &[f64], t: f64, _d: f64| vec![x[0].sin() + t, x[1] * x[0]]);
        let traj = euler_sample(&f, &x0, 4).unwrap();
        let mut total = 0.0;
        for i in 0..5 {
            let chord = [traj.end()[[i, 0]] - x0.row(i)[0], traj.end()[[i, 1]] - x0.row(i)[1]];
            for k in 0..4 {
                let s = traj.states[k].row(i);
                let v = [s[0].sin() + k as f64 / 4.0, s[1] * s[0]];
                total += (v[0] - chord[0]).powi(2) + (v[1] - chord[1]).powi(2);
            }
        }
        assert!((straightness(&f, &traj).unwrap() - total / 20.0).abs() < 1e-12);
    }

    #[test]
    fn coupling_cost_examples() {
        let a = SampleBatch::from_rows(&[vec![1.0, 1.0], vec![2.0, -1.0]]).unwrap();
        let s = coupling_cost_stats(&CouplingBatch::plain(a.clone(), a).unwrap());
        assert_eq!((s.mean, s.min, s.max), (0.0, 0.0, 0.0));
        let x0 = SampleBatch::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let x1 = SampleBatch::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let s = coupling_cost_stats(&CouplingBatch::plain(x0, x1).unwrap());
        assert_eq!((s.mean, s.min, s.max), (25.0, 25.0, 25.0));
    }

    #[test]
    fn coupling_cost_matches_loop() {
        let mut r = rng(14);
        let x0 = random_batch(33, 2, &mut r);
        let x1 = random_batch(33, 2, &mut r);
        let s = coupling_cost_stats(&CouplingBatch::plain(x0.clone(), x1.clone()).unwrap());
        let costs: Vec<f64> = (0..33)
            .map(|i| (x1.row(i)[0] - x0.row(i)[0]).powi(2) + (x1.row(i)[1] - x0.row(i)[1]).powi(2))
            .collect();
        let mean = costs.iter().sum::<f64>() / 33.0;
        assert!((s.mean - mean).abs() < 1e-12);
        assert_eq!(s.min, costs.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(s.max, costs.iter().copied().fold(0.0, f64::max));
    }

    #[test]
    fn evaluate_transport_field_is_near_perfect() {
        // Unit shift between single Gaussians is transported exactly by a
        // constant field, at every step count.
        let p = GaussianMixture::new(vec![(1.0, vec![0.0, 0.0])]).unwrap();
        let q = GaussianMixture::new(vec![(1.0, vec![1.0, -1.0])]).unwrap();
        let c = ConstantField(vec![1.0, -1.0]);
        let protocol = EvalProtocol {
            samples: 2048,
            projections: 64,
            seed: 3,
        };
        let pts = evaluate(&c, &Integrator::Euler, &p, &q, &[1, 4, 16], &protocol).unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts[0].straightness.is_none());
        for pt in &pts {
            assert!(pt.w2 < 0.1, "{pt:?}");
            assert_eq!(pt.w2.to_bits(), pts[0].w2.to_bits());
        }
        assert!(pts[2].straightness.unwrap() < 1e-20);
        let zero = ConstantField(vec![0.0, 0.0]);
        let bad = evaluate(&zero, &Integrator::Euler, &p, &q, &[1], &protocol).unwrap();
        assert!((bad[0].w2 - 1.0).abs() < 0.1);
        assert!(evaluate(&c, &Integrator::Euler, &p, &q, &[], &protocol).is_err());
    }

    #[test]
    fn eval_csv_layout() {
        let rows = vec![EvalRow {
            model: "ema".into(),
            strategy: "mac_topk".into(),
            n_steps: 4,
            w2: 0.5,
            straightness: None,
            coupling_cost_mean: 12.0,
        }];
        let mut buf = Vec::new();
        write_eval_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{EVAL_HEADER}\nema,mac_topk,4,0.5,,12\n"));
    }
}
