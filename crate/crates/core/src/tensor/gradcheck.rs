//! Central finite-difference gradient checking (64-bit).
//!
//! The numeric side re-evaluates the forward closure from scratch at
//! perturbed inputs, so it shares nothing with the backward rules it checks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::graph::{Graph, Mode, Var};
use super::Tensor;
use crate::error::Result;

pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Cap on coordinates checked per input (0 = all); sampled with `seed`.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, max_coords: 0, seed: 0 }
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (input index, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Check analytic gradients of `build` (a scalar-valued forward over the
/// given inputs) against central finite differences.
///
/// `requires[i]` marks which inputs to differentiate. The closure must be a
/// pure function of the inputs.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    requires: &[bool],
    build: F,
    cfg: &GradCheck,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(Mode::Train);
        let vars: Vec<Var> = tensors
            .iter()
            .zip(requires)
            .map(|(t, &r)| g.leaf(t.clone(), r))
            .collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).item().map(|v| v)
    };

    // analytic pass
    let mut g = Graph::new(Mode::Train);
    let vars: Vec<Var> = inputs
        .iter()
        .zip(requires)
        .map(|(t, &r)| g.leaf(t.clone(), r))
        .collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|t| t.data().to_vec()))
        .collect();

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut report = GradReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();

    for (ii, req) in requires.iter().enumerate() {
        if !req {
            continue;
        }
        let n = inputs[ii].len();
        let coords: Vec<usize> = if cfg.max_coords == 0 || cfg.max_coords >= n {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < cfg.max_coords {
                picked.insert(rng.gen_range(0..n));
            }
            picked.into_iter().collect()
        };
        let grad = analytic[ii]
            .as_ref()
            .map(|v| v.as_slice())
            .unwrap_or(&[]);
        for &ci in &coords {
            let orig = work[ii].data()[ci];
            work[ii].data_mut()[ci] = orig + cfg.h;
            let fp = eval(&work)?;
            work[ii].data_mut()[ci] = orig - cfg.h;
            let fm = eval(&work)?;
            work[ii].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = if grad.is_empty() { 0.0 } else { grad[ci] };
            let e = rel_err(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ii, ci, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor in [-1, 1], seeded.
pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
