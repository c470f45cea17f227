//! Central finite-difference gradient checks in 64-bit precision.
//!
//! The graph under test is a closure that rebuilds the computation on a
//! fresh `Tape<f64>` from the given input handles and returns a scalar.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub probes: usize,
    pub passed: bool,
}

/// Relative error with an absolute floor of 1 so that near-zero gradients
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, tol, usize::MAX, 0)
}

/// Checks at most `max_probes` randomly chosen elements per input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    max_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let root = f(&mut tape, &vars)?;
    scalar_of(&tape, root)?;
    tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probes = 0;
    for (k, &var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = tape
            .grad(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let idx: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for &e in &idx {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
        probes += idx.len();
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= tol,
        per_input,
        max_rel_err,
        tol,
        probes,
    })
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Autodiff(format!(
            "grad_check graph must be scalar-valued, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
