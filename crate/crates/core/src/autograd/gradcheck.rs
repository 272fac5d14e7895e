//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation half-width.
    pub eps: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is ~0 are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-4, floor: 1e-6, max_entries: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, perturbing one input entry at a time.
pub fn check<F>(inputs: &[Tensor], f: F, opts: GradCheck) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let n = inputs[k].numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in entries {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + opts.eps;
            let up = eval(&work)?;
            work[k].data_mut()[idx] = orig - opts.eps;
            let down = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of input {k}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((k, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
