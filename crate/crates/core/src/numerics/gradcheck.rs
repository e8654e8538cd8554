//! Central finite-difference verification of tape gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{bail, Result};

/// Result for one named parameter block.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric|` divided by the larger of the two gradients' max magnitudes.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<10} {:<28} n={:<6} max_rel={:.3e} max_abs={:.3e} {}",
                self.label,
                p.name,
                p.entries_checked,
                p.max_rel_error,
                p.max_abs_error,
                if p.passed { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per block.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
            seed: 0,
        }
    }
}

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives one trainable leaf per entry of `params`, in order, and
/// must return a scalar node. It is re-run on perturbed copies of the
/// parameters, so it has to be deterministic.
pub fn grad_check<F>(
    label: &str,
    loss_fn: F,
    params: &[(String, Matrix)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, m)| tape.param(m.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    if tape.value(loss).shape() != (1, 1) {
        bail!(Contract, "grad_check loss for {} is not scalar", label);
    }
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Matrix> = params.iter().map(|(_, m)| m.clone()).collect();
    let mut report = GradCheckReport {
        label: label.to_string(),
        tolerance: opts.tolerance,
        params: Vec::with_capacity(params.len()),
    };

    for (k, (name, original)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(original.rows(), original.cols()));
        let n = original.len();
        let indices: Vec<usize> = match opts.max_entries {
            Some(cap) if cap < n => {
                let mut idx = sample(&mut rng, n, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut max_abs_err = 0.0_f64;
        let mut max_analytic = 0.0_f64;
        let mut max_numeric = 0.0_f64;
        for &i in &indices {
            let base = original.as_slice()[i];
            values[k].as_mut_slice()[i] = base + opts.step;
            let plus = eval(&values)?;
            values[k].as_mut_slice()[i] = base - opts.step;
            let minus = eval(&values)?;
            values[k].as_mut_slice()[i] = base;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.as_slice()[i];
            max_abs_err = max_abs_err.max((a - numeric).abs());
            max_analytic = max_analytic.max(a.abs());
            max_numeric = max_numeric.max(numeric.abs());
        }
        let scale = max_analytic.max(max_numeric);
        let rel = if scale > 0.0 { max_abs_err / scale } else { 0.0 };
        let passed = rel.is_finite() && rel < opts.tolerance;
        report.params.push(ParamCheck {
            name: name.clone(),
            entries_checked: indices.len(),
            max_abs_error: max_abs_err,
            max_rel_error: rel,
            passed,
        });
    }
    Ok(report)
}
