//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::params::ParamSet;
use crate::tensor::{Result, Tensor};

/// Step used for central differences.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is essentially zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }

    fn merge(&mut self, other: GradReport) {
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
    }
}

fn central<F: FnMut(&[Tensor]) -> f64>(
    values: &mut [Tensor],
    i: usize,
    j: usize,
    f: &mut F,
) -> f64 {
    let orig = values[i].data()[j];
    values[i].data_mut()[j] = orig + STEP;
    let up = f(values);
    values[i].data_mut()[j] = orig - STEP;
    let down = f(values);
    values[i].data_mut()[j] = orig;
    (up - down) / (2.0 * STEP)
}

/// Checks the gradient of a scalar function of `inputs`, built on a fresh
/// tape by `build`, with respect to every input coordinate.
pub fn check_inputs<F>(inputs: &[Tensor], build: F) -> Result<GradReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let mut eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars).expect("perturbed inputs keep their shapes");
        tape.scalar(loss)
    };
    let mut values = inputs.to_vec();
    let mut report = GradReport::default();
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let numeric = central(&mut values, i, j, &mut eval);
            report.record(g.data()[j], numeric);
        }
    }
    Ok(report)
}

/// Checks `grads` (one tensor per parameter, in set order) against central
/// differences of `loss` over every coordinate of `params`.
pub fn check_params<F: FnMut(&ParamSet) -> f64>(
    params: &ParamSet,
    grads: &[Tensor],
    mut loss: F,
) -> GradReport {
    let mut probe = params.clone();
    let mut report = GradReport::default();
    for (i, g) in grads.iter().enumerate() {
        let mut part = GradReport::default();
        for j in 0..g.len() {
            let orig = probe.tensors()[i].data()[j];
            probe.tensors_mut()[i].data_mut()[j] = orig + STEP;
            let up = loss(&probe);
            probe.tensors_mut()[i].data_mut()[j] = orig - STEP;
            let down = loss(&probe);
            probe.tensors_mut()[i].data_mut()[j] = orig;
            part.record(g.data()[j], (up - down) / (2.0 * STEP));
        }
        report.merge(part);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_checked_exactly_enough() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = check_inputs(&[x], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![1.0, 2.0]));
        let wrong = vec![Tensor::vector(vec![1.0, 1.0])];
        let r = check_params(&p, &wrong, |p| p.tensors()[0].squared_norm());
        assert!(r.max_rel_error > 0.4);
    }
}
