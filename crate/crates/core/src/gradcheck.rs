//! Central finite-difference checks for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the tape gradient of the scalar built by `build` with central
/// differences of the same function.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };
    check_gradients_against(inputs, eps, &build, eval)
}

/// Like [`check_gradients`], with a separate numeric function. Used for ops
/// whose backward is a surrogate of a different forward (the STE gate).
pub fn check_gradients_against<F, N>(inputs: &[Tensor<f64>], eps: f64, build: F, numeric: N) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    N: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(v).unwrap_or(&zeros).clone();
        for k in 0..inputs[i].numel() {
            let base = inputs[i].data()[k];
            probe[i].data_mut()[k] = base + eps;
            let plus = numeric(&probe)?;
            probe[i].data_mut()[k] = base - eps;
            let minus = numeric(&probe)?;
            probe[i].data_mut()[k] = base;
            let num = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            if !num.is_finite() {
                return Err(Error::Numeric(format!("finite difference at input {i}[{k}] is {num}")));
            }
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, k);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_correct_and_a_wrong_gradient() {
        let x = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
        let ok = check_gradients(std::slice::from_ref(&x), 1e-6, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(ok.max_rel_err < 1e-6);
        assert_eq!(ok.checked, 3);

        // Tape computes sum(x^2) but the numeric side is sum(x^3).
        let bad = check_gradients_against(
            &[x],
            1e-6,
            |t, v| {
                let y = t.mul(v[0], v[0])?;
                t.sum(y)
            },
            |xs| Ok(xs[0].data().iter().map(|v| v.powi(3)).sum()),
        )
        .unwrap();
        assert!(bad.max_rel_err > 0.1);
    }
}
