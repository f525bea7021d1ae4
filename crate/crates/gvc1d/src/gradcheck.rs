//! Finite-difference gradient oracle. Always runs in f64.

use crate::error::{GvcError, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub pass: bool,
}

/// Compare tape gradients of a scalar-valued function against central
/// differences at every coordinate of every input.
///
/// `f` receives leaf tensors built from `inputs` (all requiring grad)
/// and must return a scalar tensor on the same tape.
pub fn grad_check<F>(
    f: F,
    inputs: &[(Vec<f64>, Vec<usize>)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let eval = |data: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor<f64>> = data
            .iter()
            .map(|(d, s)| tape.leaf(d.clone(), s.clone(), false))
            .collect::<Result<_>>()?;
        let out = f(&tape, &leaves)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(GvcError::Numeric(format!("non-finite loss value {v}")));
        }
        Ok(v)
    };

    // analytic pass
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&tape, &leaves)?;
    if !out.item().is_finite() {
        return Err(GvcError::Numeric("non-finite loss value".into()));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let mut perturbed: Vec<(Vec<f64>, Vec<usize>)> = inputs.to_vec();
    for (ti, (data, _)) in inputs.iter().enumerate() {
        for ci in 0..data.len() {
            perturbed[ti].0[ci] = data[ci] + eps;
            let fp = eval(&perturbed)?;
            perturbed[ti].0[ci] = data[ci] - eps;
            let fm = eval(&perturbed)?;
            perturbed[ti].0[ci] = data[ci];
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic[ti][ci];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("input {ti} coord {ci}: analytic {an:.6e} vs fd {fd:.6e}");
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst,
        pass: max_rel < tol,
    })
}
