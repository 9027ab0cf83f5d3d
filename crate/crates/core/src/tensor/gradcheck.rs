//! Central-finite-difference gradient verification, double precision.

use super::Tensor;
use crate::error::{Error, Result};

const STEP: f64 = 1e-5;

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences at every input coordinate. Returns the maximum of
/// `|analytic - cd| / max(1e-8, |cd|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    for t in inputs {
        t.clear_grad();
    }
    let out = f(inputs);
    let base = out.item();
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check output".into()));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_err: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = input.data().to_vec();
                data[j] += delta;
                let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
                probe[i] = Tensor::var(data, input.shape())?;
                let v = f(&probe).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite("grad_check perturbation".into()));
                }
                Ok(v)
            };
            let plus = eval(STEP)?;
            let minus = eval(-STEP)?;
            let cd = (plus - minus) / (2.0 * STEP);
            let err = (analytic[i][j] - cd).abs() / cd.abs().max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
