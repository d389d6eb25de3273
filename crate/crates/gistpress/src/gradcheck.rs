//! Finite-difference gradient checking.
//!
//! Runs entirely in `f64`: the function under test is rebuilt from fresh
//! leaves for every probe, so it must be deterministic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per input tensor (all of them when the tensor is
    /// smaller than this).
    pub samples_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            step: 1e-5,
            samples_per_input: 24,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `inputs` are `(data, shape)` pairs; `f` receives them as trainable leaves
/// in the same order and must return a scalar. Returns the maximum over
/// probed coordinates of `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn grad_check<F>(inputs: &[(Vec<f64>, Vec<usize>)], opts: &GradCheckOpts, f: F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let build = |values: &[Vec<f64>]| -> Vec<Tensor<f64>> {
        values
            .iter()
            .zip(inputs)
            .map(|(data, (_, shape))| Tensor::param(data.clone(), shape.clone()))
            .collect()
    };
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let leaves = build(values);
        let out = f(&leaves)?;
        if out.numel() != 1 {
            return Err(Error::Contract("grad_check: f must return a scalar".into()));
        }
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: non-finite value {v}")));
        }
        Ok(v)
    };

    let master: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();

    // Analytic gradients at the base point.
    let leaves = build(&master);
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::Contract("grad_check: f must return a scalar".into()));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_err = 0.0f64;
    for (idx, (data, _)) in inputs.iter().enumerate() {
        let n = data.len();
        let coords: Vec<usize> = if n <= opts.samples_per_input {
            (0..n).collect()
        } else {
            (0..opts.samples_per_input)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for coord in coords {
            let mut plus = master.clone();
            plus[idx][coord] += opts.step;
            let mut minus = master.clone();
            minus[idx][coord] -= opts.step;
            let cd = (eval(&plus)? - eval(&minus)?) / (2.0 * opts.step);
            let a = analytic[idx][coord];
            if !cd.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite gradient at input {idx} coord {coord}"
                )));
            }
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
