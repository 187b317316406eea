//! Central finite-difference verification of the reverse pass.
//!
//! Run in `f64` with dropout disabled; `f32` rounding drowns the comparison.
//! Coordinates are subsampled deterministically for large tensors.

use super::param::Parameter;
use super::tape::{Tape, Var};
use super::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked_coords: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} coords (tol {:.1e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.checked_coords,
            self.tolerance
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs()))
}

/// Deterministic coordinate subsample: evenly spaced, at most `max` coords.
fn coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Checks d(f)/d(inputs) for a scalar-valued tensor function.
pub fn gradcheck_fn<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    max_coords_per_input: usize,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.value().item())
    };

    // analytic gradients
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        for &c in &coords(input.len(), max_coords_per_input) {
            let mut plus = inputs.to_vec();
            let mut data = plus[i].data().to_vec();
            data[c] += eps;
            plus[i] = Tensor::new(input.shape().to_vec(), data);

            let mut minus = inputs.to_vec();
            let mut data = minus[i].data().to_vec();
            data[c] -= eps;
            minus[i] = Tensor::new(input.shape().to_vec(), data);

            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            max_err = max_err.max(rel_err(analytic[i].data()[c], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        checked_coords: checked,
        tolerance: tol,
    })
}

/// Checks d(f)/d(params) where `f` closes over a model holding `params`.
///
/// `f` must rebuild the forward pass on the given tape from the parameters'
/// current values, deterministically (eval-mode dropout, fixed inputs).
pub fn gradcheck_model<F>(
    f: F,
    params: &[Parameter<f64>],
    eps: f64,
    tol: f64,
    max_coords_per_param: usize,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>) -> Result<Var<'t, f64>, TensorError>,
{
    let eval = |f: &F| -> Result<f64, TensorError> {
        let tape = Tape::new();
        Ok(f(&tape)?.value().item())
    };

    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = params.iter().map(|p| p.grad()).collect();

    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for (p, a) in params.iter().zip(&analytic) {
        let original = p.value();
        for &c in &coords(original.len(), max_coords_per_param) {
            let mut data = original.data().to_vec();
            let saved = data[c];
            data[c] = saved + eps;
            p.set_value(Tensor::new(original.shape().to_vec(), data.clone()));
            let f_plus = eval(&f)?;
            data[c] = saved - eps;
            p.set_value(Tensor::new(original.shape().to_vec(), data.clone()));
            let f_minus = eval(&f)?;
            data[c] = saved;
            p.set_value(Tensor::new(original.shape().to_vec(), data));

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            max_err = max_err.max(rel_err(a.data()[c], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        checked_coords: checked,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_function_exact() {
        let report = gradcheck_fn(
            |_tape, vars| Ok(vars[0].sum_all()),
            &[Tensor::from_vec(vec![1.0, -2.0, 3.0])],
            1e-5,
            1e-9,
            16,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn gelu_at_half() {
        let report = gradcheck_fn(
            |_tape, vars| Ok(vars[0].gelu().sum_all()),
            &[Tensor::from_vec(vec![0.5])],
            1e-5,
            1e-4,
            4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn softmax_matmul_chain() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.4, 0.05, -0.7]);
        let w = Tensor::new(vec![3, 3], vec![0.1, 0.2, -0.4, 0.6, -0.3, 0.2, 0.05, 0.8, -0.9]);
        let report = gradcheck_fn(
            |_tape, vars| {
                let y = vars[0].matmul(vars[1])?;
                let s = y.softmax(1)?;
                Ok(s.mul(s)?.sum_all())
            },
            &[x, w],
            1e-5,
            1e-6,
            32,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn model_param_check() {
        let w = Parameter::new("w", Tensor::from_vec(vec![0.5, -1.5, 2.0]));
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let wc = w.clone();
        let report = gradcheck_model(
            move |tape| {
                let wv = tape.param(&wc);
                let xv = tape.constant(x.clone());
                Ok(wv.mul(xv)?.sigmoid().sum_all())
            },
            &[w],
            1e-6,
            1e-7,
            8,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
