//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the vector-Jacobian products it verifies.

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input, or
    /// the absolute difference when both norms are below `1e-10`.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares the tape gradient of a scalar function of `inputs` against
/// central differences with step `h`.
///
/// `f` is replayed on a fresh tape for every perturbation, so it must be a
/// pure function of its inputs (fix any RNG seeds inside it).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_error: f64 = 0.0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[k].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let plus = evaluate(&work, &f)?;
            work[k].data_mut()[j] = orig - h;
            let minus = evaluate(&work, &f)?;
            work[k].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let diff: f64 = grad
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-10 { diff } else { diff / scale };
        let abs = grad
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        max_abs_error = max_abs_error.max(abs);
        rel_errors.push(rel);
    }
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        rel_errors,
        max_rel_error,
        max_abs_error,
    })
}

fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != [1, 1] {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}
