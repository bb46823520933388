use crate::error::{Error, Result};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::tensor::Tensor;

/// Compares tape gradients against central differences.
///
/// `build` receives a fresh tape plus one leaf per entry of `params` and
/// must return a scalar loss. Returns the maximum over all parameter
/// elements of `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn check_gradients<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Parameter(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let leaves: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work = leaves.clone();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaves[pi].numel()]);
        for j in 0..leaves[pi].numel() {
            let orig = leaves[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
