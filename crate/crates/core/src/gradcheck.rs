//! Central finite-difference gradient checking in f64.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Magnitude floor in the relative-error denominator, so that gradients that
/// are exactly zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
    pub max_rel_err: f64,
    /// (input, flat element) where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| match grads.wrt(v) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; x.numel()],
        })
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].numel());
        for e in 0..inputs[i].numel() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + step;
            let plus = eval(&xs)?;
            xs[i].data_mut()[e] = orig - step;
            let minus = eval(&xs)?;
            xs[i].data_mut()[e] = orig;
            let n = (plus - minus) / (2.0 * step);
            let err = rel_err(analytic[i][e], n);
            if err > max_rel_err {
                max_rel_err = err;
                worst = (i, e);
            }
            col.push(n);
        }
        numeric.push(col);
    }
    Ok(GradCheck {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}
