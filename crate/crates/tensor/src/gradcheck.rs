//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor in [`relative_error`].
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn sample_coords(len: usize, max_coords: Option<usize>) -> Vec<usize> {
    match max_coords {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares `analytic` gradients against central differences of `value`.
///
/// At most `max_coords` evenly spaced coordinates are probed per parameter.
pub fn compare_gradients<F>(
    value: F,
    params: &[Tensor],
    analytic: &[Tensor],
    fd_step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut coords_checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for c in sample_coords(params[pi].len(), max_coords) {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + fd_step;
            let up = value(&work)?;
            work[pi].data_mut()[c] = orig - fd_step;
            let down = value(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * fd_step);
            worst = worst.max(relative_error(grad.data()[c], numeric));
            coords_checked += 1;
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        coords_checked,
    })
}

/// Runs `build` on a fresh tape with every tensor in `params` registered as a
/// trainable leaf, differentiates the scalar it returns, and checks the
/// result against central finite differences.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor],
    fd_step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| tape.leaf(p.clone(), want_grads))
            .collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).item().unwrap_or(f64::NAN);
        if !want_grads {
            return Ok((v, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let gs = vars
            .iter()
            .zip(ps)
            .map(|(&var, p)| grads.get_or_zeros(var, p))
            .collect();
        Ok((v, gs))
    };
    let (_, analytic) = eval(params, true)?;
    compare_gradients(
        |ps| eval(ps, false).map(|(v, _)| v),
        params,
        &analytic,
        fd_step,
        max_coords,
    )
}
