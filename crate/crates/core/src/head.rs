//! Similarity-weighted mean of prototype labels.
//!
//! With squared weights `theta^2 = r * l`, the prediction
//! `sum(s * theta^2) / sum(s * theta^2 / l)` equals the weighted mean of the
//! labels `l` under weights `w = s * r`.

use insightr_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Below this the prediction denominator counts as zero.
pub const DENOMINATOR_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub theta: Tensor,
}

impl HeadParams {
    /// `theta_j = sqrt(l_j)`, i.e. every importance starts at 1.
    pub fn from_labels(labels: &[f64]) -> Self {
        HeadParams {
            theta: Tensor::from_vec(labels.iter().map(|l| l.sqrt()).collect()),
        }
    }

    pub fn importance(&self, labels: &[f64]) -> Vec<f64> {
        importance(self.theta.data(), labels)
    }
}

/// `r_j = theta_j^2 / l_j`.
pub fn importance(theta: &[f64], labels: &[f64]) -> Vec<f64> {
    theta.iter().zip(labels).map(|(t, l)| t * t / l).collect()
}

pub fn predict(s: &[f64], theta: &[f64], labels: &[f64]) -> Result<f64> {
    if s.len() != theta.len() || s.len() != labels.len() {
        return Err(Error::Dimension {
            what: "head inputs",
            expected: format!("{} similarities, weights and labels", labels.len()),
            actual: format!("{} / {} / {}", s.len(), theta.len(), labels.len()),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&sj, &tj), &lj) in s.iter().zip(theta).zip(labels) {
        num += sj * tj * tj;
        den += sj * tj * tj / lj;
    }
    if den <= DENOMINATOR_FLOOR {
        return Err(Error::DegenerateHead(format!("denominator {den:e}")));
    }
    Ok(num / den)
}

/// `w = s * r` and `w / sum(w)`.
pub fn contribution_weights(s: &[f64], r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let w: Vec<f64> = s.iter().zip(r).map(|(a, b)| a * b).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateHead("all contribution weights are zero".into()));
    }
    let fractions = w.iter().map(|v| v / total).collect();
    Ok((w, fractions))
}

/// Batched prediction on a tape: `sims` is `N x m`, `theta` has length `m`.
pub fn predict_on_tape(tape: &mut Tape, sims: Var, theta: Var, labels: &[f64]) -> Result<Var> {
    let n = tape.shape(sims)[0];
    let theta_sq = tape.square(theta);
    let tiled = tape.tile_rows(theta_sq, n)?;
    let weighted = tape.mul(sims, tiled)?;
    let inv_l = tape.constant(Tensor::from_vec(labels.iter().map(|l| 1.0 / l).collect()));
    let inv_l = tape.tile_rows(inv_l, n)?;
    let scaled = tape.mul(weighted, inv_l)?;
    let num = tape.sum_last(weighted)?;
    let den = tape.sum_last(scaled)?;
    if let Some(d) = tape.value(den).data().iter().find(|&&d| d <= DENOMINATOR_FLOOR) {
        return Err(Error::DegenerateHead(format!("denominator {d:e}")));
    }
    Ok(tape.div(num, den)?)
}
