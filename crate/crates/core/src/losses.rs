//! Training objective: MSE, label-aware cluster loss, prototype-sample
//! distance loss, and their weighted sum.
//!
//! Each loss is built on a [`Tape`] so it can be differentiated; the
//! `*_value` helpers evaluate the same graph on constants.

use insightr_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp on `d / d_max` inside the PSD logarithm.
pub const PSD_RATIO_CAP: f64 = 1.0 - 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_mse: f64,
    pub alpha_clst: f64,
    pub alpha_psd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_mse: 1.0,
            alpha_clst: 1.0,
            alpha_psd: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_mse", self.alpha_mse),
            ("alpha_clst", self.alpha_clst),
            ("alpha_psd", self.alpha_psd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn mse_on_tape(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    if tape.shape(pred) != [target.len()] {
        return Err(Error::Dimension {
            what: "mse targets",
            expected: format!("{:?}", tape.shape(pred)),
            actual: format!("[{}]", target.len()),
        });
    }
    let y = tape.constant(Tensor::from_vec(target.to_vec()));
    let r = tape.sub(pred, y)?;
    let r = tape.square(r);
    Ok(tape.mean(r)?)
}

/// Prototypes whose label lies strictly within `delta_l` of `y`; if none
/// does, the single prototype with the nearest label (lowest index on ties).
pub fn eligible_prototypes(y: f64, labels: &[f64], delta_l: f64) -> Vec<usize> {
    let eligible: Vec<usize> = (0..labels.len())
        .filter(|&j| (labels[j] - y).abs() < delta_l)
        .collect();
    if !eligible.is_empty() {
        return eligible;
    }
    (0..labels.len())
        .min_by(|&a, &b| {
            (labels[a] - y)
                .abs()
                .total_cmp(&(labels[b] - y).abs())
                .then(a.cmp(&b))
        })
        .into_iter()
        .collect()
}

/// `dmat` is `n x m`: minimum squared distance of sample `i` to prototype `j`.
pub fn cluster_loss_on_tape(
    tape: &mut Tape,
    dmat: Var,
    targets: &[f64],
    labels: &[f64],
    k: usize,
    delta_l: f64,
) -> Result<Var> {
    let &[n, m] = tape.shape(dmat) else {
        return Err(Error::Dimension {
            what: "distance matrix",
            expected: "n x m".into(),
            actual: format!("{:?}", tape.shape(dmat)),
        });
    };
    if n != targets.len() || m != labels.len() {
        return Err(Error::Dimension {
            what: "distance matrix",
            expected: format!("{} x {}", targets.len(), labels.len()),
            actual: format!("{n} x {m}"),
        });
    }
    if !(delta_l > 0.0) {
        return Err(Error::Config(format!("delta_l must be positive, got {delta_l}")));
    }
    let mut per_sample = Vec::with_capacity(n);
    for (i, &y) in targets.iter().enumerate() {
        let idx: Vec<usize> = eligible_prototypes(y, labels, delta_l)
            .into_iter()
            .map(|j| i * m + j)
            .collect();
        let row = tape.select(dmat, &idx)?;
        per_sample.push(tape.min_k_mean(row, k)?);
    }
    let stacked = tape.stack(&per_sample)?;
    Ok(tape.mean(stacked)?)
}

/// `-(1/m) sum_j ln(1 - min_i d_ij / d_max)`, ratio capped at [`PSD_RATIO_CAP`].
pub fn psd_loss_on_tape(tape: &mut Tape, dmat: Var, d_max: f64) -> Result<Var> {
    let t = tape.transpose(dmat)?;
    let closest = tape.min_last(t)?;
    let ratio = tape.scale(closest, 1.0 / d_max);
    let ratio = tape.clamp_max(ratio, PSD_RATIO_CAP);
    let neg = tape.neg(ratio);
    let gap = tape.add_scalar(neg, 1.0);
    let logs = tape.log(gap)?;
    let mean = tape.mean(logs)?;
    Ok(tape.neg(mean))
}

/// Scalar values of the three components and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mse: f64,
    pub clst: f64,
    pub psd: f64,
    pub total: f64,
}

pub fn total_loss(mse: f64, clst: f64, psd: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("mse", mse), ("clst", clst), ("psd", psd)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteComponent(name));
        }
    }
    Ok(w.alpha_mse * mse + w.alpha_clst * clst + w.alpha_psd * psd)
}

pub fn total_on_tape(tape: &mut Tape, mse: Var, clst: Var, psd: Var, w: &LossWeights) -> Result<Var> {
    total_loss(
        tape.value(mse).data()[0],
        tape.value(clst).data()[0],
        tape.value(psd).data()[0],
        w,
    )?;
    let a = tape.scale(mse, w.alpha_mse);
    let b = tape.scale(clst, w.alpha_clst);
    let c = tape.scale(psd, w.alpha_psd);
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}

fn dmat_tensor(dmat: &[Vec<f64>]) -> Result<Tensor> {
    let m = dmat.first().map(Vec::len).ok_or(Error::Empty("distance matrix"))?;
    if dmat.iter().any(|r| r.len() != m) {
        return Err(Error::Config("ragged distance matrix".into()));
    }
    Ok(Tensor::new(vec![dmat.len(), m], dmat.concat())?)
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            what: "mse inputs",
            expected: pred.len().to_string(),
            actual: target.len().to_string(),
        });
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_vec(pred.to_vec()));
    let v = mse_on_tape(&mut tape, p, target)?;
    Ok(tape.value(v).data()[0])
}

pub fn cluster_loss(dmat: &[Vec<f64>], targets: &[f64], labels: &[f64], k: usize, delta_l: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let d = tape.constant(dmat_tensor(dmat)?);
    let v = cluster_loss_on_tape(&mut tape, d, targets, labels, k, delta_l)?;
    Ok(tape.value(v).data()[0])
}

pub fn psd_loss(dmat: &[Vec<f64>], d_max: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let d = tape.constant(dmat_tensor(dmat)?);
    let v = psd_loss_on_tape(&mut tape, d, d_max)?;
    Ok(tape.value(v).data()[0])
}
