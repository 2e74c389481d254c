//! Finite-difference verification of the full training objective.

use insightr_tensor::{gradcheck::compare_gradients, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::losses::{cluster_loss_on_tape, mse_on_tape, psd_loss_on_tape, total_on_tape};
use crate::model::{ForwardPass, ParamGroup, ProtoModel, Trainable};
use crate::pipeline::build_model;
use crate::prototype::SimilarityKind;
use crate::synth::{generate_split, Split};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
}

const ALL: Trainable = Trainable {
    backbone_early: true,
    backbone_final: true,
    prototypes: true,
    head: true,
};

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::BackboneEarly => "backbone_early",
        ParamGroup::BackboneFinal => "backbone_final",
        ParamGroup::Prototypes => "prototypes",
        ParamGroup::Head => "head",
    }
}

fn total_loss_value(
    model: &ProtoModel,
    cfg: &RunConfig,
    images: &Tensor,
    y: &[f64],
    trainable: Trainable,
) -> Result<(Tape, ForwardPass, Var)> {
    let mut tape = Tape::new();
    let fp = model.forward(&mut tape, images, trainable)?;
    let mse = mse_on_tape(&mut tape, fp.pred, y)?;
    let clst = cluster_loss_on_tape(&mut tape, fp.dmin, y, model.labels(), cfg.loss.k, cfg.loss.delta_l)?;
    let psd = psd_loss_on_tape(&mut tape, fp.dmin, model.bank.d_max)?;
    let total = total_on_tape(&mut tape, mse, clst, psd, &cfg.loss.weights())?;
    Ok((tape, fp, total))
}

/// One suite per (similarity kind, parameter group): the gradient of the
/// weighted total loss on a small training batch against central
/// differences. At most `max_coords` coordinates are probed per tensor.
pub fn model_grad_suites(cfg: &RunConfig, batch: usize, max_coords: Option<usize>) -> Result<Vec<SuiteResult>> {
    let data = generate_split(&cfg.data, Split::Train)?;
    // Spread the batch over the grade-ordered samples.
    let n = batch.clamp(1, data.len());
    let idx: Vec<usize> = (0..n).map(|i| i * data.len() / n).collect();
    let images = data.batch(&idx);
    let targets = data.internal_labels();
    let y: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
    let mut out = Vec::new();
    for kind in [SimilarityKind::Reciprocal, SimilarityKind::Log] {
        let mut cfg = cfg.clone();
        cfg.prototypes.similarity = kind;
        let model = build_model(&cfg)?;
        let (tape, fp, total) = total_loss_value(&model, &cfg, &images, &y, ALL)?;
        let grads = tape.backward(total)?;
        let params: Vec<Tensor> = model.all_tensors().into_iter().cloned().collect();
        let mut analytic = Vec::with_capacity(params.len());
        let mut owners = Vec::with_capacity(params.len());
        for g in ParamGroup::ALL {
            for (v, t) in fp.vars.group(g).into_iter().zip(model.group_tensors(g)) {
                analytic.push(grads.get_or_zeros(v, t));
                owners.push(g);
            }
        }
        let value = |ps: &[Tensor]| -> insightr_tensor::Result<f64> {
            let mut m = model.clone();
            for (slot, p) in m.all_tensors_mut().into_iter().zip(ps) {
                *slot = p.clone();
            }
            let (tape, _, total) = total_loss_value(&m, &cfg, &images, &y, Trainable::default())
                .map_err(|e| TensorError::Invalid {
                    op: "model loss",
                    detail: e.to_string(),
                })?;
            Ok(tape.value(total).data()[0])
        };
        let report = compare_gradients(value, &params, &analytic, FD_STEP, max_coords)?;
        for g in ParamGroup::ALL {
            let (worst, count) = report
                .per_param
                .iter()
                .zip(&owners)
                .zip(&params)
                .filter(|((_, &o), _)| o == g)
                .fold((0.0f64, 0usize), |(w, c), ((&e, _), p)| {
                    (w.max(e), c + max_coords.map_or(p.len(), |k| k.min(p.len())))
                });
            out.push(SuiteResult {
                name: format!("{}/{}", kind.name(), group_name(g)),
                max_rel_error: worst,
                coords: count,
                passed: worst < GRAD_TOLERANCE,
            });
        }
    }
    Ok(out)
}
