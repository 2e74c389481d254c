//! The full network: backbone `f`, prototype layer `g_p`, head `h_fc`.

use insightr_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneVars};
use crate::error::{Error, Result};
use crate::head::{predict_on_tape, HeadParams};
use crate::prototype::{assign_prototype_labels, similarity_on_tape, PrototypeBank, SimilarityKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    /// Number of prototypes `m`.
    pub count: usize,
    pub label_min: f64,
    pub label_max: f64,
    pub similarity: SimilarityKind,
    pub eps: f64,
    /// Prototypes start uniform in `(init_low, init_high)^c_z`.
    pub init_low: f64,
    pub init_high: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            count: 10,
            label_min: 0.1,
            label_max: 5.9,
            similarity: SimilarityKind::Reciprocal,
            eps: 1e-4,
            init_low: 0.2,
            init_high: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Configured conv blocks of the backbone.
    BackboneEarly,
    /// The final `Conv + ReLU + Conv + Sigmoid` block.
    BackboneFinal,
    Prototypes,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::BackboneEarly,
        ParamGroup::BackboneFinal,
        ParamGroup::Prototypes,
        ParamGroup::Head,
    ];
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub backbone_early: bool,
    pub backbone_final: bool,
    pub prototypes: bool,
    pub head: bool,
}

impl Trainable {
    pub fn contains(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::BackboneEarly => self.backbone_early,
            ParamGroup::BackboneFinal => self.backbone_final,
            ParamGroup::Prototypes => self.prototypes,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoModel {
    pub backbone: Backbone,
    pub bank: PrototypeBank,
    pub head: HeadParams,
    pub similarity: SimilarityKind,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub prototypes: Var,
    pub theta: Var,
}

impl ModelVars {
    pub fn group(&self, g: ParamGroup) -> Vec<Var> {
        match g {
            ParamGroup::BackboneEarly => self
                .backbone
                .blocks
                .iter()
                .flat_map(|&(w, b)| [w, b])
                .collect(),
            ParamGroup::BackboneFinal => self
                .backbone
                .final_block
                .iter()
                .flat_map(|&(w, b)| [w, b])
                .collect(),
            ParamGroup::Prototypes => vec![self.prototypes],
            ParamGroup::Head => vec![self.theta],
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub vars: ModelVars,
    /// `N x c_z x h_z x w_z`
    pub latent: Var,
    /// `N x m x h_z x w_z`
    pub distances: Var,
    /// `N x m` minimum distances.
    pub dmin: Var,
    /// `N x m` similarities.
    pub sims: Var,
    /// `N` predictions (internal label scale).
    pub pred: Var,
    /// Flat argmin position (within `h_z * w_z`) for each `(sample, prototype)`.
    pub argmin: Vec<usize>,
}

/// Plain values from an inference pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInference {
    pub latent: Tensor,
    pub distances: Tensor,
    pub dmin: Tensor,
    pub sims: Tensor,
    pub pred: Vec<f64>,
    pub argmin: Vec<usize>,
}

impl ProtoModel {
    pub fn new(backbone_cfg: BackboneConfig, proto_cfg: &PrototypeConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(backbone_cfg, seed)?;
        let labels = assign_prototype_labels(proto_cfg.count, proto_cfg.label_min, proto_cfg.label_max)?;
        let bank = PrototypeBank::init_uniform(
            proto_cfg.count,
            backbone.config.latent_channels,
            labels,
            proto_cfg.init_low,
            proto_cfg.init_high,
            seed.wrapping_add(0x9E37_79B9),
        )?;
        crate::prototype::check_eps(proto_cfg.eps)?;
        Ok(ProtoModel {
            head: HeadParams::from_labels(bank.labels()),
            backbone,
            bank,
            similarity: proto_cfg.similarity,
            eps: proto_cfg.eps,
        })
    }

    pub fn labels(&self) -> &[f64] {
        self.bank.labels()
    }

    pub fn register(&self, tape: &mut Tape, trainable: Trainable) -> ModelVars {
        ModelVars {
            backbone: self
                .backbone
                .register(tape, trainable.backbone_early, trainable.backbone_final),
            prototypes: tape.leaf(self.bank.vectors.clone(), trainable.prototypes),
            theta: tape.leaf(self.head.theta.clone(), trainable.head),
        }
    }

    pub fn forward(&self, tape: &mut Tape, images: &Tensor, trainable: Trainable) -> Result<ForwardPass> {
        self.backbone.check_input(images)?;
        let vars = self.register(tape, trainable);
        let x = tape.constant(images.clone());
        let latent = self.backbone.forward(tape, &vars.backbone, x)?;
        let distances = tape.sq_l2_distance_map(latent, vars.prototypes)?;
        let s = tape.shape(distances).to_vec();
        let flat = tape.reshape(distances, &[s[0], s[1], s[2] * s[3]])?;
        let dmin = tape.min_last(flat)?;
        let argmin = tape.argmin_of(dmin).map(<[usize]>::to_vec).unwrap_or_default();
        let sims = similarity_on_tape(tape, dmin, self.similarity, self.eps, self.bank.d_max)?;
        let pred = predict_on_tape(tape, sims, vars.theta, self.labels())?;
        Ok(ForwardPass {
            vars,
            latent,
            distances,
            dmin,
            sims,
            pred,
            argmin,
        })
    }

    /// Head-only forward from precomputed minimum distances (`N x m`).
    pub fn head_forward(&self, tape: &mut Tape, dmin: &Tensor, train_head: bool) -> Result<(Var, Var, Var)> {
        let theta = tape.leaf(self.head.theta.clone(), train_head);
        let d = tape.constant(dmin.clone());
        let sims = similarity_on_tape(tape, d, self.similarity, self.eps, self.bank.d_max)?;
        let pred = predict_on_tape(tape, sims, theta, self.labels())?;
        Ok((theta, sims, pred))
    }

    pub fn infer(&self, images: &Tensor) -> Result<BatchInference> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, images, Trainable::default())?;
        Ok(BatchInference {
            latent: tape.value(fp.latent).clone(),
            distances: tape.value(fp.distances).clone(),
            dmin: tape.value(fp.dmin).clone(),
            sims: tape.value(fp.sims).clone(),
            pred: tape.value(fp.pred).data().to_vec(),
            argmin: fp.argmin,
        })
    }

    pub fn group_tensors(&self, g: ParamGroup) -> Vec<&Tensor> {
        match g {
            ParamGroup::BackboneEarly => self
                .backbone
                .blocks
                .iter()
                .flat_map(|l| [&l.weight, &l.bias])
                .collect(),
            ParamGroup::BackboneFinal => self
                .backbone
                .final_block
                .iter()
                .flat_map(|l| [&l.weight, &l.bias])
                .collect(),
            ParamGroup::Prototypes => vec![&self.bank.vectors],
            ParamGroup::Head => vec![&self.head.theta],
        }
    }

    pub fn group_tensors_mut(&mut self, g: ParamGroup) -> Vec<&mut Tensor> {
        match g {
            ParamGroup::BackboneEarly => self
                .backbone
                .blocks
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect(),
            ParamGroup::BackboneFinal => self
                .backbone
                .final_block
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect(),
            ParamGroup::Prototypes => vec![&mut self.bank.vectors],
            ParamGroup::Head => vec![&mut self.head.theta],
        }
    }

    /// Every parameter tensor in checkpoint order.
    pub fn all_tensors(&self) -> Vec<&Tensor> {
        ParamGroup::ALL
            .iter()
            .flat_map(|&g| self.group_tensors(g))
            .collect()
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let ProtoModel {
            backbone, bank, head, ..
        } = self;
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in backbone.blocks.iter_mut().chain(backbone.final_block.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut bank.vectors);
        out.push(&mut head.theta);
        out
    }

    pub fn check_same_architecture(&self, other: &ProtoModel) -> Result<()> {
        let a: Vec<_> = self.all_tensors().iter().map(|t| t.shape().to_vec()).collect();
        let b: Vec<_> = other.all_tensors().iter().map(|t| t.shape().to_vec()).collect();
        if a != b {
            return Err(Error::Dimension {
                what: "model architecture",
                expected: format!("{a:?}"),
                actual: format!("{b:?}"),
            });
        }
        Ok(())
    }
}
