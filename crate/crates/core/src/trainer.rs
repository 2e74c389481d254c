//! Three-stage training protocol.
//!
//! Each cycle runs a joint stage (head frozen; the first cycle opens with
//! warm-up epochs that train only the prototypes and the final backbone
//! block), projects every prototype onto its nearest training patch, then
//! trains only the head.

use std::collections::BTreeMap;

use insightr_tensor::{AdamConfig, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    cluster_loss_on_tape, mse_on_tape, psd_loss_on_tape, total_on_tape, LossComponents, LossWeights,
};
use crate::model::{ParamGroup, ProtoModel, Trainable};
use crate::prototype::Provenance;
use crate::synth::{augment, SynthDataset};

/// Samples per inference batch when no gradients are needed.
pub const EVAL_BATCH: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub cycles: usize,
    pub joint_epochs: usize,
    pub lastlayer_epochs: usize,
    /// Leading epochs of the first joint stage that train only the
    /// prototypes and the final backbone block.
    pub warmup_epochs: usize,
    pub lr_backbone: f64,
    pub lr_protolayer: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random rotation/scaling of training images during joint epochs.
    pub augment: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            cycles: 2,
            joint_epochs: 10,
            lastlayer_epochs: 5,
            warmup_epochs: 3,
            lr_backbone: 5e-3,
            lr_protolayer: 5e-3,
            lr_head: 5e-2,
            batch_size: 30,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainSchedule {
    /// Full-scale settings: two cycles of 20 joint and 10 last-layer epochs.
    pub fn full_scale() -> Self {
        TrainSchedule {
            cycles: 2,
            joint_epochs: 20,
            lastlayer_epochs: 10,
            warmup_epochs: 5,
            lr_backbone: 1e-5,
            lr_protolayer: 1e-3,
            lr_head: 1e-3,
            batch_size: 30,
            seed: 0,
            augment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycles > 0 && self.warmup_epochs > self.joint_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds joint_epochs ({})",
                self.warmup_epochs, self.joint_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_protolayer", self.lr_protolayer),
            ("lr_head", self.lr_head),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_mse: f64,
    pub alpha_clst: f64,
    pub alpha_psd: f64,
    /// Number of nearest eligible prototypes averaged in the cluster loss.
    pub k: usize,
    /// Label radius for cluster-loss eligibility.
    pub delta_l: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            alpha_mse: w.alpha_mse,
            alpha_clst: w.alpha_clst,
            alpha_psd: w.alpha_psd,
            k: 3,
            delta_l: 0.5,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha_mse: self.alpha_mse,
            alpha_clst: self.alpha_clst,
            alpha_psd: self.alpha_psd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.delta_l > 0.0) {
            return Err(Error::Config(format!("delta_l must be positive, got {}", self.delta_l)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Joint,
    Projection,
    LastLayer,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Projection => "projection",
            Stage::LastLayer => "lastlayer",
        }
    }

    pub fn trainable(self) -> Trainable {
        match self {
            Stage::Warmup => Trainable {
                backbone_final: true,
                prototypes: true,
                ..Trainable::default()
            },
            Stage::Joint => Trainable {
                backbone_early: true,
                backbone_final: true,
                prototypes: true,
                head: false,
            },
            Stage::Projection => Trainable::default(),
            Stage::LastLayer => Trainable {
                head: true,
                ..Trainable::default()
            },
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Stage::Warmup => 0,
            Stage::Joint => 1,
            Stage::Projection => 2,
            Stage::LastLayer => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Stage> {
        [Stage::Warmup, Stage::Joint, Stage::Projection, Stage::LastLayer]
            .into_iter()
            .find(|s| s.code() == c)
    }
}

/// Protocol cursor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageState {
    /// 1-based; 0 before the first cycle.
    pub cycle: usize,
    pub stage: Stage,
    /// Epochs completed so far across the whole run.
    pub epoch: usize,
}

impl StageState {
    pub fn start() -> Self {
        StageState {
            cycle: 0,
            stage: Stage::Warmup,
            epoch: 0,
        }
    }

    /// Groups held fixed in the current stage.
    pub fn frozen(&self) -> Vec<ParamGroup> {
        let t = self.stage.trainable();
        ParamGroup::ALL.into_iter().filter(|&g| !t.contains(g)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cycle: usize,
    pub stage: Stage,
    pub mse: f64,
    pub clst: f64,
    pub psd: f64,
    pub total: f64,
    /// Mean absolute error of the training batches seen this epoch.
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPrototype {
    pub index: usize,
    pub label: f64,
    /// Squared distance between the prototype before and after projection.
    pub distance_moved: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub cycle: usize,
    pub prototypes: Vec<ProjectedPrototype>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub projections: Vec<ProjectionReport>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "epoch,cycle,stage,mse,clst,psd,total,mae";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{:e},{:e}\n",
                r.epoch,
                r.cycle,
                r.stage.name(),
                r.mse,
                r.clst,
                r.psd,
                r.total,
                r.mae
            ));
        }
        out
    }
}

/// Mutable state threaded through the stages: shuffling RNG, optimizer
/// moments (one set per stage kind and parameter group), cursor and log.
pub struct TrainContext {
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub state: StageState,
    pub log: TrainingLog,
    rng: ChaCha8Rng,
    optimizers: BTreeMap<(Stage, ParamGroup), AdamState>,
}

impl TrainContext {
    pub fn new(schedule: TrainSchedule, loss: LossConfig) -> Result<Self> {
        schedule.validate()?;
        loss.validate()?;
        Ok(TrainContext {
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            schedule,
            loss,
            state: StageState::start(),
            log: TrainingLog::default(),
            optimizers: BTreeMap::new(),
        })
    }

    fn lr(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::BackboneEarly | ParamGroup::BackboneFinal => self.schedule.lr_backbone,
            ParamGroup::Prototypes => self.schedule.lr_protolayer,
            ParamGroup::Head => self.schedule.lr_head,
        }
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    fn apply_update(
        &mut self,
        model: &mut ProtoModel,
        stage: Stage,
        group: ParamGroup,
        grads: Vec<Tensor>,
    ) -> Result<()> {
        let lr = self.lr(group);
        let state = self
            .optimizers
            .entry((stage, group))
            .or_insert_with(|| AdamState::new(AdamConfig::default(), model.group_tensors(group)));
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        state.step(&mut model.group_tensors_mut(group), &grad_refs, lr)?;
        Ok(())
    }

    fn non_finite(&self, component: &str, stage: Stage) -> Error {
        Error::NonFinite {
            component: component.to_string(),
            cycle: self.state.cycle,
            stage: stage.name().to_string(),
            epoch: self.state.epoch,
        }
    }

    fn check(&self, c: &LossComponents, stage: Stage) -> Result<()> {
        for (name, v) in [("mse", c.mse), ("clst", c.clst), ("psd", c.psd), ("total", c.total)] {
            if !v.is_finite() {
                return Err(self.non_finite(name, stage));
            }
        }
        Ok(())
    }

    fn push_epoch(&mut self, stage: Stage, sums: LossComponents, abs_err: f64, n: usize) {
        let n = n as f64;
        self.log.epochs.push(EpochRecord {
            epoch: self.state.epoch,
            cycle: self.state.cycle,
            stage,
            mse: sums.mse / n,
            clst: sums.clst / n,
            psd: sums.psd / n,
            total: sums.total / n,
            mae: abs_err / n,
        });
        self.state.epoch += 1;
    }
}

fn accumulate(sums: &mut LossComponents, c: &LossComponents, weight: f64) {
    sums.mse += c.mse * weight;
    sums.clst += c.clst * weight;
    sums.psd += c.psd * weight;
    sums.total += c.total * weight;
}

/// One epoch with full forward passes; `stage` selects the trainable groups.
fn full_epoch(ctx: &mut TrainContext, model: &mut ProtoModel, data: &SynthDataset, targets: &[f64], stage: Stage) -> Result<()> {
    let trainable = stage.trainable();
    let order = ctx.shuffled(data.len());
    let weights = ctx.loss.weights();
    let mut sums = LossComponents::default();
    let mut abs_err = 0.0;
    for batch in order.chunks(ctx.schedule.batch_size) {
        let images = if ctx.schedule.augment && stage != Stage::LastLayer {
            let mut flat = Vec::with_capacity(batch.len() * data.image_len());
            for &i in batch {
                flat.extend(augment(data.image(i), data.channels, data.height, data.width, &mut ctx.rng));
            }
            Tensor::new(vec![batch.len(), data.channels, data.height, data.width], flat)?
        } else {
            data.batch(batch)
        };
        let y: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
        let mut tape = Tape::new();
        let fp = model.forward(&mut tape, &images, trainable)?;
        let mse = mse_on_tape(&mut tape, fp.pred, &y)?;
        let clst = cluster_loss_on_tape(&mut tape, fp.dmin, &y, model.labels(), ctx.loss.k, ctx.loss.delta_l)?;
        let psd = psd_loss_on_tape(&mut tape, fp.dmin, model.bank.d_max)?;
        let comps = LossComponents {
            mse: tape.value(mse).data()[0],
            clst: tape.value(clst).data()[0],
            psd: tape.value(psd).data()[0],
            total: 0.0,
        };
        ctx.check(&comps, stage)?;
        let total = total_on_tape(&mut tape, mse, clst, psd, &weights).map_err(|_| ctx.non_finite("total", stage))?;
        let comps = LossComponents {
            total: tape.value(total).data()[0],
            ..comps
        };
        ctx.check(&comps, stage)?;
        let grads = tape.backward(total)?;
        for g in ParamGroup::ALL.into_iter().filter(|&g| trainable.contains(g)) {
            let gs: Vec<Tensor> = fp
                .vars
                .group(g)
                .iter()
                .zip(model.group_tensors(g))
                .map(|(&v, t)| grads.get_or_zeros(v, t))
                .collect();
            ctx.apply_update(model, stage, g, gs)?;
        }
        accumulate(&mut sums, &comps, batch.len() as f64);
        abs_err += tape
            .value(fp.pred)
            .data()
            .iter()
            .zip(&y)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>();
    }
    ctx.push_epoch(stage, sums, abs_err, data.len());
    Ok(())
}

/// Minimum distances `N x m` for the whole dataset, in sample order.
pub fn dataset_min_distances(model: &ProtoModel, data: &SynthDataset) -> Result<Tensor> {
    let m = model.bank.len();
    let mut out = Vec::with_capacity(data.len() * m);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend_from_slice(model.infer(&data.batch(chunk))?.dmin.data());
    }
    Ok(Tensor::new(vec![data.len(), m], out)?)
}

/// Trains the backbone and prototypes with the head frozen. The first
/// `warmup_epochs` epochs update only the prototypes and the final block.
pub fn joint_stage(
    ctx: &mut TrainContext,
    model: &mut ProtoModel,
    data: &SynthDataset,
    epochs: usize,
    warmup_epochs: usize,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let targets = data.internal_labels();
    for e in 0..epochs {
        let stage = if e < warmup_epochs { Stage::Warmup } else { Stage::Joint };
        ctx.state.stage = stage;
        full_epoch(ctx, model, data, &targets, stage)?;
    }
    Ok(())
}

/// Trains only the head. Backbone and prototypes are frozen, so minimum
/// distances are computed once up front unless augmentation is on.
pub fn lastlayer_stage(ctx: &mut TrainContext, model: &mut ProtoModel, data: &SynthDataset, epochs: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    ctx.state.stage = Stage::LastLayer;
    let targets = data.internal_labels();
    let dmin_all = dataset_min_distances(model, data)?;
    let m = model.bank.len();
    let weights = ctx.loss.weights();
    for _ in 0..epochs {
        let order = ctx.shuffled(data.len());
        let mut sums = LossComponents::default();
        let mut abs_err = 0.0;
        for batch in order.chunks(ctx.schedule.batch_size) {
            let mut rows = Vec::with_capacity(batch.len() * m);
            for &i in batch {
                rows.extend_from_slice(&dmin_all.data()[i * m..(i + 1) * m]);
            }
            let dmin = Tensor::new(vec![batch.len(), m], rows)?;
            let y: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let (theta, _, pred) = model.head_forward(&mut tape, &dmin, true)?;
            let dvar = tape.constant(dmin);
            let mse = mse_on_tape(&mut tape, pred, &y)?;
            let clst = cluster_loss_on_tape(&mut tape, dvar, &y, model.labels(), ctx.loss.k, ctx.loss.delta_l)?;
            let psd = psd_loss_on_tape(&mut tape, dvar, model.bank.d_max)?;
            let comps = LossComponents {
                mse: tape.value(mse).data()[0],
                clst: tape.value(clst).data()[0],
                psd: tape.value(psd).data()[0],
                total: 0.0,
            };
            ctx.check(&comps, Stage::LastLayer)?;
            let total = total_on_tape(&mut tape, mse, clst, psd, &weights)
                .map_err(|_| ctx.non_finite("total", Stage::LastLayer))?;
            let comps = LossComponents {
                total: tape.value(total).data()[0],
                ..comps
            };
            let grads = tape.backward(total)?;
            let g = grads.get_or_zeros(theta, &model.head.theta);
            ctx.apply_update(model, Stage::LastLayer, ParamGroup::Head, vec![g])?;
            accumulate(&mut sums, &comps, batch.len() as f64);
            abs_err += tape
                .value(pred)
                .data()
                .iter()
                .zip(&y)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>();
        }
        ctx.push_epoch(Stage::LastLayer, sums, abs_err, data.len());
    }
    Ok(())
}

/// Replaces every prototype by its nearest latent patch over the training
/// set. Ties go to the earliest (sample, row, col). Labels are untouched.
pub fn project_prototypes(model: &mut ProtoModel, data: &SynthDataset) -> Result<Vec<ProjectedPrototype>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let [c, h, w] = model.backbone.latent_shape();
    let hw = h * w;
    let m = model.bank.len();
    // best[j] = (distance, sample, position, patch)
    let mut best: Vec<(f64, usize, usize)> = vec![(f64::INFINITY, 0, 0); m];
    let mut best_patch: Vec<Vec<f64>> = vec![vec![0.0; c]; m];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let latent = model.backbone.extract_batch(&data.batch(chunk))?;
        let z = latent.data();
        for (b, &sample) in chunk.iter().enumerate() {
            let zs = &z[b * c * hw..(b + 1) * c * hw];
            for j in 0..m {
                let p = model.bank.vector(j);
                for q in 0..hw {
                    let mut d = 0.0;
                    for ch in 0..c {
                        let diff = zs[ch * hw + q] - p[ch];
                        d += diff * diff;
                    }
                    if d < best[j].0 {
                        best[j] = (d, sample, q);
                        for ch in 0..c {
                            best_patch[j][ch] = zs[ch * hw + q];
                        }
                    }
                }
            }
        }
    }
    let mut report = Vec::with_capacity(m);
    for j in 0..m {
        let (dist, sample, q) = best[j];
        let provenance = Provenance {
            sample,
            row: q / w,
            col: q % w,
        };
        let row = &mut model.bank.vectors.data_mut()[j * c..(j + 1) * c];
        row.copy_from_slice(&best_patch[j]);
        model.bank.provenance[j] = Some(provenance);
        report.push(ProjectedPrototype {
            index: j,
            label: model.labels()[j],
            distance_moved: dist,
            provenance,
        });
    }
    Ok(report)
}

/// Runs `schedule.cycles` cycles of joint -> projection -> last layer.
/// `on_stage_end` sees the model after every stage.
pub fn run_protocol<F>(
    model: &mut ProtoModel,
    data: &SynthDataset,
    schedule: &TrainSchedule,
    loss: &LossConfig,
    mut on_stage_end: F,
) -> Result<TrainingLog>
where
    F: FnMut(&ProtoModel, &StageState) -> Result<()>,
{
    let mut ctx = TrainContext::new(schedule.clone(), *loss)?;
    if schedule.cycles > 0 && data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for cycle in 1..=schedule.cycles {
        ctx.state.cycle = cycle;
        let warmup = if cycle == 1 { schedule.warmup_epochs } else { 0 };
        joint_stage(&mut ctx, model, data, schedule.joint_epochs, warmup)?;
        on_stage_end(model, &ctx.state)?;

        ctx.state.stage = Stage::Projection;
        let prototypes = project_prototypes(model, data)?;
        ctx.log.projections.push(ProjectionReport { cycle, prototypes });
        on_stage_end(model, &ctx.state)?;

        lastlayer_stage(&mut ctx, model, data, schedule.lastlayer_epochs)?;
        on_stage_end(model, &ctx.state)?;
    }
    Ok(ctx.log)
}

/// `k` disjoint validation folds covering `0..n`, sizes within one of each
/// other; each entry is `(train, val)` with sorted indices.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("cannot split {n} samples into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut val = order[start..start + size].to_vec();
        val.sort_unstable();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        train.sort_unstable();
        folds.push((train, val));
        start += size;
    }
    Ok(folds)
}
