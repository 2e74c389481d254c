//! Plain CNN regressor used as a reference fixture: the same backbone,
//! global average pooling over the latent grid, then one linear unit.
//! Trained end to end on MSE with Adam.

use insightr_tensor::{AdamConfig, AdamState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::losses::mse_on_tape;
use crate::synth::SynthDataset;
use crate::trainer::EVAL_BATCH;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 30,
            lr: 2e-3,
            batch_size: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub backbone: Backbone,
    /// `c_z x 1`
    pub weight: Tensor,
    /// Length 1.
    pub bias: Tensor,
}

impl BaselineModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(config, seed)?;
        let c = backbone.config.latent_channels;
        let bound = (1.0 / c as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let w = (0..c).map(|_| rand::Rng::random_range(&mut rng, -bound..bound)).collect();
        Ok(BaselineModel {
            backbone,
            weight: Tensor::new(vec![c, 1], w)?,
            // Start at the middle of the internal label range.
            bias: Tensor::from_vec(vec![3.0]),
        })
    }

    fn forward(&self, tape: &mut Tape, images: &Tensor, train: bool) -> Result<(Vec<Var>, Var)> {
        self.backbone.check_input(images)?;
        let bv = self.backbone.register(tape, train, train);
        let w = tape.leaf(self.weight.clone(), train);
        let b = tape.leaf(self.bias.clone(), train);
        let x = tape.constant(images.clone());
        let z = self.backbone.forward(tape, &bv, x)?;
        let [c, h, wd] = self.backbone.latent_shape();
        let n = images.shape()[0];
        let flat = tape.reshape(z, &[n, c, h * wd])?;
        let pooled = tape.mean_last(flat)?;
        let out = tape.matmul(pooled, w)?;
        let bias = tape.tile_rows(b, n)?;
        let out = tape.add(out, bias)?;
        let pred = tape.reshape(out, &[n])?;
        let mut vars: Vec<Var> = bv.blocks.iter().chain(&bv.final_block).flat_map(|&(a, b)| [a, b]).collect();
        vars.push(w);
        vars.push(b);
        Ok((vars, pred))
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .backbone
            .blocks
            .iter()
            .chain(&self.backbone.final_block)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        out.push(&self.weight);
        out.push(&self.bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let BaselineModel { backbone, weight, bias } = self;
        let mut out: Vec<&mut Tensor> = backbone
            .blocks
            .iter_mut()
            .chain(backbone.final_block.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.push(weight);
        out.push(bias);
        out
    }

    /// Predictions on the internal label scale, in sample order.
    pub fn predict(&self, data: &SynthDataset) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in idx.chunks(EVAL_BATCH) {
            let mut tape = Tape::new();
            let (_, pred) = self.forward(&mut tape, &data.batch(chunk), false)?;
            out.extend_from_slice(tape.value(pred).data());
        }
        Ok(out)
    }
}

/// Trains on the internal labels; returns the per-epoch training MSE.
pub fn train_baseline(model: &mut BaselineModel, data: &SynthDataset, cfg: &BaselineConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let targets = data.internal_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig::default(), model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let y: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let (vars, pred) = model.forward(&mut tape, &data.batch(batch), true)?;
            let loss = mse_on_tape(&mut tape, pred, &y)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteComponent("mse"));
            }
            let grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = vars
                .iter()
                .zip(model.params())
                .map(|(&v, t)| grads.get_or_zeros(v, t))
                .collect();
            let refs: Vec<&Tensor> = gs.iter().collect();
            adam.step(&mut model.params_mut(), &refs, cfg.lr)?;
            sum += value * batch.len() as f64;
        }
        history.push(sum / data.len() as f64);
    }
    Ok(history)
}
