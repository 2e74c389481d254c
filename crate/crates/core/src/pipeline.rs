//! End-to-end runs: train from a [`RunConfig`], evaluate, ablate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::{evaluate, Metrics};
use crate::model::ProtoModel;
use crate::prototype::SimilarityKind;
use crate::synth::SynthDataset;
use crate::trainer::{run_protocol, StageState, TrainingLog};

pub fn build_model(cfg: &RunConfig) -> Result<ProtoModel> {
    cfg.validate()?;
    ProtoModel::new(cfg.backbone.clone(), &cfg.prototypes, cfg.seed)
}

/// Builds a fresh model and runs the full protocol on `train`.
pub fn train<F>(cfg: &RunConfig, train: &SynthDataset, on_stage_end: F) -> Result<(ProtoModel, TrainingLog)>
where
    F: FnMut(&ProtoModel, &StageState) -> Result<()>,
{
    let mut model = build_model(cfg)?;
    let log = run_protocol(&mut model, train, &cfg.schedule, &cfg.loss, on_stage_end)?;
    Ok((model, log))
}

pub fn train_and_evaluate(cfg: &RunConfig, train_set: &SynthDataset, test_set: &SynthDataset) -> Result<Metrics> {
    let (model, _) = train(cfg, train_set, |_, _| Ok(()))?;
    Ok(evaluate(&model, test_set)?.metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub similarity: SimilarityKind,
    pub alpha_clst: f64,
    pub alpha_psd: f64,
    pub k: usize,
    /// Offset added to the configured seeds.
    pub seed: usize,
}

impl AblationCell {
    /// The configuration this cell trains with.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.prototypes.similarity = self.similarity;
        cfg.loss.alpha_clst = self.alpha_clst;
        cfg.loss.alpha_psd = self.alpha_psd;
        cfg.loss.k = self.k;
        cfg.seed = base.seed.wrapping_add(self.seed as u64);
        cfg.schedule.seed = base.schedule.seed.wrapping_add(self.seed as u64);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Cartesian product of the ablation axes, seeds innermost.
pub fn ablation_cells(cfg: &RunConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &similarity in &cfg.similarity_axis() {
        for &alpha_clst in &cfg.alpha_clst_axis() {
            for &alpha_psd in &cfg.alpha_psd_axis() {
                for &k in &cfg.k_axis() {
                    for seed in 0..cfg.ablation_seeds() {
                        cells.push(AblationCell {
                            similarity,
                            alpha_clst,
                            alpha_psd,
                            k,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

/// Trains and evaluates every cell. Cells run on the current rayon pool;
/// each has its own model and seeds, so results do not depend on the
/// thread count.
pub fn ablate(cfg: &RunConfig, train_set: &SynthDataset, test_set: &SynthDataset) -> Result<AblationTable> {
    cfg.validate()?;
    let cells = ablation_cells(cfg);
    let rows = cells
        .into_par_iter()
        .map(|cell| {
            let metrics = train_and_evaluate(&cell.apply(cfg), train_set, test_set)?;
            Ok(AblationRow { cell, metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "similarity,alpha_clst,alpha_psd,k,seed,mae,accuracy,sparsity,diversity";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let c = &r.cell;
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{:e},{:e},{:e},{}\n",
                c.similarity.name(),
                c.alpha_clst,
                c.alpha_psd,
                c.k,
                c.seed,
                m.mae,
                m.accuracy,
                m.sparsity,
                m.diversity
            ));
        }
        out
    }

    /// One line per configuration, metrics averaged over seeds.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| similarity | alpha_clst | alpha_psd | k | seeds | MAE | accuracy | s_spars (mean) | diversity |\n\
             |---|---|---|---|---|---|---|---|---|\n",
        );
        let mut i = 0;
        while i < self.rows.len() {
            let key = |r: &AblationRow| (r.cell.similarity, r.cell.alpha_clst, r.cell.alpha_psd, r.cell.k);
            let group: Vec<&AblationRow> = self.rows[i..].iter().take_while(|r| key(r) == key(&self.rows[i])).collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&Metrics) -> f64| group.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
            let c = &group[0].cell;
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.3} | {:.3} | {:.2} | {:.1} |\n",
                c.similarity.name(),
                c.alpha_clst,
                c.alpha_psd,
                c.k,
                group.len(),
                mean(&|m| m.mae),
                mean(&|m| m.accuracy),
                mean(&|m| m.sparsity),
                mean(&|m| m.diversity as f64)
            ));
            i += group.len();
        }
        out
    }
}
