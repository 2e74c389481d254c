//! Run configuration: every hyperparameter in one TOML file.
//!
//! Unknown keys are rejected; missing keys take the defaults shown in
//! [`TEMPLATE`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::baseline::BaselineConfig;
use crate::error::{Error, Result};
use crate::model::PrototypeConfig;
use crate::prototype::SimilarityKind;
use crate::synth::SynthConfig;
use crate::trainer::{LossConfig, TrainSchedule};

/// Axes of the ablation matrix. An omitted axis defaults to the ablated
/// value plus the value of the resolved configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<Vec<SimilarityKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_clst: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_psd: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    /// Seeds per cell; cell seed `i` offsets both model and shuffle seeds by `i`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root for command outputs when `--out` is not given.
    pub out_root: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_root: "runs".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization.
    pub seed: u64,
    pub data: SynthConfig,
    pub backbone: BackboneConfig,
    pub prototypes: PrototypeConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub baseline: BaselineConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

/// The full default configuration, documented.
pub const TEMPLATE: &str = r#"# Parameter-initialization seed.
seed = 0

[data]
width = 32
height = 32
# Gray images are replicated across channels.
channels = 3
grades = 5
train_per_grade = 100
test_per_grade = 50
# A grade-g image holds g * blobs_per_grade disjoint dark disks.
blobs_per_grade = 2
blob_radius_min = 1.5
blob_radius_max = 2.5
noise_sigma = 0.05
background = 0.8
blob_level = 0.2
# Re-draw train labels uniformly within half a grade of the class.
continuous_labels = false
seed = 1

[backbone]
input_width = 32
input_height = 32
input_channels = 3
final_hidden = 32
# Depth c_z of the latent volume and its traced grid.
latent_channels = 16
latent_width = 3
latent_height = 3

[[backbone.blocks]]
out_channels = 16
kernel = 4
stride = 2

[[backbone.blocks]]
out_channels = 32
kernel = 3
stride = 2

[[backbone.blocks]]
out_channels = 32
kernel = 3
stride = 1

[[backbone.blocks]]
out_channels = 32
kernel = 3
stride = 1

[prototypes]
# Number of prototypes m; labels are spaced evenly over [label_min, label_max].
count = 10
label_min = 0.1
label_max = 5.9
# "reciprocal" or "log".
similarity = "reciprocal"
eps = 0.0001
init_low = 0.2
init_high = 0.8

[loss]
alpha_mse = 1.0
alpha_clst = 1.0
alpha_psd = 10.0
k = 3
delta_l = 0.5

[schedule]
cycles = 2
joint_epochs = 10
lastlayer_epochs = 5
warmup_epochs = 3
lr_backbone = 0.005
lr_protolayer = 0.005
lr_head = 0.05
batch_size = 30
seed = 0
augment = false

[baseline]
epochs = 30
lr = 0.002
batch_size = 30
seed = 0

[ablation]
# Omitted axes default to the ablated value plus the configured value:
# similarity = ["reciprocal", "log"]
# alpha_clst = [0.0, <loss.alpha_clst>]
# alpha_psd = [0.0, <loss.alpha_psd>]
# k = [1, <loss.k>]
# seeds = 1

[paths]
out_root = "runs"
"#;

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolved configuration as TOML, with every key present.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        let d = &self.data;
        let b = &self.backbone;
        if (d.width, d.height, d.channels) != (b.input_width, b.input_height, b.input_channels) {
            return Err(Error::Config(format!(
                "data images are {}x{}x{} but the backbone expects {}x{}x{}",
                d.width, d.height, d.channels, b.input_width, b.input_height, b.input_channels
            )));
        }
        crate::prototype::check_eps(self.prototypes.eps)?;
        crate::prototype::assign_prototype_labels(
            self.prototypes.count,
            self.prototypes.label_min,
            self.prototypes.label_max,
        )?;
        if self.ablation.seeds == Some(0) {
            return Err(Error::Config("ablation.seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// 8x8 inputs, `c_z = 4`, `m = 3`: small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny() -> Self {
        RunConfig {
            data: SynthConfig {
                width: 8,
                height: 8,
                grades: 3,
                train_per_grade: 4,
                test_per_grade: 2,
                blobs_per_grade: 1,
                blob_radius_min: 0.75,
                blob_radius_max: 0.75,
                ..SynthConfig::default()
            },
            backbone: BackboneConfig::tiny(),
            prototypes: PrototypeConfig {
                count: 3,
                label_min: 0.5,
                label_max: 3.5,
                ..PrototypeConfig::default()
            },
            schedule: TrainSchedule {
                cycles: 1,
                joint_epochs: 2,
                lastlayer_epochs: 2,
                warmup_epochs: 1,
                batch_size: 4,
                ..TrainSchedule::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn similarity_axis(&self) -> Vec<SimilarityKind> {
        self.ablation.similarity.clone().unwrap_or_else(|| {
            dedup(vec![self.prototypes.similarity, SimilarityKind::Reciprocal, SimilarityKind::Log])
        })
    }

    pub fn alpha_clst_axis(&self) -> Vec<f64> {
        self.ablation.alpha_clst.clone().unwrap_or_else(|| dedup(vec![0.0, self.loss.alpha_clst]))
    }

    pub fn alpha_psd_axis(&self) -> Vec<f64> {
        self.ablation.alpha_psd.clone().unwrap_or_else(|| dedup(vec![0.0, self.loss.alpha_psd]))
    }

    pub fn k_axis(&self) -> Vec<usize> {
        self.ablation.k.clone().unwrap_or_else(|| dedup(vec![1, self.loss.k]))
    }

    pub fn ablation_seeds(&self) -> usize {
        self.ablation.seeds.unwrap_or(1)
    }
}

fn dedup<T: PartialEq>(v: Vec<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len());
    for x in v {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}
