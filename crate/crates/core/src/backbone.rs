//! Convolutional feature extractor producing a sigmoid-bounded latent volume.
//!
//! The stack is a list of `Conv + ReLU` blocks followed by one final block
//! `Conv1x1 + ReLU + Conv1x1 + Sigmoid`. Convolutions are unpadded, so the
//! latent grid is fully determined by the block list and is checked at
//! construction.

use insightr_tensor::{conv_out_len, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
    /// Width of the hidden layer inside the final block.
    pub final_hidden: usize,
    /// Latent depth `c_z`.
    pub latent_channels: usize,
    pub latent_width: usize,
    pub latent_height: usize,
}

impl Default for BackboneConfig {
    /// 32x32x3 input, two stride-2 blocks and two stride-1 blocks:
    /// 32 -> 15 -> 7 -> 5 -> 3. Each latent cell sees a 24x24 window.
    fn default() -> Self {
        BackboneConfig {
            input_width: 32,
            input_height: 32,
            input_channels: 3,
            blocks: vec![
                ConvBlockSpec { out_channels: 16, kernel: 4, stride: 2 },
                ConvBlockSpec { out_channels: 32, kernel: 3, stride: 2 },
                ConvBlockSpec { out_channels: 32, kernel: 3, stride: 1 },
                ConvBlockSpec { out_channels: 32, kernel: 3, stride: 1 },
            ],
            final_hidden: 32,
            latent_channels: 16,
            latent_width: 3,
            latent_height: 3,
        }
    }
}

impl BackboneConfig {
    /// Minimal stack for 8x8 inputs: 8 -> 3 -> 2.
    pub fn tiny() -> Self {
        BackboneConfig {
            input_width: 8,
            input_height: 8,
            input_channels: 3,
            blocks: vec![
                ConvBlockSpec { out_channels: 4, kernel: 3, stride: 2 },
                ConvBlockSpec { out_channels: 4, kernel: 2, stride: 1 },
            ],
            final_hidden: 4,
            latent_channels: 4,
            latent_width: 2,
            latent_height: 2,
        }
    }

    /// Spatial size after the block stack, or a message describing the first
    /// block that does not fit.
    pub fn traced_grid(&self) -> Result<(usize, usize)> {
        let (mut w, mut h) = (self.input_width, self.input_height);
        for (i, b) in self.blocks.iter().enumerate() {
            match (conv_out_len(w, b.kernel, b.stride), conv_out_len(h, b.kernel, b.stride)) {
                (Some(nw), Some(nh)) => (w, h) = (nw, nh),
                _ => {
                    return Err(Error::Config(format!(
                        "block {i} (kernel {}, stride {}) does not fit a {w}x{h} input",
                        b.kernel, b.stride
                    )))
                }
            }
        }
        Ok((w, h))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.latent_channels == 0 || self.final_hidden == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.blocks.iter().any(|b| b.out_channels == 0) {
            return Err(Error::Config("block out_channels must be positive".into()));
        }
        let (w, h) = self.traced_grid()?;
        if (w, h) != (self.latent_width, self.latent_height) {
            return Err(Error::Dimension {
                what: "latent grid",
                expected: format!("{}x{}", self.latent_width, self.latent_height),
                actual: format!("{w}x{h}"),
            });
        }
        if w <= 1 || h <= 1 {
            return Err(Error::Config(format!(
                "latent grid must be larger than 1x1 on both axes, got {w}x{h}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvLayer {
    fn init(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = out_ch * in_ch * kernel * kernel;
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        ConvLayer {
            weight: Tensor::new(vec![out_ch, in_ch, kernel, kernel], data).expect("weight shape"),
            bias: Tensor::zeros(&[out_ch]),
            stride,
        }
    }
}

/// `f`: image batch to latent volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// The configured blocks, each followed by ReLU.
    pub blocks: Vec<ConvLayer>,
    /// The final `Conv + ReLU + Conv + Sigmoid` block (two layers).
    pub final_block: [ConvLayer; 2],
}

/// Tape handles for backbone parameters.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub blocks: Vec<(Var, Var)>,
    pub final_block: [(Var, Var); 2],
}

impl Backbone {
    /// Uniform fan-in-scaled initialization from `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = config.input_channels;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for b in &config.blocks {
            blocks.push(ConvLayer::init(&mut rng, b.out_channels, in_ch, b.kernel, b.stride));
            in_ch = b.out_channels;
        }
        let hidden = ConvLayer::init(&mut rng, config.final_hidden, in_ch, 1, 1);
        let out = ConvLayer::init(&mut rng, config.latent_channels, config.final_hidden, 1, 1);
        Ok(Backbone {
            config,
            blocks,
            final_block: [hidden, out],
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.config.latent_channels,
            self.config.latent_height,
            self.config.latent_width,
        ]
    }

    pub fn check_input(&self, images: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_height, c.input_width];
        let ok = images.ndim() == 4 && images.shape()[1..] == expected;
        if !ok {
            return Err(Error::Dimension {
                what: "input image batch",
                expected: format!("N x {expected:?}"),
                actual: format!("{:?}", images.shape()),
            });
        }
        Ok(())
    }

    /// Registers parameters on `tape`; `early` and `last` choose which
    /// groups are trainable.
    pub fn register(&self, tape: &mut Tape, early: bool, last: bool) -> BackboneVars {
        let reg = |tape: &mut Tape, l: &ConvLayer, rg: bool| {
            (tape.leaf(l.weight.clone(), rg), tape.leaf(l.bias.clone(), rg))
        };
        BackboneVars {
            blocks: self.blocks.iter().map(|l| reg(tape, l, early)).collect(),
            final_block: [
                reg(tape, &self.final_block[0], last),
                reg(tape, &self.final_block[1], last),
            ],
        }
    }

    /// Forward pass of an `N x C x H x W` batch to an `N x c_z x h_z x w_z` latent.
    pub fn forward(&self, tape: &mut Tape, vars: &BackboneVars, images: Var) -> Result<Var> {
        let mut x = images;
        for (layer, &(w, b)) in self.blocks.iter().zip(&vars.blocks) {
            let y = tape.conv2d(x, w, layer.stride)?;
            let y = tape.bias_add(y, b)?;
            x = tape.relu(y);
        }
        let [(w1, b1), (w2, b2)] = vars.final_block;
        let y = tape.conv2d(x, w1, 1)?;
        let y = tape.bias_add(y, b1)?;
        let y = tape.relu(y);
        let y = tape.conv2d(y, w2, 1)?;
        let y = tape.bias_add(y, b2)?;
        Ok(tape.sigmoid(y))
    }

    /// Inference-only latent volumes for a batch, in input order.
    pub fn extract_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false, false);
        let x = tape.constant(images.clone());
        let z = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn extract_features(&self, image: &Tensor, sample_id: usize) -> Result<LatentVolume> {
        let c = &self.config;
        if image.shape() != [c.input_channels, c.input_height, c.input_width] {
            return Err(Error::Dimension {
                what: "input image",
                expected: format!("{:?}", [c.input_channels, c.input_height, c.input_width]),
                actual: format!("{:?}", image.shape()),
            });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let z = self.extract_batch(&image.reshape(&shape)?)?;
        Ok(LatentVolume {
            values: z.reshape(&self.latent_shape())?,
            sample_id,
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .chain(self.final_block.iter())
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// `Z = f(X)` for one sample, stored channel-first as `c_z x h_z x w_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVolume {
    pub values: Tensor,
    pub sample_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPatch {
    pub row: usize,
    pub col: usize,
    pub vector: Vec<f64>,
}

impl LatentVolume {
    pub fn depth(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn patch(&self, row: usize, col: usize) -> Vec<f64> {
        let (h, w) = self.grid();
        (0..self.depth())
            .map(|c| self.values.data()[(c * h + row) * w + col])
            .collect()
    }

    /// All `h_z * w_z` patches in row-major scan order.
    pub fn split_patches(&self) -> Vec<LatentPatch> {
        let (h, w) = self.grid();
        let mut out = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                out.push(LatentPatch {
                    row,
                    col,
                    vector: self.patch(row, col),
                });
            }
        }
        out
    }

    /// Inverse of [`split_patches`](Self::split_patches).
    pub fn from_patches(patches: &[LatentPatch], height: usize, width: usize, sample_id: usize) -> Result<Self> {
        let depth = patches.first().map(|p| p.vector.len()).ok_or(Error::Empty("patches"))?;
        if patches.len() != height * width {
            return Err(Error::Dimension {
                what: "patch count",
                expected: (height * width).to_string(),
                actual: patches.len().to_string(),
            });
        }
        let mut data = vec![0.0; depth * height * width];
        for p in patches {
            for (c, &v) in p.vector.iter().enumerate() {
                data[(c * height + p.row) * width + p.col] = v;
            }
        }
        Ok(LatentVolume {
            values: Tensor::new(vec![depth, height, width], data)?,
            sample_id,
        })
    }
}
