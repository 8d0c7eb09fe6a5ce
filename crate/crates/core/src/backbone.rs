//! Shared-weight residual 3D-convolution pyramid.
//!
//! Five sequential blocks; features are tapped after every block so the
//! projection can pick any subset (block3/4/5 by default).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Conv3d;
use crate::nn::{ConvGeometry, Graph, Init, ParamStore, Scalar, Var};

pub const NUM_BLOCKS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of block1..block5.
    pub channels: [usize; NUM_BLOCKS],
    /// (t, h, w) stride of the first convolution in each block.
    pub strides: [[usize; 3]; NUM_BLOCKS],
    pub kernel: [usize; 3],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// Desk-scale pyramid: 3x16x32x32 clips, channels 8/16/24/32/48.
    pub fn toy() -> Self {
        BackboneConfig {
            in_channels: 3,
            channels: [8, 16, 24, 32, 48],
            strides: [[2, 2, 2], [2, 2, 2], [1, 1, 1], [2, 2, 2], [1, 1, 1]],
            kernel: [3, 3, 3],
            frames: 16,
            height: 32,
            width: 32,
        }
    }

    /// Large preset with 80-frame snippets. Constructible, not trained here.
    pub fn full_scale() -> Self {
        BackboneConfig {
            in_channels: 3,
            channels: [24, 48, 96, 192, 384],
            strides: [[2, 2, 2], [2, 2, 2], [1, 2, 2], [2, 2, 2], [1, 1, 1]],
            kernel: [3, 3, 3],
            frames: 80,
            height: 160,
            width: 160,
        }
    }

    /// Output (t, h, w) extents after each block.
    pub fn block_extents(&self) -> Result<[[usize; 3]; NUM_BLOCKS]> {
        let mut ext = [self.frames, self.height, self.width];
        let mut out = [[0; 3]; NUM_BLOCKS];
        let pad = self.kernel.map(|k| k / 2);
        for (i, stride) in self.strides.iter().enumerate() {
            ext = ConvGeometry::new(*stride, pad)
                .output_extents(ext, self.kernel)
                .map_err(|e| Error::Config(format!("block{}: {e}", i + 1)))?;
            out[i] = ext;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "backbone channel widths must be positive".into(),
            ));
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!(
                "backbone kernel must be odd and positive, got {:?}",
                self.kernel
            )));
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return Err(Error::Config("backbone strides must be positive".into()));
        }
        if self.channels[2] > self.channels[3] || self.channels[3] > self.channels[4] {
            return Err(Error::Config(format!(
                "block3..block5 channel widths must be non-decreasing, got {:?}",
                &self.channels[2..]
            )));
        }
        self.block_extents()?;
        Ok(())
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.in_channels, self.frames, self.height, self.width]
    }
}

/// One residual block: `relu(conv_b(relu(conv_a(x))) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv_a: Conv3d,
    pub conv_b: Conv3d,
    /// 1x1x1 strided projection when the shape changes.
    pub shortcut: Option<Conv3d>,
}

impl ResidualBlock {
    fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let a = self.conv_a.forward(g, x)?;
        let a = g.relu(a)?;
        let b = self.conv_b.forward(g, a)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(g, x)?,
            None => x,
        };
        let sum = g.add(b, skip)?;
        g.relu(sum)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<ResidualBlock>,
}

/// Per-stream pyramid: the output of every block.
#[derive(Debug, Clone, Copy)]
pub struct BlockFeatures {
    pub taps: [Var; NUM_BLOCKS],
}

impl BlockFeatures {
    /// Output of block `i`, 1-based.
    pub fn block(&self, i: usize) -> Var {
        self.taps[i - 1]
    }

    pub fn g3(&self) -> Var {
        self.block(3)
    }

    pub fn g4(&self) -> Var {
        self.block(4)
    }

    pub fn g5(&self) -> Var {
        self.block(5)
    }
}

impl Backbone {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        config: &BackboneConfig,
    ) -> Result<Self> {
        config.validate()?;
        let pad = config.kernel.map(|k| k / 2);
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = config.in_channels;
        for (i, (&c_out, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let name = format!("{prefix}.block{}", i + 1);
            let conv_a = Conv3d::new(
                store,
                init,
                &format!("{name}.conv_a"),
                c_in,
                c_out,
                config.kernel,
                ConvGeometry::new(stride, pad),
            )?;
            let conv_b = Conv3d::new(
                store,
                init,
                &format!("{name}.conv_b"),
                c_out,
                c_out,
                config.kernel,
                ConvGeometry::new([1, 1, 1], pad),
            )?;
            let shortcut = if c_in != c_out || stride != [1, 1, 1] {
                Some(Conv3d::new(
                    store,
                    init,
                    &format!("{name}.shortcut"),
                    c_in,
                    c_out,
                    [1, 1, 1],
                    ConvGeometry::new(stride, [0, 0, 0]),
                )?)
            } else {
                None
            };
            blocks.push(ResidualBlock {
                conv_a,
                conv_b,
                shortcut,
            });
            c_in = c_out;
        }
        Ok(Backbone {
            config: config.clone(),
            blocks,
        })
    }

    fn check_clip(&self, shape: &[usize]) -> Result<()> {
        let want = self.config.clip_shape();
        if shape.len() != 5 || shape[1..] != want {
            return Err(Error::Config(format!(
                "clip extents mismatch: expected [b, {}, {}, {}, {}], got {shape:?}",
                want[0], want[1], want[2], want[3]
            )));
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, clip: Var) -> Result<BlockFeatures> {
        self.check_clip(g.shape(clip))?;
        let mut x = clip;
        let mut taps = [clip; NUM_BLOCKS];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x)?;
            taps[i] = x;
        }
        Ok(BlockFeatures { taps })
    }

    /// Runs the same parameters over both streams.
    pub fn dual_forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        leader: Var,
        assistant: Var,
    ) -> Result<(BlockFeatures, BlockFeatures)> {
        Ok((self.forward(g, leader)?, self.forward(g, assistant)?))
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                b.conv_a.num_params()
                    + b.conv_b.num_params()
                    + b.shortcut.as_ref().map_or(0, |s| s.num_params())
            })
            .sum()
    }
}
