use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ops::ConvGeom;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

/// One `conv → activation → pool` stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Non-overlapping max-pool window; 1 disables pooling.
    #[serde(default = "one")]
    pub pool: usize,
}

fn one() -> usize {
    1
}

impl ConvBlock {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        Self { out_channels, kernel, stride, pool }
    }
}

/// Layer description of a classifier: conv blocks, global pooling over the
/// last block's feature maps (average, or bounded-logit attention when
/// `attention` is set), then a linear logit head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock>,
    pub activation: Activation,
    pub num_classes: usize,
    #[serde(default)]
    pub attention: bool,
}

/// Geometry of a block as evaluated on a concrete input size.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub conv: ConvGeom,
    pub pool: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Architecture {
    /// Four conv blocks; the first three halve the grid with max pooling, the
    /// last keeps its resolution so GradCAM and attention see a spatial map.
    pub fn small_cnn(input_size: usize, channels: [usize; 4]) -> Self {
        Self {
            input_size,
            in_channels: 3,
            blocks: vec![
                ConvBlock::new(channels[0], 3, 1, 2),
                ConvBlock::new(channels[1], 3, 1, 2),
                ConvBlock::new(channels[2], 3, 1, 2),
                ConvBlock::new(channels[3], 3, 1, 1),
            ],
            activation: Activation::Relu,
            num_classes: 2,
            attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(Error::Config("input size and channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let (mut h, mut w) = (self.input_size, self.input_size);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.kernel % 2 == 0 || b.stride == 0 || b.pool == 0 {
                return Err(Error::Config(format!(
                    "block {i}: channels/stride/pool must be positive and kernel odd"
                )));
            }
            let g = ConvGeom::new(1, h, w, 1, b.kernel, b.stride);
            h = g.out_h / b.pool;
            w = g.out_w / b.pool;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("block {i} reduces the grid to zero")));
            }
        }
        if self.attention && self.blocks.is_empty() {
            return Err(Error::Capability("attention requires a convolutional layer".into()));
        }
        Ok(())
    }

    pub fn has_conv(&self) -> bool {
        !self.blocks.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input_size * self.input_size
    }

    pub fn block_shapes(&self) -> Vec<BlockShape> {
        let (mut c, mut h, mut w) = (self.in_channels, self.input_size, self.input_size);
        self.blocks
            .iter()
            .map(|b| {
                let conv = ConvGeom::new(c, h, w, b.out_channels, b.kernel, b.stride);
                let shape = BlockShape { conv, pool: b.pool, out_h: conv.out_h / b.pool, out_w: conv.out_w / b.pool };
                c = b.out_channels;
                h = shape.out_h;
                w = shape.out_w;
                shape
            })
            .collect()
    }

    /// `(channels, height, width)` of the maps entering global pooling.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        match self.block_shapes().last() {
            Some(s) => (s.conv.out_c, s.out_h, s.out_w),
            None => (self.in_channels, self.input_size, self.input_size),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Offsets of every parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub conv: Vec<ConvParams>,
    pub head_weight: Range<usize>,
    pub head_bias: Range<usize>,
    /// Per-channel attention weights and a scalar bias.
    pub attention: Option<ConvParams>,
    pub len: usize,
}

impl ParamLayout {
    fn new(arch: &Architecture) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let conv = arch
            .block_shapes()
            .iter()
            .map(|s| ConvParams { weight: take(s.conv.weight_len()), bias: take(s.conv.out_c) })
            .collect();
        let (fc, _, _) = arch.feature_shape();
        let head_weight = take(arch.num_classes * fc);
        let head_bias = take(arch.num_classes);
        let attention = arch.attention.then(|| ConvParams { weight: take(fc), bias: take(1) });
        Self { conv, head_weight, head_bias, attention, len: at }
    }

    /// Start of the head parameters; everything before belongs to the conv backbone.
    pub fn backbone_len(&self) -> usize {
        self.head_weight.start
    }
}
