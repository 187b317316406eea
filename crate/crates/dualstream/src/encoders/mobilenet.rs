//! Inverted-residual convolutional motion encoder.
//!
//! A width-scalable stack of expand / depthwise / linear-bottleneck blocks
//! over the 20-channel flow stack, ending in a 1x1 feature conv and global
//! average pooling. The stem accepts an arbitrary channel count so the flow
//! input plugs in directly.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2dLayer, Conv2dLayer};
use super::EncoderError;
use crate::tensor::ops::global_avg_pool;
use crate::tensor::{ParamRegistry, Scalar, Tape, TensorError, Var};

/// One inverted-residual stage: expansion factor, base output channels,
/// block count, first-block stride.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct StageSpec {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

fn default_stem_channels() -> usize {
    32
}
fn default_final_channels() -> usize {
    1280
}
fn default_width() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MobileNetV2Config {
    pub in_channels: usize,
    pub input_size: usize,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    #[serde(default = "default_stem_channels")]
    pub stem_channels: usize,
    #[serde(default = "default_final_channels")]
    pub final_channels: usize,
    /// Explicit feature width; when absent it is `final_channels` scaled by
    /// the width multiplier (rounded to a multiple of 8).
    #[serde(default)]
    pub final_dim: Option<usize>,
    pub stages: Vec<StageSpec>,
}

impl MobileNetV2Config {
    /// The full-scale flow encoder: 20-channel stem, standard stage table.
    pub fn paper() -> Self {
        Self {
            in_channels: 20,
            input_size: 224,
            width_multiplier: 1.0,
            stem_channels: 32,
            final_channels: 1280,
            final_dim: None,
            stages: vec![
                StageSpec { expansion: 1, channels: 16, repeats: 1, stride: 1 },
                StageSpec { expansion: 6, channels: 24, repeats: 2, stride: 2 },
                StageSpec { expansion: 6, channels: 32, repeats: 3, stride: 2 },
                StageSpec { expansion: 6, channels: 64, repeats: 4, stride: 2 },
                StageSpec { expansion: 6, channels: 96, repeats: 3, stride: 1 },
                StageSpec { expansion: 6, channels: 160, repeats: 3, stride: 2 },
                StageSpec { expansion: 6, channels: 320, repeats: 1, stride: 1 },
            ],
        }
    }

    pub fn scaled(&self, base: usize) -> usize {
        make_divisible(base as f64 * self.width_multiplier, 8)
    }

    pub fn resolved_final_dim(&self) -> usize {
        self.final_dim
            .unwrap_or_else(|| self.scaled(self.final_channels))
    }
}

/// Rounds a scaled channel count to a multiple of `divisor`, never dropping
/// more than 10% below the unrounded value.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d).floor() * d;
    if new_v < d {
        new_v = d;
    }
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

struct ConvBnRelu6<T: Scalar> {
    conv: Conv2dLayer<T>,
    bn: BatchNorm2dLayer<T>,
    relu6: bool,
}

impl<T: Scalar> ConvBnRelu6<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        scope: &str,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        relu6: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2dLayer::new(
                &format!("{scope}.conv"),
                out_ch,
                in_ch,
                kernel,
                stride,
                (kernel - 1) / 2,
                groups,
                false,
                rng,
            ),
            bn: BatchNorm2dLayer::new(&format!("{scope}.bn"), out_ch),
            relu6,
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        train: bool,
    ) -> Result<Var<'t, T>, TensorError> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, train)?;
        Ok(if self.relu6 { y.relu6() } else { y })
    }

    fn register(&self, reg: &mut ParamRegistry<T>) {
        self.conv.register(reg);
        self.bn.register(reg);
    }
}

/// Expand (1x1) -> depthwise (3x3) -> project (1x1, linear), shortcut when
/// stride is 1 and the channel count is preserved.
pub struct InvertedResidual<T: Scalar> {
    expand: Option<ConvBnRelu6<T>>,
    depthwise: ConvBnRelu6<T>,
    project: ConvBnRelu6<T>,
    pub use_residual: bool,
}

impl<T: Scalar> InvertedResidual<T> {
    pub fn new(
        scope: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = in_ch * expansion;
        let expand = (expansion != 1).then(|| {
            ConvBnRelu6::new(&format!("{scope}.expand"), hidden, in_ch, 1, 1, 1, true, rng)
        });
        let depthwise = ConvBnRelu6::new(
            &format!("{scope}.depthwise"),
            hidden,
            hidden,
            3,
            stride,
            hidden,
            true,
            rng,
        );
        let project = ConvBnRelu6::new(&format!("{scope}.project"), out_ch, hidden, 1, 1, 1, false, rng);
        Self {
            expand,
            depthwise,
            project,
            use_residual: stride == 1 && in_ch == out_ch,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        train: bool,
    ) -> Result<Var<'t, T>, TensorError> {
        let mut y = x;
        if let Some(expand) = &self.expand {
            y = expand.forward(tape, y, train)?;
        }
        y = self.depthwise.forward(tape, y, train)?;
        y = self.project.forward(tape, y, train)?;
        if self.use_residual {
            y = x.add(y)?;
        }
        Ok(y)
    }

    /// Zeroes the projection conv, making the branch an exact no-op.
    pub fn zero_projection(&self) {
        let w = &self.project.conv.weight;
        w.set_value(crate::tensor::Tensor::zeros(&w.shape()));
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        if let Some(expand) = &self.expand {
            expand.register(reg);
        }
        self.depthwise.register(reg);
        self.project.register(reg);
    }
}

pub struct MobileNetV2<T: Scalar> {
    pub cfg: MobileNetV2Config,
    stem: ConvBnRelu6<T>,
    blocks: Vec<InvertedResidual<T>>,
    head: ConvBnRelu6<T>,
}

impl<T: Scalar> MobileNetV2<T> {
    pub fn new(
        scope: &str,
        cfg: MobileNetV2Config,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        if cfg.stages.is_empty() {
            return Err(EncoderError::ConfigMismatch("empty stage table".into()));
        }
        let stem_ch = cfg.scaled(cfg.stem_channels);
        let stem = ConvBnRelu6::new(
            &format!("{scope}.stem"),
            stem_ch,
            cfg.in_channels,
            3,
            2,
            1,
            true,
            rng,
        );
        let mut blocks = Vec::new();
        let mut in_ch = stem_ch;
        for (si, stage) in cfg.stages.iter().enumerate() {
            let out_ch = cfg.scaled(stage.channels);
            for r in 0..stage.repeats {
                let stride = if r == 0 { stage.stride } else { 1 };
                blocks.push(InvertedResidual::new(
                    &format!("{scope}.stage{si}.block{r}"),
                    in_ch,
                    out_ch,
                    stride,
                    stage.expansion,
                    rng,
                ));
                in_ch = out_ch;
            }
        }
        let head = ConvBnRelu6::new(
            &format!("{scope}.head"),
            cfg.resolved_final_dim(),
            in_ch,
            1,
            1,
            1,
            true,
            rng,
        );
        Ok(Self {
            cfg,
            stem,
            blocks,
            head,
        })
    }

    /// x: centered flow stack [B, in_channels, S, S] -> [B, final_dim].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        train: bool,
    ) -> Result<Var<'t, T>, EncoderError> {
        let sh = x.shape();
        let s = self.cfg.input_size;
        if sh.len() != 4 || sh[1] != self.cfg.in_channels || sh[2] != s || sh[3] != s {
            return Err(EncoderError::ConfigMismatch(format!(
                "input {sh:?}, expected [B, {}, {s}, {s}]",
                self.cfg.in_channels
            )));
        }
        let mut y = self.stem.forward(tape, x, train)?;
        for block in &self.blocks {
            y = block.forward(tape, y, train)?;
        }
        y = self.head.forward(tape, y, train)?;
        Ok(global_avg_pool(y)?)
    }

    pub fn block(&self, i: usize) -> &InvertedResidual<T> {
        &self.blocks[i]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        self.stem.register(reg);
        for block in &self.blocks {
            block.register(reg);
        }
        self.head.register(reg);
    }
}
