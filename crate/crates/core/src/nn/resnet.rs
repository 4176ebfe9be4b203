//! Residual convolutional backbone with GroupNorm.
//!
//! `ResNetConfig::resnet18()` follows the 18-layer block layout; smaller
//! presets keep the same output contract (a `[dim, h, w]` feature map plus a
//! pooled `[1, dim]` token) for desk-scale runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub groups: usize,
}

impl ResNetConfig {
    pub fn resnet18() -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 4,
            stage_channels: vec![64, 128, 256, 512],
            stage_blocks: vec![2, 2, 2, 2],
            stage_strides: vec![1, 2, 2, 2],
            groups: 8,
        }
    }

    /// Three single-block stages, 8x spatial reduction after the stem.
    pub fn desk() -> Self {
        Self {
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 2,
            stage_channels: vec![16, 32, 32],
            stage_blocks: vec![1, 1, 1],
            stage_strides: vec![2, 2, 2],
            groups: 4,
        }
    }

    pub fn tiny() -> Self {
        Self {
            stem_channels: 4,
            stem_kernel: 3,
            stem_stride: 1,
            stage_channels: vec![4, 8],
            stage_blocks: vec![1, 1],
            stage_strides: vec![2, 2],
            groups: 2,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let conv = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
        let mut hw = (conv(h, self.stem_kernel, self.stem_stride), conv(w, self.stem_kernel, self.stem_stride));
        for &s in &self.stage_strides {
            hw = (conv(hw.0, 3, s), conv(hw.1, 3, s));
        }
        hw
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt() * 0.5;
        let weight = ps.add(format!("{name}.weight"), Tensor::uniform(&[cout, fan_in], bound, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, kernel, stride }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.kernel, self.stride, self.kernel / 2)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        let groups = if channels % groups == 0 { groups } else { 1 };
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::full(&[channels], 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let grouped = g.reshape(x, &[self.groups, c / self.groups * hw]);
        let n = g.layer_norm_rows(grouped, 1e-5);
        let n = g.reshape(n, &[c, hw]);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_col(n, gain);
        let y = g.add_col(y, bias);
        g.reshape(y, &shape)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasicBlock {
    pub conv1: Conv,
    pub norm1: GroupNorm,
    pub conv2: Conv,
    pub norm2: GroupNorm,
    pub shortcut: Option<Conv>,
}

impl BasicBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, stride: usize, groups: usize, rng: &mut R) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| Conv::new(ps, &format!("{name}.shortcut"), cin, cout, 1, stride, rng));
        Self {
            conv1: Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, stride, rng),
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cout, groups),
            conv2: Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, groups),
            shortcut,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.norm1.forward(g, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, y);
        let y = self.norm2.forward(g, y);
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, x),
            None => x,
        };
        let y = g.add(y, skip);
        g.relu(y)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResNet {
    pub in_channels: usize,
    pub out_dim: usize,
    pub stem: Conv,
    pub stem_norm: GroupNorm,
    pub blocks: Vec<BasicBlock>,
    /// 1x1 projection of the last stage to `out_dim` channels.
    pub proj: Conv,
}

/// Backbone outputs for one image.
#[derive(Clone, Copy, Debug)]
pub struct ResNetOutput {
    /// `[out_dim, h, w]`
    pub feature_map: Var,
    /// `[1, out_dim]`
    pub pooled: Var,
}

impl ResNet {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &ResNetConfig, in_channels: usize, out_dim: usize, rng: &mut R) -> Self {
        assert_eq!(cfg.stage_channels.len(), cfg.stage_blocks.len());
        assert_eq!(cfg.stage_channels.len(), cfg.stage_strides.len());
        let stem = Conv::new(ps, &format!("{name}.stem"), in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, rng);
        let stem_norm = GroupNorm::new(ps, &format!("{name}.stem_norm"), cfg.stem_channels, cfg.groups);
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_channels;
        for (si, ((&cout, &nb), &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_blocks).zip(&cfg.stage_strides).enumerate() {
            for bi in 0..nb {
                let s = if bi == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(ps, &format!("{name}.stage{si}.{bi}"), cin, cout, s, cfg.groups, rng));
                cin = cout;
            }
        }
        let proj = Conv::new(ps, &format!("{name}.proj"), cin, out_dim, 1, 1, rng);
        Self { in_channels, out_dim, stem, stem_norm, blocks, proj }
    }

    /// `x` is a `[C, H, W]` image.
    pub fn forward(&self, g: &mut Graph, x: Var) -> ResNetOutput {
        let y = self.stem.forward(g, x);
        let y = self.stem_norm.forward(g, y);
        let mut y = g.relu(y);
        for b in &self.blocks {
            y = b.forward(g, y);
        }
        let fm = self.proj.forward(g, y);
        let shape = g.shape(fm).to_vec();
        let flat = g.reshape(fm, &[shape[0], shape[1] * shape[2]]);
        let pooled = g.mean_cols(flat);
        ResNetOutput { feature_map: fm, pooled }
    }
}

/// `[D, h, w]` feature map to `[h*w, D]` token rows.
pub fn map_to_tokens(g: &mut Graph, fm: Var) -> Var {
    let s = g.shape(fm).to_vec();
    let flat = g.reshape(fm, &[s[0], s[1] * s[2]]);
    g.transpose(flat)
}

/// Concatenates two `[D, h, w*]` maps along the width axis.
pub fn concat_width(g: &mut Graph, a: Var, b: Var) -> Result<Var, (Vec<usize>, Vec<usize>)> {
    let sa = g.shape(a).to_vec();
    let sb = g.shape(b).to_vec();
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
        return Err((sa, sb));
    }
    let ra = g.reshape(a, &[sa[0] * sa[1], sa[2]]);
    let rb = g.reshape(b, &[sb[0] * sb[1], sb[2]]);
    let cat = g.concat_cols(&[ra, rb]);
    Ok(g.reshape(cat, &[sa[0], sa[1], sa[2] + sb[2]]))
}
