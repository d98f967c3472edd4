use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{BatchNorm2d, Conv2d, ConvSpec, LayerNorm, Linear};
use crate::nn::ops::{max_pool2d, resize_bilinear, shift_zero_fill};
use crate::nn::params::{join, Builder};

/// Stage widths: three convolutional stages followed by two tokenized-MLP
/// stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNeXtPlan {
    pub conv: [usize; 3],
    pub tokens: [usize; 2],
}

impl UNeXtPlan {
    pub const BASE: Self = Self { conv: [16, 32, 128], tokens: [160, 256] };
    pub const SMALL: Self = Self { conv: [8, 16, 32], tokens: [64, 128] };
}

/// `(B, C, H, W)` to `(B, H*W, C)`.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

const SHIFT_GROUPS: usize = 5;

/// Splits channels into five groups and shifts group `i` by `i - 2` along
/// `dim`, zero-filling the vacated rows or columns.
fn shift_groups(x: &Tensor, dim: usize) -> Result<Tensor> {
    let c = x.dim(1)?;
    let chunk = c.div_ceil(SHIFT_GROUPS);
    let pad = (SHIFT_GROUPS / 2) as isize;
    let mut parts = Vec::new();
    let mut start = 0;
    let mut shift = -pad;
    while start < c {
        let len = chunk.min(c - start);
        parts.push(shift_zero_fill(&x.narrow(1, start, len)?, dim, shift)?);
        start += len;
        shift += 1;
    }
    Ok(Tensor::cat(&parts, 1)?)
}

/// Shifted MLP with a depthwise convolution between the two projections,
/// wrapped in a pre-norm residual connection.
#[derive(Clone, Debug)]
pub struct ShiftedBlock {
    norm: LayerNorm,
    fc1: Linear,
    dwconv: Conv2d,
    fc2: Linear,
}

impl ShiftedBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(b, &join(name, "norm"), dim)?,
            fc1: Linear::new(b, &join(name, "fc1"), dim, dim)?,
            dwconv: Conv2d::new(b, &join(name, "dwconv"), ConvSpec::new(dim, dim, 3).pad(1).depthwise())?,
            fc2: Linear::new(b, &join(name, "fc2"), dim, dim)?,
        })
    }

    /// `x` holds `(B, H*W, C)` tokens.
    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.norm.forward(x)?;
        let y = shift_groups(&to_map(&y, h, w)?, 2)?;
        let y = self.fc1.forward(&to_tokens(&y)?)?;
        let y = self.dwconv.forward(&to_map(&y, h, w)?)?.gelu_erf()?;
        let y = shift_groups(&y, 3)?;
        let y = self.fc2.forward(&to_tokens(&y)?)?;
        Ok((x + y)?)
    }
}

#[derive(Clone, Debug)]
struct PatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(b: &mut Builder, name: &str, in_ch: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(b, &join(name, "proj"), ConvSpec::new(in_ch, dim, 3).stride(2).pad(1))?,
            norm: LayerNorm::new(b, &join(name, "norm"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.proj.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        Ok((self.norm.forward(&to_tokens(&y)?)?, h, w))
    }
}

/// A tokenized-MLP stage: block, then layer norm.
#[derive(Clone, Debug)]
struct TokenStage {
    block: ShiftedBlock,
    norm: LayerNorm,
}

impl TokenStage {
    fn new(b: &mut Builder, name: &str, norm_name: &str, dim: usize) -> Result<Self> {
        Ok(Self { block: ShiftedBlock::new(b, name, dim)?, norm: LayerNorm::new(b, norm_name, dim)? })
    }

    fn forward(&self, tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let t = self.norm.forward(&self.block.forward(tokens, h, w)?)?;
        to_map(&t, h, w)
    }
}

/// UNeXt: a convolutional encoder head, tokenized shifted-MLP stages at the
/// two coarsest scales and a mirrored decoder with additive skips.
#[derive(Clone, Debug)]
pub struct UNeXt {
    enc: Vec<(Conv2d, BatchNorm2d)>,
    embed3: PatchEmbed,
    stage3: TokenStage,
    embed4: PatchEmbed,
    stage4: TokenStage,
    dec: Vec<(Conv2d, Option<BatchNorm2d>)>,
    dstage3: TokenStage,
    dstage4: TokenStage,
    head: Conv2d,
}

impl UNeXt {
    pub fn new(b: &mut Builder, plan: UNeXtPlan) -> Result<Self> {
        let [c1, c2, c3] = plan.conv;
        let [e1, e2] = plan.tokens;
        let mut enc = Vec::new();
        for (i, (cin, cout)) in [(3, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            let conv = Conv2d::new(b, &format!("encoder{}", i + 1), ConvSpec::new(cin, cout, 3).pad(1))?;
            let bn = BatchNorm2d::new(b, &format!("ebn{}", i + 1), cout)?;
            enc.push((conv, bn));
        }
        let embed3 = PatchEmbed::new(b, "patch_embed3", c3, e1)?;
        let stage3 = TokenStage::new(b, "block1", "norm3", e1)?;
        let embed4 = PatchEmbed::new(b, "patch_embed4", e1, e2)?;
        let stage4 = TokenStage::new(b, "block2", "norm4", e2)?;
        let mut dec = Vec::new();
        for (i, (cin, cout)) in [(e2, e1), (e1, c3), (c3, c2), (c2, c1), (c1, c1)].into_iter().enumerate() {
            let conv = Conv2d::new(b, &format!("decoder{}", i + 1), ConvSpec::new(cin, cout, 3).pad(1))?;
            let bn = if i < 4 { Some(BatchNorm2d::new(b, &format!("dbn{}", i + 1), cout)?) } else { None };
            dec.push((conv, bn));
        }
        let dstage3 = TokenStage::new(b, "dblock1", "dnorm3", e1)?;
        let dstage4 = TokenStage::new(b, "dblock2", "dnorm4", c3)?;
        let head = Conv2d::new(b, "final", ConvSpec::new(c1, 1, 1))?;
        Ok(Self { enc, embed3, stage3, embed4, stage4, dec, dstage3, dstage4, head })
    }

    fn decode(&self, i: usize, x: &Tensor, train: bool) -> Result<Tensor> {
        let (conv, bn) = &self.dec[i];
        let mut y = conv.forward(x)?;
        if let Some(bn) = bn {
            y = bn.forward(&y, train)?;
        }
        let (_, _, h, w) = y.dims4()?;
        Ok(resize_bilinear(&y, 2 * h, 2 * w)?.relu()?)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut skips = Vec::new();
        let mut out = x.clone();
        for (conv, bn) in &self.enc {
            out = max_pool2d(&bn.forward(&conv.forward(&out)?, train)?, 2, 2, 0)?.relu()?;
            skips.push(out.clone());
        }
        let (t, h, w) = self.embed3.forward(&out)?;
        let t4 = self.stage3.forward(&t, h, w)?;
        let (t, h, w) = self.embed4.forward(&t4)?;
        let out = self.stage4.forward(&t, h, w)?;

        let out = (self.decode(0, &out, train)? + t4)?;
        let (_, _, h, w) = out.dims4()?;
        let out = self.dstage3.forward(&to_tokens(&out)?, h, w)?;
        let out = (self.decode(1, &out, train)? + &skips[2])?;
        let (_, _, h, w) = out.dims4()?;
        let out = self.dstage4.forward(&to_tokens(&out)?, h, w)?;
        let out = (self.decode(2, &out, train)? + &skips[1])?;
        let out = (self.decode(3, &out, train)? + &skips[0])?;
        let out = self.decode(4, &out, train)?;
        self.head.forward(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn shift_groups_moves_each_chunk() {
        // 5 channels, one per chunk, each a single 1 at row 2 of a 5x1 map.
        let mut v = vec![0.0f64; 25];
        for c in 0..5 {
            v[c * 5 + 2] = 1.0;
        }
        let x = Tensor::from_vec(v, (1, 5, 5, 1), &Device::Cpu).unwrap();
        let y = shift_groups(&x, 2).unwrap().squeeze(0).unwrap().squeeze(2).unwrap();
        let rows = y.to_vec2::<f64>().unwrap();
        for (c, row) in rows.iter().enumerate() {
            let at = row.iter().position(|v| *v == 1.0).unwrap();
            assert_eq!(at as isize, 2 + c as isize - 2);
        }
    }
}
