use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{Conv2d, ConvBn, ConvSpec, ConvTranspose2d};
use crate::nn::ops::max_pool2d;
use crate::nn::params::{join, Builder};

/// Two 3x3 conv + BN + ReLU layers; one resolution level of the U-Net.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    first: ConvBn,
    second: ConvBn,
}

impl DoubleConv {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            first: ConvBn::new(b, &join(name, "0"), ConvSpec::new(in_ch, out_ch, 3).same())?,
            second: ConvBn::new(b, &join(name, "1"), ConvSpec::new(out_ch, out_ch, 3).same())?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.first.forward(x, train)?.relu()?;
        Ok(self.second.forward(&x, train)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct Up {
    tconv: ConvTranspose2d,
    conv: DoubleConv,
}

/// Five-level U-Net with transposed-convolution upsampling and skip
/// concatenation.
#[derive(Clone, Debug)]
pub struct UNet {
    stem: DoubleConv,
    down: Vec<DoubleConv>,
    up: Vec<Up>,
    head: Conv2d,
}

impl UNet {
    /// `base` is the width of the first level (64 for the reference model).
    pub fn new(b: &mut Builder, base: usize) -> Result<Self> {
        let widths: Vec<usize> = (0..5).map(|i| base << i).collect();
        let stem = DoubleConv::new(b, "inc", 3, widths[0])?;
        let mut down = Vec::new();
        for i in 1..5 {
            down.push(DoubleConv::new(b, &format!("down{i}"), widths[i - 1], widths[i])?);
        }
        let mut up = Vec::new();
        for (j, i) in (1..5).rev().enumerate() {
            let name = format!("up{}", j + 1);
            let tconv = ConvTranspose2d::new(
                b,
                &join(&name, "tconv"),
                ConvSpec::new(widths[i], widths[i] / 2, 2).stride(2),
                0,
            )?;
            let conv = DoubleConv::new(b, &join(&name, "conv"), widths[i], widths[i - 1])?;
            up.push(Up { tconv, conv });
        }
        let head = Conv2d::new(b, "outc", ConvSpec::new(widths[0], 1, 1))?;
        Ok(Self { stem, down, up, head })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut skips = vec![self.stem.forward(x, train)?];
        for d in &self.down {
            let pooled = max_pool2d(skips.last().expect("stem output"), 2, 2, 0)?;
            skips.push(d.forward(&pooled, train)?);
        }
        let mut x = skips.pop().expect("bottleneck");
        for u in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let up = u.tconv.forward(&x)?;
            x = u.conv.forward(&Tensor::cat(&[&skip, &up], 1)?, train)?;
        }
        self.head.forward(&x)
    }
}
