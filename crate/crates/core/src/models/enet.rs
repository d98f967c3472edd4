use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{Act, BatchNorm2d, Conv2d, ConvBn, ConvSpec, ConvTranspose2d};
use crate::nn::ops::{argmax_mask, max_pool2d, max_unpool};
use crate::nn::params::{join, Builder};

fn act(b: &mut Builder, name: &str, relu: bool) -> Result<Act> {
    if relu {
        Ok(Act::Relu)
    } else {
        Act::prelu(b, name)
    }
}

#[derive(Clone, Debug)]
struct ConvBnAct {
    conv: ConvBn,
    act: Act,
}

impl ConvBnAct {
    fn new(b: &mut Builder, name: &str, spec: ConvSpec, relu: bool) -> Result<Self> {
        Ok(Self { conv: ConvBn::new(b, name, spec)?, act: act(b, &join(name, "act"), relu)? })
    }
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.act.forward(&self.conv.forward(x, train)?)
    }
}

#[derive(Clone, Debug)]
struct InitialBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Act,
}

impl InitialBlock {
    fn new(b: &mut Builder, name: &str, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, &join(name, "conv"), ConvSpec::new(3, out_ch - 3, 3).stride(2).pad(1).no_bias())?,
            bn: BatchNorm2d::new(b, &join(name, "bn"), out_ch)?,
            act: Act::prelu(b, &join(name, "act"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let main = self.conv.forward(x)?;
        let pooled = max_pool2d(x, 3, 2, 1)?;
        let y = self.bn.forward(&Tensor::cat(&[&main, &pooled], 1)?, train)?;
        self.act.forward(&y)
    }
}

/// Main convolution of a regular bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BottleneckKind {
    Regular,
    Dilated(usize),
    /// A `k`x1 convolution followed by a 1x`k` convolution.
    Asymmetric(usize),
}

/// Residual bottleneck: 1x1 projection, cheap main convolution, 1x1
/// expansion, added to the identity branch.
#[derive(Clone, Debug)]
pub struct RegularBottleneck {
    reduce: ConvBnAct,
    main: Vec<ConvBnAct>,
    expand: ConvBnAct,
    out_act: Act,
}

impl RegularBottleneck {
    pub fn new(b: &mut Builder, name: &str, channels: usize, kind: BottleneckKind, relu: bool) -> Result<Self> {
        let internal = channels / 4;
        let reduce = ConvBnAct::new(b, &join(name, "reduce"), ConvSpec::new(channels, internal, 1).no_bias(), relu)?;
        let main = match kind {
            BottleneckKind::Regular => vec![ConvBnAct::new(
                b,
                &join(name, "main"),
                ConvSpec::new(internal, internal, 3).pad(1).no_bias(),
                relu,
            )?],
            BottleneckKind::Dilated(d) => vec![ConvBnAct::new(
                b,
                &join(name, "main"),
                ConvSpec::new(internal, internal, 3).pad(d).dilation(d).no_bias(),
                relu,
            )?],
            BottleneckKind::Asymmetric(k) => vec![
                ConvBnAct::new(
                    b,
                    &join(name, "main_v"),
                    ConvSpec::new(internal, internal, k).kernel2(k, 1).pad2(k / 2, 0).no_bias(),
                    relu,
                )?,
                ConvBnAct::new(
                    b,
                    &join(name, "main_h"),
                    ConvSpec::new(internal, internal, k).kernel2(1, k).pad2(0, k / 2).no_bias(),
                    relu,
                )?,
            ],
        };
        let expand = ConvBnAct::new(b, &join(name, "expand"), ConvSpec::new(internal, channels, 1).no_bias(), relu)?;
        let out_act = act(b, &join(name, "out_act"), relu)?;
        Ok(Self { reduce, main, expand, out_act })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut ext = self.reduce.forward(x, train)?;
        for m in &self.main {
            ext = m.forward(&ext, train)?;
        }
        let ext = self.expand.forward(&ext, train)?;
        self.out_act.forward(&(x + ext)?)
    }
}

#[derive(Clone, Debug)]
struct DownsamplingBottleneck {
    reduce: ConvBnAct,
    main: ConvBnAct,
    expand: ConvBnAct,
    out_act: Act,
    out_ch: usize,
}

impl DownsamplingBottleneck {
    fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let internal = in_ch / 4;
        Ok(Self {
            reduce: ConvBnAct::new(b, &join(name, "reduce"), ConvSpec::new(in_ch, internal, 2).stride(2).no_bias(), false)?,
            main: ConvBnAct::new(b, &join(name, "main"), ConvSpec::new(internal, internal, 3).pad(1).no_bias(), false)?,
            expand: ConvBnAct::new(b, &join(name, "expand"), ConvSpec::new(internal, out_ch, 1).no_bias(), false)?,
            out_act: Act::prelu(b, &join(name, "out_act"))?,
            out_ch,
        })
    }

    /// Returns the output and the pooling index record for later unpooling.
    fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let indices = argmax_mask(x, 2)?;
        let main = max_pool2d(x, 2, 2, 0)?;
        let (n, c, h, w) = main.dims4()?;
        let main = if self.out_ch > c {
            let zeros = Tensor::zeros((n, self.out_ch - c, h, w), main.dtype(), main.device())?;
            Tensor::cat(&[&main, &zeros], 1)?
        } else {
            main
        };
        let ext = self.reduce.forward(x, train)?;
        let ext = self.main.forward(&ext, train)?;
        let ext = self.expand.forward(&ext, train)?;
        Ok((self.out_act.forward(&(main + ext)?)?, indices))
    }
}

#[derive(Clone, Debug)]
struct UpsamplingBottleneck {
    main: ConvBn,
    reduce: ConvBnAct,
    tconv: ConvTranspose2d,
    tconv_bn: BatchNorm2d,
    tconv_act: Act,
    expand: ConvBn,
    out_act: Act,
}

impl UpsamplingBottleneck {
    fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let internal = in_ch / 4;
        Ok(Self {
            main: ConvBn::new(b, &join(name, "main"), ConvSpec::new(in_ch, out_ch, 1))?,
            reduce: ConvBnAct::new(b, &join(name, "reduce"), ConvSpec::new(in_ch, internal, 1).no_bias(), true)?,
            tconv: ConvTranspose2d::new(
                b,
                &join(name, "tconv"),
                ConvSpec::new(internal, internal, 2).stride(2).no_bias(),
                0,
            )?,
            tconv_bn: BatchNorm2d::new(b, &join(name, "tconv_bn"), internal)?,
            tconv_act: Act::Relu,
            expand: ConvBn::new(b, &join(name, "expand"), ConvSpec::new(internal, out_ch, 1))?,
            out_act: Act::Relu,
        })
    }

    fn forward(&self, x: &Tensor, indices: &Tensor, train: bool) -> Result<Tensor> {
        let main = max_unpool(&self.main.forward(x, train)?, indices, 2)?;
        let ext = self.reduce.forward(x, train)?;
        let ext = self.tconv_act.forward(&self.tconv_bn.forward(&self.tconv.forward(&ext)?, train)?)?;
        let ext = self.expand.forward(&ext, train)?;
        self.out_act.forward(&(main + ext)?)
    }
}

/// ENet: early downsampling, a deep encoder of cheap bottlenecks and a
/// small decoder that unpools with the encoder's pooling indices.
#[derive(Clone, Debug)]
pub struct ENet {
    initial: InitialBlock,
    down1: DownsamplingBottleneck,
    stage1: Vec<RegularBottleneck>,
    down2: DownsamplingBottleneck,
    stage2: Vec<RegularBottleneck>,
    stage3: Vec<RegularBottleneck>,
    up4: UpsamplingBottleneck,
    stage4: Vec<RegularBottleneck>,
    up5: UpsamplingBottleneck,
    stage5: Vec<RegularBottleneck>,
    head: ConvTranspose2d,
}

fn encoder_stage(b: &mut Builder, prefix: &str, channels: usize) -> Result<Vec<RegularBottleneck>> {
    use BottleneckKind::*;
    [Regular, Dilated(2), Asymmetric(5), Dilated(4), Regular, Dilated(8), Asymmetric(5), Dilated(16)]
        .into_iter()
        .enumerate()
        .map(|(i, k)| RegularBottleneck::new(b, &format!("{prefix}.{i}"), channels, k, false))
        .collect()
}

impl ENet {
    pub fn new(b: &mut Builder) -> Result<Self> {
        let initial = InitialBlock::new(b, "initial", 16)?;
        let down1 = DownsamplingBottleneck::new(b, "down1", 16, 64)?;
        let stage1 = (0..4)
            .map(|i| RegularBottleneck::new(b, &format!("stage1.{i}"), 64, BottleneckKind::Regular, false))
            .collect::<Result<_>>()?;
        let down2 = DownsamplingBottleneck::new(b, "down2", 64, 128)?;
        let stage2 = encoder_stage(b, "stage2", 128)?;
        let stage3 = encoder_stage(b, "stage3", 128)?;
        let up4 = UpsamplingBottleneck::new(b, "up4", 128, 64)?;
        let stage4 = (0..2)
            .map(|i| RegularBottleneck::new(b, &format!("stage4.{i}"), 64, BottleneckKind::Regular, true))
            .collect::<Result<_>>()?;
        let up5 = UpsamplingBottleneck::new(b, "up5", 64, 16)?;
        let stage5 = vec![RegularBottleneck::new(b, "stage5.0", 16, BottleneckKind::Regular, true)?];
        let head = ConvTranspose2d::new(b, "head", ConvSpec::new(16, 1, 3).stride(2).pad(1).no_bias(), 1)?;
        Ok(Self { initial, down1, stage1, down2, stage2, stage3, up4, stage4, up5, stage5, head })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let run = |blocks: &[RegularBottleneck], mut x: Tensor| -> Result<Tensor> {
            for blk in blocks {
                x = blk.forward(&x, train)?;
            }
            Ok(x)
        };
        let x = self.initial.forward(x, train)?;
        let (x, idx1) = self.down1.forward(&x, train)?;
        let x = run(&self.stage1, x)?;
        let (x, idx2) = self.down2.forward(&x, train)?;
        let x = run(&self.stage2, x)?;
        let x = run(&self.stage3, x)?;
        let x = self.up4.forward(&x, &idx2, train)?;
        let x = run(&self.stage4, x)?;
        let x = self.up5.forward(&x, &idx1, train)?;
        let x = run(&self.stage5, x)?;
        self.head.forward(&x)
    }
}
