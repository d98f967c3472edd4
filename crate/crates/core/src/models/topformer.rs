use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{Conv2d, ConvBn, ConvSpec};
use crate::nn::ops::{adaptive_avg_pool2d, hard_sigmoid, relu6, resize_bilinear, softmax_last_dim};
use crate::nn::params::{join, Builder, Init};

/// One inverted-residual layer of the token pyramid: kernel, expansion
/// ratio, output channels, stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IrLayer {
    pub kernel: usize,
    pub expand: usize,
    pub out: usize,
    pub stride: usize,
}

const fn ir(kernel: usize, expand: usize, out: usize, stride: usize) -> IrLayer {
    IrLayer { kernel, expand, out, stride }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopFormerPlan {
    pub layers: &'static [IrLayer],
    /// Layers whose outputs become pyramid tokens (strides 4, 8, 16, 32).
    pub token_layers: [usize; 4],
    /// Width of the injected features and of the segmentation head.
    pub inject_width: usize,
    pub depth: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub attn_ratio: usize,
    pub mlp_ratio: usize,
}

const TINY_LAYERS: &[IrLayer] = &[
    ir(3, 1, 16, 1),
    ir(3, 4, 16, 2),
    ir(3, 3, 16, 1),
    ir(5, 3, 32, 2),
    ir(5, 3, 32, 1),
    ir(3, 3, 64, 2),
    ir(3, 3, 64, 1),
    ir(5, 6, 96, 2),
    ir(5, 6, 96, 1),
];

const SMALL_LAYERS: &[IrLayer] = &[
    ir(3, 1, 16, 1),
    ir(3, 4, 24, 2),
    ir(3, 3, 24, 1),
    ir(5, 3, 48, 2),
    ir(5, 3, 48, 1),
    ir(3, 3, 96, 2),
    ir(3, 3, 96, 1),
    ir(5, 6, 128, 2),
    ir(5, 6, 128, 1),
    ir(3, 6, 128, 1),
];

const BASE_LAYERS: &[IrLayer] = &[
    ir(3, 1, 16, 1),
    ir(3, 4, 32, 2),
    ir(3, 3, 32, 1),
    ir(5, 3, 64, 2),
    ir(5, 3, 64, 1),
    ir(3, 3, 128, 2),
    ir(3, 3, 128, 1),
    ir(5, 6, 160, 2),
    ir(5, 6, 160, 1),
    ir(3, 6, 160, 1),
];

impl TopFormerPlan {
    pub const TINY: Self = Self {
        layers: TINY_LAYERS,
        token_layers: [2, 4, 6, 8],
        inject_width: 128,
        depth: 4,
        heads: 4,
        key_dim: 16,
        attn_ratio: 2,
        mlp_ratio: 2,
    };
    pub const SMALL: Self = Self {
        layers: SMALL_LAYERS,
        token_layers: [2, 4, 6, 9],
        inject_width: 192,
        depth: 4,
        heads: 6,
        key_dim: 16,
        attn_ratio: 2,
        mlp_ratio: 2,
    };
    pub const BASE: Self = Self {
        layers: BASE_LAYERS,
        token_layers: [2, 4, 6, 9],
        inject_width: 256,
        depth: 4,
        heads: 8,
        key_dim: 16,
        attn_ratio: 2,
        mlp_ratio: 2,
    };

    pub fn token_channels(&self) -> [usize; 4] {
        self.token_layers.map(|i| self.layers[i].out)
    }
}

const STEM_WIDTH: usize = 16;

fn projection() -> Option<Init> {
    Some(Init::TruncatedNormal { std: 0.02 })
}

#[derive(Clone, Debug)]
struct InvertedResidual {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    residual: bool,
}

impl InvertedResidual {
    fn new(b: &mut Builder, name: &str, in_ch: usize, l: IrLayer) -> Result<Self> {
        let hidden = in_ch * l.expand;
        let expand = if l.expand != 1 {
            Some(ConvBn::new(b, &join(name, "expand"), ConvSpec::new(in_ch, hidden, 1))?)
        } else {
            None
        };
        let depthwise = ConvBn::new(
            b,
            &join(name, "dw"),
            ConvSpec::new(hidden, hidden, l.kernel).stride(l.stride).same().depthwise(),
        )?;
        let project = ConvBn::new(b, &join(name, "project"), ConvSpec::new(hidden, l.out, 1))?;
        Ok(Self { expand, depthwise, project, residual: l.stride == 1 && in_ch == l.out })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        if let Some(e) = &self.expand {
            y = e.forward(&y, train)?.relu()?;
        }
        let y = self.depthwise.forward(&y, train)?.relu()?;
        let y = self.project.forward(&y, train)?;
        Ok(if self.residual { (x + y)? } else { y })
    }
}

/// Multi-head attention over the pooled token grid, with 1x1 conv + BN
/// projections.
#[derive(Clone, Debug)]
struct Attention {
    q: ConvBn,
    k: ConvBn,
    v: ConvBn,
    proj: ConvBn,
    heads: usize,
    key_dim: usize,
    value_dim: usize,
}

impl Attention {
    fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, key_dim: usize, attn_ratio: usize) -> Result<Self> {
        let value_dim = key_dim * attn_ratio;
        Ok(Self {
            q: ConvBn::with_init(b, &join(name, "to_q"), ConvSpec::new(dim, key_dim * heads, 1), projection())?,
            k: ConvBn::with_init(b, &join(name, "to_k"), ConvSpec::new(dim, key_dim * heads, 1), projection())?,
            v: ConvBn::with_init(b, &join(name, "to_v"), ConvSpec::new(dim, value_dim * heads, 1), projection())?,
            proj: ConvBn::with_init(b, &join(name, "proj"), ConvSpec::new(value_dim * heads, dim, 1), projection())?,
            heads,
            key_dim,
            value_dim,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let n = h * w;
        let q = self.q.forward(x, train)?.reshape((b, self.heads, self.key_dim, n))?.transpose(2, 3)?;
        let k = self.k.forward(x, train)?.reshape((b, self.heads, self.key_dim, n))?;
        let v = self.v.forward(x, train)?.reshape((b, self.heads, self.value_dim, n))?.transpose(2, 3)?;
        let scale = (self.key_dim as f64).powf(-0.5);
        let attn = softmax_last_dim(&(q.contiguous()?.matmul(&k.contiguous()?)? * scale)?)?;
        let y = attn.matmul(&v.contiguous()?)?; // (b, heads, n, value_dim)
        let y = y.transpose(2, 3)?.contiguous()?.reshape((b, self.heads * self.value_dim, h, w))?;
        self.proj.forward(&relu6(&y)?, train)
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: ConvBn,
    dwconv: Conv2d,
    fc2: ConvBn,
}

impl Mlp {
    fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: ConvBn::with_init(b, &join(name, "fc1"), ConvSpec::new(dim, hidden, 1), projection())?,
            dwconv: Conv2d::new(b, &join(name, "dwconv"), ConvSpec::new(hidden, hidden, 3).pad(1).depthwise())?,
            fc2: ConvBn::with_init(b, &join(name, "fc2"), ConvSpec::new(hidden, dim, 1), projection())?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.fc1.forward(x, train)?;
        let y = relu6(&self.dwconv.forward(&y)?)?;
        self.fc2.forward(&y, train)
    }
}

/// Transformer block of the semantics extractor.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    attn: Attention,
    mlp: Mlp,
}

impl AttentionBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        heads: usize,
        key_dim: usize,
        attn_ratio: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(b, &join(name, "attn"), dim, heads, key_dim, attn_ratio)?,
            mlp: Mlp::new(b, &join(name, "mlp"), dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = (x + self.attn.forward(x, train)?)?;
        Ok((&x + self.mlp.forward(&x, train)?)?)
    }
}

/// Semantic injection: local features gated by a sigmoid of the global
/// semantics, plus an embedding of the semantics itself.
#[derive(Clone, Debug)]
struct Injection {
    local: ConvBn,
    global: ConvBn,
    gate: ConvBn,
}

impl Injection {
    fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            local: ConvBn::new(b, &join(name, "local_embedding"), ConvSpec::new(in_ch, out_ch, 1))?,
            global: ConvBn::new(b, &join(name, "global_embedding"), ConvSpec::new(in_ch, out_ch, 1))?,
            gate: ConvBn::new(b, &join(name, "global_act"), ConvSpec::new(in_ch, out_ch, 1))?,
        })
    }

    fn forward(&self, local: &Tensor, global: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = local.dims4()?;
        let l = self.local.forward(local, train)?;
        let gate = resize_bilinear(&hard_sigmoid(&self.gate.forward(global, train)?)?, h, w)?;
        let g = resize_bilinear(&self.global.forward(global, train)?, h, w)?;
        Ok(((l * gate)? + g)?)
    }
}

/// TopFormer: token pyramid backbone, transformer semantics extractor on
/// the pooled pyramid, semantic injection into the three coarsest scales
/// and a fused 1x1 head.
#[derive(Clone, Debug)]
pub struct TopFormer {
    stem: ConvBn,
    layers: Vec<InvertedResidual>,
    token_layers: [usize; 4],
    channels: [usize; 4],
    blocks: Vec<AttentionBlock>,
    inject: Vec<Injection>,
    fuse: ConvBn,
    head: Conv2d,
}

impl TopFormer {
    pub fn new(b: &mut Builder, plan: TopFormerPlan) -> Result<Self> {
        let stem = ConvBn::new(b, "tpm.stem", ConvSpec::new(3, STEM_WIDTH, 3).stride(2).pad(1))?;
        let mut layers = Vec::new();
        let mut in_ch = STEM_WIDTH;
        for (i, l) in plan.layers.iter().enumerate() {
            layers.push(InvertedResidual::new(b, &format!("tpm.layer{i}"), in_ch, *l)?);
            in_ch = l.out;
        }
        let channels = plan.token_channels();
        let dim: usize = channels.iter().sum();
        let blocks = (0..plan.depth)
            .map(|i| {
                AttentionBlock::new(
                    b,
                    &format!("trans.block{i}"),
                    dim,
                    plan.heads,
                    plan.key_dim,
                    plan.attn_ratio,
                    plan.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        let inject = (1..4)
            .map(|i| Injection::new(b, &format!("sim{i}"), channels[i], plan.inject_width))
            .collect::<Result<_>>()?;
        let width = plan.inject_width;
        let fuse = ConvBn::new(b, "head.linear_fuse", ConvSpec::new(width, width, 1).depthwise())?;
        let head = Conv2d::new(b, "head.conv_seg", ConvSpec::new(width, 1, 1))?;
        Ok(Self { stem, layers, token_layers: plan.token_layers, channels, blocks, inject, fuse, head })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, in_h, in_w) = x.dims4()?;
        let mut y = self.stem.forward(x, train)?.relu()?;
        let mut pyramid = Vec::with_capacity(4);
        for (i, l) in self.layers.iter().enumerate() {
            y = l.forward(&y, train)?;
            if self.token_layers.contains(&i) {
                pyramid.push(y.clone());
            }
        }
        let (_, _, h, w) = pyramid[3].dims4()?;
        let (th, tw) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let tokens = pyramid
            .iter()
            .map(|p| adaptive_avg_pool2d(p, th, tw))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let mut semantics = Tensor::cat(&tokens, 1)?;
        for blk in &self.blocks {
            semantics = blk.forward(&semantics, train)?;
        }
        let mut offset = self.channels[0];
        let mut fused: Option<Tensor> = None;
        for (i, inj) in self.inject.iter().enumerate() {
            let c = self.channels[i + 1];
            let global = semantics.narrow(1, offset, c)?;
            offset += c;
            let f = inj.forward(&pyramid[i + 1], &global, train)?;
            fused = Some(match fused {
                None => f,
                Some(acc) => {
                    let (_, _, fh, fw) = acc.dims4()?;
                    (acc + resize_bilinear(&f, fh, fw)?)?
                }
            });
        }
        let fused = self.fuse.forward(&fused.expect("three injection scales"), train)?.relu()?;
        let logits = self.head.forward(&fused)?;
        Ok(resize_bilinear(&logits, in_h, in_w)?)
    }
}
