use candle_core::{Tensor, Var, D};

use super::fused;
use super::kernels::{self, ConvGeom};
use super::params::{join, Builder, Init};
use crate::error::Result;

/// Conv2d hyperparameters; kernel sizes are `(height, width)`.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub geom: ConvGeom,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: (k, k),
            geom: ConvGeom::default(),
            bias: true,
        }
    }
    pub fn stride(mut self, s: usize) -> Self {
        self.geom.stride = (s, s);
        self
    }
    pub fn pad(mut self, p: usize) -> Self {
        self.geom.padding = (p, p);
        self
    }
    /// `same` padding for odd kernels.
    pub fn same(self) -> Self {
        let p = self.kernel.0 / 2;
        self.pad(p)
    }
    pub fn pad2(mut self, ph: usize, pw: usize) -> Self {
        self.geom.padding = (ph, pw);
        self
    }
    pub fn kernel2(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }
    pub fn dilation(mut self, d: usize) -> Self {
        self.geom.dilation = (d, d);
        self
    }
    pub fn groups(mut self, g: usize) -> Self {
        self.geom.groups = g;
        self
    }
    pub fn depthwise(self) -> Self {
        let c = self.in_ch;
        self.groups(c)
    }
    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeom,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_init(b, name, spec, None)
    }

    /// Like [`Conv2d::new`] but with an explicit weight initializer.
    pub fn with_init(b: &mut Builder, name: &str, spec: ConvSpec, init: Option<Init>) -> Result<Self> {
        let cg = spec.in_ch / spec.geom.groups;
        let fan_in = cg * spec.kernel.0 * spec.kernel.1;
        let weight = b.trainable(
            join(name, "weight"),
            &[spec.out_ch, cg, spec.kernel.0, spec.kernel.1],
            init.unwrap_or(Init::KaimingFanIn { fan_in }),
        )?;
        let bias = if spec.bias {
            Some(b.trainable(join(name, "bias"), &[spec.out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias, geom: spec.geom })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::conv2d(x, &self.weight, self.geom)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?),
        None => Ok(y),
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeom,
    output_padding: (usize, usize),
}

impl ConvTranspose2d {
    /// `output_padding` resolves the size ambiguity of strided transposes.
    pub fn new(b: &mut Builder, name: &str, spec: ConvSpec, output_padding: usize) -> Result<Self> {
        let og = spec.out_ch / spec.geom.groups;
        // Fan-in follows the weight layout (in, out/groups, kh, kw), dimension 1.
        let fan_in = og * spec.kernel.0 * spec.kernel.1;
        let weight = b.trainable(
            join(name, "weight"),
            &[spec.in_ch, og, spec.kernel.0, spec.kernel.1],
            Init::KaimingFanIn { fan_in },
        )?;
        let bias = if spec.bias {
            Some(b.trainable(join(name, "bias"), &[spec.out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias, geom: spec.geom, output_padding: (output_padding, output_padding) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::conv_transpose2d(x, &self.weight, self.geom, self.output_padding)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

/// Batch normalization over `(N, H, W)` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.trainable(join(name, "weight"), &[channels], Init::Const(1.0))?,
            beta: b.trainable(join(name, "bias"), &[channels], Init::Const(0.0))?,
            running_mean: b.buffer(join(name, "running_mean"), &[channels], 0.0)?,
            running_var: b.buffer(join(name, "running_var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if train {
            let count = n * h * w;
            let (mean, var) = fused::batch_stats(x)?;
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (var * (m * unbias))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            return Ok(fused::batch_norm_train(x, &self.gamma, &self.beta, self.eps)?);
        }
        let shape = (1, c, 1, 1);
        let inv = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
        let scale = (inv * &self.gamma)?;
        let shift = (&self.beta - (self.running_mean.as_tensor() * &scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape(shape)?)?.broadcast_add(&shift.reshape(shape)?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.trainable(join(name, "weight"), &[dim], Init::Const(1.0))?,
            beta: b.trainable(join(name, "bias"), &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.trainable(join(name, "weight"), &[out_dim, in_dim], Init::TruncatedNormal { std: 0.02 })?,
            bias: b.trainable(join(name, "bias"), &[out_dim], Init::Const(0.0))?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// PReLU with a single shared slope.
#[derive(Clone, Debug)]
pub struct PRelu {
    slope: Tensor,
}

impl PRelu {
    pub fn new(b: &mut Builder, name: &str) -> Result<Self> {
        Ok(Self { slope: b.trainable(join(name, "weight"), &[1], Init::Const(0.25))? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(fused::prelu(x, &self.slope)?)
    }
}

/// Activation choices used across the model zoo.
#[derive(Clone, Debug)]
pub enum Act {
    Identity,
    Relu,
    Relu6,
    PRelu(PRelu),
}

impl Act {
    pub fn prelu(b: &mut Builder, name: &str) -> Result<Self> {
        Ok(Act::PRelu(PRelu::new(b, name)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Act::Identity => x.clone(),
            Act::Relu => x.relu()?,
            Act::Relu6 => super::ops::relu6(x)?,
            Act::PRelu(p) => p.forward(x)?,
        })
    }
}

/// Convolution followed by batch normalization (convolution bias dropped).
#[derive(Clone, Debug)]
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(b: &mut Builder, name: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_init(b, name, spec, None)
    }

    pub fn with_init(b: &mut Builder, name: &str, spec: ConvSpec, init: Option<Init>) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::with_init(b, &join(name, "conv"), spec.no_bias(), init)?,
            bn: BatchNorm2d::new(b, &join(name, "bn"), spec.out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}
