//! Fused per-channel kernels for the hot elementwise layers. Composed from
//! primitive tensor ops, batch normalization alone costs a dozen passes
//! over an activation in the backward pass; these kernels need two.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor};

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

fn nchw(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    match layout.shape().dims() {
        &[n, c, h, w] => Ok((n, c, h * w)),
        other => candle_core::bail!("expected an NCHW tensor, got {other:?}"),
    }
}

trait Float: Copy + 'static {
    fn to(self) -> f64;
    fn from(v: f64) -> Self;
}
impl Float for f32 {
    fn to(self) -> f64 {
        self as f64
    }
    fn from(v: f64) -> Self {
        v as f32
    }
}
impl Float for f64 {
    fn to(self) -> f64 {
        self
    }
    fn from(v: f64) -> Self {
        v
    }
}

/// Per-channel mean and biased variance, accumulated in f64.
fn channel_stats<T: Float>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            for v in &x[(ni * c + ci) * hw..][..hw] {
                s += v.to();
            }
        }
        let mu = s / m;
        let mut q = 0.0;
        for ni in 0..n {
            for v in &x[(ni * c + ci) * hw..][..hw] {
                let d = v.to() - mu;
                q += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = q / m;
    }
    (mean, var)
}

/// Training-mode batch normalization: `(x, gamma, beta) -> y`.
struct BatchNormTrain {
    eps: f64,
}

impl BatchNormTrain {
    fn run<T: Float>(&self, x: &[T], g: &[T], b: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
        let (mean, var) = channel_stats(x, n, c, hw);
        let mut y = Vec::with_capacity(x.len());
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + self.eps).sqrt();
                let scale = inv * g[ci].to();
                let shift = b[ci].to() - mean[ci] * scale;
                y.extend(x[(ni * c + ci) * hw..][..hw].iter().map(|v| T::from(v.to() * scale + shift)));
            }
        }
        y
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "woundseg-batchnorm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, hw) = nchw(l1)?;
        let shape = l1.shape().clone();
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => Ok((
                CpuStorage::F32(self.run(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, n, c, hw)),
                shape,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => Ok((
                CpuStorage::F64(self.run(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, n, c, hw)),
                shape,
            )),
            _ => candle_core::bail!("batch norm: mismatched or unsupported dtypes"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, c, _, _) = x.dims4()?;
        let packed = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &BatchNormTrainBackward { eps: self.eps })?;
        let numel = x.elem_count();
        let dx = packed.narrow(0, 0, numel)?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, numel, c)?;
        let dbeta = packed.narrow(0, numel + c, c)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// `(x, gamma, dy) -> [dx, dgamma, dbeta]` packed into one flat vector.
struct BatchNormTrainBackward {
    eps: f64,
}

impl BatchNormTrainBackward {
    fn run<T: Float>(&self, x: &[T], g: &[T], dy: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
        let (mean, var) = channel_stats(x, n, c, hw);
        let m = (n * hw) as f64;
        let mut out = vec![T::from(0.0); x.len() + 2 * c];
        let (dx, rest) = out.split_at_mut(x.len());
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + self.eps).sqrt();
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for ni in 0..n {
                let off = (ni * c + ci) * hw;
                for (xv, gv) in x[off..off + hw].iter().zip(&dy[off..off + hw]) {
                    let xhat = (xv.to() - mean[ci]) * inv;
                    sum_dy += gv.to();
                    sum_dy_xhat += gv.to() * xhat;
                }
            }
            let k = g[ci].to() * inv / m;
            for ni in 0..n {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let xhat = (x[i].to() - mean[ci]) * inv;
                    dx[i] = T::from(k * (m * dy[i].to() - sum_dy - xhat * sum_dy_xhat));
                }
            }
            rest[ci] = T::from(sum_dy_xhat);
            rest[c + ci] = T::from(sum_dy);
        }
        out
    }
}

impl CustomOp3 for BatchNormTrainBackward {
    fn name(&self) -> &'static str {
        "woundseg-batchnorm-train-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, hw) = nchw(l1)?;
        let shape = Shape::from(l1.shape().elem_count() + 2 * c);
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => Ok((
                CpuStorage::F32(self.run(slice(x, l1)?, slice(g, l2)?, slice(d, l3)?, n, c, hw)),
                shape,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => Ok((
                CpuStorage::F64(self.run(slice(x, l1)?, slice(g, l2)?, slice(d, l3)?, n, c, hw)),
                shape,
            )),
            _ => candle_core::bail!("batch norm backward: mismatched dtypes"),
        }
    }
}

/// Normalizes with batch statistics; `gamma` and `beta` have shape `(C,)`.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })
}

/// Per-channel `(mean, biased variance)` of an NCHW tensor, without gradient.
pub fn batch_stats(x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.detach().contiguous()?;
    let (mean, var) = match &*flat.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
        v => channel_stats(v, n, c, h * w),
    };
    let dev = x.device();
    Ok((
        Tensor::from_vec(mean, c, dev)?.to_dtype(x.dtype())?,
        Tensor::from_vec(var, c, dev)?.to_dtype(x.dtype())?,
    ))
}

/// PReLU with one shared slope: `(x, slope) -> y`.
struct PRelu;

impl PRelu {
    fn run<T: Float>(x: &[T], a: f64) -> Vec<T> {
        x.iter()
            .map(|v| {
                let f = v.to();
                T::from(if f > 0.0 { f } else { a * f })
            })
            .collect()
    }
}

impl CustomOp2 for PRelu {
    fn name(&self) -> &'static str {
        "woundseg-prelu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = l1.shape().clone();
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(a)) => {
                Ok((CpuStorage::F32(Self::run(slice(x, l1)?, slice(a, l2)?[0] as f64)), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a)) => {
                Ok((CpuStorage::F64(Self::run(slice(x, l1)?, slice(a, l2)?[0])), shape))
            }
            _ => candle_core::bail!("prelu: mismatched dtypes"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        slope: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op2_no_bwd(&Tensor::cat(&[&slope.flatten_all()?, &grad.flatten_all()?], 0)?, &PReluBackward)?;
        let numel = x.elem_count();
        Ok((Some(packed.narrow(0, 0, numel)?.reshape(x.shape())?), Some(packed.narrow(0, numel, 1)?)))
    }
}

/// `(x, [slope, dy...]) -> [dx..., dslope]`
struct PReluBackward;

impl PReluBackward {
    fn run<T: Float>(x: &[T], packed: &[T]) -> Vec<T> {
        let a = packed[0].to();
        let dy = &packed[1..];
        let mut out = Vec::with_capacity(x.len() + 1);
        let mut da = 0.0;
        for (v, g) in x.iter().zip(dy) {
            let (f, gv) = (v.to(), g.to());
            if f > 0.0 {
                out.push(T::from(gv));
            } else {
                out.push(T::from(a * gv));
                da += f * gv;
            }
        }
        out.push(T::from(da));
        out
    }
}

impl CustomOp2 for PReluBackward {
    fn name(&self) -> &'static str {
        "woundseg-prelu-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = Shape::from(l1.shape().elem_count() + 1);
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(p)) => {
                Ok((CpuStorage::F32(Self::run(slice(x, l1)?, slice(p, l2)?)), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(p)) => {
                Ok((CpuStorage::F64(Self::run(slice(x, l1)?, slice(p, l2)?)), shape))
            }
            _ => candle_core::bail!("prelu backward: mismatched dtypes"),
        }
    }
}

pub fn prelu(x: &Tensor, slope: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&slope.contiguous()?, PRelu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn composed_bn(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
        let (_, c, _, _) = x.dims4().unwrap();
        let mean = x.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let d = x.broadcast_sub(&mean).unwrap();
        let var = d.sqr().unwrap().mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        d.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn fused_batch_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let xs: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 7919) % 97) as f64 / 13.0).collect();
        let x = Var::from_vec(xs, (2, 3, 4, 5), &dev).unwrap();
        let g = Var::from_vec(vec![0.5, 1.5, -2.0], 3, &dev).unwrap();
        let b = Var::from_vec(vec![0.1, 0.0, 3.0], 3, &dev).unwrap();
        let probe = Tensor::from_vec((0..120).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>(), (2, 3, 4, 5), &dev)
            .unwrap();

        let fused = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        let composed = composed_bn(&x, &g, &b);
        let diff = (&fused - &composed).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);

        let gf = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gc = (composed * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            let d = (gf.get(v).unwrap() - gc.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-10);
        }
    }

    #[test]
    fn prelu_gradients() {
        let dev = Device::Cpu;
        let x = Var::from_vec(vec![-2.0f64, 3.0, -0.5, 1.0], (1, 1, 2, 2), &dev).unwrap();
        let a = Var::from_vec(vec![0.25f64], 1, &dev).unwrap();
        let y = prelu(&x, &a).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![-0.5, 3.0, -0.125, 1.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.25, 1.0, 0.25, 1.0]);
        assert_eq!(g.get(&a).unwrap().to_vec1::<f64>().unwrap(), vec![-2.5]);
    }
}
