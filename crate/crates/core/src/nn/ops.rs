//! Differentiable tensor operations not covered (or not covered well) by
//! candle's CPU backend: max pooling with first-argmax routing, bilinear
//! resizing, adaptive average pooling and nearest upsampling.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, D};

fn dims4(layout: &Layout, what: &str) -> candle_core::Result<(usize, usize, usize, usize)> {
    match layout.shape().dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => candle_core::bail!("{what}: expected a rank-4 tensor, got {other:?}"),
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

trait Real: Copy + PartialOrd + Default + std::ops::AddAssign + std::ops::Mul<Output = Self> + 'static {
    fn neg_inf() -> Self;
    fn from_f64(v: f64) -> Self;
}
impl Real for f32 {
    fn neg_inf() -> Self {
        f32::NEG_INFINITY
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}
impl Real for f64 {
    fn neg_inf() -> Self {
        f64::NEG_INFINITY
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, |$v:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(data) => {
                let $v = slice(data, $l)?;
                let (out, shape) = $body;
                Ok((CpuStorage::F32(out), shape))
            }
            CpuStorage::F64(data) => {
                let $v = slice(data, $l)?;
                let (out, shape) = $body;
                Ok((CpuStorage::F64(out), shape))
            }
            _ => candle_core::bail!("only f32 and f64 tensors are supported"),
        }
    };
}

/// Window geometry of a square max pool.
#[derive(Clone, Copy, Debug)]
struct Pool {
    k: usize,
    s: usize,
    p: usize,
}

impl Pool {
    fn out(&self, len: usize) -> usize {
        (len + 2 * self.p - self.k) / self.s + 1
    }

    /// Flat index (within the plane) of the first maximum of every window.
    fn argmax<T: Real>(&self, plane: &[T], h: usize, w: usize) -> Vec<usize> {
        let (oh, ow) = (self.out(h), self.out(w));
        let mut idx = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_inf();
                let mut at = usize::MAX;
                for ky in 0..self.k {
                    let iy = (oy * self.s + ky) as isize - self.p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.s + kx) as isize - self.p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        // NaN never wins, so a window of NaNs keeps the first index.
                        if at == usize::MAX || plane[i] > best {
                            best = plane[i];
                            at = i;
                        }
                    }
                }
                idx.push(at);
            }
        }
        idx
    }
}

struct MaxPool(Pool);

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "woundseg-maxpool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l, "max_pool2d")?;
        let pool = self.0;
        if h + 2 * pool.p < pool.k || w + 2 * pool.p < pool.k {
            candle_core::bail!("max_pool2d: window {} larger than input {h}x{w}", pool.k);
        }
        let (oh, ow) = (pool.out(h), pool.out(w));
        dispatch1!(s, l, |x| {
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for plane in x.chunks(h * w) {
                out.extend(pool.argmax(plane, h, w).into_iter().map(|i| plane[i]));
            }
            (out, Shape::from((n, c, oh, ow)))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &MaxPoolBackward(self.0))?))
    }
}

struct MaxPoolBackward(Pool);

impl CustomOp2 for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "woundseg-maxpool2d-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1, "max_pool2d backward")?;
        let (_, _, oh, ow) = dims4(l2, "max_pool2d backward")?;
        fn run<T: Real>(p: Pool, x: &[T], g: &[T], h: usize, w: usize, o: usize) -> Vec<T> {
            let mut dx = vec![T::default(); x.len()];
            for ((plane, gp), dp) in x.chunks(h * w).zip(g.chunks(o)).zip(dx.chunks_mut(h * w)) {
                for (i, gv) in p.argmax(plane, h, w).into_iter().zip(gp) {
                    dp[i] += *gv;
                }
            }
            dx
        }
        let shape = Shape::from((n, c, h, w));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => Ok((
                CpuStorage::F32(run(self.0, slice(x, l1)?, slice(g, l2)?, h, w, oh * ow)),
                shape,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => Ok((
                CpuStorage::F64(run(self.0, slice(x, l1)?, slice(g, l2)?, h, w, oh * ow)),
                shape,
            )),
            _ => candle_core::bail!("max_pool2d backward: dtype mismatch"),
        }
    }
}

/// Max pooling over `k`x`k` windows with the given stride and implicit
/// negative-infinity padding. Gradients flow to the first maximum of each
/// window.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool(Pool { k, s: stride, p: padding }))
}

struct ArgmaxMask(usize);

impl CustomOp1 for ArgmaxMask {
    fn name(&self) -> &'static str {
        "woundseg-argmax-mask"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l, "argmax mask")?;
        let pool = Pool { k: self.0, s: self.0, p: 0 };
        fn run<T: Real>(pool: Pool, x: &[T], h: usize, w: usize) -> Vec<T> {
            let mut m = vec![T::default(); x.len()];
            for (plane, mp) in x.chunks(h * w).zip(m.chunks_mut(h * w)) {
                for i in pool.argmax(plane, h, w) {
                    mp[i] = T::from_f64(1.0);
                }
            }
            m
        }
        let shape = Shape::from((n, c, h, w));
        dispatch1!(s, l, |x| (run(pool, x, h, w), shape.clone()))
    }
}

/// One-hot mask of the first maximum in every non-overlapping `k`x`k`
/// window. This is the index record of a pooling step, used to place
/// values back during unpooling. The result carries no gradient.
pub fn argmax_mask(x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    x.detach().contiguous()?.apply_op1_no_bwd(&ArgmaxMask(k))
}

/// Nearest-neighbour upsampling by an integer factor, built from
/// broadcasting so that the gradient is a plain window sum.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))
}

/// Max unpooling: scatters `x` back to the argmax positions recorded by
/// [`argmax_mask`] on the pre-pooling tensor.
pub fn max_unpool(x: &Tensor, mask: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    upsample_nearest(x, k)?.mul(mask)
}

/// Source taps of one output coordinate under half-pixel (align_corners=false)
/// bilinear sampling.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

struct Resize {
    out_h: usize,
    out_w: usize,
}

fn resize_plane<T: Real>(src: &[T], h: usize, w: usize, ty: &[Tap], tx: &[Tap], dst: &mut Vec<T>) {
    for t in ty {
        let (r0, r1) = (&src[t.i0 * w..(t.i0 + 1) * w], &src[t.i1 * w..(t.i1 + 1) * w]);
        let (a, b) = (T::from_f64(t.w0), T::from_f64(t.w1));
        for s in tx {
            let (c, d) = (T::from_f64(s.w0), T::from_f64(s.w1));
            let mut v = a * (c * r0[s.i0]);
            v += a * (d * r0[s.i1]);
            v += b * (c * r1[s.i0]);
            v += b * (d * r1[s.i1]);
            dst.push(v);
        }
    }
    let _ = h;
}

fn resize_plane_adjoint<T: Real>(g: &[T], ty: &[Tap], tx: &[Tap], w: usize, dst: &mut [T]) {
    let ow = tx.len();
    for (oy, t) in ty.iter().enumerate() {
        let (a, b) = (T::from_f64(t.w0), T::from_f64(t.w1));
        for (ox, s) in tx.iter().enumerate() {
            let gv = g[oy * ow + ox];
            let (c, d) = (T::from_f64(s.w0), T::from_f64(s.w1));
            dst[t.i0 * w + s.i0] += a * (c * gv);
            dst[t.i0 * w + s.i1] += a * (d * gv);
            dst[t.i1 * w + s.i0] += b * (c * gv);
            dst[t.i1 * w + s.i1] += b * (d * gv);
        }
    }
}

impl CustomOp1 for Resize {
    fn name(&self) -> &'static str {
        "woundseg-resize-bilinear"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l, "resize_bilinear")?;
        let (ty, tx) = (taps(h, self.out_h), taps(w, self.out_w));
        let shape = Shape::from((n, c, self.out_h, self.out_w));
        dispatch1!(s, l, |x| {
            let mut out = Vec::with_capacity(n * c * self.out_h * self.out_w);
            for plane in x.chunks(h * w) {
                resize_plane(plane, h, w, &ty, &tx, &mut out);
            }
            (out, shape.clone())
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&ResizeAdjoint { in_h: h, in_w: w })?))
    }
}

struct ResizeAdjoint {
    in_h: usize,
    in_w: usize,
}

impl CustomOp1 for ResizeAdjoint {
    fn name(&self) -> &'static str {
        "woundseg-resize-bilinear-backward"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, oh, ow) = dims4(l, "resize_bilinear backward")?;
        let (ty, tx) = (taps(self.in_h, oh), taps(self.in_w, ow));
        let (h, w) = (self.in_h, self.in_w);
        let shape = Shape::from((n, c, h, w));
        dispatch1!(s, l, |g| {
            let mut out = vec![Default::default(); n * c * h * w];
            for (gp, dp) in g.chunks(oh * ow).zip(out.chunks_mut(h * w)) {
                resize_plane_adjoint(gp, &ty, &tx, w, dp);
            }
            (out, shape.clone())
        })
    }
}

/// Bilinear resize with half-pixel centres (the `align_corners = false`
/// convention).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    x.contiguous()?.apply_op1(Resize { out_h, out_w })
}

/// Row-stochastic `(out, input)` matrix of adaptive average pooling windows
/// `[floor(i*in/out), ceil((i+1)*in/out))`.
fn adaptive_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    for o in 0..output {
        let start = o * input / output;
        let end = ((o + 1) * input).div_ceil(output);
        let inv = 1.0 / (end - start) as f64;
        for i in start..end {
            m[o * input + i] = inv;
        }
    }
    m
}

/// Adaptive average pooling to a fixed spatial size.
pub fn adaptive_avg_pool2d(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let pw = Tensor::from_vec(adaptive_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let ph = Tensor::from_vec(adaptive_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let y = x.reshape((n * c * h, w))?.matmul(&pw.t()?)?; // (n c h, ow)
    let y = y.reshape((n * c, h, out_w))?.transpose(1, 2)?.contiguous()?; // (n c, ow, h)
    let y = y.reshape((n * c * out_w, h))?.matmul(&ph.t()?)?; // (n c ow, oh)
    y.reshape((n, c, out_w, out_h))?.transpose(2, 3)?.contiguous()
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

pub fn relu6(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()?.minimum(6.0)
}

/// `relu6(x + 3) / 6`
pub fn hard_sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    relu6(&(x + 3.0)?)? / 6.0
}

pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Shifts `x` by `shift` positions along `dim`, filling vacated entries with
/// zeros.
pub fn shift_zero_fill(x: &Tensor, dim: usize, shift: isize) -> candle_core::Result<Tensor> {
    if shift == 0 {
        return Ok(x.clone());
    }
    let len = x.dim(dim)?;
    let s = shift.unsigned_abs().min(len);
    if s == len {
        return x.zeros_like();
    }
    if shift > 0 {
        x.narrow(dim, 0, len - s)?.pad_with_zeros(dim, s, 0)
    } else {
        x.narrow(dim, s, len - s)?.pad_with_zeros(dim, 0, s)
    }
}

pub fn is_float(dtype: DType) -> bool {
    matches!(dtype, DType::F32 | DType::F64)
}
