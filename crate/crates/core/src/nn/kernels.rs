//! CPU convolution kernels exposed to candle as custom ops.
//!
//! Candle's built-in convolution backward pass routes the input gradient
//! through a naive transposed convolution and splits grouped convolutions
//! into one op per group. Both are far too slow for training on a CPU, so
//! the three convolution passes (forward, data gradient, filter gradient)
//! are implemented here with im2col + GEMM, plus a direct path for
//! depthwise kernels. Transposed convolution is the data-gradient pass
//! run forward.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

/// Geometry shared by all three convolution passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvGeom {
    pub fn out_len(&self, len: usize, k: usize, axis: usize) -> Option<usize> {
        let (s, p, d) = match axis {
            0 => (self.stride.0, self.padding.0, self.dilation.0),
            _ => (self.stride.1, self.padding.1, self.dilation.1),
        };
        let span = d * (k - 1) + 1;
        (len + 2 * p).checked_sub(span).map(|v| v / s + 1)
    }
}

#[derive(Clone, Copy, Debug)]
enum Pass {
    /// (x, w) -> y
    Forward,
    /// (dy, w) -> dx, with the spatial size of dx.
    Data { out_h: usize, out_w: usize },
    /// (x, dy) -> dw, with the kernel size of dw.
    Filter { kh: usize, kw: usize },
}

#[derive(Clone, Copy, Debug)]
struct ConvOp {
    geom: ConvGeom,
    pass: Pass,
}

/// Sizes of one convolution problem, always expressed in forward terms.
#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn cg(&self, g: usize) -> usize {
        self.c / g
    }
    fn og(&self, g: usize) -> usize {
        self.o / g
    }
}

trait Gemm: Copy + Default + std::ops::Mul<Output = Self> + std::ops::AddAssign + 'static {
    /// c = a·b + beta·c with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    fn zero() -> Self {
        Self::default()
    }
    fn one() -> Self;
}

impl Gemm for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: the callers size a, b and c for the given m, k, n and strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
    fn one() -> Self {
        1.0
    }
}

impl Gemm for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
    fn one() -> Self {
        1.0
    }
}

/// Output positions `o` along one axis whose input index `o*s + k*d - p`
/// falls inside `[0, len)`.
#[inline]
fn valid_range(out: usize, len: usize, s: usize, p: usize, d: usize, k: usize) -> (usize, usize) {
    let off = k * d;
    let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
    // o*s + off - p < len  <=>  o*s < len + p - off
    let lim = len + p;
    let hi = if lim > off { (lim - off).div_ceil(s).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn is_pointwise(g: &ConvGeom, d: &Dims) -> bool {
    d.kh == 1 && d.kw == 1 && g.stride == (1, 1) && g.padding == (0, 0)
}

fn is_depthwise(g: &ConvGeom, d: &Dims) -> bool {
    g.groups == d.c && g.groups == d.o
}

/// cols[(ci*kh + ky)*kw + kx][oy*ow + ox] for one (sample, group) image.
fn im2col<T: Gemm>(x: &[T], g: &ConvGeom, d: &Dims, cg: usize, cols: &mut [T]) {
    let p = d.oh * d.ow;
    cols.fill(T::zero());
    for ci in 0..cg {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            let (y0, y1) = valid_range(d.oh, d.h, g.stride.0, g.padding.0, g.dilation.0, ky);
            for kx in 0..d.kw {
                let (x0, x1) = valid_range(d.ow, d.w, g.stride.1, g.padding.1, g.dilation.1, kx);
                let row = &mut cols[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in y0..y1 {
                    let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                    let src = &plane[iy * d.w..(iy + 1) * d.w];
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if x0 >= x1 {
                        continue;
                    }
                    if g.stride.1 == 1 {
                        let ix0 = x0 + kx * g.dilation.1 - g.padding.1;
                        dst[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            dst[ox] = src[ox * g.stride.1 + kx * g.dilation.1 - g.padding.1];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates cols back into the image (adjoint of `im2col`).
fn col2im<T: Gemm>(cols: &[T], g: &ConvGeom, d: &Dims, cg: usize, x: &mut [T]) {
    let p = d.oh * d.ow;
    for ci in 0..cg {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            let (y0, y1) = valid_range(d.oh, d.h, g.stride.0, g.padding.0, g.dilation.0, ky);
            for kx in 0..d.kw {
                let (x0, x1) = valid_range(d.ow, d.w, g.stride.1, g.padding.1, g.dilation.1, kx);
                let row = &cols[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in y0..y1 {
                    let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                    let dst = &mut plane[iy * d.w..(iy + 1) * d.w];
                    let src = &row[oy * d.ow..(oy + 1) * d.ow];
                    for ox in x0..x1 {
                        dst[ox * g.stride.1 + kx * g.dilation.1 - g.padding.1] += src[ox];
                    }
                }
            }
        }
    }
}

fn forward<T: Gemm>(x: &[T], w: &[T], g: &ConvGeom, d: &Dims) -> Vec<T> {
    let p = d.oh * d.ow;
    let mut y = vec![T::zero(); d.n * d.o * p];
    if is_depthwise(g, d) {
        for (chan, (yp, xp)) in y
            .chunks_mut(p)
            .zip(x.chunks(d.h * d.w))
            .enumerate()
        {
            let c = chan % d.c;
            let wk = &w[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
            for ky in 0..d.kh {
                let (y0, y1) = valid_range(d.oh, d.h, g.stride.0, g.padding.0, g.dilation.0, ky);
                for kx in 0..d.kw {
                    let (x0, x1) =
                        valid_range(d.ow, d.w, g.stride.1, g.padding.1, g.dilation.1, kx);
                    let wv = wk[ky * d.kw + kx];
                    for oy in y0..y1 {
                        let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                        let src = &xp[iy * d.w..(iy + 1) * d.w];
                        let dst = &mut yp[oy * d.ow..(oy + 1) * d.ow];
                        if x0 >= x1 {
                            continue;
                        }
                        if g.stride.1 == 1 {
                            let ix0 = x0 + kx * g.dilation.1 - g.padding.1;
                            for (o, i) in dst[x0..x1].iter_mut().zip(&src[ix0..]) {
                                *o += wv * *i;
                            }
                        } else {
                            for ox in x0..x1 {
                                dst[ox] += wv
                                    * src[ox * g.stride.1 + kx * g.dilation.1 - g.padding.1];
                            }
                        }
                    }
                }
            }
        }
        return y;
    }
    let groups = g.groups;
    let (cg, og) = (d.cg(groups), d.og(groups));
    let k = cg * d.kh * d.kw;
    let pointwise = is_pointwise(g, d);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..d.n {
        for gi in 0..groups {
            let xg = &x[(n * d.c + gi * cg) * d.h * d.w..][..cg * d.h * d.w];
            let wg = &w[gi * og * k..][..og * k];
            let yg = &mut y[(n * d.o + gi * og) * p..][..og * p];
            let b: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, g, d, cg, &mut cols);
                &cols
            };
            T::gemm(og, k, p, wg, k as isize, 1, b, p as isize, 1, T::zero(), yg);
        }
    }
    y
}

fn backward_data<T: Gemm>(dy: &[T], w: &[T], g: &ConvGeom, d: &Dims) -> Vec<T> {
    let p = d.oh * d.ow;
    let mut dx = vec![T::zero(); d.n * d.c * d.h * d.w];
    if is_depthwise(g, d) {
        for (chan, (dxp, dyp)) in dx
            .chunks_mut(d.h * d.w)
            .zip(dy.chunks(p))
            .enumerate()
        {
            let c = chan % d.c;
            let wk = &w[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
            for ky in 0..d.kh {
                let (y0, y1) = valid_range(d.oh, d.h, g.stride.0, g.padding.0, g.dilation.0, ky);
                for kx in 0..d.kw {
                    let (x0, x1) =
                        valid_range(d.ow, d.w, g.stride.1, g.padding.1, g.dilation.1, kx);
                    let wv = wk[ky * d.kw + kx];
                    for oy in y0..y1 {
                        let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                        let dst = &mut dxp[iy * d.w..(iy + 1) * d.w];
                        let src = &dyp[oy * d.ow..(oy + 1) * d.ow];
                        for ox in x0..x1 {
                            dst[ox * g.stride.1 + kx * g.dilation.1 - g.padding.1] +=
                                wv * src[ox];
                        }
                    }
                }
            }
        }
        return dx;
    }
    let groups = g.groups;
    let (cg, og) = (d.cg(groups), d.og(groups));
    let k = cg * d.kh * d.kw;
    let pointwise = is_pointwise(g, d);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * p }];
    for n in 0..d.n {
        for gi in 0..groups {
            let dyg = &dy[(n * d.o + gi * og) * p..][..og * p];
            let wg = &w[gi * og * k..][..og * k];
            let dxg = &mut dx[(n * d.c + gi * cg) * d.h * d.w..][..cg * d.h * d.w];
            // W^T is (k x og): row stride 1, column stride k.
            if pointwise {
                T::gemm(k, og, p, wg, 1, k as isize, dyg, p as isize, 1, T::zero(), dxg);
            } else {
                T::gemm(k, og, p, wg, 1, k as isize, dyg, p as isize, 1, T::zero(), &mut cols);
                col2im(&cols, g, d, cg, dxg);
            }
        }
    }
    dx
}

fn backward_filter<T: Gemm>(x: &[T], dy: &[T], g: &ConvGeom, d: &Dims) -> Vec<T> {
    let p = d.oh * d.ow;
    let groups = g.groups;
    let (cg, og) = (d.cg(groups), d.og(groups));
    let k = cg * d.kh * d.kw;
    let mut dw = vec![T::zero(); d.o * k];
    if is_depthwise(g, d) {
        for (chan, (xp, dyp)) in x.chunks(d.h * d.w).zip(dy.chunks(p)).enumerate() {
            let c = chan % d.c;
            let wk = &mut dw[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
            for ky in 0..d.kh {
                let (y0, y1) = valid_range(d.oh, d.h, g.stride.0, g.padding.0, g.dilation.0, ky);
                for kx in 0..d.kw {
                    let (x0, x1) =
                        valid_range(d.ow, d.w, g.stride.1, g.padding.1, g.dilation.1, kx);
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                        let src = &xp[iy * d.w..(iy + 1) * d.w];
                        let gy = &dyp[oy * d.ow..(oy + 1) * d.ow];
                        for ox in x0..x1 {
                            acc += gy[ox] * src[ox * g.stride.1 + kx * g.dilation.1 - g.padding.1];
                        }
                    }
                    wk[ky * d.kw + kx] += acc;
                }
            }
        }
        return dw;
    }
    let pointwise = is_pointwise(g, d);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * p }];
    for n in 0..d.n {
        for gi in 0..groups {
            let xg = &x[(n * d.c + gi * cg) * d.h * d.w..][..cg * d.h * d.w];
            let dyg = &dy[(n * d.o + gi * og) * p..][..og * p];
            let dwg = &mut dw[gi * og * k..][..og * k];
            let b: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, g, d, cg, &mut cols);
                &cols
            };
            // dW (og x k) += dY (og x p) · cols^T (p x k)
            T::gemm(og, p, k, dyg, p as isize, 1, b, 1, p as isize, T::one(), dwg);
        }
    }
    dw
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what}: expected a contiguous tensor"),
    }
}

fn dims4(layout: &Layout, what: &str) -> candle_core::Result<(usize, usize, usize, usize)> {
    match layout.shape().dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => candle_core::bail!("{what}: expected a rank-4 tensor, got {other:?}"),
    }
}

impl ConvOp {
    fn dims(&self, l1: &Layout, l2: &Layout) -> candle_core::Result<Dims> {
        let g = &self.geom;
        match self.pass {
            Pass::Forward => {
                let (n, c, h, w) = dims4(l1, "conv2d input")?;
                let (o, cg, kh, kw) = dims4(l2, "conv2d weight")?;
                if cg * g.groups != c || o % g.groups != 0 {
                    candle_core::bail!(
                        "conv2d: {c} input channels, weight {:?}, groups {}",
                        l2.shape().dims(),
                        g.groups
                    );
                }
                let (Some(oh), Some(ow)) = (g.out_len(h, kh, 0), g.out_len(w, kw, 1)) else {
                    candle_core::bail!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}");
                };
                Ok(Dims { n, c, h, w, o, kh, kw, oh, ow })
            }
            Pass::Data { out_h, out_w } => {
                let (n, o, oh, ow) = dims4(l1, "conv data-gradient input")?;
                let (o2, cg, kh, kw) = dims4(l2, "conv data-gradient weight")?;
                if o != o2 || o % g.groups != 0 {
                    candle_core::bail!("conv transpose: {o} channels vs weight {:?}", l2.shape().dims());
                }
                let d = Dims { n, c: cg * g.groups, h: out_h, w: out_w, o, kh, kw, oh, ow };
                if g.out_len(out_h, kh, 0) != Some(oh) || g.out_len(out_w, kw, 1) != Some(ow) {
                    candle_core::bail!("conv transpose: inconsistent output size {out_h}x{out_w}");
                }
                Ok(d)
            }
            Pass::Filter { kh, kw } => {
                let (n, c, h, w) = dims4(l1, "conv filter-gradient input")?;
                let (n2, o, oh, ow) = dims4(l2, "conv filter-gradient output grad")?;
                if n != n2 {
                    candle_core::bail!("conv filter gradient: batch mismatch {n} vs {n2}");
                }
                Ok(Dims { n, c, h, w, o, kh, kw, oh, ow })
            }
        }
    }

    fn run<T: Gemm>(&self, a: &[T], b: &[T], d: &Dims) -> (Vec<T>, Shape) {
        let g = &self.geom;
        match self.pass {
            Pass::Forward => (forward(a, b, g, d), Shape::from((d.n, d.o, d.oh, d.ow))),
            Pass::Data { .. } => (backward_data(a, b, g, d), Shape::from((d.n, d.c, d.h, d.w))),
            Pass::Filter { .. } => (
                backward_filter(a, b, g, d),
                Shape::from((d.o, d.c / g.groups, d.kh, d.kw)),
            ),
        }
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        match self.pass {
            Pass::Forward => "woundseg-conv2d",
            Pass::Data { .. } => "woundseg-conv2d-data",
            Pass::Filter { .. } => "woundseg-conv2d-filter",
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims(l1, l2)?;
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (out, shape) = self.run(contiguous(a, l1, "conv")?, contiguous(b, l2, "conv")?, &d);
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (out, shape) = self.run(contiguous(a, l1, "conv")?, contiguous(b, l2, "conv")?, &d);
                Ok((CpuStorage::F64(out), shape))
            }
            _ => candle_core::bail!("conv2d: only matching f32 or f64 operands are supported"),
        }
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad_res.contiguous()?;
        match self.pass {
            Pass::Forward => {
                let (_, _, h, w) = arg1.dims4()?;
                let (_, _, kh, kw) = arg2.dims4()?;
                let dx = grad.apply_op2_no_bwd(
                    arg2,
                    &ConvOp { geom: self.geom, pass: Pass::Data { out_h: h, out_w: w } },
                )?;
                let dw = arg1.apply_op2_no_bwd(
                    &grad,
                    &ConvOp { geom: self.geom, pass: Pass::Filter { kh, kw } },
                )?;
                Ok((Some(dx), Some(dw)))
            }
            Pass::Data { .. } => {
                // Transposed convolution: arg1 plays the role of dy.
                let (_, _, kh, kw) = arg2.dims4()?;
                let d_arg = grad.apply_op2_no_bwd(arg2, &ConvOp { geom: self.geom, pass: Pass::Forward })?;
                let dw = grad.apply_op2_no_bwd(
                    arg1,
                    &ConvOp { geom: self.geom, pass: Pass::Filter { kh, kw } },
                )?;
                Ok((Some(d_arg), Some(dw)))
            }
            Pass::Filter { .. } => Err(candle_core::Error::BackwardNotSupported { op: self.name() }),
        }
    }
}

/// 2-D convolution without bias. `weight` is `(out, in / groups, kh, kw)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, geom: ConvGeom) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, ConvOp { geom, pass: Pass::Forward })
}

/// 2-D transposed convolution without bias. `weight` is
/// `(in, out / groups, kh, kw)`, matching the usual deep-learning layout.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    geom: ConvGeom,
    output_padding: (usize, usize),
) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (_, _, kh, kw) = weight.dims4()?;
    let len = |i: usize, s: usize, p: usize, d: usize, k: usize, op: usize| {
        ((i - 1) * s + d * (k - 1) + op + 1).checked_sub(2 * p)
    };
    let (Some(out_h), Some(out_w)) = (
        len(h, geom.stride.0, geom.padding.0, geom.dilation.0, kh, output_padding.0),
        len(w, geom.stride.1, geom.padding.1, geom.dilation.1, kw, output_padding.1),
    ) else {
        candle_core::bail!("conv_transpose2d: padding larger than output");
    };
    x.contiguous()?.apply_op2(
        &weight.contiguous()?,
        ConvOp { geom, pass: Pass::Data { out_h, out_w } },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn direct_conv(x: &[f64], w: &[f64], g: &ConvGeom, d: &Dims) -> Vec<f64> {
        let (cg, og) = (d.c / g.groups, d.o / g.groups);
        let mut y = vec![0.0; d.n * d.o * d.oh * d.ow];
        for n in 0..d.n {
            for o in 0..d.o {
                let gi = o / og;
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize
                                        - g.padding.0 as isize;
                                    let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize
                                        - g.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    let c = gi * cg + ci;
                                    acc += w[((o * cg + ci) * d.kh + ky) * d.kw + kx]
                                        * x[((n * d.c + c) * d.h + iy as usize) * d.w + ix as usize];
                                }
                            }
                        }
                        y[((n * d.o + o) * d.oh + oy) * d.ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 * 0.37 + seed).sin() * 1.7).fract()).collect()
    }

    fn check(g: ConvGeom, n: usize, c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize) {
        let oh = g.out_len(h, kh, 0).unwrap();
        let ow = g.out_len(w, kw, 1).unwrap();
        let d = Dims { n, c, h, w, o, kh, kw, oh, ow };
        let x = ramp(n * c * h * w, 0.1);
        let wt = ramp(o * (c / g.groups) * kh * kw, 2.3);
        let expected = direct_conv(&x, &wt, &g, &d);
        let got = forward(&x, &wt, &g, &d);
        for (a, b) in expected.iter().zip(&got) {
            assert!((a - b).abs() < 1e-10, "{g:?}: {a} vs {b}");
        }
        // Adjointness: <conv(x), dy> = <x, data(dy)> and = <w, filter(x, dy)>.
        let dy = ramp(got.len(), 4.1);
        let lhs: f64 = got.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let dx = backward_data(&dy, &wt, &g, &d);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let dw = backward_filter(&x, &dy, &g, &d);
        let rhs2: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{g:?} data: {lhs} vs {rhs}");
        assert!((lhs - rhs2).abs() < 1e-9 * lhs.abs().max(1.0), "{g:?} filter: {lhs} vs {rhs2}");
    }

    #[test]
    fn matches_direct_convolution_across_geometries() {
        let base = ConvGeom::default();
        check(base, 2, 3, 7, 6, 4, 3, 3);
        check(ConvGeom { padding: (1, 1), ..base }, 2, 3, 7, 6, 4, 3, 3);
        check(ConvGeom { stride: (2, 2), padding: (1, 1), ..base }, 1, 4, 9, 8, 5, 3, 3);
        check(ConvGeom { dilation: (2, 2), padding: (2, 2), ..base }, 1, 2, 8, 8, 3, 3, 3);
        check(ConvGeom { padding: (2, 0), ..base }, 1, 2, 6, 6, 2, 5, 1);
        check(ConvGeom { padding: (0, 2), ..base }, 1, 2, 6, 6, 2, 1, 5);
        check(base, 2, 6, 5, 5, 4, 1, 1);
        check(ConvGeom { stride: (2, 2), ..base }, 1, 4, 8, 8, 4, 2, 2);
        check(ConvGeom { groups: 2, padding: (1, 1), ..base }, 1, 4, 6, 6, 6, 3, 3);
        check(ConvGeom { groups: 5, padding: (1, 1), ..base }, 2, 5, 6, 7, 5, 3, 3);
        check(ConvGeom { groups: 5, padding: (2, 2), stride: (2, 2), ..base }, 1, 5, 9, 9, 5, 5, 5);
        check(ConvGeom { groups: 3, ..base }, 1, 3, 4, 4, 3, 1, 1);
        check(ConvGeom { dilation: (16, 16), padding: (16, 16), ..base }, 1, 2, 4, 4, 2, 3, 3);
        check(ConvGeom { dilation: (16, 16), padding: (16, 16), groups: 2, ..base }, 1, 2, 4, 4, 2, 3, 3);
    }

    #[test]
    fn transposed_conv_output_size() {
        let dev = Device::Cpu;
        let x = Tensor::ones((1, 4, 5, 5), DType::F32, &dev).unwrap();
        let w = Tensor::ones((4, 2, 3, 3), DType::F32, &dev).unwrap();
        let geom = ConvGeom { stride: (2, 2), padding: (1, 1), ..Default::default() };
        let y = conv_transpose2d(&x, &w, geom, (1, 1)).unwrap();
        assert_eq!(y.dims(), &[1, 2, 10, 10]);
        let w2 = Tensor::ones((4, 3, 2, 2), DType::F32, &dev).unwrap();
        let y = conv_transpose2d(&x, &w2, ConvGeom { stride: (2, 2), ..Default::default() }, (0, 0))
            .unwrap();
        assert_eq!(y.dims(), &[1, 3, 10, 10]);
        // Every output pixel of a 2x2/stride-2 transposed conv sees exactly one input.
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 4.0));
    }
}
