//! CPU-friendly convolution and group normalisation.
//!
//! candle's CPU convolution backward runs a naive transposed convolution and
//! its group norm backward goes through a long chain of broadcast ops; these
//! versions keep both directions cheap.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Module, Shape, Tensor, WithDType};
use candle_nn::{init, VarBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output positions `lo..hi` whose tap `kx` lands inside `0..n`, and the
    /// input position of the first one.
    fn valid(&self, kx: usize, n: usize, out: usize) -> (usize, usize, usize) {
        let lo = (self.pad.saturating_sub(kx)).div_ceil(self.stride);
        let hi = ((n + self.pad).saturating_sub(kx)).div_ceil(self.stride).min(out);
        (lo, hi.max(lo), (lo * self.stride + kx).saturating_sub(self.pad))
    }
}

/// `B x C x H x W -> (C k k) x (B Ho Wo)`; row `c k k + ky k + kx`.
struct Im2Col(Geometry);

/// Adjoint of `Im2Col`: scatters-and-adds columns back onto an `h x w` image.
struct Col2Im {
    g: Geometry,
    c: usize,
    h: usize,
    w: usize,
}

fn unfold<T: WithDType>(x: &[T], (b, c, h, w): (usize, usize, usize, usize), g: Geometry) -> Vec<T> {
    let (ho, wo) = (g.out(h), g.out(w));
    let cols = b * ho * wo;
    let mut out = vec![T::zero(); c * g.k * g.k * cols];
    for ci in 0..c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let (lo, hi, ix) = g.valid(kx, w, wo);
                for bi in 0..b {
                    let plane = &x[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &mut out[r * cols + (bi * ho + oy) * wo..][..wo];
                        let src = &plane[iy as usize * w..][..w];
                        if g.stride == 1 {
                            row[lo..hi].copy_from_slice(&src[ix..ix + hi - lo]);
                        } else {
                            for (o, &v) in row[lo..hi].iter_mut().zip(src[ix..].iter().step_by(g.stride)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold<T: WithDType>(cols: &[T], b: usize, op: &Col2Im) -> Vec<T> {
    let Col2Im { g, c, h, w } = *op;
    let (ho, wo) = (g.out(h), g.out(w));
    let n = b * ho * wo;
    let mut out = vec![T::zero(); b * c * h * w];
    for ci in 0..c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let (lo, hi, ix) = g.valid(kx, w, wo);
                for bi in 0..b {
                    let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &cols[r * n + (bi * ho + oy) * wo..][..wo];
                        let dst = &mut plane[iy as usize * w..][..w];
                        for (d, &v) in dst[ix..].iter_mut().step_by(g.stride).zip(&row[lo..hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv: input must be contiguous"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let g = self.0;
        if h + 2 * g.pad < g.k || w + 2 * g.pad < g.k {
            candle_core::bail!("conv: {h}x{w} input is smaller than the {}x{} kernel", g.k, g.k);
        }
        let shape = Shape::from((c * g.k * g.k, b * g.out(h) * g.out(w)));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, l)?, (b, c, h, w), g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, l)?, (b, c, h, w), g)),
            _ => candle_core::bail!("conv: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im { g: self.0, c, h, w })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, n) = l.shape().dims2()?;
        let b = n / (self.g.out(self.h) * self.g.out(self.w));
        let shape = Shape::from((b, self.c, self.h, self.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, l)?, b, self)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, l)?, b, self)),
            _ => candle_core::bail!("conv: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }
}

/// Convolution with square kernel `weight: O x C x k x k` and optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self { weight, bias, stride, padding }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (o, c, k, _) = self.weight.dims4()?;
        let (b, xc, h, w) = xs.dims4()?;
        if xc != c {
            candle_core::bail!("conv: expected {c} input channels, got {xc}");
        }
        let g = Geometry {
            k,
            stride: self.stride,
            pad: self.padding,
        };
        let cols = xs.contiguous()?.apply_op1(Im2Col(g))?;
        let out = self
            .weight
            .reshape((o, c * k * k))?
            .matmul(&cols)?
            .reshape((o, b, g.out(h), g.out(w)))?
            .transpose(0, 1)?
            .contiguous()?;
        match &self.bias {
            Some(bias) => out.broadcast_add(&bias.reshape((1, o, 1, 1))?),
            None => Ok(out),
        }
    }
}

/// Same parameter names and initialisation as `candle_nn::conv2d`.
pub fn conv2d(in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> candle_core::Result<Conv> {
    let weight = vb.get_with_hints((out_c, in_c, k, k), "weight", init::DEFAULT_KAIMING_NORMAL)?;
    let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
    let bias = vb.get_with_hints(out_c, "bias", init::Init::Uniform { lo: -bound, up: bound })?;
    Ok(Conv::new(weight, Some(bias), stride, padding))
}

/// Per-group standardisation of a `B x C x ...` tensor, no affine part.
struct Normalize {
    groups: usize,
    eps: f64,
}

/// Input gradient of `Normalize`, recomputed from the gradient and the input.
struct NormalizeGrad {
    groups: usize,
    eps: f64,
}

fn group_stats<T: WithDType>(x: &[T], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn normalize<T: WithDType>(x: &[T], block: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for g in x.chunks(block) {
        let (mean, inv) = group_stats(g, eps);
        out.extend(g.iter().map(|v| T::from_f64((v.to_f64() - mean) * inv)));
    }
    out
}

// dx = inv * (g - mean(g) - xhat * mean(g * xhat)) within each group.
fn normalize_grad<T: WithDType>(grad: &[T], x: &[T], block: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (gg, xg) in grad.chunks(block).zip(x.chunks(block)) {
        let (mean, inv) = group_stats(xg, eps);
        let n = block as f64;
        let xhat = |v: &T| (v.to_f64() - mean) * inv;
        let g_mean = gg.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let gx_mean = gg.iter().zip(xg).map(|(g, v)| g.to_f64() * xhat(v)).sum::<f64>() / n;
        out.extend(gg.iter().zip(xg).map(|(g, v)| T::from_f64(inv * (g.to_f64() - g_mean - xhat(v) * gx_mean))));
    }
    out
}

fn group_block(l: &Layout, groups: usize) -> candle_core::Result<usize> {
    let dims = l.shape().dims();
    if dims.len() < 2 || !dims[1].is_multiple_of(groups) {
        candle_core::bail!("group norm: shape {dims:?} is not divisible into {groups} channel groups");
    }
    Ok(l.shape().elem_count() / (dims[0] * groups))
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let block = group_block(l, self.groups)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(normalize(contiguous(v, l)?, block, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(normalize(contiguous(v, l)?, block, self.eps)),
            _ => candle_core::bail!("group norm: only f32 and f64 are supported"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = NormalizeGrad {
            groups: self.groups,
            eps: self.eps,
        };
        Ok(Some(grad.contiguous()?.apply_op2_no_bwd(&arg.contiguous()?, &op)?))
    }
}

impl CustomOp2 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "group-normalize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let block = group_block(l2, self.groups)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(g), CpuStorage::F32(x)) => CpuStorage::F32(normalize_grad(contiguous(g, l1)?, contiguous(x, l2)?, block, self.eps)),
            (CpuStorage::F64(g), CpuStorage::F64(x)) => CpuStorage::F64(normalize_grad(contiguous(g, l1)?, contiguous(x, l2)?, block, self.eps)),
            _ => candle_core::bail!("group norm: only f32 and f64 are supported"),
        };
        Ok((out, l2.shape().clone()))
    }
}

/// Group normalisation with a per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(weight: Tensor, bias: Tensor, groups: usize, eps: f64) -> Self {
        Self { weight, bias, groups, eps }
    }
}

impl Module for GroupNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let c = self.weight.dim(0)?;
        let mut bshape = vec![1; xs.rank()];
        bshape[1] = c;
        let xhat = xs.contiguous()?.apply_op1(Normalize {
            groups: self.groups,
            eps: self.eps,
        })?;
        xhat.broadcast_mul(&self.weight.reshape(bshape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(bshape.as_slice())?)
    }
}

/// Same parameter names and initialisation as `candle_nn::group_norm`.
pub fn group_norm(groups: usize, channels: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<GroupNorm> {
    if !channels.is_multiple_of(groups) {
        candle_core::bail!("group norm: {channels} channels are not divisible into {groups} groups");
    }
    let weight = vb.get_with_hints(channels, "weight", init::Init::Const(1.0))?;
    let bias = vb.get_with_hints(channels, "bias", init::Init::Const(0.0))?;
    Ok(GroupNorm::new(weight, bias, groups, eps))
}
