//! Nearest-neighbour vector quantization with a straight-through gradient.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

use crate::error::{Error, Result};
use crate::nn::to_tokens;

use super::{nearest_indices, Codebook, IndexGrid};

impl Codebook {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (k, d) = t.dims2()?;
        Self::new(k, d, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    pub fn to_tensor(&self, device: &candle_core::Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(self.entries(), (self.len(), self.dim()), device)?)
    }
}

impl IndexGrid {
    /// Splits a `B x h x w` (or `B x hw`) index tensor into per-sample grids.
    pub fn from_batch(t: &Tensor, h: usize, w: usize) -> Result<Vec<Self>> {
        let b = t.dim(0)?;
        let flat: Vec<u32> = t.to_dtype(DType::U32)?.flatten_all()?.to_vec1()?;
        if flat.len() != b * h * w {
            return Err(Error::shape((b, h, w), t.dims()));
        }
        Ok(flat.chunks_exact(h * w).map(|c| Self { h, w, indices: c.to_vec() }).collect())
    }
}

/// Identity-gradient substitution: the forward pass returns the second argument
/// (the quantized values), the backward pass hands the incoming gradient to the
/// first argument unchanged and nothing to the second.
struct StraightThrough;

impl CustomOp2 for StraightThrough {
    fn name(&self) -> &'static str {
        "straight-through"
    }

    fn cpu_fwd(&self, _s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            candle_core::bail!("straight-through shapes differ: {:?} vs {:?}", l1.shape(), l2.shape());
        }
        let (start, end) = l2
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("straight-through needs contiguous values".into()))?;
        let out = match s2 {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            _ => candle_core::bail!("straight-through supports f32 and f64"),
        };
        Ok((out, l2.shape().clone()))
    }

    fn bwd(&self, _a1: &Tensor, _a2: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad_res.clone()), None))
    }
}

/// Returns a tensor with the values of `quantized` whose gradient flows to `continuous`.
pub fn straight_through(continuous: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    let quantized = quantized.detach().contiguous()?;
    Ok(continuous.apply_op2(&quantized, StraightThrough)?)
}

/// Output of [`quantize`].
#[derive(Debug, Clone)]
pub struct Quantized {
    /// `B x d x h x w` quantized features carrying the straight-through gradient to `Z_c`.
    pub zq: Tensor,
    /// Same values, differentiable with respect to the codebook only.
    pub zq_codes: Tensor,
    /// `B x h x w` indices (`u32`).
    pub indices: Tensor,
}

impl Quantized {
    pub fn grids(&self) -> Result<Vec<IndexGrid>> {
        let (_, h, w) = self.indices.dims3()?;
        IndexGrid::from_batch(&self.indices, h, w)
    }
}

/// Replaces every position of `zc` (`B x d x h x w`) with its nearest codebook row.
pub fn quantize(zc: &Tensor, codebook: &Tensor) -> Result<Quantized> {
    let (b, d, h, w) = zc.dims4()?;
    let (k, cd) = codebook.dims2()?;
    if cd != d {
        return Err(Error::DimensionMismatch(format!("features have depth {d}, codebook dim {cd}")));
    }
    if k == 0 {
        return Err(Error::DimensionMismatch("empty codebook".into()));
    }
    let tokens = to_tokens(&zc.detach())?.reshape((b * h * w, d))?;
    let indices = match zc.dtype() {
        DType::F64 => {
            let z: Vec<f64> = tokens.flatten_all()?.to_vec1()?;
            let c: Vec<f64> = codebook.detach().flatten_all()?.to_vec1()?;
            nearest_indices(&z, &c, d)
        }
        _ => {
            let z: Vec<f32> = tokens.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let c: Vec<f32> = codebook.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            nearest_indices(&z, &c, d)
        }
    };
    let idx = Tensor::from_vec(indices, b * h * w, zc.device())?;
    let zq_codes = codebook.index_select(&idx, 0)?.reshape((b, h, w, d))?.permute((0, 3, 1, 2))?.contiguous()?;
    let zq = straight_through(zc, &zq_codes)?;
    Ok(Quantized {
        zq,
        zq_codes,
        indices: idx.reshape((b, h, w))?,
    })
}

/// Looks up codebook rows for `B x hw` indices and lays them out as `B x d x h x w`.
pub fn lookup(indices: &Tensor, codebook: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let b = indices.dim(0)?;
    let (_, d) = codebook.dims2()?;
    let flat = indices.flatten_all()?;
    Ok(codebook.index_select(&flat, 0)?.reshape((b, h, w, d))?.permute((0, 3, 1, 2))?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn tensor_quantize_is_idempotent() {
        let dev = Device::Cpu;
        let codebook = Tensor::randn(0f32, 1.0, (16, 4), &dev).unwrap();
        let zc = Tensor::randn(0f32, 1.0, (2, 4, 3, 3), &dev).unwrap();
        let q1 = quantize(&zc, &codebook).unwrap();
        let q2 = quantize(&q1.zq, &codebook).unwrap();
        let a: Vec<f32> = q1.zq.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = q2.zq.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let ia: Vec<u32> = q1.indices.flatten_all().unwrap().to_vec1().unwrap();
        let ib: Vec<u32> = q2.indices.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn depth_mismatch() {
        let dev = Device::Cpu;
        let codebook = Tensor::zeros((4, 3), DType::F32, &dev).unwrap();
        let zc = Tensor::zeros((1, 2, 2, 2), DType::F32, &dev).unwrap();
        assert!(matches!(quantize(&zc, &codebook), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        let dev = Device::Cpu;
        let zc = Var::randn(0f32, 1.0, (1, 2, 2, 2), &dev).unwrap();
        let codebook = Tensor::randn(0f32, 1.0, (5, 2), &dev).unwrap();
        let q = quantize(zc.as_tensor(), &codebook).unwrap();
        let weights = Tensor::randn(0f32, 1.0, (1, 2, 2, 2), &dev).unwrap();
        let loss = (q.zq.sqr().unwrap() * &weights).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f32> = grads.get(zc.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let zq: Vec<f32> = q.zq.flatten_all().unwrap().to_vec1().unwrap();
        let w: Vec<f32> = weights.flatten_all().unwrap().to_vec1().unwrap();
        for ((g, z), w) in g.iter().zip(&zq).zip(&w) {
            assert_eq!(*g, 2.0 * z * w);
        }
    }

    #[test]
    fn codebook_gets_gradient_only_through_codes() {
        let dev = Device::Cpu;
        let cb = Var::randn(0f32, 1.0, (5, 2), &dev).unwrap();
        let zc = Tensor::randn(0f32, 1.0, (1, 2, 2, 2), &dev).unwrap();
        let q = quantize(&zc, cb.as_tensor()).unwrap();
        let grads = q.zq.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(cb.as_tensor()).is_none());
        let grads = q.zq_codes.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(cb.as_tensor()).is_some());
    }
}
