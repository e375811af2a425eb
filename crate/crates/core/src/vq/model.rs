use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};

use crate::kernels::{conv2d, group_norm, Conv, GroupNorm};

use crate::error::{Error, Result};
use crate::glyph::GlyphImage;
use crate::nn::{groups_for, ConvDecoder, ConvEncoder, NetConfig};

use super::{quantize, Codebook, IndexGrid, Quantized};

/// Encoder, codebook and decoder of the glyph autoencoder.
#[derive(Debug, Clone)]
pub struct Vqgan {
    pub encoder: ConvEncoder,
    /// `K x d` code vectors.
    pub codebook: Tensor,
    pub decoder: ConvDecoder,
    net: NetConfig,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub zc: Tensor,
    pub quantized: Quantized,
    pub image: Tensor,
}

impl Vqgan {
    pub fn new(net: &NetConfig, codebook_size: usize, code_dim: usize, vb: VarBuilder) -> Result<Self> {
        let bound = 1.0 / codebook_size as f64;
        Ok(Self {
            encoder: ConvEncoder::new(net, code_dim, vb.pp("encoder"))?,
            codebook: vb.get_with_hints((codebook_size, code_dim), "codebook", Init::Uniform { lo: -bound, up: bound })?,
            decoder: ConvDecoder::new(net, code_dim, vb.pp("decoder"))?,
            net: net.clone(),
        })
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.dim(0).unwrap_or(0)
    }

    pub fn code_dim(&self) -> usize {
        self.codebook.dim(1).unwrap_or(0)
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.encoder.encode(images)
    }

    pub fn quantize(&self, zc: &Tensor) -> Result<Quantized> {
        quantize(zc, &self.codebook)
    }

    pub fn decode(&self, zq: &Tensor) -> Result<Tensor> {
        self.decoder.decode(zq)
    }

    pub fn reconstruct(&self, images: &Tensor) -> Result<Reconstruction> {
        let zc = self.encode(images)?;
        let quantized = self.quantize(&zc)?;
        let image = self.decode(&quantized.zq)?;
        Ok(Reconstruction { zc, quantized, image })
    }

    /// `B x h x w` codebook indices of a batch of images.
    pub fn indices(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.quantize(&self.encode(images)?)?.indices)
    }

    pub fn plain_codebook(&self) -> Result<Codebook> {
        Codebook::from_tensor(&self.codebook)
    }
}

/// Ground-truth index grid of one glyph under a frozen autoencoder.
pub fn extract_gt_indices(glyph: &GlyphImage, vqgan: &Vqgan) -> Result<IndexGrid> {
    let x = glyph.to_tensor(vqgan.codebook.device())?;
    let idx = vqgan.indices(&x)?;
    let (_, h, w) = idx.dims3()?;
    let mut grids = IndexGrid::from_batch(&idx, h, w)?;
    Ok(grids.remove(0))
}

/// Patch real/fake discriminator: stride-2 4x4 convolutions, then a 3x3 logit map.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    layers: Vec<(Conv, Option<GroupNorm>)>,
    head: Conv,
}

impl PatchDiscriminator {
    pub fn new(channels: &[usize], vb: VarBuilder) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::DimensionMismatch("discriminator needs at least one layer".into()));
        }
        let mut layers = Vec::new();
        let mut in_c = 1;
        for (i, &c) in channels.iter().enumerate() {
            let lvb = vb.pp(format!("layers.{i}"));
            let conv = conv2d(in_c, c, 4, 2, 1, lvb.pp("conv"))?;
            let norm = if i == 0 {
                None
            } else {
                Some(group_norm(groups_for(c), c, 1e-5, lvb.pp("norm"))?)
            };
            layers.push((conv, norm));
            in_c = c;
        }
        let head = conv2d(in_c, 1, 3, 1, 1, vb.pp("head"))?;
        Ok(Self { layers, head })
    }
}

impl Module for PatchDiscriminator {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = ((xs * 2.0)? - 1.0)?;
        for (conv, norm) in &self.layers {
            h = conv.forward(&h)?;
            if let Some(n) = norm {
                h = n.forward(&h)?;
            }
            h = candle_nn::ops::leaky_relu(&h, 0.2)?;
        }
        self.head.forward(&h)
    }
}
