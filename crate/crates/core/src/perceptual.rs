//! Frozen feature extractors for perceptual losses and LPIPS-style distances.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{conv2d, Conv};

/// Maps `B x 1 x H x W` glyphs in [0, 1] to a list of feature maps.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, images: &Tensor) -> candle_core::Result<Vec<Tensor>>;

    fn name(&self) -> &str;
}

/// Sum over layers of the mean squared feature difference.
pub fn perceptual_distance(ex: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let fa = ex.features(a)?;
    let fb = ex.features(b)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let term = (x - y)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Unsupported("extractor produced no features".into()))
}

/// Per-image LPIPS-style distance: channel-normalised features, squared
/// difference weighted per channel, averaged over space and summed over layers.
pub fn lpips(ex: &dyn FeatureExtractor, weights: Option<&[Tensor]>, a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    let fa = ex.features(a)?;
    let fb = ex.features(b)?;
    let n = a.dim(0)?;
    let mut total = Tensor::zeros(n, DType::F32, a.device())?;
    for (l, (x, y)) in fa.iter().zip(&fb).enumerate() {
        let d = (unit_normalize(x)? - unit_normalize(y)?)?.sqr()?;
        let d = match weights.and_then(|w| w.get(l)) {
            Some(w) => d.broadcast_mul(&w.reshape((1, w.elem_count(), 1, 1))?)?,
            None => d,
        };
        total = (total + d.sum(1)?.mean(1)?.mean(1)?.to_dtype(DType::F32)?)?;
    }
    Ok(total.to_vec1()?)
}

fn unit_normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    x.broadcast_div(&norm)
}

/// Small fixed random convnet. Random deep features are a usable perceptual
/// metric when no pretrained weights are available, and they are reproducible
/// from the seed alone.
pub struct RandomConvExtractor {
    convs: Vec<Conv>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64, widths: &[usize], device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut in_c = 1;
        for &out_c in widths {
            let fan_in = (in_c * 9) as f32;
            let std = (2.0 / fan_in).sqrt();
            let w: Vec<f32> = (0..out_c * in_c * 9)
                .map(|_| std * Distribution::<f32>::sample(&StandardNormal, &mut rng))
                .collect();
            let weight = Tensor::from_vec(w, (out_c, in_c, 3, 3), device)?;
            let bias = Tensor::zeros(out_c, DType::F32, device)?;
            convs.push(Conv::new(weight, Some(bias), 1, 1));
            in_c = out_c;
        }
        Ok(Self { convs })
    }

    pub fn default_for(device: &Device) -> Result<Self> {
        Self::new(0x5eed, &[8, 16, 32], device)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, images: &Tensor) -> candle_core::Result<Vec<Tensor>> {
        let mut h = ((images * 2.0)? - 1.0)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2d(2)?;
            }
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "random-conv"
    }
}

/// VGG16 feature stack read from a safetensors file with torchvision
/// parameter names (`features.{i}.weight`). Features are tapped after the last
/// ReLU of each block.
pub struct Vgg16Extractor {
    blocks: Vec<Vec<Conv>>,
    lin: Option<Vec<Tensor>>,
}

const VGG16_BLOCKS: [&[(usize, usize, usize)]; 5] = [
    &[(0, 3, 64), (2, 64, 64)],
    &[(5, 64, 128), (7, 128, 128)],
    &[(10, 128, 256), (12, 256, 256), (14, 256, 256)],
    &[(17, 256, 512), (19, 512, 512), (21, 512, 512)],
    &[(24, 512, 512), (26, 512, 512), (28, 512, 512)],
];

impl Vgg16Extractor {
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ExtractorUnavailable);
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        let lin = (0..5)
            .map(|l| tensors.get(&format!("lin{l}.weight")).map(|t| t.flatten_all()))
            .collect::<Option<candle_core::Result<Vec<_>>>>()
            .transpose()?;
        let vb = VarBuilder::from_tensors(tensors, DType::F32, device);
        let blocks = VGG16_BLOCKS
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|&(i, in_c, out_c)| conv2d(in_c, out_c, 3, 1, 1, vb.pp(format!("features.{i}"))))
                    .collect::<candle_core::Result<Vec<_>>>()
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { blocks, lin })
    }

    pub fn lin_weights(&self) -> Option<&[Tensor]> {
        self.lin.as_deref()
    }
}

impl FeatureExtractor for Vgg16Extractor {
    fn features(&self, images: &Tensor) -> candle_core::Result<Vec<Tensor>> {
        let dev = images.device();
        let mean = Tensor::new(&[0.485f32, 0.456, 0.406], dev)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&[0.229f32, 0.224, 0.225], dev)?.reshape((1, 3, 1, 1))?;
        let mut h = Tensor::cat(&[images, images, images], 1)?.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                h = h.max_pool2d(2)?;
            }
            for conv in block {
                h = conv.forward(&h)?.relu()?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "vgg16"
    }
}
