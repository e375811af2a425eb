use std::collections::BTreeMap;

use candle_core::{Device, Module, Tensor};
use candle_nn::{Embedding, Linear, VarBuilder};

use crate::error::{Error, Result};
use crate::kernels::{conv2d, group_norm, Conv, GroupNorm};
use crate::nn::groups_for;

/// Character-conditional projection discriminator. Each training codepoint
/// has its own embedding; any other codepoint shares one fallback row.
#[derive(Debug, Clone)]
pub struct ProjectionDiscriminator {
    trunk: Vec<(Conv, Option<GroupNorm>)>,
    linear: Linear,
    embed: Embedding,
    classes: BTreeMap<u32, u32>,
}

impl ProjectionDiscriminator {
    pub fn new(channels: &[usize], charset: &[u32], vb: VarBuilder) -> Result<Self> {
        let Some(&width) = channels.last() else {
            return Err(Error::DimensionMismatch("discriminator needs at least one layer".into()));
        };
        let mut trunk = Vec::new();
        let mut in_c = 1;
        for (i, &c) in channels.iter().enumerate() {
            let lvb = vb.pp(format!("layers.{i}"));
            let norm = if i == 0 {
                None
            } else {
                Some(group_norm(groups_for(c), c, 1e-5, lvb.pp("norm"))?)
            };
            trunk.push((conv2d(in_c, c, 4, 2, 1, lvb.pp("conv"))?, norm));
            in_c = c;
        }
        let classes: BTreeMap<u32, u32> = charset.iter().copied().zip(0..).collect();
        Ok(Self {
            trunk,
            linear: candle_nn::linear(width, 1, vb.pp("linear"))?,
            embed: candle_nn::embedding(classes.len() + 1, width, vb.pp("embed"))?,
            classes,
        })
    }

    pub fn fallback_class(&self) -> u32 {
        self.classes.len() as u32
    }

    pub fn class_of(&self, codepoint: u32) -> u32 {
        self.classes.get(&codepoint).copied().unwrap_or(self.fallback_class())
    }

    pub fn labels(&self, codepoints: &[u32], device: &Device) -> Result<Tensor> {
        let ids: Vec<u32> = codepoints.iter().map(|&c| self.class_of(c)).collect();
        Ok(Tensor::new(ids.as_slice(), device)?)
    }

    /// One logit per image.
    pub fn forward(&self, images: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let mut h = ((images * 2.0)? - 1.0)?;
        for (conv, norm) in &self.trunk {
            h = conv.forward(&h)?;
            if let Some(n) = norm {
                h = n.forward(&h)?;
            }
            h = candle_nn::ops::leaky_relu(&h, 0.2)?;
        }
        let phi = h.mean((2, 3))?;
        let proj = (self.embed.forward(labels)? * &phi)?.sum(1)?;
        Ok((self.linear.forward(&phi)?.squeeze(1)? + proj)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_builder;
    use candle_core::DType;
    use candle_nn::VarMap;

    #[test]
    fn unseen_codepoints_share_the_fallback() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let d = ProjectionDiscriminator::new(&[8, 16], &[0x4E00, 0x4E01], seeded_builder(&vm, 3, DType::F32, &dev)).unwrap();
        assert_eq!(d.class_of(0x4E01), 1);
        assert_eq!(d.class_of(0x9999), 2);
        assert_eq!(d.class_of(0x8888), d.fallback_class());
        let x = Tensor::rand(0f32, 1.0, (3, 1, 16, 16), &dev).unwrap();
        let y = d.labels(&[0x4E00, 0x9999, 0x8888], &dev).unwrap();
        let out = d.forward(&x, &y).unwrap();
        assert_eq!(out.dims(), [3]);
        // Same image with a different known label scores differently.
        let x0 = x.narrow(0, 0, 1).unwrap();
        let a: f32 = d.forward(&x0, &d.labels(&[0x4E00], &dev).unwrap()).unwrap().to_vec1().unwrap()[0];
        let b: f32 = d.forward(&x0, &d.labels(&[0x4E01], &dev).unwrap()).unwrap().to_vec1().unwrap()[0];
        assert_ne!(a, b);
    }
}
