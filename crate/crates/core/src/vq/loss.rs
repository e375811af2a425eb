use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::StageOneConfig;
use crate::error::{Error, Result};
use crate::perceptual::{perceptual_distance, FeatureExtractor};

use super::PatchDiscriminator;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqganLossWeights {
    pub lambda_comm: f64,
    pub lambda_adv: f64,
}

impl Default for VqganLossWeights {
    fn default() -> Self {
        Self {
            lambda_comm: 0.5,
            lambda_adv: 0.8,
        }
    }
}

impl From<&StageOneConfig> for VqganLossWeights {
    fn from(c: &StageOneConfig) -> Self {
        Self {
            lambda_comm: c.lambda_comm,
            lambda_adv: c.lambda_adv,
        }
    }
}

/// Scalar values of the stage-one loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqganLossBundle {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Differentiable stage-one loss terms.
#[derive(Debug, Clone)]
pub struct VqganLosses {
    pub l1: Tensor,
    pub perceptual: Tensor,
    pub adversarial: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
    pub total: Tensor,
}

impl VqganLosses {
    pub fn bundle(&self) -> Result<VqganLossBundle> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok(VqganLossBundle {
            l1: s(&self.l1)?,
            perceptual: s(&self.perceptual)?,
            adversarial: s(&self.adversarial)?,
            codebook: s(&self.codebook)?,
            commitment: s(&self.commitment)?,
            total: s(&self.total)?,
        })
    }
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?
}

pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `mean((sg(zc) - zq)^2)`: moves code vectors toward encoder outputs.
pub fn codebook_loss(zc: &Tensor, zq_codes: &Tensor) -> Result<Tensor> {
    check_same(zc, zq_codes)?;
    Ok((zc.detach() - zq_codes)?.sqr()?.mean_all()?)
}

/// `mean((zc - sg(zq))^2)`: keeps encoder outputs near their codes.
pub fn commitment_loss(zc: &Tensor, zq_codes: &Tensor) -> Result<Tensor> {
    check_same(zc, zq_codes)?;
    Ok((zc - zq_codes.detach())?.sqr()?.mean_all()?)
}

/// Non-saturating generator loss `-log D(x)` on discriminator logits.
pub fn generator_adversarial(logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&logits.neg()?)?.mean_all()?)
}

/// `-log D(real) - log(1 - D(fake))` on logits.
pub fn discriminator_bce(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok((softplus(&real_logits.neg()?)?.mean_all()? + softplus(fake_logits)?.mean_all()?)?)
}

pub(crate) fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// All stage-one terms for originals `i_f` and reconstructions `i_r`.
/// Without a discriminator the adversarial term is zero.
pub fn vqgan_losses(
    i_f: &Tensor,
    i_r: &Tensor,
    zc: &Tensor,
    zq_codes: &Tensor,
    discriminator: Option<&PatchDiscriminator>,
    extractor: &dyn FeatureExtractor,
    weights: VqganLossWeights,
) -> Result<VqganLosses> {
    let l1 = l1_loss(i_f, i_r)?;
    let perceptual = perceptual_distance(extractor, i_f, i_r)?;
    let adversarial = match discriminator {
        Some(d) => generator_adversarial(&d.forward(i_r)?)?,
        None => l1.zeros_like()?,
    };
    let codebook = codebook_loss(zc, zq_codes)?;
    let commitment = commitment_loss(zc, zq_codes)?;
    let total = (((&l1 + &perceptual)? + (&adversarial * weights.lambda_adv)?)? + (&codebook + (&commitment * weights.lambda_comm)?)?)?;
    Ok(VqganLosses {
        l1,
        perceptual,
        adversarial,
        codebook,
        commitment,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::RandomConvExtractor;
    use candle_core::{DType, Device, Var};

    #[test]
    fn perfect_reconstruction_has_zero_terms() {
        let dev = Device::Cpu;
        let ex = RandomConvExtractor::default_for(&dev).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 1, 8, 8), &dev).unwrap();
        let z = Tensor::randn(0f32, 1.0, (2, 3, 2, 2), &dev).unwrap();
        let l = vqgan_losses(&x, &x, &z, &z, None, &ex, VqganLossWeights::default()).unwrap().bundle().unwrap();
        assert_eq!((l.l1, l.perceptual, l.codebook, l.commitment, l.total), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn l1_of_constant_difference() {
        let dev = Device::Cpu;
        let a = Tensor::from_vec(vec![0.5f64, 0.25, 1.0, 0.75], (1, 1, 2, 2), &dev).unwrap();
        let b = (&a - 0.25).unwrap();
        let v = l1_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softplus_matches_closed_form() {
        let xs = [-50.0f64, -1.0, 0.0, 2.0, 40.0];
        let t = Tensor::new(&xs, &Device::Cpu).unwrap();
        let got: Vec<f64> = softplus(&t).unwrap().to_vec1().unwrap();
        for (x, g) in xs.iter().zip(got) {
            let want = if *x > 30.0 { *x } else { (1.0 + x.exp()).ln() };
            assert!((g - want).abs() < 1e-12, "{x}: {g} vs {want}");
        }
    }

    #[test]
    fn codebook_and_commitment_are_mirror_images() {
        let dev = Device::Cpu;
        let zc = Var::randn(0f32, 1.0, (1, 2, 2, 2), &dev).unwrap();
        let zq = Var::randn(0f32, 1.0, (1, 2, 2, 2), &dev).unwrap();
        let cb = codebook_loss(zc.as_tensor(), zq.as_tensor()).unwrap();
        let cm = commitment_loss(zc.as_tensor(), zq.as_tensor()).unwrap();
        // Swapping the stop-gradient side swaps the terms.
        let cb_swapped = commitment_loss(zq.as_tensor(), zc.as_tensor()).unwrap();
        assert_eq!(cb.to_scalar::<f32>().unwrap(), cb_swapped.to_scalar::<f32>().unwrap());
        assert_eq!(cb.to_scalar::<f32>().unwrap(), cm.to_scalar::<f32>().unwrap());
        let g = cb.backward().unwrap();
        assert!(g.get(zc.as_tensor()).is_none() && g.get(zq.as_tensor()).is_some());
        let g = cm.backward().unwrap();
        assert!(g.get(zc.as_tensor()).is_some() && g.get(zq.as_tensor()).is_none());
    }

    #[test]
    fn mismatched_shapes() {
        let dev = Device::Cpu;
        let a = Tensor::zeros((1, 1, 2, 2), DType::F32, &dev).unwrap();
        let b = Tensor::zeros((1, 1, 2, 3), DType::F32, &dev).unwrap();
        assert!(matches!(l1_loss(&a, &b), Err(Error::ShapeMismatch { .. })));
    }
}
