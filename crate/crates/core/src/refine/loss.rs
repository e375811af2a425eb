use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::StageTwoConfig;
use crate::error::{Error, Result};
use crate::perceptual::{perceptual_distance, FeatureExtractor};
use crate::training::scalar;
use crate::vq::check_same;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTwoLossWeights {
    pub lambda_self: f64,
    pub lambda_main: f64,
    pub lambda_l1: f64,
    pub lambda_adv: f64,
    pub lambda_per: f64,
}

impl Default for StageTwoLossWeights {
    fn default() -> Self {
        Self {
            lambda_self: 1.0,
            lambda_main: 2.0,
            lambda_l1: 2.0,
            lambda_adv: 0.002,
            lambda_per: 1.0,
        }
    }
}

impl From<&StageTwoConfig> for StageTwoLossWeights {
    fn from(c: &StageTwoConfig) -> Self {
        Self {
            lambda_self: c.lambda_self,
            lambda_main: c.lambda_main,
            lambda_l1: c.lambda_l1,
            lambda_adv: c.lambda_adv,
            lambda_per: c.lambda_per,
        }
    }
}

/// Mean token cross-entropy of `B x hw x K` logits against `B x hw` indices.
pub fn token_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, n, k) = logits.dims3()?;
    if targets.dims() != [b, n] {
        return Err(Error::shape([b, n], targets.dims()));
    }
    let flat: Vec<u32> = targets.flatten_all()?.to_dtype(DType::U32)?.to_vec1()?;
    if let Some(&bad) = flat.iter().find(|&&t| t as usize >= k) {
        return Err(Error::IndexOutOfRange { index: bad, size: k });
    }
    let logp = candle_nn::ops::log_softmax(&logits.reshape((b * n, k))?, D::Minus1)?;
    let picked = logp.gather(&targets.to_dtype(DType::U32)?.reshape((b * n, 1))?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Cross-entropy of the main branch and of the self-reconstruction branch.
pub fn indices_loss(logits_main: &Tensor, logits_self: &Tensor, s_g: &Tensor) -> Result<(Tensor, Tensor)> {
    check_same(logits_main, logits_self)?;
    Ok((token_cross_entropy(logits_main, s_g)?, token_cross_entropy(logits_self, s_g)?))
}

/// `E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))]`.
pub fn hinge_discriminator(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = real.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let f = fake.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// `-E[D(fake)]`.
pub fn hinge_generator(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTwoLossBundle {
    pub main: f64,
    pub self_rec: f64,
    pub l1: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StageTwoLosses {
    pub main: Tensor,
    pub self_rec: Tensor,
    pub l1: Tensor,
    pub adversarial: Tensor,
    pub perceptual: Tensor,
    pub total: Tensor,
}

impl StageTwoLosses {
    pub fn bundle(&self) -> Result<StageTwoLossBundle> {
        Ok(StageTwoLossBundle {
            main: scalar(&self.main)?,
            self_rec: scalar(&self.self_rec)?,
            l1: scalar(&self.l1)?,
            adversarial: scalar(&self.adversarial)?,
            perceptual: scalar(&self.perceptual)?,
            total: scalar(&self.total)?,
        })
    }
}

/// Weighted stage-two objective. `index_logits` holds the main and self
/// branch logits and is absent for generators that do not predict indices;
/// `fake_logits` are the discriminator scores of `i_q`.
pub fn stage2_losses(
    i_q: &Tensor,
    i_g: &Tensor,
    index_logits: Option<(&Tensor, &Tensor)>,
    s_g: &Tensor,
    fake_logits: Option<&Tensor>,
    extractor: &dyn FeatureExtractor,
    w: StageTwoLossWeights,
) -> Result<StageTwoLosses> {
    check_same(i_q, i_g)?;
    let zero = Tensor::zeros((), i_q.dtype(), i_q.device())?;
    let (main, self_rec) = match index_logits {
        Some((m, s)) => indices_loss(m, s, s_g)?,
        None => (zero.clone(), zero.clone()),
    };
    let l1 = (i_q - i_g)?.abs()?.mean_all()?;
    let perceptual = perceptual_distance(extractor, i_g, i_q)?;
    let adversarial = match fake_logits {
        Some(f) => hinge_generator(f)?,
        None => zero,
    };
    let total =
        ((&self_rec * w.lambda_self)? + (&main * w.lambda_main)? + (&l1 * w.lambda_l1)? + (&adversarial * w.lambda_adv)? + (&perceptual * w.lambda_per)?)?;
    Ok(StageTwoLosses {
        main,
        self_rec,
        l1,
        adversarial,
        perceptual,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::RandomConvExtractor;
    use candle_core::Device;

    fn scalar64(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let dev = Device::Cpu;
        let logits = Tensor::zeros((2, 3, 4), DType::F64, &dev).unwrap();
        let t = Tensor::new(&[[0u32, 1, 2], [3, 0, 1]], &dev).unwrap();
        let l = scalar64(&token_cross_entropy(&logits, &t).unwrap());
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero() {
        let dev = Device::Cpu;
        let mut v = vec![-1e4f64; 2 * 4];
        v[1] = 1e4;
        v[4 + 3] = 1e4;
        let logits = Tensor::from_vec(v, (1, 2, 4), &dev).unwrap();
        let t = Tensor::new(&[[1u32, 3]], &dev).unwrap();
        assert!(scalar64(&token_cross_entropy(&logits, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_target() {
        let dev = Device::Cpu;
        let logits = Tensor::zeros((1, 2, 4), DType::F32, &dev).unwrap();
        let t = Tensor::new(&[[1u32, 4]], &dev).unwrap();
        assert!(matches!(token_cross_entropy(&logits, &t), Err(Error::IndexOutOfRange { index: 4, size: 4 })));
    }

    #[test]
    fn hinge_terms() {
        let dev = Device::Cpu;
        let real = Tensor::new(&[2.0f64, 0.5, -1.0], &dev).unwrap();
        let fake = Tensor::new(&[-2.0f64, 0.0, 0.5], &dev).unwrap();
        // real: max(0, 1 - x) = 0, 0.5, 2; fake: max(0, 1 + x) = 0, 1, 1.5
        let d = scalar64(&hinge_discriminator(&real, &fake).unwrap());
        assert!((d - (2.5 / 3.0 + 2.5 / 3.0)).abs() < 1e-12);
        let g = scalar64(&hinge_generator(&fake).unwrap());
        assert!((g - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_outputs_leave_only_adversarial() {
        let dev = Device::Cpu;
        let ex = RandomConvExtractor::default_for(&dev).unwrap();
        let img = Tensor::rand(0f32, 1.0, (2, 1, 16, 16), &dev).unwrap();
        let s_g = Tensor::new(&[[0u32, 2], [1, 1]], &dev).unwrap();
        let mut v = vec![-1e4f32; 2 * 2 * 3];
        for (i, &t) in [0usize, 2, 1, 1].iter().enumerate() {
            v[i * 3 + t] = 1e4;
        }
        let logits = Tensor::from_vec(v, (2, 2, 3), &dev).unwrap();
        let fake = Tensor::new(&[0.3f32, -0.1], &dev).unwrap();
        let w = StageTwoLossWeights::default();
        let l = stage2_losses(&img, &img, Some((&logits, &logits)), &s_g, Some(&fake), &ex, w)
            .unwrap()
            .bundle()
            .unwrap();
        assert_eq!((l.main, l.self_rec, l.l1, l.perceptual), (0.0, 0.0, 0.0, 0.0));
        assert!((l.total - 0.002 * -0.1).abs() < 1e-9);
    }
}
