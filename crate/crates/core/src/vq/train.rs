use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CodebookInit, RunConfig};
use crate::error::{Error, Result};
use crate::glyph::GlyphImage;
use crate::nn::{seeded_builder, to_tokens};
use crate::perceptual::FeatureExtractor;
use crate::training::{adam, scalar, select, stack, step, BatchSampler, Clock};

use super::{discriminator_bce, vqgan_losses, PatchDiscriminator, Vqgan, VqganLossWeights};

/// One line of the stage-one loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneRecord {
    pub iteration: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<f64>,
    pub wall_time: f64,
}

pub struct TrainedVqgan {
    pub model: Vqgan,
    pub vars: VarMap,
    pub discriminator: PatchDiscriminator,
    pub disc_vars: VarMap,
    pub history: Vec<StageOneRecord>,
}

pub enum StageOneEvent<'a> {
    Record(&'a StageOneRecord),
    Checkpoint { iteration: usize, vars: &'a VarMap },
}

/// Builds an untrained autoencoder and discriminator for `cfg`.
pub fn build_vqgan(cfg: &RunConfig, device: &Device) -> Result<(Vqgan, VarMap, PatchDiscriminator, VarMap)> {
    let vars = VarMap::new();
    let model = Vqgan::new(
        &cfg.net(),
        cfg.vqgan.codebook_size,
        cfg.vqgan.code_dim,
        seeded_builder(&vars, cfg.seed, DType::F32, device),
    )?;
    let disc_vars = VarMap::new();
    let disc = PatchDiscriminator::new(&cfg.vqgan.disc_channels, seeded_builder(&disc_vars, cfg.seed ^ 0xd15c, DType::F32, device))?;
    Ok((model, vars, disc, disc_vars))
}

/// Overwrites the codebook with distinct encoder outputs of the training glyphs.
fn init_codebook_from_data(model: &Vqgan, vars: &VarMap, images: &Tensor, seed: u64) -> Result<()> {
    let k = model.codebook_size();
    let d = model.code_dim();
    let n = images.dim(0)?.min(256);
    let mut tokens = Vec::new();
    for start in (0..n).step_by(32) {
        let len = 32.min(n - start);
        let zc = model.encode(&images.narrow(0, start, len)?)?;
        let t: Vec<f32> = to_tokens(&zc)?.flatten_all()?.to_vec1()?;
        tokens.extend(t.chunks(d).map(|c| c.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    tokens.shuffle(&mut rng);
    let mut rows: Vec<f32> = Vec::with_capacity(k * d);
    for i in 0..k {
        let src = &tokens[i % tokens.len()];
        let jitter = if i >= tokens.len() { 1e-3 } else { 0.0 };
        rows.extend(src.iter().map(|v| v + jitter * rng.gen_range(-1.0f32..1.0)));
    }
    let fresh = Tensor::from_vec(rows, (k, d), images.device())?;
    let data = vars.data().lock().expect("varmap lock");
    data.get("codebook")
        .ok_or_else(|| Error::Unsupported("model has no codebook variable".into()))?
        .set(&fresh)?;
    Ok(())
}

/// Self-reconstruction training of encoder, codebook and decoder against a
/// patch discriminator, alternating generator and discriminator updates.
pub fn train_vqgan(
    glyphs: &[GlyphImage],
    cfg: &RunConfig,
    extractor: &dyn FeatureExtractor,
    device: &Device,
    observer: &mut dyn FnMut(StageOneEvent) -> Result<()>,
) -> Result<TrainedVqgan> {
    if glyphs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let s1 = &cfg.stage1;
    let images = stack(glyphs, device)?;
    let (model, vars, disc, disc_vars) = build_vqgan(cfg, device)?;
    if cfg.vqgan.codebook_init == CodebookInit::Data {
        init_codebook_from_data(&model, &vars, &images, cfg.seed)?;
    }
    let mut opt_g = adam(vars.all_vars(), s1.lr, s1.beta1, s1.beta2)?;
    let mut opt_d = adam(disc_vars.all_vars(), s1.lr, s1.beta1, s1.beta2)?;
    let weights = VqganLossWeights::from(s1);
    let mut sampler = BatchSampler::new(glyphs.len(), cfg.seed)?;
    let clock = Clock::start();
    let mut history = Vec::with_capacity(s1.iterations);
    for iteration in 1..=s1.iterations {
        let x = select(&images, &sampler.next_batch(s1.batch_size))?;
        let rec = model.reconstruct(&x)?;
        let adversarial = iteration > s1.disc_start;
        let losses = vqgan_losses(
            &x,
            &rec.image,
            &rec.zc,
            &rec.quantized.zq_codes,
            adversarial.then_some(&disc),
            extractor,
            weights,
        )?;
        let bundle = losses.bundle()?;
        if !bundle.total.is_finite() {
            return Err(Error::DivergenceDetected(iteration));
        }
        step(&mut opt_g, &losses.total)?;
        let discriminator = if adversarial {
            let d_loss = discriminator_bce(&disc.forward(&x)?, &disc.forward(&rec.image.detach())?)?;
            step(&mut opt_d, &d_loss)?;
            Some(scalar(&d_loss)?)
        } else {
            None
        };
        let record = StageOneRecord {
            iteration,
            l1: bundle.l1,
            perceptual: bundle.perceptual,
            adversarial: bundle.adversarial,
            codebook: bundle.codebook,
            commitment: bundle.commitment,
            total: bundle.total,
            discriminator,
            wall_time: clock.seconds(),
        };
        if iteration % s1.log_every == 0 || iteration == 1 || iteration == s1.iterations {
            observer(StageOneEvent::Record(&record))?;
        }
        history.push(record);
        if iteration % s1.checkpoint_every == 0 || iteration == s1.iterations {
            observer(StageOneEvent::Checkpoint { iteration, vars: &vars })?;
        }
    }
    Ok(TrainedVqgan {
        model,
        vars,
        discriminator: disc,
        disc_vars,
        history,
    })
}

/// Mean absolute reconstruction error over `glyphs`, in batches.
pub fn reconstruction_l1(model: &Vqgan, glyphs: &[GlyphImage], device: &Device) -> Result<f64> {
    if glyphs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in glyphs.chunks(32) {
        let x = stack(chunk, device)?;
        let r = model.reconstruct(&x)?.image;
        total += scalar(&(x - r)?.abs()?.sum_all()?)?;
    }
    let px = glyphs[0].size * glyphs[0].size;
    Ok(total / (glyphs.len() * px) as f64)
}

/// How many times each codebook entry is selected over `glyphs`.
pub fn codebook_usage(model: &Vqgan, glyphs: &[GlyphImage], device: &Device) -> Result<Vec<usize>> {
    let mut hist = vec![0; model.codebook_size()];
    for chunk in glyphs.chunks(32) {
        let idx: Vec<u32> = model.indices(&stack(chunk, device)?)?.flatten_all()?.to_vec1()?;
        for i in idx {
            hist[i as usize] += 1;
        }
    }
    Ok(hist)
}
