use std::collections::{BTreeSet, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use candle_nn::{Optimizer, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::glyph::{batch_tensor, GlyphImage};
use crate::nn::seeded_builder;
use crate::perceptual::FeatureExtractor;
use crate::training::{adam, scalar, step, BatchSampler, Clock};
use crate::vq::Vqgan;

use super::{hinge_discriminator, stage2_losses, ProjectionDiscriminator, SampleBatch, StageTwoLossWeights, StyleSample, VqFont};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTwoRecord {
    pub iteration: usize,
    pub main: f64,
    pub self_rec: f64,
    pub l1: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub total: f64,
    pub discriminator: f64,
    pub wall_time: f64,
}

/// Largest absolute gradient reaching each parameter group on one step.
/// Frozen tensors are constants, so no gradient reaching them reads as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientAudit {
    pub iteration: usize,
    pub codebook: f64,
    pub frozen_decoder: f64,
    /// One entry per fine-tuned decoder layer, latent side first.
    pub trainable_decoder: Vec<f64>,
}

impl GradientAudit {
    pub fn holds(&self) -> bool {
        self.codebook == 0.0 && self.frozen_decoder == 0.0 && !self.trainable_decoder.is_empty() && self.trainable_decoder.iter().all(|&g| g > 0.0)
    }
}

pub struct TrainedVqFont {
    pub model: VqFont,
    pub vars: VarMap,
    pub discriminator: ProjectionDiscriminator,
    pub disc_vars: VarMap,
    pub history: Vec<StageTwoRecord>,
    pub audits: Vec<GradientAudit>,
}

pub enum StageTwoEvent<'a> {
    Record(&'a StageTwoRecord),
    Checkpoint { iteration: usize, model: &'a VqFont, vars: &'a VarMap },
}

/// Stage-one autoencoder restored from its tensors.
pub fn vqgan_from_tensors(cfg: &RunConfig, stage1: &HashMap<String, Tensor>, device: &Device) -> Result<Vqgan> {
    let codebook = stage1
        .get("codebook")
        .ok_or_else(|| Error::MissingCheckpoint("stage-one weights have no codebook".into()))?;
    let (k, d) = codebook.dims2()?;
    Vqgan::new(&cfg.net(), k, d, VarBuilder::from_tensors(stage1.clone(), DType::F32, device))
}

/// Ground-truth index grids `s_g` of the given glyphs, row-major.
pub fn target_indices(vqgan: &Vqgan, targets: &[&GlyphImage], device: &Device) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(32) {
        let idx = vqgan.indices(&batch_tensor(chunk, device)?)?;
        let (b, h, w) = idx.dims3()?;
        let flat: Vec<u32> = idx.flatten_all()?.to_vec1()?;
        out.extend((0..b).map(|i| flat[i * h * w..(i + 1) * h * w].to_vec()));
    }
    Ok(out)
}

fn index_tensor(rows: &[&Vec<u32>], device: &Device) -> Result<Tensor> {
    let n = rows.first().map_or(0, |r| r.len());
    let flat: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), n), device)?)
}

fn max_abs(grads: &GradStore, t: &Tensor) -> Result<f64> {
    match grads.get(t) {
        Some(g) => scalar(&g.abs()?.max_all()?),
        None => Ok(0.0),
    }
}

fn audit(iteration: usize, model: &VqFont, vars: &VarMap, grads: &GradStore) -> Result<GradientAudit> {
    let mut codebook = 0.0f64;
    let mut frozen_decoder = 0.0f64;
    for (name, t) in model.frozen() {
        let g = max_abs(grads, t)?;
        if name == "codebook" {
            codebook = codebook.max(g);
        } else {
            frozen_decoder = frozen_decoder.max(g);
        }
    }
    let mut trainable_decoder = vec![0.0f64; model.trainable_decoder_layers()];
    let data = vars.data().lock().expect("varmap lock");
    for (name, var) in data.iter() {
        let layer = name
            .strip_prefix("decoder.layers.")
            .and_then(|r| r.split('.').next())
            .and_then(|i| i.parse::<usize>().ok());
        if let Some(i) = layer.filter(|&i| i < trainable_decoder.len()) {
            trainable_decoder[i] = trainable_decoder[i].max(max_abs(grads, var.as_tensor())?);
        }
    }
    Ok(GradientAudit {
        iteration,
        codebook,
        frozen_decoder,
        trainable_decoder,
    })
}

/// Trains the generator on `samples` against a frozen stage-one codebook.
/// Every `audit_every` steps (never when zero) the gradients reaching the
/// frozen and fine-tuned parts are recorded.
pub fn train_vqfont(
    samples: &[StyleSample],
    stage1: &HashMap<String, Tensor>,
    cfg: &RunConfig,
    extractor: &dyn FeatureExtractor,
    device: &Device,
    audit_every: usize,
    observer: &mut dyn FnMut(StageTwoEvent) -> Result<()>,
) -> Result<TrainedVqFont> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let s2 = &cfg.stage2;
    let vqgan = vqgan_from_tensors(cfg, stage1, device)?;
    let targets = samples.iter().map(|s| s.target()).collect::<Result<Vec<_>>>()?;
    let s_g = target_indices(&vqgan, &targets, device)?;
    drop(vqgan);

    let vars = VarMap::new();
    let model = VqFont::build(cfg, stage1, &vars, device)?;
    let charset: Vec<u32> = samples.iter().map(|s| s.codepoint).collect::<BTreeSet<_>>().into_iter().collect();
    let disc_vars = VarMap::new();
    let disc = ProjectionDiscriminator::new(&s2.disc_channels, &charset, seeded_builder(&disc_vars, cfg.seed ^ 0xd_15c2, DType::F32, device))?;
    let mut opt_g = adam(vars.all_vars(), s2.lr, s2.beta1, s2.beta2)?;
    let mut opt_d = adam(disc_vars.all_vars(), s2.lr, s2.beta1, s2.beta2)?;
    let weights = StageTwoLossWeights::from(s2);
    let mut sampler = BatchSampler::new(samples.len(), cfg.seed ^ 0x2)?;
    let clock = Clock::start();
    let mut history = Vec::with_capacity(s2.iterations);
    let mut audits = Vec::new();
    for iteration in 1..=s2.iterations {
        let idx = sampler.next_batch(s2.batch_size);
        let picked: Vec<&StyleSample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = SampleBatch::new(&picked, device)?;
        let target = batch.target.as_ref().ok_or(Error::EmptyDataset)?;
        let s_g_batch = index_tensor(&idx.iter().map(|&i| &s_g[i]).collect::<Vec<_>>(), device)?;
        let labels = disc.labels(&batch.codepoints, device)?;

        let out = model.forward(&batch, true)?;
        let fake = disc.forward(&out.image, &labels)?;
        let logits = out.main_logits.as_ref().zip(out.self_logits.as_ref());
        let losses = stage2_losses(&out.image, target, logits, &s_g_batch, Some(&fake), extractor, weights)?;
        let bundle = losses.bundle()?;
        if !bundle.total.is_finite() {
            return Err(Error::DivergenceDetected(iteration));
        }
        let grads = losses.total.backward()?;
        if audit_every > 0 && iteration % audit_every == 0 && model.variant != Variant::Baseline {
            audits.push(audit(iteration, &model, &vars, &grads)?);
        }
        opt_g.step(&grads)?;

        let d_loss = hinge_discriminator(&disc.forward(target, &labels)?, &disc.forward(&out.image.detach(), &labels)?)?;
        step(&mut opt_d, &d_loss)?;

        let record = StageTwoRecord {
            iteration,
            main: bundle.main,
            self_rec: bundle.self_rec,
            l1: bundle.l1,
            adversarial: bundle.adversarial,
            perceptual: bundle.perceptual,
            total: bundle.total,
            discriminator: scalar(&d_loss)?,
            wall_time: clock.seconds(),
        };
        if iteration % s2.log_every == 0 || iteration == 1 || iteration == s2.iterations {
            observer(StageTwoEvent::Record(&record))?;
        }
        history.push(record);
        if iteration % s2.checkpoint_every == 0 || iteration == s2.iterations {
            observer(StageTwoEvent::Checkpoint {
                iteration,
                model: &model,
                vars: &vars,
            })?;
        }
    }
    Ok(TrainedVqFont {
        model,
        vars,
        discriminator: disc,
        disc_vars,
        history,
        audits,
    })
}

/// Generated glyphs and, for index variants, predicted index grids.
pub struct Generated {
    pub images: Vec<GlyphImage>,
    pub indices: Option<Vec<Vec<u32>>>,
}

/// Runs the main branch over `samples` in batches of `batch_size`.
pub fn generate(model: &VqFont, samples: &[StyleSample], batch_size: usize, device: &Device) -> Result<Generated> {
    let mut images = Vec::with_capacity(samples.len());
    let mut indices = model.transformer.as_ref().map(|_| Vec::with_capacity(samples.len()));
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&StyleSample> = chunk.iter().collect();
        let out = model.forward(&SampleBatch::new(&refs, device)?, false)?;
        for (i, s) in chunk.iter().enumerate() {
            images.push(GlyphImage::from_tensor(&out.image.get(i)?, s.codepoint, s.font_id.clone())?);
        }
        if let (Some(all), Some(idx)) = (indices.as_mut(), out.indices.as_ref()) {
            let rows: Vec<Vec<u32>> = idx.to_vec2()?;
            all.extend(rows);
        }
    }
    Ok(Generated { images, indices })
}

/// Fraction of predicted tokens equal to `s_g`, over all samples.
pub fn token_accuracy(predicted: &[Vec<u32>], s_g: &[Vec<u32>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, t) in predicted.iter().zip(s_g) {
        hit += p.iter().zip(t).filter(|(a, b)| a == b).count();
        total += t.len();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}
