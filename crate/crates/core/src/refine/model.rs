use std::collections::HashMap;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{VarBuilder, VarMap};

use crate::attention::{Aggregated, StyleAggregator};
use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{decoder_layer_prefix, decoder_layout, from_tokens, seeded_builder, ConvDecoder};
use crate::vq::lookup;

use super::{IndexTransformer, SampleBatch};

/// Stage-two generator. Index variants predict codebook indices and decode
/// them with the stage-one decoder, whose latent-side layers are fine-tuned
/// while the codebook and the remaining layers stay frozen. The baseline
/// decodes aggregated features directly with a fresh decoder.
#[derive(Debug, Clone)]
pub struct VqFont {
    pub aggregator: StyleAggregator,
    pub transformer: Option<IndexTransformer>,
    /// Frozen `K x d` code vectors (index variants only).
    pub codebook: Option<Tensor>,
    pub decoder: ConvDecoder,
    pub variant: Variant,
    /// Constant tensors taken over from stage one, by name.
    frozen: HashMap<String, Tensor>,
    trainable_layers: usize,
    latent: usize,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct StageTwoOutput {
    pub main_logits: Option<Tensor>,
    pub self_logits: Option<Tensor>,
    /// `B x hw` argmax indices of the main branch.
    pub indices: Option<Tensor>,
    pub image: Tensor,
    pub attention: Aggregated,
}

fn decoder_layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("decoder.layers.")?.split('.').next()?.parse().ok()
}

impl VqFont {
    /// Fresh generator on top of stage-one weights. Trainable variables are
    /// created in `vars`; fine-tuned decoder layers start from their stage-one values.
    pub fn build(cfg: &RunConfig, stage1: &HashMap<String, Tensor>, vars: &VarMap, device: &Device) -> Result<Self> {
        let vb = seeded_builder(vars, cfg.seed ^ 0x2_57a6e, DType::F32, device);
        let variant = cfg.stage2.variant;
        if variant == Variant::Baseline {
            return Self::assemble(cfg, vb.clone(), None, HashMap::new(), vb);
        }
        let codebook = stage1
            .get("codebook")
            .ok_or_else(|| Error::MissingCheckpoint("stage-one weights have no codebook".into()))?;
        let trainable = cfg.stage2.trainable_decoder_layers;
        let frozen: HashMap<String, Tensor> = stage1
            .iter()
            .filter(|(name, _)| decoder_layer_of(name).is_some_and(|i| i >= trainable))
            .map(|(n, t)| (n.clone(), t.detach()))
            .chain(std::iter::once(("codebook".to_string(), codebook.detach())))
            .collect();
        let model = Self::assemble(
            cfg,
            vb,
            Some(codebook.detach()),
            frozen.clone(),
            VarBuilder::from_tensors(frozen, DType::F32, device),
        )?;
        let data = vars.data().lock().expect("varmap lock");
        for (name, var) in data.iter() {
            if decoder_layer_of(name).is_some_and(|i| i < trainable) {
                let init = stage1
                    .get(name)
                    .ok_or_else(|| Error::MissingCheckpoint(format!("stage-one weights have no {name}")))?;
                var.set(init)?;
            }
        }
        drop(data);
        Ok(model)
    }

    /// Generator restored from a full stage-two tensor map.
    pub fn from_tensors(cfg: &RunConfig, tensors: HashMap<String, Tensor>, device: &Device) -> Result<Self> {
        let vb = VarBuilder::from_tensors(tensors.clone(), DType::F32, device);
        let trainable = cfg.stage2.trainable_decoder_layers;
        let (codebook, frozen) = if cfg.stage2.variant == Variant::Baseline {
            (None, HashMap::new())
        } else {
            let cb = tensors
                .get("codebook")
                .ok_or_else(|| Error::MissingCheckpoint("checkpoint has no codebook".into()))?;
            let frozen = tensors
                .iter()
                .filter(|(n, _)| n.as_str() == "codebook" || decoder_layer_of(n).is_some_and(|i| i >= trainable))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect();
            (Some(cb.clone()), frozen)
        };
        Self::assemble(cfg, vb.clone(), codebook, frozen, vb)
    }

    fn assemble(cfg: &RunConfig, vb: VarBuilder, codebook: Option<Tensor>, frozen: HashMap<String, Tensor>, frozen_vb: VarBuilder) -> Result<Self> {
        let net = cfg.net();
        let variant = cfg.stage2.variant;
        let width = cfg.attention.width;
        let aggregator = StyleAggregator::new(&net, width, cfg.attention.heads, variant == Variant::Full, vb.pp("aggregator"))?;
        let latent = net.latent_size();
        let (transformer, decoder, trainable_layers) = match &codebook {
            None => (None, ConvDecoder::new(&net, width, vb.pp("decoder"))?, usize::MAX),
            Some(cb) => {
                let (k, d) = cb.dims2()?;
                let transformer = IndexTransformer::new(&cfg.transformer, latent * latent, width, k, vb.pp("transformer"))?;
                let trainable = cfg.stage2.trainable_decoder_layers;
                let layers = decoder_layout(&net, d)
                    .into_iter()
                    .enumerate()
                    .map(|(i, spec)| {
                        let src = if i < trainable { &vb } else { &frozen_vb };
                        spec.build(src.pp("decoder").pp(decoder_layer_prefix(i)))
                    })
                    .collect::<candle_core::Result<Vec<_>>>()?;
                (Some(transformer), ConvDecoder::from_layers(layers, &net, d), trainable)
            }
        };
        Ok(Self {
            aggregator,
            transformer,
            codebook,
            decoder,
            variant,
            frozen,
            trainable_layers,
            latent,
        })
    }

    pub fn frozen(&self) -> &HashMap<String, Tensor> {
        &self.frozen
    }

    /// Decoder layers fine-tuned in stage two; every layer for the baseline.
    pub fn trainable_decoder_layers(&self) -> usize {
        self.trainable_layers.min(self.decoder.layers.len())
    }

    /// Main branch, plus the self-reconstruction branch (the target glyph as
    /// every reference, same weights) when `with_self` and a target is present.
    pub fn forward(&self, batch: &SampleBatch, with_self: bool) -> Result<StageTwoOutput> {
        let agg = &self.aggregator;
        let f_c = agg.encode_content(&batch.content)?;
        let f_s = agg.encode_style(&batch.references)?;
        let attention = agg.aggregate(&f_c, &f_s, Some(&batch.masks))?;
        let h = self.latent;
        let (Some(t), Some(cb)) = (&self.transformer, &self.codebook) else {
            let image = self.decoder.forward(&from_tokens(&attention.tokens, h, h)?)?;
            return Ok(StageTwoOutput {
                main_logits: None,
                self_logits: None,
                indices: None,
                image,
                attention,
            });
        };
        let main_logits = t.forward(&attention.tokens)?;
        let indices = main_logits.argmax(D::Minus1)?;
        let image = self.decoder.forward(&lookup(&indices, cb, h, h)?)?;
        let self_logits = match (&batch.target, with_self) {
            (Some(target), true) => {
                let k = batch.references.dim(1)?;
                let f_self = agg.encode_style_repeated(target, k)?;
                Some(t.forward(&agg.aggregate(&f_c, &f_self, Some(&batch.self_masks))?.tokens)?)
            }
            _ => None,
        };
        Ok(StageTwoOutput {
            main_logits: Some(main_logits),
            self_logits,
            indices: Some(indices),
            image,
            attention,
        })
    }

    /// All tensors needed to restore the generator: trainable variables and frozen stage-one parts.
    pub fn tensors(&self, vars: &VarMap) -> HashMap<String, Tensor> {
        let mut out = self.frozen.clone();
        let data = vars.data().lock().expect("varmap lock");
        out.extend(data.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())));
        out
    }
}
