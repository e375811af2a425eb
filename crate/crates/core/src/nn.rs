//! Convolutional building blocks shared by the VQGAN and the stage-two encoders.

use std::sync::Mutex;

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{conv2d, group_norm, Conv, GroupNorm};

/// Shape of an encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    /// Width per resolution level, full resolution first; `len == stages + 1`.
    pub channels: Vec<usize>,
    /// Residual blocks at every intermediate resolution.
    pub res_blocks: usize,
    /// Residual blocks at the latent resolution.
    pub latent_res_blocks: usize,
}

impl NetConfig {
    pub fn stages(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size >> self.stages()
    }

    pub fn latent_channels(&self) -> usize {
        *self.channels.last().expect("channels is non-empty")
    }
}

pub fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv> {
    conv2d(in_c, out_c, k, stride, if stride == 1 { k / 2 } else { 0 }, vb)
}

fn norm(channels: usize, vb: VarBuilder) -> candle_core::Result<GroupNorm> {
    group_norm(groups_for(channels), channels, 1e-6, vb)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    norm2: GroupNorm,
    conv2: Conv,
}

impl ResBlock {
    pub fn new(channels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm1: norm(channels, vb.pp("norm1"))?,
            conv1: conv(channels, channels, 3, 1, vb.pp("conv1"))?,
            norm2: norm(channels, vb.pp("norm2"))?,
            conv2: conv(channels, channels, 3, 1, vb.pp("conv2"))?,
        })
    }
}

impl Module for ResBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.norm1.forward(xs)?.silu()?.apply(&self.conv1)?;
        let h = self.norm2.forward(&h)?.silu()?.apply(&self.conv2)?;
        xs + h
    }
}

/// Stride-2 2x2 convolution.
#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv,
}

impl Downsample {
    pub fn new(in_c: usize, out_c: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            conv: conv(in_c, out_c, 2, 2, vb.pp("conv"))?,
        })
    }
}

impl Module for Downsample {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.conv.forward(xs)
    }
}

/// Sub-pixel 2x upsampling: 1x1 convolution to `4 * out_c` channels, then depth-to-space.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv,
    out_c: usize,
}

impl Upsample {
    pub fn new(in_c: usize, out_c: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            conv: conv(in_c, 4 * out_c, 1, 1, vb.pp("conv"))?,
            out_c,
        })
    }
}

impl Module for Upsample {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, h, w) = xs.dims4()?;
        let c = self.out_c;
        self.conv
            .forward(xs)?
            .reshape((b, c, 2, 2, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, c, 2 * h, 2 * w))
    }
}

/// Downsampling convolutional encoder: `B x 1 x H x W -> B x out_dim x h x w`.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    conv_in: Conv,
    blocks: Vec<EncoderBlock>,
    norm_out: GroupNorm,
    conv_out: Conv,
    image_size: usize,
}

#[derive(Debug, Clone)]
enum EncoderBlock {
    Res(ResBlock),
    Down(Downsample),
}

impl ConvEncoder {
    pub fn new(cfg: &NetConfig, out_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let ch = &cfg.channels;
        let conv_in = conv(1, ch[0], 3, 1, vb.pp("conv_in"))?;
        let mut blocks = Vec::new();
        let vbb = vb.pp("blocks");
        for s in 0..cfg.stages() {
            for _ in 0..cfg.res_blocks {
                blocks.push(EncoderBlock::Res(ResBlock::new(ch[s], vbb.pp(blocks.len()))?));
            }
            blocks.push(EncoderBlock::Down(Downsample::new(ch[s], ch[s + 1], vbb.pp(blocks.len()))?));
        }
        for _ in 0..cfg.latent_res_blocks {
            blocks.push(EncoderBlock::Res(ResBlock::new(cfg.latent_channels(), vbb.pp(blocks.len()))?));
        }
        Ok(Self {
            conv_in,
            blocks,
            norm_out: norm(cfg.latent_channels(), vb.pp("norm_out"))?,
            conv_out: conv(cfg.latent_channels(), out_dim, 1, 1, vb.pp("conv_out"))?,
            image_size: cfg.image_size,
        })
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[2] != self.image_size || dims[3] != self.image_size {
            return Err(Error::shape(["B", "1", &self.image_size.to_string(), &self.image_size.to_string()], dims));
        }
        Ok(self.forward(images)?)
    }
}

impl Module for ConvEncoder {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        // Glyphs live in [0, 1]; centre them.
        let mut h = ((xs * 2.0)? - 1.0)?.apply(&self.conv_in)?;
        for block in &self.blocks {
            h = match block {
                EncoderBlock::Res(r) => r.forward(&h)?,
                EncoderBlock::Down(d) => d.forward(&h)?,
            };
        }
        self.norm_out.forward(&h)?.silu()?.apply(&self.conv_out)
    }
}

/// One decoder layer. The decoder is a flat list so that a prefix of it can be
/// fine-tuned while the rest stays frozen.
#[derive(Debug, Clone)]
pub enum DecoderLayer {
    ConvIn(Conv),
    Res(ResBlock),
    Up(Upsample),
    Out { norm: GroupNorm, conv: Conv },
}

impl DecoderLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            DecoderLayer::ConvIn(_) => "conv_in",
            DecoderLayer::Res(_) => "res",
            DecoderLayer::Up(_) => "up",
            DecoderLayer::Out { .. } => "out",
        }
    }
}

impl Module for DecoderLayer {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            DecoderLayer::ConvIn(c) => c.forward(xs),
            DecoderLayer::Res(r) => r.forward(xs),
            DecoderLayer::Up(u) => u.forward(xs),
            DecoderLayer::Out { norm, conv } => candle_nn::ops::sigmoid(&norm.forward(xs)?.silu()?.apply(conv)?),
        }
    }
}

/// Blueprint of decoder layer `i`, so layers can be built one at a time from
/// different variable sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderLayerSpec {
    ConvIn { in_c: usize, out_c: usize },
    Res { c: usize },
    Up { in_c: usize, out_c: usize },
    Out { in_c: usize },
}

impl DecoderLayerSpec {
    pub fn build(self, vb: VarBuilder) -> candle_core::Result<DecoderLayer> {
        Ok(match self {
            DecoderLayerSpec::ConvIn { in_c, out_c } => DecoderLayer::ConvIn(conv(in_c, out_c, 3, 1, vb.pp("conv"))?),
            DecoderLayerSpec::Res { c } => DecoderLayer::Res(ResBlock::new(c, vb)?),
            DecoderLayerSpec::Up { in_c, out_c } => DecoderLayer::Up(Upsample::new(in_c, out_c, vb)?),
            DecoderLayerSpec::Out { in_c } => DecoderLayer::Out {
                norm: norm(in_c, vb.pp("norm"))?,
                conv: conv(in_c, 1, 3, 1, vb.pp("conv"))?,
            },
        })
    }
}

/// Layer blueprint of the decoder, latent side first.
pub fn decoder_layout(cfg: &NetConfig, in_dim: usize) -> Vec<DecoderLayerSpec> {
    let ch = &cfg.channels;
    let top = cfg.latent_channels();
    let mut specs = vec![DecoderLayerSpec::ConvIn { in_c: in_dim, out_c: top }];
    specs.extend((0..cfg.latent_res_blocks).map(|_| DecoderLayerSpec::Res { c: top }));
    for s in (0..cfg.stages()).rev() {
        specs.push(DecoderLayerSpec::Up { in_c: ch[s + 1], out_c: ch[s] });
        specs.extend((0..cfg.res_blocks).map(|_| DecoderLayerSpec::Res { c: ch[s] }));
    }
    specs.push(DecoderLayerSpec::Out { in_c: ch[0] });
    specs
}

/// Prefix under which decoder layer `i` stores its parameters.
pub fn decoder_layer_prefix(i: usize) -> String {
    format!("layers.{i}")
}

#[derive(Debug, Clone)]
pub struct ConvDecoder {
    pub layers: Vec<DecoderLayer>,
    in_dim: usize,
    latent_size: usize,
}

impl ConvDecoder {
    pub fn new(cfg: &NetConfig, in_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let layers = decoder_layout(cfg, in_dim)
            .into_iter()
            .enumerate()
            .map(|(i, spec)| spec.build(vb.pp(decoder_layer_prefix(i))))
            .collect::<candle_core::Result<_>>()?;
        Ok(Self {
            layers,
            in_dim,
            latent_size: cfg.latent_size(),
        })
    }

    /// Decoder assembled from layers built elsewhere (mixing trainable and frozen sources).
    pub fn from_layers(layers: Vec<DecoderLayer>, cfg: &NetConfig, in_dim: usize) -> Self {
        Self {
            layers,
            in_dim,
            latent_size: cfg.latent_size(),
        }
    }

    pub fn decode(&self, zq: &Tensor) -> Result<Tensor> {
        let dims = zq.dims();
        if dims.len() != 4 || dims[1] != self.in_dim || dims[2] != self.latent_size || dims[3] != self.latent_size {
            return Err(Error::shape(
                [
                    "B".to_string(),
                    self.in_dim.to_string(),
                    self.latent_size.to_string(),
                    self.latent_size.to_string(),
                ],
                dims,
            ));
        }
        Ok(self.forward(zq)?)
    }
}

impl Module for ConvDecoder {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = xs.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

/// `B x C x h x w -> B x (h*w) x C`, row-major over positions.
pub fn to_tokens(x: &Tensor) -> candle_core::Result<Tensor> {
    x.flatten_from(2)?.transpose(1, 2)?.contiguous()
}

/// `B x (h*w) x C -> B x C x h x w`.
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    debug_assert_eq!(n, h * w);
    t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))
}

/// Numerically stable row-wise softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::softmax(x, D::Minus1)
}

/// Variable source that creates missing variables in a [`VarMap`] from a
/// per-name seeded generator, so initialization is reproducible (the CPU
/// device generator cannot be seeded) and independent of creation order.
struct SeededVars {
    map: VarMap,
    seed: u64,
    lock: Mutex<()>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases, unlike the std hasher.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325 ^ seed, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn init_values(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let uniform = |lo: f64, up: f64, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(lo..up)).collect::<Vec<_>>();
    match init {
        Init::Const(v) => vec![v; n],
        Init::Uniform { lo, up } => uniform(lo, up, rng),
        Init::Randn { mean, stdev } => (0..n).map(|_| mean + stdev * rng.sample::<f64, _>(StandardNormal)).collect(),
        Init::Kaiming { dist, fan, non_linearity } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(-bound, bound, rng)
                }
                NormalOrUniform::Normal => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            }
        }
    }
}

impl SimpleBackend for SeededVars {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let _guard = self.lock.lock().expect("seeded vars lock");
        if !self.map.data().lock().expect("varmap lock").contains_key(name) {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
            let values = init_values(h, &s, &mut rng);
            let t = Tensor::from_vec(values, s.clone(), dev)?.to_dtype(dtype)?;
            self.map.data().lock().expect("varmap lock").insert(name.to_string(), Var::from_tensor(&t)?);
        }
        self.map.get(s, name, h, dtype, dev)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        match self.map.data().lock().expect("varmap lock").get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype)?.to_device(dev),
            None => candle_core::bail!("no variable named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.map.data().lock().expect("varmap lock").contains_key(name)
    }
}

/// A builder whose new variables land in `map` with seeded initial values.
pub fn seeded_builder(map: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
    let backend: Box<dyn SimpleBackend> = Box::new(SeededVars {
        map: map.clone(),
        seed,
        lock: Mutex::new(()),
    });
    VarBuilder::from_backend(backend, dtype, device.clone())
}
