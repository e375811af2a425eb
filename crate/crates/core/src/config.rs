//! Run configuration: presets, TOML loading with strict key checking, and range validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
#[cfg(feature = "backend")]
use crate::nn::NetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "backend", derive(clap::ValueEnum))]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 32px glyphs, 8x8 latents, K = 64; small enough for CPU tests.
    Tiny,
    /// 64px glyphs, 16x16 latents, K = 256.
    Desk,
    /// Full-size model and data constants; not meant to be run to convergence on a desk.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookInit {
    /// Uniform in `[-1/K, 1/K]`.
    Uniform,
    /// Encoder outputs of the first batch, sampled without replacement.
    Data,
}

/// Which stage-two generator to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "backend", derive(clap::ValueEnum))]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Codebook indices plus structure-level enhancement.
    Full,
    /// Codebook indices, plain patch attention.
    NoSsem,
    /// Plain patch attention decoded straight to pixels by a fresh decoder.
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    RandomConv,
    Vgg16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    /// Synthetic corpus size when no font or image source is given.
    pub fonts: usize,
    pub chars: usize,
    pub seen_chars: usize,
    pub reference_chars: usize,
    pub unseen_chars: usize,
    pub unseen_fonts: usize,
    pub refs_per_char: usize,
    pub content_font: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fonts_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub charset_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure_table: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqganConfig {
    pub latent_size: usize,
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub latent_res_blocks: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub codebook_init: CodebookInit,
    pub disc_channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda_comm: f64,
    pub lambda_adv: f64,
    /// Iteration at which the adversarial term and discriminator updates begin.
    pub disc_start: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTwoConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Decoder layers, counted from the latent side, that are fine-tuned.
    pub trainable_decoder_layers: usize,
    pub lambda_self: f64,
    pub lambda_main: f64,
    pub lambda_l1: f64,
    pub lambda_adv: f64,
    pub lambda_per: f64,
    pub disc_channels: Vec<usize>,
    pub variant: Variant,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub extractor: ExtractorKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub vqgan: VqganConfig,
    pub attention: AttentionConfig,
    pub transformer: TransformerConfig,
    pub stage1: StageOneConfig,
    pub stage2: StageTwoConfig,
    pub perceptual: PerceptualConfig,
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 5] = [
    "data.images_dir",
    "data.fonts_dir",
    "data.charset_file",
    "data.structure_table",
    "perceptual.weights",
];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full_size(),
            Preset::Desk => Self::desk(),
            Preset::Tiny => Self::tiny(),
        }
    }

    fn full_size() -> Self {
        Self {
            preset: Preset::Full,
            seed: 0,
            data: DataConfig {
                image_size: 128,
                fonts: 381,
                chars: 3499,
                seen_chars: 2841,
                reference_chars: 158,
                unseen_chars: 500,
                unseen_fonts: 10,
                refs_per_char: 3,
                content_font: "content".into(),
                images_dir: None,
                fonts_dir: None,
                charset_file: None,
                structure_table: None,
            },
            vqgan: VqganConfig {
                latent_size: 16,
                channels: vec![64, 128, 256, 256],
                res_blocks: 2,
                latent_res_blocks: 2,
                codebook_size: 1024,
                code_dim: 256,
                codebook_init: CodebookInit::Uniform,
                disc_channels: vec![64, 128, 256],
            },
            attention: AttentionConfig { width: 256, heads: 8 },
            transformer: TransformerConfig {
                blocks: 15,
                heads: 8,
                ffn_mult: 4,
            },
            stage1: StageOneConfig {
                lr: 4e-5,
                beta1: 0.5,
                beta2: 0.9,
                batch_size: 32,
                iterations: 200_000,
                lambda_comm: 0.5,
                lambda_adv: 0.8,
                disc_start: 10_000,
                log_every: 100,
                checkpoint_every: 10_000,
            },
            stage2: StageTwoConfig {
                lr: 2e-4,
                beta1: 0.9,
                beta2: 0.999,
                batch_size: 32,
                iterations: 300_000,
                trainable_decoder_layers: 4,
                lambda_self: 1.0,
                lambda_main: 2.0,
                lambda_l1: 2.0,
                lambda_adv: 0.002,
                lambda_per: 1.0,
                disc_channels: vec![64, 128, 256],
                variant: Variant::Full,
                log_every: 100,
                checkpoint_every: 10_000,
            },
            perceptual: PerceptualConfig {
                extractor: ExtractorKind::RandomConv,
                seed: 0x5eed,
                weights: None,
            },
        }
    }

    fn desk() -> Self {
        let mut c = Self::full_size();
        c.preset = Preset::Desk;
        c.data = DataConfig {
            image_size: 64,
            fonts: 30,
            chars: 300,
            seen_chars: 220,
            reference_chars: 30,
            unseen_chars: 50,
            unseen_fonts: 5,
            ..c.data
        };
        c.vqgan = VqganConfig {
            latent_size: 16,
            channels: vec![32, 64, 128],
            res_blocks: 1,
            latent_res_blocks: 2,
            codebook_size: 256,
            code_dim: 128,
            codebook_init: CodebookInit::Data,
            disc_channels: vec![32, 64, 128],
        };
        c.attention = AttentionConfig { width: 128, heads: 8 };
        c.transformer.blocks = 6;
        c.stage1.iterations = 20_000;
        c.stage1.disc_start = 5_000;
        c.stage1.checkpoint_every = 5_000;
        c.stage2.iterations = 30_000;
        c.stage2.disc_channels = vec![32, 64, 128];
        c.stage2.checkpoint_every = 5_000;
        c
    }

    fn tiny() -> Self {
        let mut c = Self::full_size();
        c.preset = Preset::Tiny;
        c.data = DataConfig {
            image_size: 32,
            fonts: 6,
            chars: 140,
            seen_chars: 100,
            reference_chars: 20,
            unseen_chars: 20,
            unseen_fonts: 1,
            ..c.data
        };
        c.vqgan = VqganConfig {
            latent_size: 8,
            channels: vec![16, 32, 64],
            res_blocks: 1,
            latent_res_blocks: 1,
            codebook_size: 64,
            code_dim: 32,
            codebook_init: CodebookInit::Data,
            disc_channels: vec![16, 32],
        };
        c.attention = AttentionConfig { width: 64, heads: 4 };
        c.transformer = TransformerConfig {
            blocks: 2,
            heads: 4,
            ffn_mult: 4,
        };
        c.stage1.lr = 1e-3;
        c.stage1.batch_size = 16;
        c.stage1.iterations = 200;
        c.stage1.disc_start = 100;
        c.stage1.log_every = 10;
        c.stage1.checkpoint_every = 100;
        c.stage2.lr = 1e-3;
        c.stage2.batch_size = 16;
        c.stage2.iterations = 500;
        c.stage2.disc_channels = vec![16, 32];
        c.stage2.log_every = 10;
        c.stage2.checkpoint_every = 250;
        c
    }

    #[cfg(feature = "backend")]
    pub fn net(&self) -> NetConfig {
        NetConfig {
            image_size: self.data.image_size,
            channels: self.vqgan.channels.clone(),
            res_blocks: self.vqgan.res_blocks,
            latent_res_blocks: self.vqgan.latent_res_blocks,
        }
    }

    pub fn latent_tokens(&self) -> usize {
        self.vqgan.latent_size * self.vqgan.latent_size
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::UnreadableSource {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        validate_config(&raw)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

/// Parses TOML, fills unspecified keys from the selected preset (full by
/// default), rejects unknown keys and checks ranges. Every problem found is reported.
pub fn validate_config(raw: &str) -> Result<RunConfig> {
    let value: toml::Table = raw.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    let preset = match value.get("preset") {
        None => Preset::Full,
        Some(p) => Preset::deserialize(p.clone()).map_err(|_| Error::Config(vec![format!("preset: unknown preset {p}")]))?,
    };
    let defaults = toml::Table::try_from(RunConfig::preset(preset)).expect("defaults serialize");

    let mut errors = Vec::new();
    unknown_keys(&value, &defaults, "", &mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let mut merged = defaults;
    merge(&mut merged, value);
    let cfg: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    let violations = cfg.violations();
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(violations))
    }
}

fn unknown_keys(raw: &toml::Table, known: &toml::Table, prefix: &str, errors: &mut Vec<String>) {
    for (k, v) in raw {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            Some(toml::Value::Table(sub)) => match v {
                toml::Value::Table(raw_sub) => unknown_keys(raw_sub, sub, &path, errors),
                _ => errors.push(format!("{path}: expected a table")),
            },
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => errors.push(format!("{path}: unknown key")),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        let d = &self.data;
        let q = &self.vqgan;
        check(d.image_size >= 8, format!("data.image_size: must be at least 8, got {}", d.image_size));
        check(d.refs_per_char >= 1, "data.refs_per_char: must be at least 1".into());
        check(d.fonts >= 1, "data.fonts: must be at least 1".into());
        check(
            d.unseen_fonts < d.fonts.max(1),
            format!("data.unseen_fonts: {} leaves no training font out of {}", d.unseen_fonts, d.fonts),
        );
        let total = d.seen_chars + d.reference_chars + d.unseen_chars;
        check(
            total <= d.chars,
            format!("data: split sizes sum to {total}, more than data.chars = {}", d.chars),
        );
        check(d.reference_chars >= 1, "data.reference_chars: must be at least 1".into());
        check(!d.content_font.is_empty(), "data.content_font: must not be empty".into());
        check(
            q.codebook_size >= 2,
            format!("vqgan.codebook_size: must be at least 2, got {}", q.codebook_size),
        );
        check(q.code_dim >= 1, "vqgan.code_dim: must be at least 1".into());
        check(q.channels.len() >= 2, "vqgan.channels: need at least one downsampling stage".into());
        check(q.channels.iter().all(|&c| c >= 1), "vqgan.channels: widths must be positive".into());
        check(!q.disc_channels.is_empty(), "vqgan.disc_channels: must not be empty".into());
        if q.channels.len() >= 2 {
            let stages = q.channels.len() - 1;
            let ok = d.image_size.is_multiple_of(1 << stages) && d.image_size >> stages == q.latent_size;
            check(
                ok,
                format!(
                    "vqgan.latent_size: {} px with {stages} stages gives {}, not {}",
                    d.image_size,
                    d.image_size >> stages,
                    q.latent_size
                ),
            );
        }
        let a = &self.attention;
        check(
            a.heads >= 1 && a.width.is_multiple_of(a.heads.max(1)),
            format!("attention.heads: {} must divide attention.width {}", a.heads, a.width),
        );
        let t = &self.transformer;
        check(t.blocks >= 1, "transformer.blocks: must be at least 1".into());
        check(
            t.heads >= 1 && a.width.is_multiple_of(t.heads.max(1)),
            format!("transformer.heads: {} must divide attention.width {}", t.heads, a.width),
        );
        check(t.ffn_mult >= 1, "transformer.ffn_mult: must be at least 1".into());
        for (name, s1) in [
            ("stage1", (self.stage1.lr, self.stage1.beta1, self.stage1.beta2, self.stage1.batch_size)),
            ("stage2", (self.stage2.lr, self.stage2.beta1, self.stage2.beta2, self.stage2.batch_size)),
        ] {
            let (lr, b1, b2, batch) = s1;
            check(lr > 0.0 && lr.is_finite() && lr <= 1.0, format!("{name}.lr: must be in (0, 1], got {lr}"));
            check((0.0..1.0).contains(&b1), format!("{name}.beta1: must be in [0, 1), got {b1}"));
            check((0.0..1.0).contains(&b2), format!("{name}.beta2: must be in [0, 1), got {b2}"));
            check(batch >= 1, format!("{name}.batch_size: must be at least 1"));
        }
        check(self.stage1.log_every >= 1 && self.stage2.log_every >= 1, "log_every: must be at least 1".into());
        check(
            self.stage1.checkpoint_every >= 1 && self.stage2.checkpoint_every >= 1,
            "checkpoint_every: must be at least 1".into(),
        );
        let s2 = &self.stage2;
        for (name, w) in [
            ("stage1.lambda_comm", self.stage1.lambda_comm),
            ("stage1.lambda_adv", self.stage1.lambda_adv),
            ("stage2.lambda_self", s2.lambda_self),
            ("stage2.lambda_main", s2.lambda_main),
            ("stage2.lambda_l1", s2.lambda_l1),
            ("stage2.lambda_adv", s2.lambda_adv),
            ("stage2.lambda_per", s2.lambda_per),
        ] {
            check(w >= 0.0 && w.is_finite(), format!("{name}: must be a nonnegative number, got {w}"));
        }
        let layers = 2 + q.latent_res_blocks + q.channels.len().saturating_sub(1) * (1 + q.res_blocks);
        check(
            s2.trainable_decoder_layers <= layers,
            format!("stage2.trainable_decoder_layers: decoder has only {layers} layers"),
        );
        check(!s2.disc_channels.is_empty(), "stage2.disc_channels: must not be empty".into());
        if self.perceptual.extractor == ExtractorKind::Vgg16 {
            check(self.perceptual.weights.is_some(), "perceptual.weights: required for the vgg16 extractor".into());
        }
        v
    }
}
