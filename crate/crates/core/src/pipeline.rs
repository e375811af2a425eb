//! Run-directory plumbing behind the `vqfont` binary: config echo, locking,
//! dataset preparation, the two training stages, generation and evaluation.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{export_codebook, load_checkpoint, save_checkpoint, varmap_tensors, CheckpointKind, CheckpointMeta};
use crate::config::{ExtractorKind, Preset, RunConfig, Variant};
use crate::dataset::synth::{synthetic_table, StrokeFont};
use crate::dataset::{build_splits, render_glyph, DatasetSplits, FontSource, GlyphCorpus, SplitRatios};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, save_comparison_grid, LpipsModel};
use crate::glyph::GlyphImage;
use crate::metrics::MetricsReport;
use crate::perceptual::{FeatureExtractor, RandomConvExtractor, Vgg16Extractor};
use crate::refine::{
    build_samples, generate, target_indices, token_accuracy, train_vqfont, vqgan_from_tensors, SampleBatch, StageTwoEvent, StyleSample, VqFont,
};
use crate::ssem::{block_mass, softmax_rows};
use crate::structure::{classify_structure, decompose, StructureTable};
use crate::vq::{codebook_usage, reconstruction_l1, train_vqgan, StageOneEvent};

/// Selects the compute device; only `cpu` is built in.
pub const DEVICE_ENV: &str = "VQFONT_DEVICE";
pub const DATA_DIR: &str = "data";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
const LOCK_FILE: &str = ".lock";
const CONFIG_ECHO: &str = "config.toml";

pub fn device_from_env() -> Result<Device> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(Device::Cpu),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok(Device::Cpu),
        Ok(v) => Err(Error::Unsupported(format!("{DEVICE_ENV}={v}: this build only has the cpu device"))),
    }
}

/// Accepts `U+4E00`, `0x4E00`, a decimal number or the character itself.
pub fn parse_codepoint(s: &str) -> Result<u32> {
    let s = s.trim();
    let bad = || Error::Unsupported(format!("cannot read {s:?} as a character"));
    if let Some(hex) = s.strip_prefix("U+").or_else(|| s.strip_prefix("u+")).or_else(|| s.strip_prefix("0x")) {
        return u32::from_str_radix(hex, 16).map_err(|_| bad());
    }
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Ok(c as u32),
        _ if s.bytes().all(|b| b.is_ascii_digit()) => s.parse().map_err(|_| bad()),
        _ => Err(bad()),
    }
}

/// A run directory held exclusively through a lock file for the lifetime of the value.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::RunDirLocked(root.to_path_buf())),
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// The run's config: `explicit` file, else the existing echo, else `preset`
    /// (tiny by default). The first resolution is echoed to `config.toml`; a
    /// later one that disagrees with the echo is refused.
    pub fn config(&self, explicit: Option<&Path>, preset: Option<Preset>) -> Result<RunConfig> {
        let echo = self.join(CONFIG_ECHO);
        let existing = echo.is_file().then(|| RunConfig::load(&echo)).transpose()?;
        let cfg = match (explicit, &existing, preset) {
            (Some(path), _, _) => RunConfig::load(path)?,
            (None, Some(e), None) => e.clone(),
            (None, _, p) => RunConfig::preset(p.unwrap_or(Preset::Tiny)),
        };
        match existing {
            Some(e) if e != cfg => Err(Error::Config(vec![format!(
                "{} was created with a different config; use a new run directory",
                self.root.display()
            )])),
            Some(_) => Ok(cfg),
            None => {
                cfg.save(&echo)?;
                Ok(cfg)
            }
        }
    }

    /// Creates `name/` for a stage, refusing one that already holds a final checkpoint.
    pub fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.join(name);
        if dir.join(FINAL_CHECKPOINT).exists() {
            return Err(Error::ArtifactExists(dir.join(FINAL_CHECKPOINT)));
        }
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Line-delimited JSON records, flushed after every line.
pub struct JsonLines(BufWriter<File>);

impl JsonLines {
    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?)))
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, record)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    /// Seen fonts, seen characters.
    Train,
    /// Seen fonts, unseen characters.
    Sfuc,
    /// Unseen fonts, unseen characters.
    Ufuc,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Sfuc => "SFUC",
            Split::Ufuc => "UFUC",
        }
    }
}

pub fn stage_two_dir(variant: Variant) -> &'static str {
    match variant {
        Variant::Full => "vqfont",
        Variant::NoSsem => "vqfont-no-ssem",
        Variant::Baseline => "vqfont-baseline",
    }
}

/// Glyphs, composition table and splits of one run.
pub struct PreparedData {
    pub corpus: GlyphCorpus,
    pub table: StructureTable,
    pub splits: DatasetSplits,
    pub content_font: String,
}

fn charset_from_file(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::UnreadableSource {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        if line.starts_with("U+") || line.starts_with("0x") || line.chars().count() == 1 {
            out.push(parse_codepoint(line)?);
        } else {
            out.extend(line.chars().filter(|c| !c.is_whitespace()).map(|c| c as u32));
        }
    }
    Ok(out)
}

fn font_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ttf" | "otf"))
        })
        .collect();
    files.sort();
    Ok(files)
}

impl PreparedData {
    /// Builds the corpus from font files, a glyph image directory, or (when
    /// neither is configured) the procedural stroke fonts.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let content_font = d.content_font.clone();
        let (corpus, table, candidates) = if d.fonts_dir.is_some() || d.images_dir.is_some() {
            let table_path = d
                .structure_table
                .as_ref()
                .ok_or_else(|| Error::Config(vec!["data.structure_table is required with data.fonts_dir or data.images_dir".into()]))?;
            let table = StructureTable::load(table_path)?;
            let mut charset = match &d.charset_file {
                Some(p) => charset_from_file(p)?,
                None => table.codepoints().collect(),
            };
            charset.retain(|cp| table.contains(*cp));
            let mut corpus = GlyphCorpus::new();
            if let Some(dir) = &d.fonts_dir {
                for path in font_files(dir)? {
                    let src = FontSource::open_font_file(&path)?;
                    for &cp in &charset {
                        match render_glyph(&src, cp, d.image_size) {
                            Ok(g) => corpus.insert(g),
                            Err(Error::MissingGlyph(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                }
            } else if let Some(dir) = &d.images_dir {
                for g in GlyphCorpus::load_dir(dir)?.glyphs() {
                    corpus.insert(g.resized(d.image_size));
                }
            }
            (corpus, table, charset)
        } else {
            let table = synthetic_table(d.chars, cfg.seed);
            let mut fonts = StrokeFont::family(d.fonts, cfg.seed);
            let mut content = StrokeFont::content();
            content.id = content_font.clone();
            fonts.push(content);
            let charset: Vec<u32> = table.codepoints().collect();
            (GlyphCorpus::render_synthetic(&fonts, &table, &charset, d.image_size)?, table, charset)
        };
        let fonts = corpus.fonts();
        if !fonts.contains(&content_font) {
            return Err(Error::Config(vec![format!("data.content_font: no font named {content_font}")]));
        }
        // Only characters every font can render take part.
        let mut seen = BTreeSet::new();
        let chars: Vec<u32> = candidates
            .into_iter()
            .filter(|&cp| seen.insert(cp) && fonts.iter().all(|f| corpus.get(f, cp).is_some()))
            .take(d.chars)
            .collect();
        let style_fonts: Vec<String> = fonts.into_iter().filter(|f| *f != content_font).collect();
        let ratios = SplitRatios::Counts(d.seen_chars, d.reference_chars, d.unseen_chars);
        let splits = build_splits(&chars, &style_fonts, ratios, d.unseen_fonts, cfg.seed)?;
        Ok(Self {
            corpus,
            table,
            splits,
            content_font,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.corpus.write_dir(&dir.join("glyphs"))?;
        self.table.save(&dir.join("structure.tsv"))?;
        write_json(&dir.join("splits.json"), &json!({ "content_font": self.content_font, "splits": self.splits }))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let splits_path = dir.join("splits.json");
        if !splits_path.is_file() {
            return Err(Error::UnreadableSource {
                path: splits_path,
                reason: "no prepared data; run prepare-data first".into(),
            });
        }
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&splits_path)?)?;
        Ok(Self {
            corpus: GlyphCorpus::load_dir(&dir.join("glyphs"))?,
            table: StructureTable::load(&dir.join("structure.tsv"))?,
            splits: serde_json::from_value(v["splits"].clone())?,
            content_font: v["content_font"].as_str().unwrap_or_default().to_string(),
        })
    }

    /// Stage-one training glyphs: seen fonts and the content font over seen and reference characters.
    pub fn stage_one_glyphs(&self) -> Vec<GlyphImage> {
        let s = &self.splits;
        let fonts = s.seen_fonts.iter().chain(std::iter::once(&self.content_font));
        let chars: Vec<u32> = s.seen_chars.union(&s.reference_chars).copied().collect();
        fonts
            .flat_map(|f| chars.iter().filter_map(move |&cp| self.corpus.get(f, cp).cloned()))
            .collect()
    }

    pub fn samples(&self, cfg: &RunConfig, split: Split) -> Result<Vec<StyleSample>> {
        let s = &self.splits;
        let (fonts, chars) = match split {
            Split::Train => (&s.seen_fonts, &s.seen_chars),
            Split::Sfuc => (&s.seen_fonts, &s.unseen_chars),
            Split::Ufuc => (&s.unseen_fonts, &s.unseen_chars),
        };
        let fonts: Vec<String> = fonts.iter().cloned().collect();
        let chars: Vec<u32> = chars.iter().copied().collect();
        build_samples(
            &self.corpus,
            &self.table,
            &self.content_font,
            &fonts,
            &chars,
            &s.reference_chars,
            cfg.data.refs_per_char,
            cfg.vqgan.latent_size,
        )
    }
}

pub fn extractor(cfg: &RunConfig, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match cfg.perceptual.extractor {
        ExtractorKind::RandomConv => Box::new(RandomConvExtractor::new(cfg.perceptual.seed, &[8, 16, 32], device)?),
        ExtractorKind::Vgg16 => {
            let path = cfg.perceptual.weights.as_ref().ok_or(Error::ExtractorUnavailable)?;
            Box::new(Vgg16Extractor::load(path, device)?)
        }
    })
}

pub fn prepare_data(run: &RunDir, cfg: &RunConfig) -> Result<Value> {
    let dir = run.join(DATA_DIR);
    if dir.join("splits.json").exists() {
        return Err(Error::ArtifactExists(dir));
    }
    let data = PreparedData::build(cfg)?;
    data.write(&dir)?;
    let s = &data.splits;
    Ok(json!({
        "glyphs": data.corpus.len(),
        "fonts": { "seen": s.seen_fonts.len(), "unseen": s.unseen_fonts.len() },
        "chars": { "seen": s.seen_chars.len(), "reference": s.reference_chars.len(), "unseen": s.unseen_chars.len() },
        "dir": dir,
    }))
}

pub fn pretrain_vqgan(run: &RunDir, cfg: &RunConfig, device: &Device) -> Result<Value> {
    let data = PreparedData::load(&run.join(DATA_DIR))?;
    let dir = run.stage_dir("vqgan")?;
    cfg.save(&dir.join(CONFIG_ECHO))?;
    let glyphs = data.stage_one_glyphs();
    let ex = extractor(cfg, device)?;
    let mut log = JsonLines::append(&dir.join("log.jsonl"))?;
    let meta = |iteration| CheckpointMeta {
        kind: CheckpointKind::Vqgan,
        iteration,
        config: cfg.clone(),
    };
    let trained = train_vqgan(&glyphs, cfg, ex.as_ref(), device, &mut |event| match event {
        StageOneEvent::Record(r) => {
            log::info!("stage1 it {} l1 {:.4} total {:.4}", r.iteration, r.l1, r.total);
            log.write(r)
        }
        StageOneEvent::Checkpoint { iteration, vars } => {
            save_checkpoint(&dir.join(format!("step-{iteration:06}.safetensors")), &varmap_tensors(vars), &meta(iteration))
        }
    })?;
    let tensors = varmap_tensors(&trained.vars);
    save_checkpoint(&dir.join(FINAL_CHECKPOINT), &tensors, &meta(cfg.stage1.iterations))?;
    export_codebook(&tensors, &dir.join("codebook.npy"))?;
    let usage = codebook_usage(&trained.model, &glyphs, device)?;
    let summary = json!({
        "checkpoint": dir.join(FINAL_CHECKPOINT),
        "glyphs": glyphs.len(),
        "iterations": cfg.stage1.iterations,
        "reconstruction_l1": reconstruction_l1(&trained.model, &glyphs, device)?,
        "codes_used": usage.iter().filter(|&&u| u > 0).count(),
        "codebook_size": usage.len(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn train_vqfont_stage(run: &RunDir, cfg: &RunConfig, stage1: &Path, device: &Device) -> Result<Value> {
    let ck = load_checkpoint(stage1, Some(CheckpointKind::Vqgan), device)?;
    if ck.meta.config.vqgan != cfg.vqgan || ck.meta.config.data.image_size != cfg.data.image_size {
        return Err(Error::Config(vec![format!(
            "{} was trained with a different autoencoder geometry",
            stage1.display()
        )]));
    }
    let data = PreparedData::load(&run.join(DATA_DIR))?;
    let dir = run.stage_dir(stage_two_dir(cfg.stage2.variant))?;
    cfg.save(&dir.join(CONFIG_ECHO))?;
    let samples = data.samples(cfg, Split::Train)?;
    let ex = extractor(cfg, device)?;
    let mut log = JsonLines::append(&dir.join("log.jsonl"))?;
    let meta = |iteration| CheckpointMeta {
        kind: CheckpointKind::Vqfont,
        iteration,
        config: cfg.clone(),
    };
    let trained = train_vqfont(
        &samples,
        &ck.tensors,
        cfg,
        ex.as_ref(),
        device,
        cfg.stage2.log_every,
        &mut |event| match event {
            StageTwoEvent::Record(r) => {
                log::info!("stage2 it {} main {:.4} l1 {:.4} total {:.4}", r.iteration, r.main, r.l1, r.total);
                log.write(r)
            }
            StageTwoEvent::Checkpoint { iteration, model, vars } => {
                save_checkpoint(&dir.join(format!("step-{iteration:06}.safetensors")), &model.tensors(vars), &meta(iteration))
            }
        },
    )?;
    let mut audit_log = JsonLines::append(&dir.join("audit.jsonl"))?;
    for a in &trained.audits {
        audit_log.write(a)?;
    }
    save_checkpoint(&dir.join(FINAL_CHECKPOINT), &trained.model.tensors(&trained.vars), &meta(cfg.stage2.iterations))?;

    let generated = generate(&trained.model, &samples, 32, device)?;
    let accuracy = match &generated.indices {
        Some(idx) => {
            let vqgan = vqgan_from_tensors(cfg, &ck.tensors, device)?;
            let targets = samples.iter().map(|s| s.target()).collect::<Result<Vec<_>>>()?;
            Some(token_accuracy(idx, &target_indices(&vqgan, &targets, device)?))
        }
        None => None,
    };
    let records = crate::evaluation::score_samples("train", &samples, &generated.images, None, device)?;
    let summary = json!({
        "checkpoint": dir.join(FINAL_CHECKPOINT),
        "variant": cfg.stage2.variant,
        "samples": samples.len(),
        "iterations": cfg.stage2.iterations,
        "train_l1": MetricsReport::new(records).summaries[0].l1,
        "token_accuracy": accuracy,
        "freeze_audit_holds": trained.audits.iter().all(|a| a.holds()),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Generator and its config, restored from a stage-two checkpoint.
pub fn load_generator(ckpt: &Path, device: &Device) -> Result<(VqFont, RunConfig)> {
    let ck = load_checkpoint(ckpt, Some(CheckpointKind::Vqfont), device)?;
    let cfg = ck.meta.config;
    Ok((VqFont::from_tensors(&cfg, ck.tensors, device)?, cfg))
}

pub fn generate_split(run: &RunDir, ckpt: &Path, splits: &[Split], out: &Path, device: &Device) -> Result<Value> {
    let (model, cfg) = load_generator(ckpt, device)?;
    let data = PreparedData::load(&run.join(DATA_DIR))?;
    let mut written = serde_json::Map::new();
    for &split in splits {
        let samples = data.samples(&cfg, split)?;
        let generated = generate(&model, &samples, 32, device)?;
        for g in &generated.images {
            let path = out.join(split.name()).join(&g.font_id).join(format!("{:04X}.png", g.codepoint));
            std::fs::create_dir_all(path.parent().expect("glyph path has a parent"))?;
            g.save_png(&path)?;
        }
        written.insert(split.name().into(), json!(generated.images.len()));
    }
    Ok(json!({ "out": out, "generated": written }))
}

/// Scores every requested split. LPIPS is reported only when VGG weights load;
/// otherwise the column is left out.
pub fn evaluate(
    run: &RunDir,
    ckpt: &Path,
    splits: &[Split],
    lpips_weights: Option<&Path>,
    grid: Option<&Path>,
    out: &Path,
    device: &Device,
) -> Result<MetricsReport> {
    let (model, cfg) = load_generator(ckpt, device)?;
    let data = PreparedData::load(&run.join(DATA_DIR))?;
    let vgg = match lpips_weights.map(|p| Vgg16Extractor::load(p, device)) {
        Some(Ok(v)) => Some(v),
        Some(Err(Error::ExtractorUnavailable)) | None => {
            if lpips_weights.is_some() {
                log::warn!("LPIPS weights not found; the LPIPS column is omitted");
            }
            None
        }
        Some(Err(e)) => return Err(e),
    };
    let lp = vgg.as_ref().map(|v| LpipsModel {
        extractor: v,
        weights: v.lin_weights(),
    });
    std::fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for &split in splits {
        let samples = data.samples(&cfg, split)?;
        let (report, generated) = evaluate_split(&model, split.name(), &samples, lp, device)?;
        if let Some(grid) = grid {
            let path = if splits.len() == 1 {
                grid.to_path_buf()
            } else {
                let stem = grid.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
                grid.with_file_name(format!("{stem}-{}.png", split.name()))
            };
            let n = samples.len().min(12);
            save_comparison_grid(&samples[..n], &generated[..n], &path)?;
        }
        reports.push(report);
    }
    let report = MetricsReport::merge(reports);
    std::fs::write(out.join("metrics.tsv"), report.to_tsv())?;
    std::fs::write(out.join("metrics.json"), report.to_json()? + "\n")?;
    Ok(report)
}

/// Category and component position sets of one character on a `grid x grid` patch grid.
pub fn decompose_char(table: &StructureTable, codepoint: u32, grid: usize) -> Result<Value> {
    let layout = decompose(codepoint, classify_structure(codepoint, table)?, (grid, grid))?;
    let mut v: Value = serde_json::from_str(&layout.to_json())?;
    v["component_names"] = json!(table.get(codepoint).map(|e| e.components.clone()).unwrap_or_default());
    Ok(v)
}

fn probabilities(logits: &candle_core::Tensor) -> Result<(usize, Vec<f64>)> {
    let (_, heads, rows, cols) = logits.dims4()?;
    let flat: Vec<f64> = logits.get(0)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut mean = vec![0.0; rows * cols];
    for head in flat.chunks(rows * cols) {
        for (m, p) in mean.iter_mut().zip(softmax_rows(head, cols)) {
            *m += p / heads as f64;
        }
    }
    Ok((cols, mean))
}

/// Head-averaged patch attention of one `(font, char)` sample, before and
/// after structure reweighting, with per-component attention mass.
pub fn dump_attention(run: &RunDir, ckpt: &Path, codepoint: u32, font: Option<&str>, device: &Device) -> Result<Value> {
    let (model, cfg) = load_generator(ckpt, device)?;
    let data = PreparedData::load(&run.join(DATA_DIR))?;
    let font = match font {
        Some(f) => f.to_string(),
        None => data.splits.seen_fonts.iter().next().cloned().ok_or(Error::EmptyDataset)?,
    };
    let samples = build_samples(
        &data.corpus,
        &data.table,
        &data.content_font,
        std::slice::from_ref(&font),
        &[codepoint],
        &data.splits.reference_chars,
        cfg.data.refs_per_char,
        cfg.vqgan.latent_size,
    )?;
    let sample = &samples[0];
    let att = model.forward(&SampleBatch::new(&[sample], device)?, false)?.attention;
    let (cols, patch) = probabilities(&att.patch_logits)?;
    let rows = patch.len() / cols;
    let to_rows = |v: &[f64]| v.chunks(cols).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let enhanced = att.reweighted_logits.as_ref().map(probabilities).transpose()?.map(|(_, p)| p);
    let labels = &sample.labels;
    let mass = |p: &[f64]| -> Result<Vec<Vec<f64>>> { Ok(block_mass(p, labels)?.chunks(labels.n).map(<[f64]>::to_vec).collect()) };
    Ok(json!({
        "codepoint": format!("U+{codepoint:04X}"),
        "font": font,
        "category": classify_structure(codepoint, &data.table)?.name(),
        "references": sample.references.iter().map(|r| format!("U+{:04X}", r.codepoint)).collect::<Vec<_>>(),
        "grid": [cfg.vqgan.latent_size, cfg.vqgan.latent_size],
        "rows": rows,
        "cols": cols,
        "content_components": labels.content,
        "reference_components": labels.reference,
        "patch": to_rows(&patch),
        "patch_block_mass": mass(&patch)?,
        "enhanced": enhanced.as_deref().map(to_rows),
        "enhanced_block_mass": enhanced.as_deref().map(mass).transpose()?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codepoint_spellings() {
        assert_eq!(parse_codepoint("U+4E00").unwrap(), 0x4E00);
        assert_eq!(parse_codepoint("0x4e00").unwrap(), 0x4E00);
        assert_eq!(parse_codepoint("19968").unwrap(), 0x4E00);
        assert_eq!(parse_codepoint("一").unwrap(), 0x4E00);
        assert_eq!(parse_codepoint("7").unwrap(), '7' as u32);
        assert!(parse_codepoint("abc").is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path()).unwrap();
        assert!(matches!(RunDir::open(dir.path()), Err(Error::RunDirLocked(_))));
        drop(run);
        RunDir::open(dir.path()).unwrap();
    }

    #[test]
    fn config_echo_is_sticky() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path()).unwrap();
        let cfg = run.config(None, None).unwrap();
        assert_eq!(cfg, RunConfig::preset(Preset::Tiny));
        assert_eq!(run.config(None, None).unwrap(), cfg);
        assert!(matches!(run.config(None, Some(Preset::Desk)), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_data_round_trip() {
        let mut cfg = RunConfig::preset(Preset::Tiny);
        cfg.data.image_size = 16;
        let data = PreparedData::build(&cfg).unwrap();
        let s = &data.splits;
        assert_eq!((s.seen_chars.len(), s.reference_chars.len(), s.unseen_chars.len()), (100, 20, 20));
        assert_eq!((s.seen_fonts.len(), s.unseen_fonts.len()), (5, 1));
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        let back = PreparedData::load(dir.path()).unwrap();
        assert_eq!(back.splits, data.splits);
        assert_eq!(back.corpus.len(), data.corpus.len());
        assert_eq!(back.stage_one_glyphs().len(), 6 * 120);
        let ufuc = back.samples(&cfg, Split::Ufuc).unwrap();
        assert_eq!(ufuc.len(), 20);
        assert!(ufuc.iter().all(|x| s.unseen_fonts.contains(&x.font_id) && x.k() == 3));
    }
}
