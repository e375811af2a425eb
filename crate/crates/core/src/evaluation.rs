//! Split-level evaluation: generate every `(font, char)` pair, score it
//! against ground truth and render comparison grids.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::GrayImage;

use crate::error::{Error, Result};
use crate::glyph::{batch_tensor, GlyphImage};
use crate::metrics::{MetricsReport, PairRecord};
use crate::perceptual::{lpips, FeatureExtractor};
use crate::refine::{generate, StyleSample, VqFont};

/// Anything that turns style samples into glyphs, one per sample.
pub trait GlyphGenerator {
    fn generate(&self, samples: &[StyleSample], device: &Device) -> Result<Vec<GlyphImage>>;
}

impl GlyphGenerator for VqFont {
    fn generate(&self, samples: &[StyleSample], device: &Device) -> Result<Vec<GlyphImage>> {
        Ok(generate(self, samples, 16, device)?.images)
    }
}

/// Extractor plus optional per-channel weights used for the LPIPS column.
#[derive(Clone, Copy)]
pub struct LpipsModel<'a> {
    pub extractor: &'a dyn FeatureExtractor,
    pub weights: Option<&'a [Tensor]>,
}

/// Scores `generated[i]` against the ground truth of `samples[i]`.
pub fn score_samples(split: &str, samples: &[StyleSample], generated: &[GlyphImage], lp: Option<LpipsModel>, device: &Device) -> Result<Vec<PairRecord>> {
    if samples.len() != generated.len() {
        return Err(Error::shape(samples.len(), generated.len()));
    }
    let mut records = Vec::with_capacity(samples.len());
    for (s, g) in samples.iter().zip(generated) {
        let t = s.target()?;
        if t.size != g.size {
            return Err(Error::shape(t.size, g.size));
        }
        records.push(PairRecord::score(split, &s.font_id, s.codepoint, &g.pixels, &t.pixels, t.size)?);
    }
    if let Some(lp) = lp {
        for (i, chunk) in generated.chunks(32).enumerate() {
            let truths: Vec<&GlyphImage> = samples[i * 32..i * 32 + chunk.len()].iter().map(|s| s.target()).collect::<Result<_>>()?;
            let fake = batch_tensor(&chunk.iter().collect::<Vec<_>>(), device)?;
            let real = batch_tensor(&truths, device)?;
            for (j, d) in lpips(lp.extractor, lp.weights, &fake, &real)?.into_iter().enumerate() {
                records[i * 32 + j].lpips = Some(f64::from(d));
            }
        }
    }
    Ok(records)
}

/// Generates and scores one split. Every sample needs ground truth; this is
/// checked before any generation work.
pub fn evaluate_split(
    model: &dyn GlyphGenerator,
    split: &str,
    samples: &[StyleSample],
    lp: Option<LpipsModel>,
    device: &Device,
) -> Result<(MetricsReport, Vec<GlyphImage>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in samples {
        s.target()?;
    }
    let generated = model.generate(samples, device)?;
    let records = score_samples(split, samples, &generated, lp, device)?;
    Ok((MetricsReport::new(records), generated))
}

/// One column per sample; rows are the content glyph, each reference, the
/// generated glyph and the ground truth (blank when absent). Black ink on white.
pub fn comparison_grid(samples: &[StyleSample], generated: &[GlyphImage]) -> Result<GrayImage> {
    let Some(first) = samples.first() else {
        return Err(Error::EmptyDataset);
    };
    if samples.len() != generated.len() {
        return Err(Error::shape(samples.len(), generated.len()));
    }
    let size = first.content.size;
    let rows = first.k() + 3;
    let gap = 2u32;
    let cell = size as u32 + gap;
    let mut img = GrayImage::from_pixel(cell * samples.len() as u32 + gap, cell * rows as u32 + gap, image::Luma([160]));
    for (col, (s, g)) in samples.iter().zip(generated).enumerate() {
        let blank = GlyphImage::blank(size, s.codepoint, s.font_id.clone());
        let column = std::iter::once(&s.content).chain(&s.references).chain([g, s.target.as_ref().unwrap_or(&blank)]);
        for (row, glyph) in column.enumerate() {
            let glyph = if glyph.size == size { glyph.clone() } else { glyph.resized(size) };
            image::imageops::replace(
                &mut img,
                &glyph.to_gray(),
                i64::from(gap + col as u32 * cell),
                i64::from(gap + row as u32 * cell),
            );
        }
    }
    Ok(img)
}

pub fn save_comparison_grid(samples: &[StyleSample], generated: &[GlyphImage], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    comparison_grid(samples, generated)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::RandomConvExtractor;
    use crate::ssem::BlockLabels;
    use crate::structure::{decompose, StructureCategory};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    struct Identity;

    impl GlyphGenerator for Identity {
        fn generate(&self, samples: &[StyleSample], _: &Device) -> Result<Vec<GlyphImage>> {
            samples.iter().map(|s| s.target().cloned()).collect()
        }
    }

    struct Content;

    impl GlyphGenerator for Content {
        fn generate(&self, samples: &[StyleSample], _: &Device) -> Result<Vec<GlyphImage>> {
            Ok(samples.iter().map(|s| s.content.clone()).collect())
        }
    }

    fn glyph(seed: u64, cp: u32, font: &str) -> GlyphImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..256).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
        GlyphImage::new(16, px, cp, font).unwrap()
    }

    fn samples(fonts: usize, chars: usize) -> Vec<StyleSample> {
        let layout = decompose(0, StructureCategory::Independent, (4, 4)).unwrap();
        let labels = BlockLabels::new(&layout, std::slice::from_ref(&layout)).unwrap();
        let mut out = Vec::new();
        for f in 0..fonts {
            for c in 0..chars {
                let cp = 0x4E00 + c as u32;
                let font = format!("f{f}");
                out.push(StyleSample {
                    font_id: font.clone(),
                    codepoint: cp,
                    content: glyph(1000 + c as u64, cp, "content"),
                    references: vec![glyph(7, 0x5000, &font)],
                    target: Some(glyph((f * 100 + c) as u64, cp, &font)),
                    labels: labels.clone(),
                    self_labels: labels.clone(),
                });
            }
        }
        out
    }

    #[test]
    fn records_per_pair_and_mean_aggregate() {
        let s = samples(2, 3);
        let (rep, generated) = evaluate_split(&Content, "SFUC", &s, None, &Device::Cpu).unwrap();
        assert_eq!(rep.records.len(), 6);
        assert_eq!(generated.len(), 6);
        let mean = rep.records.iter().map(|r| r.l1).sum::<f64>() / 6.0;
        assert!((rep.summaries[0].l1 - mean).abs() < 1e-9);
        assert!(rep.summaries[0].l1 > 0.1);
        assert!(!rep.to_tsv().contains("LPIPS"));
    }

    #[test]
    fn identity_model_scores_perfectly() {
        let s = samples(2, 3);
        let ex = RandomConvExtractor::default_for(&Device::Cpu).unwrap();
        let lp = LpipsModel { extractor: &ex, weights: None };
        let (rep, _) = evaluate_split(&Identity, "UFUC", &s, Some(lp), &Device::Cpu).unwrap();
        let m = &rep.summaries[0];
        assert_eq!(m.l1, 0.0);
        assert_eq!(m.psnr, crate::metrics::PSNR_CAP);
        assert!(m.lpips.unwrap().abs() < 1e-9);
        assert!(rep.to_tsv().starts_with("split\tcount\tL1\tRMSE\tPSNR\tSSIM\tLPIPS\n"));
    }

    #[test]
    fn missing_ground_truth_is_reported() {
        let mut s = samples(1, 2);
        s[1].target = None;
        assert!(matches!(
            evaluate_split(&Identity, "SFUC", &s, None, &Device::Cpu),
            Err(Error::MissingGroundTruth { codepoint: 0x4E01, .. })
        ));
    }

    #[test]
    fn lpips_grows_with_noise() {
        let dev = Device::Cpu;
        let ex = RandomConvExtractor::default_for(&dev).unwrap();
        let base = samples(1, 4);
        let noisy = |sigma: f64| -> Vec<GlyphImage> {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let n = Normal::new(0.0, sigma).unwrap();
            base.iter()
                .map(|s| {
                    let t = s.target().unwrap();
                    let px = t.pixels.iter().map(|&p| (p as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect();
                    GlyphImage::new(16, px, t.codepoint, t.font_id.clone()).unwrap()
                })
                .collect()
        };
        let lp = Some(LpipsModel { extractor: &ex, weights: None });
        let low = MetricsReport::new(score_samples("s", &base, &noisy(0.1), lp, &dev).unwrap());
        let high = MetricsReport::new(score_samples("s", &base, &noisy(0.3), lp, &dev).unwrap());
        assert!(low.summaries[0].lpips.unwrap() < high.summaries[0].lpips.unwrap());
    }

    #[test]
    fn grid_layout() {
        let s = samples(1, 3);
        let g: Vec<GlyphImage> = s.iter().map(|x| x.content.clone()).collect();
        let img = comparison_grid(&s, &g).unwrap();
        // 3 columns, 4 rows (content, 1 reference, generated, truth) of 16 px plus 2 px gaps.
        assert_eq!(img.dimensions(), (3 * 18 + 2, 4 * 18 + 2));
    }
}
