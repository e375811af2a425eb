use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};

use crate::attention::LayoutMasks;
use crate::dataset::{select_references, GlyphCorpus};
use crate::error::{Error, Result};
use crate::glyph::{batch_tensor, GlyphImage};
use crate::ssem::BlockLabels;
use crate::structure::{classify_structure, decompose, ComponentLayout, StructureTable};

/// One generation task: render `codepoint` in `font_id`, given the content
/// glyph and `k` reference glyphs of that font.
#[derive(Debug, Clone)]
pub struct StyleSample {
    pub font_id: String,
    pub codepoint: u32,
    pub content: GlyphImage,
    pub references: Vec<GlyphImage>,
    /// Ground truth, when the corpus has it.
    pub target: Option<GlyphImage>,
    /// Content components against the references' components.
    pub labels: BlockLabels,
    /// Content components against `k` copies of the target's own layout.
    pub self_labels: BlockLabels,
}

impl StyleSample {
    pub fn target(&self) -> Result<&GlyphImage> {
        self.target.as_ref().ok_or_else(|| Error::MissingGroundTruth {
            font_id: self.font_id.clone(),
            codepoint: self.codepoint,
        })
    }

    pub fn k(&self) -> usize {
        self.references.len()
    }
}

fn layout(codepoint: u32, table: &StructureTable, grid: usize) -> Result<ComponentLayout> {
    decompose(codepoint, classify_structure(codepoint, table)?, (grid, grid))
}

/// Samples for every `(font, target)` pair. References are picked per target
/// from `reference_pool` and rendered in the same font; a missing target glyph
/// is allowed (generation only), a missing content or reference glyph is not.
#[allow(clippy::too_many_arguments)]
pub fn build_samples(
    corpus: &GlyphCorpus,
    table: &StructureTable,
    content_font: &str,
    fonts: &[String],
    targets: &[u32],
    reference_pool: &BTreeSet<u32>,
    k: usize,
    grid: usize,
) -> Result<Vec<StyleSample>> {
    if k == 0 {
        return Err(Error::EmptyReferences);
    }
    let mut out = Vec::with_capacity(fonts.len() * targets.len());
    for &cp in targets {
        let refs = select_references(cp, reference_pool, table, k)?.references;
        let content_layout = layout(cp, table, grid)?;
        let ref_layouts = refs.iter().map(|&r| layout(r, table, grid)).collect::<Result<Vec<_>>>()?;
        let labels = BlockLabels::new(&content_layout, &ref_layouts)?;
        let self_labels = BlockLabels::new(&content_layout, &vec![content_layout.clone(); k])?;
        let content = corpus.require(content_font, cp)?.clone();
        for font in fonts {
            out.push(StyleSample {
                font_id: font.clone(),
                codepoint: cp,
                content: content.clone(),
                references: refs.iter().map(|&r| corpus.require(font, r).cloned()).collect::<Result<_>>()?,
                target: corpus.get(font, cp).cloned(),
                labels: labels.clone(),
                self_labels: self_labels.clone(),
            });
        }
    }
    Ok(out)
}

/// Stacked tensors for a set of samples.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub content: Tensor,
    /// `B x k x 1 x H x W`.
    pub references: Tensor,
    pub target: Option<Tensor>,
    pub masks: LayoutMasks,
    pub self_masks: LayoutMasks,
    pub codepoints: Vec<u32>,
}

impl SampleBatch {
    pub fn new(samples: &[&StyleSample], device: &Device) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let k = first.k();
        if samples.iter().any(|s| s.k() != k) {
            return Err(Error::DimensionMismatch("all samples in a batch need the same number of references".into()));
        }
        let content: Vec<&GlyphImage> = samples.iter().map(|s| &s.content).collect();
        let refs: Vec<&GlyphImage> = samples.iter().flat_map(|s| s.references.iter()).collect();
        let size = first.content.size;
        let target = if samples.iter().all(|s| s.target.is_some()) {
            let t: Vec<&GlyphImage> = samples.iter().filter_map(|s| s.target.as_ref()).collect();
            Some(batch_tensor(&t, device)?)
        } else {
            None
        };
        let labels: Vec<BlockLabels> = samples.iter().map(|s| s.labels.clone()).collect();
        let self_labels: Vec<BlockLabels> = samples.iter().map(|s| s.self_labels.clone()).collect();
        Ok(Self {
            content: batch_tensor(&content, device)?,
            references: batch_tensor(&refs, device)?.reshape((samples.len(), k, 1, size, size))?,
            target,
            masks: LayoutMasks::from_labels(&labels, DType::F32, device)?,
            self_masks: LayoutMasks::from_labels(&self_labels, DType::F32, device)?,
            codepoints: samples.iter().map(|s| s.codepoint).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.codepoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codepoints.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{synthetic_table, StrokeFont};

    #[test]
    fn samples_cover_fonts_and_targets() {
        let table = synthetic_table(30, 4);
        let cps: Vec<u32> = table.codepoints().collect();
        let mut fonts = StrokeFont::family(2, 1);
        fonts.push(StrokeFont::content());
        let corpus = GlyphCorpus::render_synthetic(&fonts, &table, &cps, 32).unwrap();
        let pool: BTreeSet<u32> = cps[20..].iter().copied().collect();
        let ids: Vec<String> = fonts[..2].iter().map(|f| f.id.clone()).collect();
        let content_id = fonts[2].id.clone();
        let s = build_samples(&corpus, &table, &content_id, &ids, &cps[..5], &pool, 3, 8).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|x| x.references.len() == 3 && x.target.is_some()));
        assert!(s.iter().all(|x| x.references.iter().all(|r| r.font_id == x.font_id)));
        let b = SampleBatch::new(&s.iter().take(4).collect::<Vec<_>>(), &Device::Cpu).unwrap();
        assert_eq!(b.references.dims(), [4, 3, 1, 32, 32]);
        assert_eq!(b.content.dims(), [4, 1, 32, 32]);
        assert!(matches!(
            build_samples(&corpus, &table, &content_id, &ids, &cps[..1], &pool, 0, 8),
            Err(Error::EmptyReferences)
        ));
    }
}
