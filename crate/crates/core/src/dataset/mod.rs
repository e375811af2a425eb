//! Glyph ingestion, dataset splits and structure-aware reference selection.

pub mod synth;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyph::GlyphImage;
use crate::structure::StructureTable;

pub use synth::{StrokeFont, StrokeStyle};

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Where glyphs come from.
pub enum FontSource {
    /// A TrueType/OpenType file rasterized on the fly.
    FontFile { id: String, font: ab_glyph::FontVec },
    /// A directory of pre-rendered 8-bit PNGs indexed by a manifest.
    ImageDir { id: String, corpus: Arc<ImageDirIndex> },
    /// A procedural stroke font over a composition table.
    Synthetic { font: StrokeFont, table: Arc<StructureTable> },
}

impl FontSource {
    pub fn open_font_file(path: &Path) -> Result<Self> {
        let unreadable = |reason: String| Error::UnreadableSource {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| unreadable(e.to_string()))?;
        let font = ab_glyph::FontVec::try_from_vec(bytes).map_err(|e| unreadable(e.to_string()))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "font".into());
        Ok(FontSource::FontFile { id, font })
    }

    pub fn id(&self) -> &str {
        match self {
            FontSource::FontFile { id, .. } | FontSource::ImageDir { id, .. } => id,
            FontSource::Synthetic { font, .. } => &font.id,
        }
    }
}

pub fn render_glyph(source: &FontSource, codepoint: u32, size: usize) -> Result<GlyphImage> {
    if size == 0 {
        return Err(Error::shape("size > 0", size));
    }
    match source {
        FontSource::FontFile { id, font } => rasterize(font, id, codepoint, size),
        FontSource::ImageDir { id, corpus } => {
            let glyph = corpus.load(id, codepoint)?;
            Ok(glyph.resized(size))
        }
        FontSource::Synthetic { font, table } => font.render(codepoint, table, size),
    }
}

fn rasterize(font: &ab_glyph::FontVec, id: &str, codepoint: u32, size: usize) -> Result<GlyphImage> {
    use ab_glyph::{point, Font, ScaleFont};

    let ch = char::from_u32(codepoint).ok_or(Error::MissingGlyph(codepoint))?;
    let glyph_id = font.glyph_id(ch);
    if glyph_id.0 == 0 {
        return Err(Error::MissingGlyph(codepoint));
    }
    let scale = ab_glyph::PxScale::from(size as f32 * 0.85);
    let scaled = font.as_scaled(scale);
    let glyph = glyph_id.with_scale_and_position(scale, point(0.0, scaled.ascent()));
    let outlined = font.outline_glyph(glyph).ok_or(Error::MissingGlyph(codepoint))?;
    let bounds = outlined.px_bounds();
    let off_x = ((size as f32 - bounds.width()) / 2.0).floor() as i64;
    let off_y = ((size as f32 - bounds.height()) / 2.0).floor() as i64;
    let mut ink = vec![0.0f32; size * size];
    outlined.draw(|x, y, c| {
        let (x, y) = (x as i64 + off_x, y as i64 + off_y);
        if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
            let i = y as usize * size + x as usize;
            ink[i] = ink[i].max(c.clamp(0.0, 1.0));
        }
    });
    let max = ink.iter().copied().fold(0.0f32, f32::max);
    let pixels = ink.into_iter().map(|c| if max > 0.0 { 1.0 - c / max } else { 1.0 }).collect();
    GlyphImage::new(size, pixels, codepoint, id)
}

/// One manifest record: `font_id`, hex `codepoint`, `relative_path`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub font_id: String,
    pub codepoint: u32,
    pub relative_path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::UnreadableSource {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("font_id") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || Error::UnreadableSource {
            path: path.to_path_buf(),
            reason: format!("malformed manifest line {}", i + 1),
        };
        if fields.len() != 3 {
            return Err(bad());
        }
        let codepoint = u32::from_str_radix(fields[1].trim_start_matches("U+"), 16).map_err(|_| bad())?;
        records.push(ManifestRecord {
            font_id: fields[0].to_string(),
            codepoint,
            relative_path: PathBuf::from(fields[2]),
        });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::from("font_id\tcodepoint\trelative_path\n");
    for r in records {
        out.push_str(&format!("{}\t{:04X}\t{}\n", r.font_id, r.codepoint, r.relative_path.display()));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Manifest-backed index over a directory of glyph PNGs.
#[derive(Clone, Debug)]
pub struct ImageDirIndex {
    root: PathBuf,
    paths: HashMap<(String, u32), PathBuf>,
}

impl ImageDirIndex {
    pub fn open(root: &Path) -> Result<Self> {
        let records = read_manifest(&root.join(MANIFEST_FILE))?;
        let paths = records.into_iter().map(|r| ((r.font_id, r.codepoint), r.relative_path)).collect();
        Ok(Self {
            root: root.to_path_buf(),
            paths,
        })
    }

    pub fn fonts(&self) -> BTreeSet<String> {
        self.paths.keys().map(|k| k.0.clone()).collect()
    }

    pub fn contains(&self, font_id: &str, codepoint: u32) -> bool {
        self.paths.contains_key(&(font_id.to_string(), codepoint))
    }

    pub fn load(&self, font_id: &str, codepoint: u32) -> Result<GlyphImage> {
        let rel = self.paths.get(&(font_id.to_string(), codepoint)).ok_or(Error::MissingGlyph(codepoint))?;
        GlyphImage::load_png(&self.root.join(rel), codepoint, font_id)
    }
}

/// In-memory glyph set keyed by `(font_id, codepoint)`.
#[derive(Clone, Debug, Default)]
pub struct GlyphCorpus {
    glyphs: HashMap<(String, u32), GlyphImage>,
}

impl GlyphCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, glyph: GlyphImage) {
        self.glyphs.insert((glyph.font_id.clone(), glyph.codepoint), glyph);
    }

    pub fn get(&self, font_id: &str, codepoint: u32) -> Option<&GlyphImage> {
        self.glyphs.get(&(font_id.to_string(), codepoint))
    }

    pub fn require(&self, font_id: &str, codepoint: u32) -> Result<&GlyphImage> {
        self.get(font_id, codepoint).ok_or_else(|| Error::MissingGroundTruth {
            font_id: font_id.to_string(),
            codepoint,
        })
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn fonts(&self) -> BTreeSet<String> {
        self.glyphs.keys().map(|k| k.0.clone()).collect()
    }

    pub fn glyphs(&self) -> impl Iterator<Item = &GlyphImage> {
        self.glyphs.values()
    }

    /// Renders every `(font, codepoint)` pair of a synthetic family.
    pub fn render_synthetic(fonts: &[StrokeFont], table: &StructureTable, codepoints: &[u32], size: usize) -> Result<Self> {
        let mut corpus = Self::new();
        for font in fonts {
            for &cp in codepoints {
                corpus.insert(font.render(cp, table, size)?);
            }
        }
        Ok(corpus)
    }

    /// Writes PNGs as `<font>/<HEX>.png` plus the manifest.
    pub fn write_dir(&self, root: &Path) -> Result<()> {
        let mut records: Vec<ManifestRecord> = self
            .glyphs
            .values()
            .map(|g| ManifestRecord {
                font_id: g.font_id.clone(),
                codepoint: g.codepoint,
                relative_path: PathBuf::from(&g.font_id).join(format!("{:04X}.png", g.codepoint)),
            })
            .collect();
        records.sort_by(|a, b| (&a.font_id, a.codepoint).cmp(&(&b.font_id, b.codepoint)));
        for r in &records {
            let path = root.join(&r.relative_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            self.glyphs[&(r.font_id.clone(), r.codepoint)].save_png(&path)?;
        }
        write_manifest(&root.join(MANIFEST_FILE), &records)
    }

    pub fn load_dir(root: &Path) -> Result<Self> {
        let index = ImageDirIndex::open(root)?;
        let mut corpus = Self::new();
        for (font_id, cp) in index.paths.keys() {
            corpus.insert(index.load(font_id, *cp)?);
        }
        Ok(corpus)
    }
}

/// Split sizes: absolute counts or fractions of the charset summing to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitRatios {
    Counts(usize, usize, usize),
    Fractions(f64, f64, f64),
}

impl SplitRatios {
    fn counts(self, n: usize) -> Result<(usize, usize, usize)> {
        match self {
            SplitRatios::Counts(a, b, c) => {
                if a + b + c > n {
                    return Err(Error::BadRatio(format!("{a}+{b}+{c} exceeds charset size {n}")));
                }
                Ok((a, b, c))
            }
            SplitRatios::Fractions(a, b, c) => {
                if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
                    return Err(Error::BadRatio(format!("fractions {a}, {b}, {c} must sum to 1")));
                }
                let refs = (b * n as f64).floor() as usize;
                let unseen = (c * n as f64).floor() as usize;
                Ok((n - refs - unseen, refs, unseen))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub seen_chars: BTreeSet<u32>,
    pub reference_chars: BTreeSet<u32>,
    pub unseen_chars: BTreeSet<u32>,
    pub seen_fonts: BTreeSet<String>,
    pub unseen_fonts: BTreeSet<String>,
}

/// Deterministic seeded partition of characters into seen/reference/unseen and
/// of fonts into seen/unseen (`unseen_fonts` of them held out).
pub fn build_splits(charset: &[u32], font_ids: &[String], ratios: SplitRatios, unseen_fonts: usize, seed: u64) -> Result<DatasetSplits> {
    let mut chars: Vec<u32> = charset.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let (n_seen, n_ref, n_unseen) = ratios.counts(chars.len())?;
    let mut fonts: Vec<String> = font_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if unseen_fonts > fonts.len() {
        return Err(Error::BadRatio(format!("{unseen_fonts} unseen fonts requested from {}", fonts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chars.shuffle(&mut rng);
    fonts.shuffle(&mut rng);
    let mut it = chars.into_iter();
    let seen_chars = it.by_ref().take(n_seen).collect();
    let reference_chars = it.by_ref().take(n_ref).collect();
    let unseen_chars = it.by_ref().take(n_unseen).collect();
    let unseen: BTreeSet<String> = fonts.iter().take(unseen_fonts).cloned().collect();
    let seen = fonts.into_iter().skip(unseen_fonts).collect();
    Ok(DatasetSplits {
        seen_chars,
        reference_chars,
        unseen_chars,
        seen_fonts: seen,
        unseen_fonts: unseen,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceAssignment {
    pub target: u32,
    pub references: Vec<u32>,
}

/// Greedy maximum-coverage choice of `k` reference characters.
///
/// Each pick takes the reference sharing the most not-yet-covered structure
/// components with the target, lowest codepoint first on ties. Once coverage
/// saturates the remaining picks are the lowest unused codepoints. A pool
/// smaller than `k` is cycled.
pub fn select_references(target: u32, reference_chars: &BTreeSet<u32>, table: &StructureTable, k: usize) -> Result<ReferenceAssignment> {
    if reference_chars.is_empty() {
        return Err(Error::EmptyReferencePool);
    }
    let components = |cp: u32| -> Result<BTreeSet<&str>> {
        let entry = table.get(cp).ok_or(Error::UnknownCharacter(cp))?;
        Ok(entry.components.iter().map(String::as_str).collect())
    };
    let mut uncovered = components(target)?;
    let mut pool: Vec<(u32, BTreeSet<&str>)> = reference_chars.iter().map(|&cp| Ok((cp, components(cp)?))).collect::<Result<_>>()?;
    let mut references = Vec::with_capacity(k);
    while references.len() < k && !pool.is_empty() {
        // Pool is sorted by codepoint, so the first maximum is the lowest codepoint.
        let (best, _) = pool
            .iter()
            .enumerate()
            .map(|(i, (_, comps))| (i, comps.intersection(&uncovered).count()))
            .fold((0, 0), |acc, (i, gain)| if gain > acc.1 { (i, gain) } else { acc });
        let (cp, comps) = pool.remove(best);
        uncovered.retain(|c| !comps.contains(c));
        references.push(cp);
    }
    let picked = references.clone();
    for i in 0.. {
        if references.len() >= k {
            break;
        }
        references.push(picked[i % picked.len()]);
    }
    Ok(ReferenceAssignment { target, references })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::StructureCategory;
    use proptest::prelude::*;

    fn toy_table(entries: &[(u32, &[&str])]) -> StructureTable {
        let mut t = StructureTable::new();
        for (cp, comps) in entries {
            let cat = match comps.len() {
                1 => StructureCategory::Independent,
                2 => StructureCategory::LeftRight,
                _ => StructureCategory::LeftCenterRight,
            };
            t.insert(*cp, cat, comps.iter().map(|s| s.to_string()).collect());
        }
        t
    }

    #[test]
    fn full_split_sizes() {
        let charset: Vec<u32> = (0..3499).map(|i| 0x4E00 + i).collect();
        let fonts: Vec<String> = (0..20).map(|i| format!("f{i}")).collect();
        let s = build_splits(&charset, &fonts, SplitRatios::Counts(2841, 158, 500), 10, 7).unwrap();
        assert_eq!(s.seen_chars.len(), 2841);
        assert_eq!(s.reference_chars.len(), 158);
        assert_eq!(s.unseen_chars.len(), 500);
        assert_eq!(s.unseen_fonts.len(), 10);
        assert!(s.seen_chars.is_disjoint(&s.reference_chars));
        assert!(s.seen_chars.is_disjoint(&s.unseen_chars));
        assert!(s.reference_chars.is_disjoint(&s.unseen_chars));
        assert!(s.seen_fonts.is_disjoint(&s.unseen_fonts));
    }

    #[test]
    fn splits_are_deterministic_and_validate() {
        let charset: Vec<u32> = (0..10).collect();
        let fonts = vec!["a".to_string(), "b".to_string()];
        let a = build_splits(&charset, &fonts, SplitRatios::Counts(8, 1, 1), 1, 42).unwrap();
        let b = build_splits(&charset, &fonts, SplitRatios::Counts(8, 1, 1), 1, 42).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            build_splits(&charset, &fonts, SplitRatios::Counts(9, 9, 9), 0, 1),
            Err(Error::BadRatio(_))
        ));
        let f = build_splits(&charset, &fonts, SplitRatios::Fractions(0.8, 0.1, 0.1), 0, 1).unwrap();
        assert_eq!((f.seen_chars.len(), f.reference_chars.len(), f.unseen_chars.len()), (8, 1, 1));
        assert!(build_splits(&charset, &fonts, SplitRatios::Fractions(0.8, 0.3, 0.1), 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn splits_disjoint_for_any_seed(seed in any::<u64>(), n in 3usize..60) {
            let charset: Vec<u32> = (0..n as u32).collect();
            let fonts: Vec<String> = (0..4).map(|i| i.to_string()).collect();
            let s = build_splits(&charset, &fonts, SplitRatios::Counts(n - 2, 1, 1), 1, seed).unwrap();
            prop_assert_eq!(s.seen_chars.len() + s.reference_chars.len() + s.unseen_chars.len(), n);
            prop_assert!(s.seen_chars.is_disjoint(&s.reference_chars));
            prop_assert!(s.unseen_chars.is_disjoint(&s.reference_chars));
            prop_assert!(s.unseen_chars.is_disjoint(&s.seen_chars));
        }
    }

    #[test]
    fn coverage_dominance() {
        let t = toy_table(&[(1, &["A", "B"]), (10, &["A", "C"]), (11, &["A", "B"])]);
        let pool: BTreeSet<u32> = [10, 11].into();
        let r = select_references(1, &pool, &t, 1).unwrap();
        assert_eq!(r.references, vec![11]);
    }

    #[test]
    fn padding_with_lowest_codepoints() {
        let t = toy_table(&[(1, &["A", "B"]), (30, &["X"]), (20, &["Y"]), (40, &["Z"]), (10, &["W"])]);
        let pool: BTreeSet<u32> = [10, 20, 30, 40].into();
        let r = select_references(1, &pool, &t, 3).unwrap();
        assert_eq!(r.references, vec![10, 20, 30]);
    }

    #[test]
    fn empty_pool_and_small_pool() {
        let t = toy_table(&[(1, &["A"]), (2, &["A"])]);
        assert!(matches!(select_references(1, &BTreeSet::new(), &t, 3), Err(Error::EmptyReferencePool)));
        let r = select_references(1, &[2].into(), &t, 3).unwrap();
        assert_eq!(r.references, vec![2, 2, 2]);
    }

    fn covered(target: &BTreeSet<&str>, picks: &[u32], t: &StructureTable) -> usize {
        let mut got = BTreeSet::new();
        for p in picks {
            for c in &t.get(*p).unwrap().components {
                if target.contains(c.as_str()) {
                    got.insert(c.clone());
                }
            }
        }
        got.len()
    }

    #[test]
    fn matches_exhaustive_subset_search_on_toy_table() {
        let t = toy_table(&[
            (100, &["A", "B", "C", "D"]),
            (1, &["A"]),
            (2, &["B", "E"]),
            (3, &["C", "D"]),
            (4, &["A", "B"]),
            (5, &["E", "F"]),
            (6, &["D"]),
            (7, &["F", "G"]),
            (8, &["A", "C"]),
            (9, &["G"]),
        ]);
        let pool: BTreeSet<u32> = (1..=9).collect();
        let target: BTreeSet<&str> = ["A", "B", "C", "D"].into();
        // Exhaustive search over all 3-subsets in lexicographic codepoint order.
        let ids: Vec<u32> = pool.iter().copied().collect();
        let mut best = (0, vec![]);
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                for l in j + 1..ids.len() {
                    let pick = vec![ids[i], ids[j], ids[l]];
                    let c = covered(&target, &pick, &t);
                    if c > best.0 {
                        best = (c, pick);
                    }
                }
            }
        }
        let r = select_references(100, &pool, &t, 3).unwrap();
        assert_eq!(covered(&target, &r.references, &t), best.0);
        assert_eq!(best.0, 4);
    }

    proptest! {
        #[test]
        fn greedy_matches_naive_greedy_oracle(
            comps in proptest::collection::vec(proptest::collection::btree_set(0u8..8, 1..4), 2..12),
            k in 1usize..4,
        ) {
            let names: Vec<Vec<String>> = comps.iter().map(|s| s.iter().map(|c| format!("c{c}")).collect()).collect();
            let mut t = StructureTable::new();
            for (i, n) in names.iter().enumerate() {
                t.insert(i as u32, StructureCategory::Independent, n.clone());
            }
            let pool: BTreeSet<u32> = (1..names.len() as u32).collect();
            let r = select_references(0, &pool, &t, k).unwrap();
            prop_assert_eq!(r.references.len(), k);
            prop_assert!(r.references.iter().all(|c| pool.contains(c)));
            // Naive oracle: recompute gains from scratch each round.
            let target: BTreeSet<String> = names[0].iter().cloned().collect();
            let mut covered_set: BTreeSet<String> = BTreeSet::new();
            let mut used: BTreeSet<u32> = BTreeSet::new();
            for _ in 0..k.min(pool.len()) {
                let mut best: Option<(usize, u32)> = None;
                for &cp in &pool {
                    if used.contains(&cp) { continue; }
                    let gain = names[cp as usize].iter().filter(|c| target.contains(*c) && !covered_set.contains(*c)).count();
                    if best.is_none_or(|(g, _)| gain > g) { best = Some((gain, cp)); }
                }
                let (_, cp) = best.unwrap();
                used.insert(cp);
                covered_set.extend(names[cp as usize].iter().filter(|c| target.contains(*c)).cloned());
            }
            let got: BTreeSet<String> = r.references.iter()
                .flat_map(|cp| names[*cp as usize].iter().filter(|c| target.contains(*c)).cloned())
                .collect();
            prop_assert_eq!(got.len(), covered_set.len());
        }
    }

    #[test]
    fn image_dir_ingestion_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let table = synth::synthetic_table(4, 2);
        let cps: Vec<u32> = table.codepoints().collect();
        let corpus = GlyphCorpus::render_synthetic(&[StrokeFont::content()], &table, &cps, 32).unwrap();
        corpus.write_dir(dir.path()).unwrap();
        let index = Arc::new(ImageDirIndex::open(dir.path()).unwrap());
        let src = FontSource::ImageDir {
            id: "content".into(),
            corpus: index,
        };
        let g = render_glyph(&src, cps[0], 32).unwrap();
        let png = image::open(dir.path().join("content").join(format!("{:04X}.png", cps[0]))).unwrap().to_luma8();
        let expected: Vec<f32> = png.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect();
        assert_eq!(g.pixels, expected);
        assert!(matches!(render_glyph(&src, 0xE000, 32), Err(Error::MissingGlyph(0xE000))));
        let reloaded = GlyphCorpus::load_dir(dir.path()).unwrap();
        assert_eq!(reloaded.len(), 4);
    }

    #[test]
    fn unreadable_sources() {
        assert!(matches!(
            FontSource::open_font_file(Path::new("/nonexistent/font.ttf")),
            Err(Error::UnreadableSource { .. })
        ));
        assert!(matches!(ImageDirIndex::open(Path::new("/nonexistent")), Err(Error::UnreadableSource { .. })));
    }
}
