//! Procedural stroke fonts.
//!
//! Characters are composed from a small library of stroke-built radicals placed
//! into the boxes their structure category dictates, so the structure table is
//! ground truth for how every glyph is laid out. Fonts differ in stroke weight,
//! horizontal/vertical contrast, slant, wobble, end serifs and overall extent.
//! Rendering is pure `f32` arithmetic and bit-identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::glyph::GlyphImage;
use crate::structure::{StructureCategory, StructureTable};

type Pt = (f32, f32);
type Stroke = Vec<Pt>;

/// First codepoint handed out by [`synthetic_table`].
pub const SYNTH_BASE: u32 = 0x4E00;

pub const CONTENT_FONT_ID: &str = "content";

fn radical(name: &str) -> Option<Vec<Stroke>> {
    let h = |y: f32, x0: f32, x1: f32| vec![(x0, y), (x1, y)];
    let v = |x: f32, y0: f32, y1: f32| vec![(x, y0), (x, y1)];
    let strokes = match name {
        "yi" => vec![h(0.5, 0.05, 0.95)],
        "er" => vec![h(0.3, 0.2, 0.8), h(0.75, 0.05, 0.95)],
        "san" => vec![h(0.15, 0.15, 0.85), h(0.5, 0.25, 0.75), h(0.85, 0.05, 0.95)],
        "shi" => vec![h(0.4, 0.05, 0.95), v(0.5, 0.05, 0.95)],
        "kou" => vec![v(0.15, 0.15, 0.85), vec![(0.15, 0.15), (0.85, 0.15), (0.85, 0.85)], h(0.85, 0.15, 0.85)],
        "ri" => vec![
            v(0.2, 0.05, 0.95),
            vec![(0.2, 0.05), (0.8, 0.05), (0.8, 0.95)],
            h(0.5, 0.2, 0.8),
            h(0.95, 0.2, 0.8),
        ],
        "tian" => vec![
            v(0.1, 0.1, 0.9),
            vec![(0.1, 0.1), (0.9, 0.1), (0.9, 0.9)],
            h(0.5, 0.1, 0.9),
            v(0.5, 0.1, 0.9),
            h(0.9, 0.1, 0.9),
        ],
        "mu" => vec![
            h(0.3, 0.05, 0.95),
            v(0.5, 0.02, 0.98),
            vec![(0.48, 0.35), (0.1, 0.8)],
            vec![(0.52, 0.35), (0.9, 0.8)],
        ],
        "ren" => vec![vec![(0.5, 0.05), (0.45, 0.4), (0.08, 0.95)], vec![(0.5, 0.35), (0.92, 0.95)]],
        "da" => vec![
            h(0.35, 0.05, 0.95),
            vec![(0.5, 0.05), (0.45, 0.45), (0.08, 0.95)],
            vec![(0.52, 0.42), (0.92, 0.95)],
        ],
        "tu" => vec![h(0.4, 0.2, 0.8), v(0.5, 0.08, 0.9), h(0.9, 0.05, 0.95)],
        "wang" => vec![h(0.1, 0.15, 0.85), h(0.5, 0.2, 0.8), h(0.92, 0.05, 0.95), v(0.5, 0.1, 0.92)],
        "gong" => vec![h(0.12, 0.15, 0.85), v(0.5, 0.12, 0.88), h(0.88, 0.05, 0.95)],
        "shui" => vec![vec![(0.3, 0.08), (0.45, 0.2)], vec![(0.2, 0.4), (0.38, 0.52)], vec![(0.15, 0.95), (0.5, 0.65)]],
        "xiao" => vec![
            vec![(0.5, 0.05), (0.5, 0.9), (0.4, 0.82)],
            vec![(0.25, 0.35), (0.1, 0.7)],
            vec![(0.75, 0.35), (0.9, 0.7)],
        ],
        "shan" => vec![v(0.5, 0.05, 0.9), vec![(0.12, 0.35), (0.12, 0.9), (0.88, 0.9)], v(0.88, 0.35, 0.9)],
        "yue" => vec![
            vec![(0.2, 0.05), (0.2, 0.7), (0.08, 0.95)],
            vec![(0.2, 0.05), (0.8, 0.05), (0.8, 0.95), (0.68, 0.88)],
            h(0.38, 0.2, 0.8),
            h(0.64, 0.2, 0.8),
        ],
        "zi" => vec![
            vec![(0.15, 0.1), (0.8, 0.1), (0.5, 0.38)],
            vec![(0.5, 0.38), (0.5, 0.92), (0.38, 0.85)],
            h(0.55, 0.05, 0.95),
        ],
        "nv" => vec![
            vec![(0.45, 0.05), (0.2, 0.65), (0.85, 0.95)],
            vec![(0.7, 0.3), (0.55, 0.7), (0.1, 0.95)],
            h(0.45, 0.05, 0.95),
        ],
        "huo" => vec![
            vec![(0.2, 0.25), (0.3, 0.45)],
            vec![(0.8, 0.25), (0.7, 0.45)],
            vec![(0.5, 0.05), (0.45, 0.5), (0.1, 0.95)],
            vec![(0.5, 0.5), (0.92, 0.95)],
        ],
        _ => return None,
    };
    Some(strokes)
}

pub const RADICALS: [&str; 19] = [
    "yi", "er", "san", "shi", "kou", "ri", "tian", "mu", "ren", "da", "tu", "wang", "gong", "shui", "xiao", "shan", "yue", "zi", "nv",
];

/// Strokes of the enclosing part of an encompassed character, in glyph-box coordinates.
fn frame_strokes(category: StructureCategory, variant: u8) -> Vec<Stroke> {
    use StructureCategory::*;
    let (lo, hi) = (0.06, 0.94);
    let mut strokes = match category {
        FullyEncompassed => vec![vec![(lo, lo), (lo, hi)], vec![(lo, lo), (hi, lo), (hi, hi)], vec![(lo, hi), (hi, hi)]],
        TopThreeEncompassed => vec![vec![(lo, lo), (lo, hi)], vec![(lo, lo), (hi, lo), (hi, hi), (hi - 0.08, hi - 0.05)]],
        LeftThreeEncompassed => vec![vec![(lo, lo), (hi, lo)], vec![(lo, lo), (lo, hi), (hi, hi)]],
        BottomThreeEncompassed => vec![vec![(lo, 0.25), (lo, hi), (hi, hi)], vec![(hi, 0.25), (hi, hi)]],
        TopLeftEncompassed => vec![vec![(0.45, 0.0), (0.5, lo)], vec![(lo, lo), (hi, lo)], vec![(lo, lo), (lo, 0.7), (0.0, hi)]],
        TopRightEncompassed => vec![vec![(0.3, 0.0), (0.1, 0.35)], vec![(0.2, lo), (hi, lo), (hi, hi), (hi - 0.1, hi - 0.06)]],
        BottomLeftEncompassed => vec![
            vec![(0.08, 0.1), (0.14, 0.2)],
            vec![(0.02, 0.4), (0.12, 0.45), (0.12, 0.8), (0.03, 0.9)],
            vec![(0.12, 0.8), (0.3, 0.92), (1.0, hi)],
        ],
        _ => Vec::new(),
    };
    if variant % 2 == 1 {
        // Second variant carries an extra dot near the top-left corner of the frame.
        strokes.push(vec![(0.16, 0.02), (0.22, 0.1)]);
    }
    strokes
}

fn frame_name(category: StructureCategory, variant: u8) -> String {
    format!("frame-{}-{variant}", category.name())
}

fn parse_frame_name(name: &str) -> Option<(StructureCategory, u8)> {
    let rest = name.strip_prefix("frame-")?;
    let (cat, variant) = rest.rsplit_once('-')?;
    Some((cat.parse().ok()?, variant.parse().ok()?))
}

/// Unit-square boxes `(x0, y0, x1, y1)` for each component of a category, aligned
/// with the latent-grid partition.
fn component_boxes(category: StructureCategory) -> Vec<(f32, f32, f32, f32)> {
    use StructureCategory::*;
    let pad = 0.03;
    let t = 0.125 + 0.04;
    match category {
        Independent => vec![(0.0, 0.0, 1.0, 1.0)],
        LeftRight => vec![(0.0, 0.0, 0.5 - pad, 1.0), (0.5 + pad, 0.0, 1.0, 1.0)],
        TopBottom => vec![(0.0, 0.0, 1.0, 0.5 - pad), (0.0, 0.5 + pad, 1.0, 1.0)],
        LeftCenterRight => vec![
            (0.0, 0.0, 1.0 / 3.0 - pad, 1.0),
            (1.0 / 3.0 + pad, 0.0, 2.0 / 3.0 - pad, 1.0),
            (2.0 / 3.0 + pad, 0.0, 1.0, 1.0),
        ],
        TopCenterBottom => vec![
            (0.0, 0.0, 1.0, 1.0 / 3.0 - pad),
            (0.0, 1.0 / 3.0 + pad, 1.0, 2.0 / 3.0 - pad),
            (0.0, 2.0 / 3.0 + pad, 1.0, 1.0),
        ],
        _ => {
            let (top, bottom, left, right) = match category {
                FullyEncompassed => (true, true, true, true),
                TopThreeEncompassed => (true, false, true, true),
                LeftThreeEncompassed => (true, true, true, false),
                BottomThreeEncompassed => (false, true, true, true),
                TopLeftEncompassed => (true, false, true, false),
                TopRightEncompassed => (true, false, false, true),
                _ => (false, true, true, false),
            };
            let side = |on: bool| if on { t } else { 0.02 };
            vec![(0.0, 0.0, 1.0, 1.0), (side(left), side(top), 1.0 - side(right), 1.0 - side(bottom))]
        }
    }
}

/// Builds a synthetic structure table of `n` characters starting at [`SYNTH_BASE`].
///
/// Every character gets a distinct (category, components) composition.
pub fn synthetic_table(n: usize, seed: u64) -> StructureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = StructureTable::new();
    let mut used = std::collections::HashSet::new();
    let weights: [(StructureCategory, u32); 12] = [
        (StructureCategory::LeftRight, 30),
        (StructureCategory::TopBottom, 22),
        (StructureCategory::LeftCenterRight, 6),
        (StructureCategory::TopCenterBottom, 6),
        (StructureCategory::FullyEncompassed, 4),
        (StructureCategory::TopThreeEncompassed, 4),
        (StructureCategory::LeftThreeEncompassed, 3),
        (StructureCategory::BottomThreeEncompassed, 3),
        (StructureCategory::TopLeftEncompassed, 5),
        (StructureCategory::TopRightEncompassed, 4),
        (StructureCategory::BottomLeftEncompassed, 5),
        (StructureCategory::Independent, 8),
    ];
    let total: u32 = weights.iter().map(|w| w.1).sum();
    let mut cp = SYNTH_BASE;
    let mut attempts = 0;
    while table.len() < n {
        attempts += 1;
        let mut pick = rng.gen_range(0..total);
        let mut category = StructureCategory::Independent;
        for (c, w) in weights {
            if pick < w {
                category = c;
                break;
            }
            pick -= w;
        }
        // Independent characters are limited by the radical library; fall back to splits.
        if category == StructureCategory::Independent && attempts > 50 * n {
            category = StructureCategory::LeftRight;
        }
        let mut comps: Vec<String> = Vec::new();
        if category.is_encompassed() {
            comps.push(frame_name(category, rng.gen_range(0..2)));
            comps.push(RADICALS[rng.gen_range(0..RADICALS.len())].to_string());
        } else {
            for _ in 0..category.arity() {
                comps.push(RADICALS[rng.gen_range(0..RADICALS.len())].to_string());
            }
        }
        if used.insert((category, comps.clone())) {
            table.insert(cp, category, comps);
            cp += 1;
        }
    }
    table
}

/// Style parameters of one procedural font.
#[derive(Clone, Debug, PartialEq)]
pub struct StrokeStyle {
    /// Stroke half-width as a fraction of the image side.
    pub weight: f32,
    /// Width multiplier for near-horizontal strokes.
    pub contrast: f32,
    /// Horizontal shear applied around the glyph centre.
    pub slant: f32,
    /// Amplitude of per-point displacement.
    pub wobble: f32,
    /// Radius multiplier of end blobs; zero disables them.
    pub serif: f32,
    /// Fraction of the image covered by the glyph box.
    pub extent: f32,
}

impl StrokeStyle {
    pub fn content() -> Self {
        Self {
            weight: 0.035,
            contrast: 1.0,
            slant: 0.0,
            wobble: 0.0,
            serif: 0.0,
            extent: 0.86,
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            weight: rng.gen_range(0.028..0.06),
            contrast: rng.gen_range(0.45..1.0),
            slant: rng.gen_range(-0.14..0.14),
            wobble: rng.gen_range(0.0..0.02),
            serif: if rng.gen_bool(0.4) { rng.gen_range(1.3..1.8) } else { 0.0 },
            extent: rng.gen_range(0.78..0.92),
        }
    }
}

/// A procedural font: a style plus the composition table it draws from.
#[derive(Clone, Debug)]
pub struct StrokeFont {
    pub id: String,
    pub style: StrokeStyle,
    seed: u64,
}

impl StrokeFont {
    pub fn new(id: impl Into<String>, style: StrokeStyle, seed: u64) -> Self {
        Self { id: id.into(), style, seed }
    }

    pub fn content() -> Self {
        Self::new(CONTENT_FONT_ID, StrokeStyle::content(), 0)
    }

    /// `count` fonts with ids `font00`, `font01`, ...
    pub fn family(count: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let style = StrokeStyle::random(&mut rng);
                Self::new(format!("font{i:02}"), style, seed.wrapping_add(i as u64 + 1))
            })
            .collect()
    }

    fn strokes(&self, codepoint: u32, table: &StructureTable) -> Result<Vec<Stroke>> {
        let entry = table.get(codepoint).ok_or(Error::MissingGlyph(codepoint))?;
        let boxes = component_boxes(entry.category);
        let mut out = Vec::new();
        for (name, &(x0, y0, x1, y1)) in entry.components.iter().zip(&boxes) {
            let strokes = match parse_frame_name(name) {
                Some((cat, variant)) => frame_strokes(cat, variant),
                None => radical(name).ok_or(Error::MissingGlyph(codepoint))?,
            };
            for s in strokes {
                out.push(s.into_iter().map(|(x, y)| (x0 + x * (x1 - x0), y0 + y * (y1 - y0))).collect());
            }
        }
        if out.is_empty() {
            return Err(Error::MissingGlyph(codepoint));
        }
        Ok(out)
    }

    pub fn render(&self, codepoint: u32, table: &StructureTable, size: usize) -> Result<GlyphImage> {
        if size == 0 {
            return Err(Error::shape("size > 0", size));
        }
        let style = &self.style;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (u64::from(codepoint) << 20));
        let margin = (1.0 - style.extent) / 2.0;
        let segments: Vec<(Pt, Pt, f32)> = self
            .strokes(codepoint, table)?
            .into_iter()
            .flat_map(|stroke| {
                let pts: Vec<Pt> = stroke
                    .into_iter()
                    .map(|(x, y)| {
                        let jx = rng.gen_range(-1.0f32..=1.0) * style.wobble;
                        let jy = rng.gen_range(-1.0f32..=1.0) * style.wobble;
                        let x = margin + x * style.extent + jx;
                        let y = margin + y * style.extent + jy;
                        (x + style.slant * (0.5 - y), y)
                    })
                    .collect();
                pts.windows(2)
                    .map(|w| {
                        let (a, b) = (w[0], w[1]);
                        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                        let len = (dx * dx + dy * dy).sqrt().max(1e-6);
                        // Horizontal strokes are drawn thinner by `contrast`.
                        let horiz = (dx / len).abs();
                        let width = style.weight * (1.0 - horiz * (1.0 - style.contrast));
                        (a, b, width)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let blobs: Vec<(Pt, f32)> = if style.serif > 0.0 {
            segments.iter().flat_map(|&(a, b, w)| [(a, w * style.serif), (b, w * style.serif)]).collect()
        } else {
            Vec::new()
        };

        let px = 1.0 / size as f32;
        let mut pixels = vec![1.0f32; size * size];
        for r in 0..size {
            let y = (r as f32 + 0.5) * px;
            for c in 0..size {
                let x = (c as f32 + 0.5) * px;
                let mut ink = 0.0f32;
                for &(a, b, w) in &segments {
                    let d = seg_dist((x, y), a, b);
                    ink = ink.max(coverage(d, w, px));
                }
                for &(p, rad) in &blobs {
                    let d = ((x - p.0).powi(2) + (y - p.1).powi(2)).sqrt();
                    ink = ink.max(coverage(d, rad, px));
                }
                pixels[r * size + c] = 1.0 - ink;
            }
        }
        GlyphImage::new(size, pixels, codepoint, self.id.clone())
    }
}

fn coverage(dist: f32, half_width: f32, px: f32) -> f32 {
    ((half_width - dist) / px + 0.5).clamp(0.0, 1.0)
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_deterministic_and_distinct() {
        let a = synthetic_table(120, 3);
        let b = synthetic_table(120, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 120);
        let mut seen = std::collections::HashSet::new();
        for (_, e) in a.iter() {
            assert_eq!(e.components.len(), e.category.arity());
            assert!(seen.insert((e.category, e.components.clone())));
        }
    }

    #[test]
    fn all_radicals_and_frames_resolve() {
        for r in RADICALS {
            assert!(radical(r).is_some(), "{r}");
        }
        for cat in StructureCategory::ALL.into_iter().filter(|c| c.is_encompassed()) {
            let name = frame_name(cat, 1);
            assert_eq!(parse_frame_name(&name), Some((cat, 1)));
            assert!(!frame_strokes(cat, 0).is_empty());
        }
    }

    #[test]
    fn render_is_bit_identical_and_has_ink() {
        let table = synthetic_table(20, 1);
        let font = StrokeFont::family(2, 9).remove(1);
        for cp in table.codepoints() {
            let a = font.render(cp, &table, 32).unwrap();
            let b = font.render(cp, &table, 32).unwrap();
            assert_eq!(a.pixels, b.pixels);
            let ink = a.pixels.iter().filter(|&&p| p < 0.5).count();
            assert!(ink > 10 && ink < 32 * 32 / 2, "U+{cp:04X} ink {ink}");
        }
    }

    #[test]
    fn fonts_differ_in_style() {
        let table = synthetic_table(5, 1);
        let fonts = StrokeFont::family(3, 4);
        let cp = SYNTH_BASE;
        let a = fonts[0].render(cp, &table, 32).unwrap();
        let b = fonts[1].render(cp, &table, 32).unwrap();
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn missing_codepoint() {
        let table = synthetic_table(5, 1);
        assert!(matches!(StrokeFont::content().render(0xE000, &table, 32), Err(Error::MissingGlyph(0xE000))));
    }
}
