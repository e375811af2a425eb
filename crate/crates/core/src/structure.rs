//! Character structure categories and their partition of a latent patch grid.
//!
//! Every character belongs to one of twelve spatial arrangements. A
//! [`ComponentLayout`] assigns each `(row, col)` position of an `h x w`
//! feature grid to exactly one structure component, using fixed fractional
//! boundaries per category:
//!
//! * two-way splits cut at `floor(extent / 2)`, three-way splits at
//!   `floor(extent / 3)` and `floor(2 * extent / 3)`;
//! * enclosing categories give the enclosing component a frame (or L/U shape)
//!   `ceil(extent / 8)` patches thick, the enclosed component keeps the rest.
//!
//! Component 0 is the left/top part, or the enclosing part for encompassed
//! categories.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureCategory {
    LeftRight,
    LeftCenterRight,
    TopBottom,
    TopCenterBottom,
    FullyEncompassed,
    TopThreeEncompassed,
    LeftThreeEncompassed,
    BottomThreeEncompassed,
    TopLeftEncompassed,
    TopRightEncompassed,
    BottomLeftEncompassed,
    Independent,
}

impl StructureCategory {
    pub const ALL: [StructureCategory; 12] = [
        StructureCategory::LeftRight,
        StructureCategory::LeftCenterRight,
        StructureCategory::TopBottom,
        StructureCategory::TopCenterBottom,
        StructureCategory::FullyEncompassed,
        StructureCategory::TopThreeEncompassed,
        StructureCategory::LeftThreeEncompassed,
        StructureCategory::BottomThreeEncompassed,
        StructureCategory::TopLeftEncompassed,
        StructureCategory::TopRightEncompassed,
        StructureCategory::BottomLeftEncompassed,
        StructureCategory::Independent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StructureCategory::LeftRight => "left-right",
            StructureCategory::LeftCenterRight => "left-center-right",
            StructureCategory::TopBottom => "top-bottom",
            StructureCategory::TopCenterBottom => "top-center-bottom",
            StructureCategory::FullyEncompassed => "fully-encompassed",
            StructureCategory::TopThreeEncompassed => "top-three-encompassed",
            StructureCategory::LeftThreeEncompassed => "left-three-encompassed",
            StructureCategory::BottomThreeEncompassed => "bottom-three-encompassed",
            StructureCategory::TopLeftEncompassed => "top-left-encompassed",
            StructureCategory::TopRightEncompassed => "top-right-encompassed",
            StructureCategory::BottomLeftEncompassed => "bottom-left-encompassed",
            StructureCategory::Independent => "independent",
        }
    }

    /// Number of structure components `m` for characters of this category.
    pub fn arity(self) -> usize {
        match self {
            StructureCategory::Independent => 1,
            StructureCategory::LeftCenterRight | StructureCategory::TopCenterBottom => 3,
            _ => 2,
        }
    }

    pub fn is_encompassed(self) -> bool {
        use StructureCategory::*;
        matches!(
            self,
            FullyEncompassed
                | TopThreeEncompassed
                | LeftThreeEncompassed
                | BottomThreeEncompassed
                | TopLeftEncompassed
                | TopRightEncompassed
                | BottomLeftEncompassed
        )
    }

    /// Which sides of the grid the enclosing frame covers: (top, bottom, left, right).
    fn frame_sides(self) -> (bool, bool, bool, bool) {
        use StructureCategory::*;
        match self {
            FullyEncompassed => (true, true, true, true),
            TopThreeEncompassed => (true, false, true, true),
            LeftThreeEncompassed => (true, true, true, false),
            BottomThreeEncompassed => (false, true, true, true),
            TopLeftEncompassed => (true, false, true, false),
            TopRightEncompassed => (true, false, false, true),
            BottomLeftEncompassed => (false, true, true, false),
            _ => (false, false, false, false),
        }
    }

    /// Component index of grid position `(r, c)` on an `h x w` grid.
    fn component_at(self, r: usize, c: usize, h: usize, w: usize) -> usize {
        use StructureCategory::*;
        match self {
            Independent => 0,
            LeftRight => usize::from(c >= w / 2),
            TopBottom => usize::from(r >= h / 2),
            LeftCenterRight => third(c, w),
            TopCenterBottom => third(r, h),
            _ => {
                let (top, bottom, left, right) = self.frame_sides();
                let tr = frame_thickness(h);
                let tc = frame_thickness(w);
                let in_frame = (top && r < tr) || (bottom && r >= h.saturating_sub(tr)) || (left && c < tc) || (right && c >= w.saturating_sub(tc));
                usize::from(!in_frame)
            }
        }
    }
}

fn third(x: usize, extent: usize) -> usize {
    if x < extent / 3 {
        0
    } else if x < 2 * extent / 3 {
        1
    } else {
        2
    }
}

/// Frame thickness for enclosing components: two patches on a 16-wide grid.
pub fn frame_thickness(extent: usize) -> usize {
    extent.div_ceil(8)
}

impl fmt::Display for StructureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructureCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StructureCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Unsupported(format!("unknown structure category {s:?}")))
    }
}

/// One character's entry in the structure table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructureEntry {
    pub category: StructureCategory,
    /// Named structure components (radicals), used for reference selection.
    pub components: Vec<String>,
}

/// Character to structure-category map, loaded from a text file with one
/// record per line: `<hex codepoint> <category> [<component>,<component>...]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StructureTable {
    entries: BTreeMap<u32, StructureEntry>,
}

impl StructureTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, codepoint: u32, category: StructureCategory, components: Vec<String>) {
        self.entries.insert(codepoint, StructureEntry { category, components });
    }

    pub fn get(&self, codepoint: u32) -> Option<&StructureEntry> {
        self.entries.get(&codepoint)
    }

    pub fn contains(&self, codepoint: u32) -> bool {
        self.entries.contains_key(&codepoint)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn codepoints(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &StructureEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut table = Self::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let bad = |what: &str| Error::Unsupported(format!("structure table line {}: {what}", lineno + 1));
            let cp = fields.next().ok_or_else(|| bad("missing codepoint"))?;
            let cp = u32::from_str_radix(cp.trim_start_matches("U+"), 16).map_err(|_| bad("bad hex codepoint"))?;
            let category: StructureCategory = fields.next().ok_or_else(|| bad("missing category"))?.parse()?;
            let components = fields
                .next()
                .map(|s| s.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
                .unwrap_or_default();
            table.insert(cp, category, components);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::UnreadableSource {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(std::io::BufReader::new(file))
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        for (cp, entry) in &self.entries {
            write!(out, "{cp:04X}\t{}", entry.category)?;
            if !entry.components.is_empty() {
                write!(out, "\t{}", entry.components.join(","))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

pub fn classify_structure(codepoint: u32, table: &StructureTable) -> Result<StructureCategory> {
    table.get(codepoint).map(|e| e.category).ok_or(Error::UnknownCharacter(codepoint))
}

/// Partition of an `h x w` grid into a character's structure components.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLayout {
    pub codepoint: u32,
    pub category: StructureCategory,
    pub h: usize,
    pub w: usize,
    /// Patch positions `(row, col)` of each component, row-major within a component.
    pub components: Vec<Vec<(usize, usize)>>,
}

impl ComponentLayout {
    /// Per-position component index in row-major order.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.h * self.w];
        for (i, comp) in self.components.iter().enumerate() {
            for &(r, c) in comp {
                labels[r * self.w + c] = i;
            }
        }
        labels
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "codepoint": format!("U+{:04X}", self.codepoint),
            "category": self.category.name(),
            "grid": [self.h, self.w],
            "components": self.components,
        })
        .to_string()
    }
}

pub fn decompose(codepoint: u32, category: StructureCategory, grid: (usize, usize)) -> Result<ComponentLayout> {
    let (h, w) = grid;
    let too_small = || Error::GridTooSmall {
        category: category.name().to_string(),
        h,
        w,
    };
    if h < 2 || w < 2 {
        return Err(too_small());
    }
    let mut components = vec![Vec::new(); category.arity()];
    for r in 0..h {
        for c in 0..w {
            components[category.component_at(r, c, h, w)].push((r, c));
        }
    }
    if components.iter().any(Vec::is_empty) {
        return Err(too_small());
    }
    Ok(ComponentLayout {
        codepoint,
        category,
        h,
        w,
        components,
    })
}

pub fn component_count(layout: &ComponentLayout) -> usize {
    layout.components.len()
}
