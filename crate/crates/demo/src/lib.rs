//! WebAssembly bindings for the browser demo. Every entry point returns JSON
//! (or a flat array) so the page needs no generated types beyond the glue.

use serde_json::json;
use vqfont_core::ssem::{self, BlockLabels};
use vqfont_core::structure::{decompose, ComponentLayout, StructureCategory};
use vqfont_core::vq::Codebook;
use wasm_bindgen::prelude::*;

fn category(name: &str) -> Result<StructureCategory, String> {
    name.trim().parse().map_err(|e: vqfont_core::Error| e.to_string())
}

fn layout(name: &str, grid: usize) -> Result<ComponentLayout, String> {
    decompose(0, category(name)?, (grid, grid)).map_err(|e| e.to_string())
}

/// Names of the structure categories, as a JSON array.
#[wasm_bindgen]
pub fn categories() -> String {
    json!(StructureCategory::ALL.iter().map(|c| c.name()).collect::<Vec<_>>()).to_string()
}

/// Component label of every patch of a `grid x grid` layout.
#[wasm_bindgen]
pub fn partition(category: &str, grid: usize) -> Result<String, String> {
    let l = layout(category, grid)?;
    Ok(json!({
        "category": l.category.name(),
        "grid": grid,
        "labels": l.labels(),
        "sizes": l.components.iter().map(Vec::len).collect::<Vec<_>>(),
    })
    .to_string())
}

/// Attention of one content patch over all reference patches, with and
/// without structure-level enhancement.
///
/// Patch logits are a stand-in for learned ones: negative squared distance
/// between patch positions, scaled by `sharpness`, so a content patch prefers
/// reference patches at the same place.
#[wasm_bindgen]
pub fn attention(content: &str, references: &str, grid: usize, sharpness: f64, row: usize) -> Result<String, String> {
    let c = layout(content, grid)?;
    let refs = references
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|r| layout(r, grid))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = BlockLabels::new(&c, &refs).map_err(|e| e.to_string())?;
    let (rows, cols) = (labels.rows(), labels.cols());
    if row >= rows {
        return Err(format!("row {row} outside the {rows} content patches"));
    }
    let scale = sharpness / (grid * grid) as f64;
    let mut logits = Vec::with_capacity(rows * cols);
    for x in 0..rows {
        let (xr, xc) = ((x / grid) as f64, (x % grid) as f64);
        for y in 0..cols {
            let p = y % (grid * grid);
            let (yr, yc) = ((p / grid) as f64, (p % grid) as f64);
            logits.push(-scale * ((xr - yr).powi(2) + (xc - yc).powi(2)));
        }
    }
    let a_stru = ssem::structure_attention(&logits, &labels).map_err(|e| e.to_string())?;
    let enhanced = ssem::reweight(&logits, &a_stru, &labels).map_err(|e| e.to_string())?;
    let (plain_p, enhanced_p) = (ssem::softmax_rows(&logits, cols), ssem::softmax_rows(&enhanced, cols));
    Ok(json!({
        "rows": rows,
        "cols": cols,
        "m": labels.m,
        "n": labels.n,
        "content_labels": labels.content,
        "reference_labels": labels.reference,
        "patch": &plain_p[row * cols..(row + 1) * cols],
        "enhanced": &enhanced_p[row * cols..(row + 1) * cols],
        "block_mass": ssem::block_mass(&plain_p, &labels).map_err(|e| e.to_string())?,
        "enhanced_block_mass": ssem::block_mass(&enhanced_p, &labels).map_err(|e| e.to_string())?,
    })
    .to_string())
}

/// Nearest codebook entry of every `dim`-vector in `points`.
#[wasm_bindgen]
pub fn quantize(codebook: &[f32], dim: usize, points: &[f32]) -> Result<Vec<u32>, String> {
    if dim == 0 || !codebook.len().is_multiple_of(dim) {
        return Err(format!("{} codebook values is not a multiple of {dim}", codebook.len()));
    }
    let cb = Codebook::new(codebook.len() / dim, dim, codebook.to_vec()).map_err(|e| e.to_string())?;
    Ok(cb.quantize(points).map_err(|e| e.to_string())?.1)
}

/// Nearest-entry map of a 2-d codebook over `[0, 1]^2` sampled on a `size x size` raster.
#[wasm_bindgen]
pub fn voronoi(codebook: &[f32], size: usize) -> Result<Vec<u32>, String> {
    let step = 1.0 / size.max(1) as f32;
    let points: Vec<f32> = (0..size * size)
        .flat_map(|i| [((i % size) as f32 + 0.5) * step, ((i / size) as f32 + 0.5) * step])
        .collect();
    quantize(codebook, 2, &points)
}
