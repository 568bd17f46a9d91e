//! Patch grids, bounding boxes and pointer-token surface syntax.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::numerics::Tensor2;

/// Row-major patch grid; patch `k = row * cols + col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: u32,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, patch_px: u32) -> Self {
        Self { rows, cols, patch_px }
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width_px(&self) -> u32 {
        self.cols as u32 * self.patch_px
    }

    pub fn height_px(&self) -> u32 {
        self.rows as u32 * self.patch_px
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell(&self, k: usize) -> (usize, usize) {
        (k / self.cols, k % self.cols)
    }

    /// Pixel box covering the inclusive patch rectangle `[r0, r1] × [c0, c1]`.
    pub fn rect_bbox(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> BBox {
        let px = self.patch_px;
        BBox {
            x0: c0 as u32 * px,
            y0: r0 as u32 * px,
            x1: (c1 as u32 + 1) * px,
            y1: (r1 as u32 + 1) * px,
        }
    }

    pub fn cell_bbox(&self, row: usize, col: usize) -> BBox {
        self.rect_bbox(row, col, row, col)
    }
}

/// Pixel-space box, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return input_err(format!("degenerate bbox ({x0},{y0},{x1},{y1})"));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn within(&self, grid: &Grid) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= grid.width_px() && self.y1 <= grid.height_px()
    }

    /// Whether `(x, y)` lies in the half-open box.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    pub fn area(&self) -> u64 {
        (self.x1 - self.x0) as u64 * (self.y1 - self.y0) as u64
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

/// The continuous patch embeddings of one image and their grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub grid: Grid,
    /// `K × feature_dim`, one row per patch in row-major grid order.
    pub vectors: Tensor2,
}

impl PatchSet {
    pub fn new(grid: Grid, vectors: Tensor2) -> Result<Self> {
        if vectors.rows() != grid.num_patches() {
            return input_err(format!(
                "{} patch vectors for a {}x{} grid",
                vectors.rows(),
                grid.rows,
                grid.cols
            ));
        }
        if !vectors.is_finite() {
            return input_err("patch vectors must be finite");
        }
        Ok(Self { grid, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Row-major indices of the patches whose centers lie inside `b`. If no
/// center does, the single patch containing the center of `b`.
pub fn bbox_to_patch_indices(b: &BBox, grid: &Grid) -> Result<Vec<usize>> {
    if !b.within(grid) {
        return input_err(format!(
            "bbox {b} outside {}x{} image",
            grid.width_px(),
            grid.height_px()
        ));
    }
    let px = grid.patch_px as f64;
    // Only rows/cols whose center can fall inside the box.
    let first = |lo: u32| ((lo as f64 / px - 0.5).ceil().max(0.0)) as usize;
    let mut out = Vec::new();
    for r in first(b.y0)..grid.rows {
        let cy = (r as f64 + 0.5) * px;
        if cy >= b.y1 as f64 {
            break;
        }
        for c in first(b.x0)..grid.cols {
            let cx = (c as f64 + 0.5) * px;
            if cx >= b.x1 as f64 {
                break;
            }
            if b.contains(cx, cy) {
                out.push(grid.index(r, c));
            }
        }
    }
    if out.is_empty() {
        let cx = (b.x0 + b.x1) as f64 / 2.0;
        let cy = (b.y0 + b.y1) as f64 / 2.0;
        let c = ((cx / px) as usize).min(grid.cols - 1);
        let r = ((cy / px) as usize).min(grid.rows - 1);
        out.push(grid.index(r, c));
    }
    Ok(out)
}

/// `"<ptr0><ptr1>..."` for the given indices.
pub fn render_pointer_tokens(indices: &[usize]) -> String {
    indices.iter().map(|k| format!("<ptr{k}>")).collect()
}

/// Inverse of [`render_pointer_tokens`]. Indices are decimal without
/// leading zeros.
pub fn parse_pointer_tokens(s: &str) -> Result<Vec<usize>> {
    let bad = |why: &str| Error::Input(format!("malformed pointer run `{s}`: {why}"));
    let mut out = Vec::new();
    let mut rest = s;
    if rest.is_empty() {
        return Err(bad("empty"));
    }
    while !rest.is_empty() {
        rest = rest.strip_prefix("<ptr").ok_or_else(|| bad("expected `<ptr`"))?;
        let end = rest.find('>').ok_or_else(|| bad("unterminated token"))?;
        let digits = &rest[..end];
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad("index is not a decimal number"));
        }
        if digits.len() > 1 && digits.starts_with('0') {
            return Err(bad("index has leading zeros"));
        }
        out.push(digits.parse().map_err(|_| bad("index overflow"))?);
        rest = &rest[end + 1..];
    }
    Ok(out)
}

pub fn pointer_tokens_for_bbox(b: &BBox, grid: &Grid) -> Result<String> {
    Ok(render_pointer_tokens(&bbox_to_patch_indices(b, grid)?))
}
