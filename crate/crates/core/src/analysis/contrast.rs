//! Bounding boxes from the contrast between attention maps under a
//! description prompt and a baseline prompt.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Grid, PatchSet};
use crate::error::{input_err, Error, Result};
use crate::model::{MixedSequence, Model};
use crate::numerics::top_k_indices;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    /// Layers to average; empty means the middle layer.
    pub layers: Vec<usize>,
    pub crop_ratios: Vec<f64>,
    pub eps: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            crop_ratios: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            eps: 1e-9,
        }
    }
}

/// Inclusive patch rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl PatchRect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.r0..=self.r1).contains(&row) && (self.c0..=self.c1).contains(&col)
    }

    pub fn bbox(&self, grid: &Grid) -> BBox {
        grid.rect_bbox(self.r0, self.c0, self.r1, self.c1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastResult {
    pub relevance: Vec<f64>,
    pub peak: usize,
    pub rect: PatchRect,
    /// Inside/outside mean relevance of `rect`; `None` if nothing lies outside.
    pub score: Option<f64>,
    pub bbox: BBox,
}

/// Rectangle of roughly `ratio · K` patches centered on `peak`, cut off at
/// the grid border.
pub fn crop_rect(grid: &Grid, peak: usize, ratio: f64) -> PatchRect {
    let area = ratio * grid.num_patches() as f64;
    let h = (area.sqrt().round() as usize).clamp(1, grid.rows);
    let w = ((area / h as f64).round() as usize).clamp(1, grid.cols);
    let (pr, pc) = grid.cell(peak);
    PatchRect {
        r0: pr.saturating_sub((h - 1) / 2),
        c0: pc.saturating_sub((w - 1) / 2),
        r1: (pr + h / 2).min(grid.rows - 1),
        c1: (pc + w / 2).min(grid.cols - 1),
    }
}

fn rect_score(relevance: &[f64], grid: &Grid, rect: &PatchRect) -> Option<f64> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (k, r) in relevance.iter().enumerate() {
        let (row, col) = grid.cell(k);
        if rect.contains(row, col) {
            si += r;
            ni += 1;
        } else {
            so += r;
            no += 1;
        }
    }
    if no == 0 {
        return None;
    }
    Some((si / ni as f64) / (so / no as f64).max(f64::MIN_POSITIVE))
}

/// `R = A / (A' + ε)`, then the crop rectangle around the peak of `R` with
/// the highest inside/outside contrast. The first ratio wins ties.
pub fn contrast_bbox_from_maps(a: &[f64], a_base: &[f64], grid: &Grid, cfg: &ContrastConfig) -> Result<ContrastResult> {
    let k = grid.num_patches();
    if k == 0 {
        return input_err("contrast grounding needs at least one patch");
    }
    if a.len() != k || a_base.len() != k {
        return input_err(format!(
            "attention maps of {} and {} for {k} patches",
            a.len(),
            a_base.len()
        ));
    }
    if a_base.iter().all(|v| *v == 0.0) {
        return Err(Error::Grounding("baseline attention is zero everywhere".into()));
    }
    if cfg.crop_ratios.is_empty() || cfg.crop_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return input_err("crop ratios must lie in (0, 1]");
    }
    let relevance: Vec<f64> = a.iter().zip(a_base).map(|(x, y)| x / (y + cfg.eps)).collect();
    let peak = top_k_indices(&relevance, 1)[0];
    let mut best: Option<(PatchRect, f64)> = None;
    for &ratio in &cfg.crop_ratios {
        let rect = crop_rect(grid, peak, ratio);
        if let Some(s) = rect_score(&relevance, grid, &rect) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((rect, s));
            }
        }
    }
    let (rect, score) = match best {
        Some((r, s)) => (r, Some(s)),
        None => {
            let (r, c) = grid.cell(peak);
            (
                PatchRect {
                    r0: r,
                    c0: c,
                    r1: r,
                    c1: c,
                },
                None,
            )
        }
    };
    Ok(ContrastResult {
        bbox: rect.bbox(grid),
        relevance,
        peak,
        rect,
        score,
    })
}

/// Head-averaged attention of the final prompt position over the image
/// positions, averaged over `layers` (empty means the middle layer).
pub fn image_attention_map(model: &Model, patches: &PatchSet, prompt: &[u32], layers: &[usize]) -> Result<Vec<f64>> {
    if patches.is_empty() {
        return input_err("no patches to ground in");
    }
    if prompt.is_empty() {
        return input_err("empty prompt");
    }
    let mid = [model.config.layers / 2];
    let layers = if layers.is_empty() { &mid[..] } else { layers };
    if let Some(l) = layers.iter().find(|l| **l >= model.config.layers) {
        return input_err(format!("layer {l} out of range"));
    }
    let seq = MixedSequence::image_then_prompt(prompt, patches);
    let hs = model.forward(&seq, true)?;
    let last = seq.len() - 1;
    let k = patches.len();
    let mut map = vec![0.0; k];
    let n = (layers.len() * model.config.heads) as f64;
    for &l in layers {
        for head in &hs.attention[l] {
            for (m, v) in map.iter_mut().zip(&head.row(last)[..k]) {
                *m += v / n;
            }
        }
    }
    Ok(map)
}

pub fn attention_contrast_bbox(
    model: &Model,
    patches: &PatchSet,
    description: &[u32],
    baseline: &[u32],
    cfg: &ContrastConfig,
) -> Result<ContrastResult> {
    let a = image_attention_map(model, patches, description, &cfg.layers)?;
    let a_base = image_attention_map(model, patches, baseline, &cfg.layers)?;
    contrast_bbox_from_maps(&a, &a_base, &patches.grid, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_patch_example() {
        let grid = Grid::new(1, 2, 10);
        let r = contrast_bbox_from_maps(&[0.2, 0.1], &[0.1, 0.1], &grid, &ContrastConfig::default()).unwrap();
        assert!((r.relevance[0] - 2.0).abs() < 1e-7 && (r.relevance[1] - 1.0).abs() < 1e-7);
        assert_eq!(r.peak, 0);
        assert!(r.rect.contains(0, 0));
    }

    #[test]
    fn zero_baseline_fails() {
        let grid = Grid::new(1, 2, 10);
        let e = contrast_bbox_from_maps(&[0.5, 0.5], &[0.0, 0.0], &grid, &ContrastConfig::default());
        assert!(matches!(e, Err(Error::Grounding(_))));
    }

    #[test]
    fn corner_peak_stays_inside() {
        let grid = Grid::new(8, 8, 16);
        for peak in [0, 7, 56, 63] {
            for ratio in [0.05, 0.3, 0.5, 1.0] {
                let r = crop_rect(&grid, peak, ratio);
                assert!(r.r1 < 8 && r.c1 < 8 && r.r0 <= r.r1 && r.c0 <= r.c1);
                let (pr, pc) = grid.cell(peak);
                assert!(r.contains(pr, pc));
            }
        }
    }

    #[test]
    fn crop_sizes() {
        let grid = Grid::new(8, 8, 16);
        // 0.05 * 64 = 3.2 -> 2 x 2 around an interior peak
        let r = crop_rect(&grid, grid.index(3, 3), 0.05);
        assert_eq!(
            r,
            PatchRect {
                r0: 3,
                c0: 3,
                r1: 4,
                c1: 4
            }
        );
        // 0.2 * 64 = 12.8 -> 4 x 3
        let r = crop_rect(&grid, grid.index(3, 3), 0.2);
        assert_eq!(
            r,
            PatchRect {
                r0: 2,
                c0: 2,
                r1: 5,
                c1: 4
            }
        );
    }

    proptest! {
        #[test]
        fn scale_invariant_and_in_bounds(
            a in prop::collection::vec(0.001f64..1.0, 16),
            b in prop::collection::vec(0.001f64..1.0, 16),
            s in 0.01f64..100.0,
        ) {
            let grid = Grid::new(4, 4, 8);
            let cfg = ContrastConfig { eps: 0.0, ..Default::default() };
            let r1 = contrast_bbox_from_maps(&a, &b, &grid, &cfg).unwrap();
            let a2: Vec<f64> = a.iter().map(|v| v * s).collect();
            let b2: Vec<f64> = b.iter().map(|v| v * s).collect();
            let r2 = contrast_bbox_from_maps(&a2, &b2, &grid, &cfg).unwrap();
            prop_assert_eq!(r1.peak, r2.peak);
            prop_assert_eq!(r1.bbox, r2.bbox);
            prop_assert!(r1.bbox.within(&grid) && r1.bbox.area() > 0);
        }
    }
}
