//! Hand-set models whose attention is known in advance, for checking
//! grounding end to end.

use crate::data::synth::clean_patch_features;
use crate::data::{Grid, PatchSet, Vocab, NUM_COLORS, PATCH_FEATURES};
use crate::error::{input_err, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor2;

/// Config of the planted model: one layer, one head.
pub fn planted_config(dim: usize, max_seq: usize) -> ModelConfig {
    ModelConfig {
        layers: 1,
        dim,
        heads: 1,
        max_seq,
        ..Default::default()
    }
}

/// A one-layer model in which a color token attends to the patches of that
/// color with logit gap roughly `31 · sharpness² / √dim`, and a `<pad>`
/// token attends uniformly. Everything else is zero except norm gains.
pub fn planted_color_model(dim: usize, max_seq: usize, sharpness: f64) -> Result<Model> {
    if dim < NUM_COLORS + 1 {
        return input_err("planted model needs dim > number of colors");
    }
    let mut m = Model::new(planted_config(dim, max_seq), 0)?;
    for p in m.store.iter_mut() {
        let keep = p.name.ends_with(".g");
        if !keep {
            p.value.fill(0.0);
        }
    }
    let mut tok = Tensor2::zeros(m.config.vocab, dim);
    let mut proj = Tensor2::zeros(PATCH_FEATURES, dim);
    let mut qk = Tensor2::zeros(dim, dim);
    for c in 0..NUM_COLORS {
        tok.set(Vocab::color(c) as usize, c, 1.0);
        proj.set(c, c, 1.0);
        qk.set(c, c, sharpness);
    }
    m.store.set_value("tok_emb", tok)?;
    m.store.set_value("patch_proj.w", proj)?;
    m.store.set_value("blocks.0.attn.wq", qk.clone())?;
    m.store.set_value("blocks.0.attn.wk", qk)?;
    Ok(m)
}

/// Clean patches on `grid`: every cell has color `background` except
/// `(row, col)`, which has color `planted`.
pub fn single_cell_patches(grid: Grid, row: usize, col: usize, background: usize, planted: usize) -> Result<PatchSet> {
    let rows: Vec<Vec<f64>> = (0..grid.num_patches())
        .map(|k| {
            let (r, c) = grid.cell(k);
            let color = if (r, c) == (row, col) { planted } else { background };
            clean_patch_features(r, c, color)
        })
        .collect();
    PatchSet::new(grid, Tensor2::from_rows(&rows)?)
}
