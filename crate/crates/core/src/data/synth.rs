//! Synthetic grounded tasks over a grid of colored cells.
//!
//! Each cell carries a latent color that appears only in its patch vector
//! (attribute one-hot, plus row and column one-hots, plus Gaussian noise).
//! Prompts name cells or rows by coordinates, never by color, so the answer
//! cannot be read off the prompt text.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{bbox_to_patch_indices, render_pointer_tokens, Grid, PatchSet};
use super::trace::{GroundedTrace, ObjectEntry, RawTrace};
use super::vocab::{Vocab, ATTR_DIM, MAX_GRID, NUM_COLORS, PATCH_FEATURES};
use crate::error::{input_err, Result};
use crate::numerics::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// "What is the color of cell (r, c)?"
    Lookup,
    /// "Do cells (r1, c1) and (r2, c2) share a color?"
    Compare,
    /// "How many cells of color x are in row r?"
    Count,
}

impl TaskKind {
    /// The vocabulary tokens that can answer this kind of task.
    pub fn answer_tokens(self) -> Vec<u32> {
        match self {
            TaskKind::Lookup => Vocab::colors(),
            TaskKind::Compare => vec![Vocab::YES, Vocab::NO],
            TaskKind::Count => Vocab::nums(),
        }
    }

    /// Infers the task from the first prompt token.
    pub fn from_prompt(prompt: &[u32]) -> Option<Self> {
        match prompt.first() {
            Some(&Vocab::LOOKUP) => Some(TaskKind::Lookup),
            Some(&Vocab::COMPARE) => Some(TaskKind::Compare),
            Some(&Vocab::COUNT) => Some(TaskKind::Count),
            _ => None,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lookup" => Ok(TaskKind::Lookup),
            "compare" => Ok(TaskKind::Compare),
            "count" => Ok(TaskKind::Count),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: u32,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            patch_px: 16,
            noise_sigma: 0.1,
        }
    }
}

/// Feature vector of one cell without noise.
pub fn clean_patch_features(row: usize, col: usize, color: usize) -> Vec<f64> {
    let mut v = vec![0.0; PATCH_FEATURES];
    v[color] = 1.0;
    v[ATTR_DIM + row] = 1.0;
    v[ATTR_DIM + MAX_GRID + col] = 1.0;
    v
}

/// Noisy patch vectors for a color assignment (row-major).
pub fn render_patches(grid: Grid, colors: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Result<PatchSet> {
    let noise = Normal::new(0.0, sigma).map_err(|e| crate::error::Error::Input(e.to_string()))?;
    let mut m = Tensor2::zeros(grid.num_patches(), PATCH_FEATURES);
    for (k, &color) in colors.iter().enumerate() {
        let (r, c) = grid.cell(k);
        let row = m.row_mut(k);
        row.copy_from_slice(&clean_patch_features(r, c, color));
        for v in row.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    PatchSet::new(grid, m)
}

fn cell_label(grid: &Grid, k: usize) -> String {
    let (r, c) = grid.cell(k);
    format!("cell({r},{c})")
}

/// Distinct random cells outside `exclude`, as object entries.
fn distractors(grid: &Grid, exclude: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<ObjectEntry> {
    let pool: Vec<usize> = (0..grid.num_patches()).filter(|k| !exclude.contains(k)).collect();
    sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| {
            let k = pool[i];
            let (r, c) = grid.cell(k);
            ObjectEntry {
                label: cell_label(grid, k),
                bbox: grid.cell_bbox(r, c),
            }
        })
        .collect()
}

/// Generates one annotated trace. Deterministic in `seed`.
pub fn synthesize_raw(seed: u64, cfg: &SynthConfig, kind: TaskKind) -> Result<RawTrace> {
    if cfg.rows < 2 || cfg.cols < 2 {
        return input_err(format!("grid {}x{} is smaller than 2x2", cfg.rows, cfg.cols));
    }
    if cfg.rows > MAX_GRID || cfg.cols > MAX_GRID {
        return input_err(format!("grid {}x{} exceeds {MAX_GRID}x{MAX_GRID}", cfg.rows, cfg.cols));
    }
    let grid = Grid::new(cfg.rows, cfg.cols, cfg.patch_px);
    let k_total = grid.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors: Vec<usize> = (0..k_total).map(|_| rng.random_range(0..NUM_COLORS)).collect();
    let name = |id: u32| Vocab::name(id).expect("static vocabulary");

    let (prompt, reasoning, mut objects) = match kind {
        TaskKind::Lookup => {
            let k = rng.random_range(0..k_total);
            let (r, c) = grid.cell(k);
            let obj = ObjectEntry {
                label: cell_label(&grid, k),
                bbox: grid.cell_bbox(r, c),
            };
            let reasoning = format!(
                "{} <obj1> {} {} {}",
                name(Vocab::REGION),
                render_pointer_tokens(&[k]),
                name(Vocab::color(colors[k])),
                name(Vocab::EOS)
            );
            (vec![Vocab::LOOKUP, Vocab::row(r), Vocab::col(c)], reasoning, vec![obj])
        }
        TaskKind::Compare => {
            let picked = sample(&mut rng, k_total, 2);
            let (k1, k2) = (picked.index(0), picked.index(1));
            let same = rng.random_bool(0.5);
            colors[k2] = if same {
                colors[k1]
            } else {
                let shift = rng.random_range(1..NUM_COLORS);
                (colors[k1] + shift) % NUM_COLORS
            };
            let answer = if same { Vocab::YES } else { Vocab::NO };
            let (r1, c1) = grid.cell(k1);
            let (r2, c2) = grid.cell(k2);
            let reasoning = format!(
                "{region} <obj1> {} {region} <obj2> {} {} {}",
                render_pointer_tokens(&[k1]),
                render_pointer_tokens(&[k2]),
                name(answer),
                name(Vocab::EOS),
                region = name(Vocab::REGION),
            );
            let objs = vec![
                ObjectEntry {
                    label: cell_label(&grid, k1),
                    bbox: grid.cell_bbox(r1, c1),
                },
                ObjectEntry {
                    label: cell_label(&grid, k2),
                    bbox: grid.cell_bbox(r2, c2),
                },
            ];
            let prompt = vec![
                Vocab::COMPARE,
                Vocab::row(r1),
                Vocab::col(c1),
                Vocab::row(r2),
                Vocab::col(c2),
            ];
            (prompt, reasoning, objs)
        }
        TaskKind::Count => {
            let target = rng.random_range(0..NUM_COLORS);
            let r = rng.random_range(0..grid.rows);
            let n = rng.random_range(0..=grid.cols);
            let chosen = sample(&mut rng, grid.cols, n);
            for c in 0..grid.cols {
                let k = grid.index(r, c);
                colors[k] = if chosen.iter().any(|x| x == c) {
                    target
                } else {
                    (target + rng.random_range(1..NUM_COLORS)) % NUM_COLORS
                };
            }
            let bbox = grid.rect_bbox(r, 0, r, grid.cols - 1);
            let run = bbox_to_patch_indices(&bbox, &grid)?;
            let reasoning = format!(
                "{} <obj1> {} {} {}",
                name(Vocab::REGION),
                render_pointer_tokens(&run),
                name(Vocab::num(n)),
                name(Vocab::EOS)
            );
            let obj = ObjectEntry {
                label: format!("row({r})"),
                bbox,
            };
            (
                vec![Vocab::COUNT, Vocab::color(target), Vocab::row(r)],
                reasoning,
                vec![obj],
            )
        }
    };

    let referenced: Vec<usize> = objects
        .iter()
        .flat_map(|o| bbox_to_patch_indices(&o.bbox, &grid).unwrap_or_default())
        .collect();
    let need = 3usize.saturating_sub(objects.len());
    objects.extend(distractors(&grid, &referenced, need, &mut rng));

    let patches = render_patches(grid, &colors, cfg.noise_sigma, &mut rng)?;
    Ok(RawTrace {
        prompt,
        patches,
        reasoning,
        objects,
    })
}

/// Generates one grounded trace. Deterministic in `seed`.
pub fn synthesize_task(seed: u64, cfg: &SynthConfig, kind: TaskKind) -> Result<GroundedTrace> {
    synthesize_raw(seed, cfg, kind)?.parse()
}

/// The answer token of a trace: the last vocabulary token before `<eos>`.
pub fn answer_token(trace: &GroundedTrace) -> Option<u32> {
    trace.target.iter().rev().find_map(|t| match t {
        crate::pointer::AugToken::Vocab(id) if *id != Vocab::EOS => Some(*id),
        _ => None,
    })
}
