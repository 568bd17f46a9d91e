//! Grounding-decay metrics over an [`AttentionRecord`].

use std::collections::BTreeSet;

use super::record::{AttentionRecord, PositionTag};
use crate::error::{input_err, Result};

/// Total attention on image positions, per step.
pub fn cumulative_image_attention(rec: &AttentionRecord, layer: usize) -> Result<Vec<f64>> {
    rec.check_layer(layer)?;
    let tags = rec.tags();
    Ok((0..rec.num_steps())
        .map(|s| {
            rec.row(s, layer)
                .iter()
                .zip(tags)
                .filter(|(_, t)| matches!(t, PositionTag::Image(_)))
                .map(|(a, _)| a)
                .sum()
        })
        .collect())
}

/// Mean attention on the image positions of `bbox_patches` divided by the
/// mean over all image positions. `None` where the denominator is zero.
pub fn bbox_attention_ratio(rec: &AttentionRecord, layer: usize, bbox_patches: &[usize]) -> Result<Vec<Option<f64>>> {
    rec.check_layer(layer)?;
    if bbox_patches.is_empty() {
        return input_err("empty bbox patch set");
    }
    let wanted: BTreeSet<usize> = bbox_patches.iter().copied().collect();
    let image: BTreeSet<usize> = rec
        .tags()
        .iter()
        .filter_map(|t| match t {
            PositionTag::Image(k) => Some(*k),
            _ => None,
        })
        .collect();
    if let Some(k) = wanted.iter().find(|k| !image.contains(k)) {
        return input_err(format!("bbox patch {k} is not an image position"));
    }
    let tags = rec.tags();
    Ok((0..rec.num_steps())
        .map(|s| {
            let (mut in_sum, mut in_n, mut all_sum, mut all_n) = (0.0, 0usize, 0.0, 0usize);
            for (a, t) in rec.row(s, layer).iter().zip(tags) {
                if let PositionTag::Image(k) = t {
                    all_sum += a;
                    all_n += 1;
                    if wanted.contains(k) {
                        in_sum += a;
                        in_n += 1;
                    }
                }
            }
            if in_n == 0 || all_sum == 0.0 {
                return None;
            }
            Some((in_sum / in_n as f64) / (all_sum / all_n as f64))
        })
        .collect())
}

/// Attention to copied patches and to the same patches at their original
/// image positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CopyInputSeries {
    /// Decode steps whose context holds at least one copy.
    pub steps: Vec<usize>,
    /// Attention on `image(k)` for every `k` copied so far.
    pub input: Vec<f64>,
    /// Attention on all `copy(k)` positions.
    pub copy: Vec<f64>,
}

pub fn copy_vs_input_attention(rec: &AttentionRecord, layer: usize) -> Result<CopyInputSeries> {
    rec.check_layer(layer)?;
    let tags = rec.tags();
    let mut out = CopyInputSeries::default();
    for s in 0..rec.num_steps() {
        let row = rec.row(s, layer);
        let copied: BTreeSet<usize> = tags[..row.len()]
            .iter()
            .filter_map(|t| match t {
                PositionTag::Copy(k) => Some(*k),
                _ => None,
            })
            .collect();
        if copied.is_empty() {
            continue;
        }
        let (mut a, mut b) = (0.0, 0.0);
        for (w, t) in row.iter().zip(tags) {
            match t {
                PositionTag::Image(k) if copied.contains(k) => a += w,
                PositionTag::Copy(_) => b += w,
                _ => {}
            }
        }
        out.steps.push(s);
        out.input.push(a);
        out.copy.push(b);
    }
    if out.steps.is_empty() {
        return input_err("record contains no copied patches");
    }
    Ok(out)
}

/// Per-layer decay curves of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct DecaySeries {
    pub steps: Vec<usize>,
    /// `[layer][step]`, each in `[0, 1]`.
    pub cumulative: Vec<Vec<f64>>,
    /// `[layer][step]`; empty when no bbox was given.
    pub ratio: Vec<Vec<Option<f64>>>,
}

pub fn decay_series(rec: &AttentionRecord, bbox_patches: Option<&[usize]>) -> Result<DecaySeries> {
    let layers = 0..rec.num_layers();
    Ok(DecaySeries {
        steps: (0..rec.num_steps()).collect(),
        cumulative: layers
            .clone()
            .map(|l| cumulative_image_attention(rec, l))
            .collect::<Result<_>>()?,
        ratio: match bbox_patches {
            Some(b) => layers.map(|l| bbox_attention_ratio(rec, l, b)).collect::<Result<_>>()?,
            None => Vec::new(),
        },
    })
}
