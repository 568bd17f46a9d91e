use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// What sits at one context position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "patch", rename_all = "snake_case")]
pub enum PositionTag {
    Text,
    /// Patch `k` at its original image position.
    Image(usize),
    /// Patch `k` re-inserted by a pointer.
    Copy(usize),
}

/// Head-averaged attention rows recorded during a decode.
///
/// Row `[step][layer]` is the attention of the position that produced output
/// `step` over every position up to and including itself, so its length is a
/// prefix of `tags`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    layers: usize,
    tags: Vec<PositionTag>,
    rows: Vec<Vec<Vec<f64>>>,
}

const ROW_SUM_TOL: f64 = 1e-9;

impl AttentionRecord {
    pub fn new(layers: usize) -> Self {
        Self {
            layers,
            tags: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Builds and validates a record in one go.
    pub fn from_parts(layers: usize, tags: Vec<PositionTag>, rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let mut rec = Self::new(layers);
        rec.tags = tags;
        for step in rows {
            let n = step.first().map_or(0, Vec::len);
            rec.check_step(&step, n)?;
            rec.rows.push(step);
        }
        Ok(rec)
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn num_steps(&self) -> usize {
        self.rows.len()
    }

    pub fn tags(&self) -> &[PositionTag] {
        &self.tags
    }

    pub fn push_position(&mut self, tag: PositionTag) {
        self.tags.push(tag);
    }

    /// Adds one step whose rows cover every position pushed so far.
    pub fn push_step(&mut self, layer_rows: Vec<Vec<f64>>) -> Result<()> {
        self.check_step(&layer_rows, self.tags.len())?;
        self.rows.push(layer_rows);
        Ok(())
    }

    fn check_step(&self, step: &[Vec<f64>], len: usize) -> Result<()> {
        if step.len() != self.layers {
            return input_err(format!("{} layer rows, record has {} layers", step.len(), self.layers));
        }
        if len > self.tags.len() {
            return input_err(format!("row of {len} positions but only {} tags", self.tags.len()));
        }
        if let Some(prev) = self.rows.last() {
            if len < prev[0].len() {
                return input_err("attention rows must not shrink between steps");
            }
        }
        for row in step {
            if row.len() != len {
                return input_err("layer rows of one step differ in length");
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| !(*v >= 0.0)) {
                return input_err(format!("attention row sums to {s}"));
            }
        }
        Ok(())
    }

    /// The row of `layer` at `step`.
    pub fn row(&self, step: usize, layer: usize) -> &[f64] {
        &self.rows[step][layer]
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers {
            return input_err(format!("layer {layer} not recorded ({} layers)", self.layers));
        }
        Ok(())
    }
}
