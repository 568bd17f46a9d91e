//! Wide CSV output: a `step` column followed by one column per metric and
//! layer, e.g. `cumulative_image.l0`. Values use 9 significant digits;
//! undefined samples are empty cells.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::metrics::{CopyInputSeries, DecaySeries};
use crate::error::{input_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesColumn {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

impl SeriesColumn {
    pub fn new(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }

    pub fn dense(name: impl Into<String>, values: &[f64]) -> Self {
        Self::new(name, values.iter().copied().map(Some).collect())
    }
}

pub fn format_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.8e}"),
        None => String::new(),
    }
}

pub fn write_series_csv<W: Write>(w: W, steps: &[usize], columns: &[SeriesColumn]) -> Result<()> {
    if let Some(c) = columns.iter().find(|c| c.values.len() != steps.len()) {
        return input_err(format!(
            "column `{}` has {} values for {} steps",
            c.name,
            c.values.len(),
            steps.len()
        ));
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["step".to_string()];
    header.extend(columns.iter().map(|c| c.name.clone()));
    out.write_record(&header)?;
    for (i, s) in steps.iter().enumerate() {
        let mut rec = vec![s.to_string()];
        rec.extend(columns.iter().map(|c| format_value(c.values[i])));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_csv(path: impl AsRef<Path>, steps: &[usize], columns: &[SeriesColumn]) -> Result<()> {
    write_series_csv(BufWriter::new(File::create(path)?), steps, columns)
}

/// Columns for the decay curves and the per-layer copy/input series,
/// aligned to the decay steps. Copy columns are zero at steps without a copy
/// and for layers given `None`.
pub fn analysis_columns(decay: &DecaySeries, copies: &[Option<CopyInputSeries>]) -> Vec<SeriesColumn> {
    let mut cols = Vec::new();
    for (l, v) in decay.cumulative.iter().enumerate() {
        cols.push(SeriesColumn::dense(format!("cumulative_image.l{l}"), v));
    }
    for (l, v) in decay.ratio.iter().enumerate() {
        cols.push(SeriesColumn::new(format!("bbox_ratio.l{l}"), v.clone()));
    }
    let n = decay.steps.len();
    for (l, c) in copies.iter().enumerate() {
        let (mut input, mut copy) = (vec![0.0; n], vec![0.0; n]);
        if let Some(c) = c {
            for (i, &s) in c.steps.iter().enumerate() {
                input[s] = c.input[i];
                copy[s] = c.copy[i];
            }
        }
        cols.push(SeriesColumn::dense(format!("copied_input_attention.l{l}"), &input));
        cols.push(SeriesColumn::dense(format!("copy_attention.l{l}"), &copy));
    }
    cols
}
