//! Line-delimited JSON datasets, one [`GroundedTrace`] per line:
//!
//! ```text
//! {"prompt":[3,7,16],"grid":[4,4],"patch_px":16,"patches":[[...],...],
//!  "target":[{"v":2},{"p":6},{"v":24},{"v":0}],
//!  "objects":[{"label":"cell(1,2)","bbox":[32,16,48,32]},...]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::{BBox, Grid, PatchSet};
use super::trace::{GroundedTrace, ObjectEntry};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::pointer::AugToken;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    label: String,
    bbox: [u32; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    prompt: Vec<u32>,
    grid: [usize; 2],
    patch_px: u32,
    patches: Vec<Vec<f64>>,
    target: Vec<AugToken>,
    objects: Vec<ObjectRecord>,
}

impl From<&GroundedTrace> for TraceRecord {
    fn from(t: &GroundedTrace) -> Self {
        let v = &t.patches.vectors;
        TraceRecord {
            prompt: t.prompt.clone(),
            grid: [t.patches.grid.rows, t.patches.grid.cols],
            patch_px: t.patches.grid.patch_px,
            patches: (0..v.rows()).map(|r| v.row(r).to_vec()).collect(),
            target: t.target.clone(),
            objects: t
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    label: o.label.clone(),
                    bbox: o.bbox.to_array(),
                })
                .collect(),
        }
    }
}

impl TraceRecord {
    fn into_trace(self) -> std::result::Result<GroundedTrace, String> {
        let grid = Grid::new(self.grid[0], self.grid[1], self.patch_px);
        let vectors = if self.patches.is_empty() {
            Tensor2::zeros(0, 0)
        } else {
            Tensor2::from_rows(&self.patches).map_err(|e| e.to_string())?
        };
        let patches = PatchSet::new(grid, vectors).map_err(|e| e.to_string())?;
        let mut objects = Vec::with_capacity(self.objects.len());
        for o in self.objects {
            let [x0, y0, x1, y1] = o.bbox;
            let bbox = BBox::new(x0, y0, x1, y1).map_err(|e| e.to_string())?;
            if !bbox.within(&grid) {
                return Err(format!("bbox {bbox} outside the image"));
            }
            objects.push(ObjectEntry { label: o.label, bbox });
        }
        let k = patches.len();
        if let Some(AugToken::Ptr(p)) = self
            .target
            .iter()
            .find(|t| matches!(t, AugToken::Ptr(p) if *p as usize >= k))
        {
            return Err(format!("pointer {p} with only {k} patches"));
        }
        Ok(GroundedTrace {
            prompt: self.prompt,
            patches,
            target: self.target,
            objects,
        })
    }
}

/// Serializes one trace as a single JSON line (no trailing newline).
pub fn trace_to_line(t: &GroundedTrace) -> String {
    serde_json::to_string(&TraceRecord::from(t)).expect("trace records always serialize")
}

pub fn write_traces<W: Write>(mut w: W, traces: &[GroundedTrace]) -> Result<()> {
    for t in traces {
        w.write_all(trace_to_line(t).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, traces: &[GroundedTrace]) -> Result<()> {
    write_traces(BufWriter::new(File::create(path)?), traces)
}

/// Reads traces; `source` only labels errors. Blank lines are skipped.
pub fn read_traces<R: BufRead>(r: R, source: &Path) -> Result<Vec<GroundedTrace>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.into_trace().map_err(parse_err)?);
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<GroundedTrace>> {
    let path = path.as_ref();
    read_traces(BufReader::new(File::open(path)?), path)
}
