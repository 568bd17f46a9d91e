//! Seeded corpora of raw traces, optionally with planted defects.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{parse_pointer_tokens, render_pointer_tokens};
use super::synth::{synthesize_raw, SynthConfig, TaskKind};
use super::trace::{RawTrace, RejectReason};
use crate::error::{input_err, Result};

/// Seed of task `i` in a corpus seeded with `seed` (splitmix64 of both).
pub fn task_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which task kinds a corpus contains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMix {
    #[default]
    Lookup,
    Compare,
    Count,
    /// Cycles lookup, compare, count.
    Mixed,
}

impl TaskMix {
    pub fn kind(self, i: usize) -> TaskKind {
        match self {
            TaskMix::Lookup => TaskKind::Lookup,
            TaskMix::Compare => TaskKind::Compare,
            TaskMix::Count => TaskKind::Count,
            TaskMix::Mixed => [TaskKind::Lookup, TaskKind::Compare, TaskKind::Count][i % 3],
        }
    }
}

impl std::str::FromStr for TaskMix {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lookup" => Ok(TaskMix::Lookup),
            "compare" => Ok(TaskMix::Compare),
            "count" => Ok(TaskMix::Count),
            "mixed" => Ok(TaskMix::Mixed),
            other => Err(format!("unknown task mix `{other}`")),
        }
    }
}

pub const DEFECT_CLASSES: [RejectReason; 4] = [
    RejectReason::Mismatch,
    RejectReason::DuplicateLabel,
    RejectReason::TooFewObjects,
    RejectReason::IllFormed,
];

/// A copy of `raw` that the filter rejects for exactly `reason`.
pub fn inject_defect(raw: &RawTrace, reason: RejectReason) -> Result<RawTrace> {
    let mut out = raw.clone();
    match reason {
        RejectReason::IllFormed => {
            out.reasoning = raw.reasoning.replace("<eos>", "<unknown>");
        }
        RejectReason::Mismatch => {
            let k = raw.patches.len();
            let mut done = false;
            let words: Vec<String> = raw
                .reasoning
                .split_whitespace()
                .map(|w| match parse_pointer_tokens(w) {
                    Ok(run) if !done && k > 1 => {
                        done = true;
                        let shifted: Vec<usize> = run.iter().map(|p| (p + 1) % k).collect();
                        render_pointer_tokens(&shifted)
                    }
                    _ => w.to_string(),
                })
                .collect();
            if !done {
                return input_err("no pointer run to corrupt");
            }
            out.reasoning = words.join(" ");
        }
        RejectReason::DuplicateLabel => {
            if raw.objects.len() < 2 {
                return input_err("need two objects to duplicate a label");
            }
            out.objects[1].label = raw.objects[0].label.clone();
        }
        RejectReason::TooFewObjects => {
            let referenced = raw
                .reasoning
                .split_whitespace()
                .filter_map(|w| w.strip_prefix("<obj")?.strip_suffix('>')?.parse::<usize>().ok())
                .max()
                .unwrap_or(0)
                .max(1);
            if referenced > 2 {
                return input_err("trace references more than two objects");
            }
            out.objects.truncate(referenced);
        }
    }
    Ok(out)
}

/// `n` raw traces with `defects` of them corrupted. Defect classes cycle in
/// [`DEFECT_CLASSES`] order over seeded positions. Returns the traces and the
/// planted `(index, reason)` pairs sorted by index.
pub fn build_corpus(
    n: usize,
    seed: u64,
    cfg: &SynthConfig,
    mix: TaskMix,
    defects: usize,
) -> Result<(Vec<RawTrace>, Vec<(usize, RejectReason)>)> {
    if defects > n {
        return input_err(format!("{defects} defects for {n} traces"));
    }
    let mut raws = (0..n)
        .map(|i| synthesize_raw(task_seed(seed, i as u64), cfg, mix.kind(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut ChaCha8Rng::seed_from_u64(task_seed(seed, u64::MAX)));
    let mut planted: Vec<(usize, RejectReason)> = positions[..defects]
        .iter()
        .enumerate()
        .map(|(j, &i)| (i, DEFECT_CLASSES[j % DEFECT_CLASSES.len()]))
        .collect();
    planted.sort_by_key(|(i, _)| *i);
    for &(i, reason) in &planted {
        raws[i] = inject_defect(&raws[i], reason)?;
    }
    Ok((raws, planted))
}
