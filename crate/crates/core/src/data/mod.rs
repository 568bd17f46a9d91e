//! Patch geometry, synthetic grounded tasks, the trace post-filter and
//! dataset files.

pub mod corpus;
pub mod dataset;
pub mod geometry;
pub mod synth;
pub mod trace;
pub mod vocab;

pub use corpus::{build_corpus, inject_defect, task_seed, TaskMix, DEFECT_CLASSES};
pub use dataset::{read_dataset, write_dataset};
pub use geometry::{
    bbox_to_patch_indices, parse_pointer_tokens, pointer_tokens_for_bbox, render_pointer_tokens, BBox, Grid, PatchSet,
};
pub use synth::{answer_token, synthesize_raw, synthesize_task, SynthConfig, TaskKind};
pub use trace::{filter_corpus, filter_trace, GroundedTrace, ObjectEntry, RawTrace, RejectReason, Verdict};
pub use vocab::{Vocab, MAX_GRID, NUM_COLORS, PATCH_FEATURES};
