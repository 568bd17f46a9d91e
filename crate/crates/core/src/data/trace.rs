//! Grounded traces, their raw annotated form, and the post-filter.
//!
//! A [`RawTrace`] carries reasoning text in which object references
//! (`<objN>`, 1-based into the object table) are followed by the pointer run
//! for that object's box:
//!
//! ```text
//! <region> <obj1> <ptr6> <color2> <eos>
//! ```
//!
//! [`filter_trace`] decides whether a raw trace is usable; [`RawTrace::parse`]
//! turns a well-formed one into a [`GroundedTrace`] (object references are
//! annotation only and are dropped from the target).

use std::collections::HashSet;

use super::geometry::{bbox_to_patch_indices, parse_pointer_tokens, render_pointer_tokens, BBox, PatchSet};
use super::vocab::Vocab;
use crate::error::{input_err, Result};
use crate::pointer::AugToken;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectEntry {
    pub label: String,
    pub bbox: BBox,
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundedTrace {
    pub prompt: Vec<u32>,
    pub patches: PatchSet,
    pub target: Vec<AugToken>,
    pub objects: Vec<ObjectEntry>,
}

impl GroundedTrace {
    /// Checks token ranges and pointer indices.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.prompt.is_empty() {
            return input_err("empty prompt");
        }
        if let Some(id) = self.prompt.iter().find(|&&id| id as usize >= vocab_size) {
            return input_err(format!("prompt token {id} outside vocabulary"));
        }
        let k = self.patches.len();
        for t in &self.target {
            match *t {
                AugToken::Vocab(id) if id as usize >= vocab_size => {
                    return input_err(format!("target token {id} outside vocabulary"))
                }
                AugToken::Ptr(p) if p as usize >= k => return input_err(format!("pointer {p} with only {k} patches")),
                _ => {}
            }
        }
        Ok(())
    }

    /// Maximal runs of consecutive pointer tokens.
    pub fn pointer_runs(&self) -> Vec<Vec<usize>> {
        pointer_runs(&self.target)
    }

    /// Union of all gold pointer indices, sorted.
    pub fn gold_patches(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .target
            .iter()
            .filter_map(|t| match t {
                AugToken::Ptr(k) => Some(*k as usize),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Target rendered as text, pointer runs in `<ptrN>` form.
    pub fn render_target(&self) -> String {
        render_tokens(&self.target)
    }
}

pub fn pointer_runs(tokens: &[AugToken]) -> Vec<Vec<usize>> {
    let mut runs = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        match t {
            AugToken::Ptr(k) => cur.push(*k as usize),
            AugToken::Vocab(_) => {
                if !cur.is_empty() {
                    runs.push(std::mem::take(&mut cur));
                }
            }
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    runs
}

/// Space-separated token names; consecutive pointers are glued into a run.
pub fn render_tokens(tokens: &[AugToken]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut run = Vec::new();
    for t in tokens {
        match t {
            AugToken::Ptr(k) => run.push(*k as usize),
            AugToken::Vocab(id) => {
                if !run.is_empty() {
                    parts.push(render_pointer_tokens(&std::mem::take(&mut run)));
                }
                parts.push(Vocab::name(*id).unwrap_or_else(|| format!("<unk{id}>")));
            }
        }
    }
    if !run.is_empty() {
        parts.push(render_pointer_tokens(&run));
    }
    parts.join(" ")
}

/// Annotated trace as produced by the (synthetic) decomposition stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrace {
    pub prompt: Vec<u32>,
    pub patches: PatchSet,
    pub reasoning: String,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    Mismatch,
    DuplicateLabel,
    TooFewObjects,
    IllFormed,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Mismatch => "mismatch",
            RejectReason::DuplicateLabel => "duplicate_label",
            RejectReason::TooFewObjects => "too_few_objects",
            RejectReason::IllFormed => "ill_formed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

enum Item {
    Token(u32),
    Object(usize),
    Pointers(Vec<usize>),
}

fn parse_items(raw: &RawTrace) -> Option<Vec<Item>> {
    let k = raw.patches.len();
    let mut items = Vec::new();
    for word in raw.reasoning.split_whitespace() {
        if let Some(rest) = word.strip_prefix("<obj") {
            let digits = rest.strip_suffix('>')?;
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            items.push(Item::Object(digits.parse().ok()?));
        } else if word.starts_with("<ptr") {
            let run = parse_pointer_tokens(word).ok()?;
            if run.iter().any(|&p| p >= k) {
                return None;
            }
            items.push(Item::Pointers(run));
        } else {
            items.push(Item::Token(Vocab::lookup(word)?));
        }
    }
    // Exactly one <eos>, at the end.
    let eos_at: Vec<usize> = items
        .iter()
        .enumerate()
        .filter(|(_, it)| matches!(it, Item::Token(Vocab::EOS)))
        .map(|(i, _)| i)
        .collect();
    if eos_at != [items.len().checked_sub(1)?] {
        return None;
    }
    Some(items)
}

/// Applies the post-filter. Rules are checked in the order ill-formed,
/// mismatch, duplicate label, too few objects; the first that fires wins.
pub fn filter_trace(raw: &RawTrace) -> Verdict {
    let Some(items) = parse_items(raw) else {
        return Verdict::Reject(RejectReason::IllFormed);
    };
    for (i, item) in items.iter().enumerate() {
        if let Item::Object(n) = item {
            let Some(obj) = n.checked_sub(1).and_then(|j| raw.objects.get(j)) else {
                return Verdict::Reject(RejectReason::Mismatch);
            };
            let expected = bbox_to_patch_indices(&obj.bbox, &raw.patches.grid).ok();
            let retrieved = match items.get(i + 1) {
                Some(Item::Pointers(run)) => Some(run),
                _ => None,
            };
            if expected.is_none() || expected.as_ref() != retrieved {
                return Verdict::Reject(RejectReason::Mismatch);
            }
        }
    }
    let mut labels = HashSet::new();
    if !raw.objects.iter().all(|o| labels.insert(o.label.as_str())) {
        return Verdict::Reject(RejectReason::DuplicateLabel);
    }
    if raw.objects.len() <= 2 {
        return Verdict::Reject(RejectReason::TooFewObjects);
    }
    Verdict::Keep
}

impl RawTrace {
    /// Converts to a [`GroundedTrace`]. Fails on ill-formed reasoning; does
    /// not apply the other filter rules.
    pub fn parse(&self) -> Result<GroundedTrace> {
        let Some(items) = parse_items(self) else {
            return input_err(format!("ill-formed reasoning `{}`", self.reasoning));
        };
        let mut target = Vec::new();
        for item in items {
            match item {
                Item::Token(id) => target.push(AugToken::Vocab(id)),
                Item::Pointers(run) => target.extend(run.into_iter().map(|k| AugToken::Ptr(k as u32))),
                Item::Object(_) => {}
            }
        }
        Ok(GroundedTrace {
            prompt: self.prompt.clone(),
            patches: self.patches.clone(),
            target,
            objects: self.objects.clone(),
        })
    }
}

/// Filters a corpus, returning kept traces and `(index, reason)` rejections.
pub fn filter_corpus(raws: &[RawTrace]) -> (Vec<GroundedTrace>, Vec<(usize, RejectReason)>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (i, raw) in raws.iter().enumerate() {
        match filter_trace(raw) {
            Verdict::Keep => match raw.parse() {
                Ok(t) => kept.push(t),
                Err(_) => rejected.push((i, RejectReason::IllFormed)),
            },
            Verdict::Reject(r) => rejected.push((i, r)),
        }
    }
    (kept, rejected)
}
