//! Incremental point-and-copy generation.
//!
//! The image and prompt are encoded once. Each step scores the vocabulary and
//! the patches in one softmax. A chosen pointer feeds the projected patch
//! back as the next input. Revisits are limited by a per-patch copy cap and a
//! global budget of copied tokens relative to emitted text tokens.

mod transcript;

pub use transcript::{transcript_entry, write_transcript, TopLogit, TranscriptEntry};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{AttentionRecord, PositionTag};
use crate::data::{PatchSet, Vocab};
use crate::error::{input_err, Result};
use crate::model::{Element, KvCache, MixedSequence, Model, StepOutput};
use crate::numerics::Tensor2;
use crate::pointer::{augmented_distribution, select, AugLogits, AugToken, Policy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_new: usize,
    pub policy: Policy,
    /// Copied tokens may not exceed `ceil(ratio · max(text, 1))`.
    pub copy_budget_ratio: f64,
    pub max_copies_per_patch: u32,
    /// `false` sets every pointer logit to `-inf`.
    pub pointing: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new: 32,
            policy: Policy::Argmax,
            copy_budget_ratio: 0.6,
            max_copies_per_patch: 2,
            pointing: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.copy_budget_ratio >= 0.0 && self.copy_budget_ratio.is_finite()) {
            return input_err("copy_budget_ratio must be finite and non-negative");
        }
        if let Policy::Sample { temperature, .. } = self.policy {
            if !(temperature > 0.0) {
                return input_err("sampling temperature must be positive");
            }
        }
        Ok(())
    }
}

/// `ceil(ratio · max(text, 1))`, tolerant to roundoff in the product.
pub fn copy_budget(ratio: f64, text_count: usize) -> usize {
    let x = ratio * text_count.max(1) as f64;
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Keys `c L_k` and values `c` for the patches of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PointerCache {
    pub keys: Tensor2,
    pub values: Tensor2,
    pub copy_counts: Vec<u32>,
}

impl PointerCache {
    pub fn build(model: &Model, patches: &PatchSet) -> Result<Self> {
        let values = if patches.is_empty() {
            Tensor2::zeros(0, model.config.dim)
        } else {
            model.project_patches(patches)?
        };
        let keys = model.pointer_keys(&values)?;
        Ok(Self {
            copy_counts: vec![0; values.rows()],
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Masks pointer logits that the copy cap or the budget forbid.
pub fn apply_revisit_mask(
    logits: &mut AugLogits,
    copy_counts: &[u32],
    text_count: usize,
    copied_count: usize,
    cfg: &DecodeConfig,
) {
    if !cfg.pointing || copied_count + 1 > copy_budget(cfg.copy_budget_ratio, text_count) {
        logits.mask_all_pointers();
        return;
    }
    for (l, &c) in logits.ptr.iter_mut().zip(copy_counts) {
        if c >= cfg.max_copies_per_patch {
            *l = f64::NEG_INFINITY;
        }
    }
}

/// Generation state over one image and prompt.
pub struct DecodeState<'m> {
    model: &'m Model,
    config: DecodeConfig,
    kv: KvCache,
    cache: PointerCache,
    output: Vec<AugToken>,
    text_count: usize,
    copied_count: usize,
    finished: bool,
    pending: Option<StepOutput>,
    rng: ChaCha8Rng,
    record: Option<AttentionRecord>,
    transcript: Vec<TranscriptEntry>,
}

pub fn init_decode<'m>(
    model: &'m Model,
    prompt: &[u32],
    patches: &PatchSet,
    config: &DecodeConfig,
    record_attention: bool,
) -> Result<DecodeState<'m>> {
    config.validate()?;
    if prompt.is_empty() {
        return input_err("empty prompt");
    }
    let seq = MixedSequence::image_then_prompt(prompt, patches);
    model.check_sequence(&seq)?;
    let cache = PointerCache::build(model, patches)?;
    let mut kv = model.new_cache();
    let mut record = record_attention.then(|| AttentionRecord::new(model.config.layers));
    let mut last = None;
    for &e in &seq.elements {
        last = Some(model.step(&mut kv, e, &cache.values, &cache.keys)?);
        if let Some(r) = record.as_mut() {
            r.push_position(tag_of(e));
        }
    }
    let seed = match config.policy {
        Policy::Sample { seed, .. } => seed,
        Policy::Argmax => 0,
    };
    Ok(DecodeState {
        model,
        config: config.clone(),
        kv,
        cache,
        output: Vec::new(),
        text_count: 0,
        copied_count: 0,
        finished: config.max_new == 0,
        pending: last,
        rng: ChaCha8Rng::seed_from_u64(seed),
        record,
        transcript: Vec::new(),
    })
}

fn tag_of(e: Element) -> PositionTag {
    match e {
        Element::Text(_) => PositionTag::Text,
        Element::Patch(k) => PositionTag::Image(k),
        Element::CopiedPatch(k) => PositionTag::Copy(k),
    }
}

fn element_of(t: AugToken) -> Element {
    match t {
        AugToken::Vocab(id) => Element::Text(id),
        AugToken::Ptr(k) => Element::CopiedPatch(k as usize),
    }
}

impl<'m> DecodeState<'m> {
    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn output(&self) -> &[AugToken] {
        &self.output
    }

    pub fn text_count(&self) -> usize {
        self.text_count
    }

    pub fn copied_count(&self) -> usize {
        self.copied_count
    }

    pub fn pointer_cache(&self) -> &PointerCache {
        &self.cache
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn attention_record(&self) -> Option<&AttentionRecord> {
        self.record.as_ref()
    }

    /// Logits for the next token after revisit masking.
    pub fn next_logits(&self) -> Option<AugLogits> {
        let p = self.pending.as_ref()?;
        let mut l = p.logits.clone();
        apply_revisit_mask(
            &mut l,
            &self.cache.copy_counts,
            self.text_count,
            self.copied_count,
            &self.config,
        );
        Some(l)
    }

    /// Selects and commits one token. `None` once finished.
    pub fn step(&mut self) -> Result<Option<AugToken>> {
        if self.finished {
            return Ok(None);
        }
        let logits = self.next_logits().expect("unfinished state has pending logits");
        let dist = augmented_distribution(&logits);
        let tok = select(&dist, logits.vocab_size(), &self.config.policy, &mut self.rng);
        self.commit(tok, logits)?;
        Ok(Some(tok))
    }

    /// Commits `tok` regardless of the policy. Masked pointers are refused.
    pub fn force(&mut self, tok: AugToken) -> Result<()> {
        if self.finished {
            return input_err("decode already finished");
        }
        let logits = self.next_logits().expect("unfinished state has pending logits");
        let idx = tok.global_index(logits.vocab_size());
        if idx >= logits.vocab_size() + logits.num_patches() {
            return input_err(format!("{tok:?} outside the output space"));
        }
        if logits.concat()[idx] == f64::NEG_INFINITY {
            return input_err(format!("{tok:?} is masked"));
        }
        self.commit(tok, logits)
    }

    fn commit(&mut self, tok: AugToken, logits: AugLogits) -> Result<()> {
        let pending = self.pending.take().expect("pending step");
        if let Some(r) = self.record.as_mut() {
            let rows = (0..self.model.config.layers)
                .map(|l| pending.layer_attention(l))
                .collect();
            r.push_step(rows)?;
        }
        self.transcript.push(transcript_entry(self.output.len(), tok, &logits));
        self.output.push(tok);
        match tok {
            AugToken::Vocab(_) => self.text_count += 1,
            AugToken::Ptr(k) => {
                self.copied_count += 1;
                self.cache.copy_counts[k as usize] += 1;
            }
        }
        if tok == AugToken::Vocab(Vocab::EOS)
            || self.output.len() >= self.config.max_new
            || self.kv.len() >= self.model.config.max_seq
        {
            self.finished = true;
            return Ok(());
        }
        let e = element_of(tok);
        if let Some(r) = self.record.as_mut() {
            r.push_position(tag_of(e));
        }
        self.pending = Some(self.model.step(&mut self.kv, e, &self.cache.values, &self.cache.keys)?);
        Ok(())
    }

    /// Input embedding that will be used at the next position for `tok`.
    pub fn input_embedding(&self, tok: AugToken) -> Vec<f64> {
        match tok {
            AugToken::Vocab(id) => self.model.store.value(self.model.ids.tok_emb).row(id as usize).to_vec(),
            AugToken::Ptr(k) => self.cache.values.row(k as usize).to_vec(),
        }
    }
}

/// Output of a complete decode.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub tokens: Vec<AugToken>,
    /// Masked logits that each token was selected from.
    pub step_logits: Vec<AugLogits>,
    pub transcript: Vec<TranscriptEntry>,
    pub attention: Option<AttentionRecord>,
    /// `(text, copied)` after each step.
    pub counts: Vec<(usize, usize)>,
}

/// Runs [`DecodeState::step`] until EOS, `max_new` or `max_seq`.
pub fn decode(
    model: &Model,
    prompt: &[u32],
    patches: &PatchSet,
    config: &DecodeConfig,
    record_attention: bool,
) -> Result<DecodeOutput> {
    let mut st = init_decode(model, prompt, patches, config, record_attention)?;
    let mut step_logits = Vec::new();
    let mut counts = Vec::new();
    while let Some(l) = st.next_logits().filter(|_| !st.is_finished()) {
        st.step()?;
        step_logits.push(l);
        counts.push((st.text_count, st.copied_count));
    }
    Ok(DecodeOutput {
        tokens: st.output,
        step_logits,
        transcript: st.transcript,
        attention: st.record,
        counts,
    })
}

/// Decodes without any cache: every step reruns the whole sequence. Used as
/// an oracle for [`decode`].
pub fn decode_full_recompute(
    model: &Model,
    prompt: &[u32],
    patches: &PatchSet,
    config: &DecodeConfig,
) -> Result<(Vec<AugToken>, Vec<AugLogits>)> {
    config.validate()?;
    let mut seq = MixedSequence::image_then_prompt(prompt, patches);
    model.check_sequence(&seq)?;
    let seed = match config.policy {
        Policy::Sample { seed, .. } => seed,
        Policy::Argmax => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u32; patches.len()];
    let (mut text, mut copied) = (0usize, 0usize);
    let mut tokens = Vec::new();
    let mut all_logits = Vec::new();
    while tokens.len() < config.max_new {
        let mut l = model.next_logits_full(&seq)?;
        apply_revisit_mask(&mut l, &counts, text, copied, config);
        let tok = select(&augmented_distribution(&l), l.vocab_size(), &config.policy, &mut rng);
        tokens.push(tok);
        all_logits.push(l);
        match tok {
            AugToken::Vocab(_) => text += 1,
            AugToken::Ptr(k) => {
                copied += 1;
                counts[k as usize] += 1;
            }
        }
        if tok == AugToken::Vocab(Vocab::EOS) || seq.len() >= model.config.max_seq {
            break;
        }
        seq.elements.push(element_of(tok));
    }
    Ok((tokens, all_logits))
}
