//! A small pre-norm causal transformer over mixed text/patch sequences.
//!
//! Patches are raw feature vectors; one learned projection maps them to the
//! model width. The same projected vector `c_k` is used as the image input,
//! as the copied input after a pointer, and as the source of pointer keys.

mod forward;
mod infer;

pub use forward::{augmented_loss, training_layout, GraphForward, HiddenStates, LossReport, TrainingLayout};
pub use infer::{KvCache, StepOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{PatchSet, Vocab, PATCH_FEATURES};
use crate::error::{input_err, Result};
use crate::numerics::{Checkpoint, ParamId, ParamStore, Tensor2};
use crate::pointer::PointerHead;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Raw patch feature width before the input projection.
    pub patch_features: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 4,
            vocab: Vocab::SIZE,
            max_seq: 96,
            patch_features: PATCH_FEATURES,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.max_seq == 0 {
            return input_err("layers, dim, heads and max_seq must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return input_err(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.vocab < 8 {
            return input_err(format!("vocabulary of {} cannot hold the special tokens", self.vocab));
        }
        if !(self.init_std > 0.0) {
            return input_err("init_std must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// One element of a model input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Element {
    Text(u32),
    /// Image patch `k` in its original position.
    Patch(usize),
    /// Patch `k` re-inserted after the model pointed at it.
    CopiedPatch(usize),
}

/// Interleaved text tokens and patch references over one image.
#[derive(Clone, Debug)]
pub struct MixedSequence<'a> {
    pub elements: Vec<Element>,
    pub patches: &'a PatchSet,
}

impl<'a> MixedSequence<'a> {
    pub fn new(elements: Vec<Element>, patches: &'a PatchSet) -> Self {
        Self { elements, patches }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// The image followed by the prompt text.
    pub fn image_then_prompt(prompt: &[u32], patches: &'a PatchSet) -> Self {
        let mut elements: Vec<Element> = (0..patches.len()).map(Element::Patch).collect();
        elements.extend(prompt.iter().map(|&t| Element::Text(t)));
        Self { elements, patches }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub lm_w: ParamId,
    pub lm_b: ParamId,
    pub ptr_q: ParamId,
    pub ptr_k: ParamId,
}

/// Model parameters plus the layout that names them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub(crate) ids: Layout,
}

impl Model {
    /// Gaussian init for weights, zeros for biases, ones for norm gains, and
    /// `I/√D` for both pointer projections.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("validated std");
        let mut rand = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
            Tensor2::from_vec(r, c, data).expect("sized")
        };
        let d = config.dim;
        let mut s = ParamStore::new();
        let tok_emb = s.add("tok_emb", rand(config.vocab, d));
        let pos_emb = s.add("pos_emb", rand(config.max_seq, d));
        let patch_w = s.add("patch_proj.w", rand(config.patch_features, d));
        let patch_b = s.add("patch_proj.b", Tensor2::zeros(1, d));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("blocks.{l}.{n}");
            blocks.push(BlockIds {
                ln1_g: s.add(p("ln1.g"), Tensor2::filled(1, d, 1.0)),
                ln1_b: s.add(p("ln1.b"), Tensor2::zeros(1, d)),
                wq: s.add(p("attn.wq"), rand(d, d)),
                bq: s.add(p("attn.bq"), Tensor2::zeros(1, d)),
                wk: s.add(p("attn.wk"), rand(d, d)),
                bk: s.add(p("attn.bk"), Tensor2::zeros(1, d)),
                wv: s.add(p("attn.wv"), rand(d, d)),
                bv: s.add(p("attn.bv"), Tensor2::zeros(1, d)),
                wo: s.add(p("attn.wo"), rand(d, d)),
                bo: s.add(p("attn.bo"), Tensor2::zeros(1, d)),
                ln2_g: s.add(p("ln2.g"), Tensor2::filled(1, d, 1.0)),
                ln2_b: s.add(p("ln2.b"), Tensor2::zeros(1, d)),
                w1: s.add(p("mlp.w1"), rand(d, 4 * d)),
                b1: s.add(p("mlp.b1"), Tensor2::zeros(1, 4 * d)),
                w2: s.add(p("mlp.w2"), rand(4 * d, d)),
                b2: s.add(p("mlp.b2"), Tensor2::zeros(1, d)),
            });
        }
        let lnf_g = s.add("ln_f.g", Tensor2::filled(1, d, 1.0));
        let lnf_b = s.add("ln_f.b", Tensor2::zeros(1, d));
        let lm_w = s.add("lm_head.w", rand(d, config.vocab));
        let lm_b = s.add("lm_head.b", Tensor2::zeros(1, config.vocab));
        let head = PointerHead::identity_scaled(d);
        let ptr_q = s.add("pointer.lq", head.query);
        let ptr_k = s.add("pointer.lk", head.key);
        Ok(Self {
            config,
            store: s,
            ids: Layout {
                tok_emb,
                pos_emb,
                patch_w,
                patch_b,
                blocks,
                lnf_g,
                lnf_b,
                lm_w,
                lm_b,
                ptr_q,
                ptr_k,
            },
        })
    }

    /// Builds the model for `config` and loads every parameter from `ck`.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        ck.apply_to(&mut m.store)?;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn pointer_head(&self) -> PointerHead {
        PointerHead {
            query: self.store.value(self.ids.ptr_q).clone(),
            key: self.store.value(self.ids.ptr_k).clone(),
        }
    }

    /// Projected patch vectors `c` (`K × D`).
    pub fn project_patches(&self, patches: &PatchSet) -> Result<Tensor2> {
        self.check_patches(patches)?;
        let mut c = patches.vectors.matmul(self.store.value(self.ids.patch_w))?;
        let b = self.store.value(self.ids.patch_b).data().to_vec();
        for r in 0..c.rows() {
            for (x, bv) in c.row_mut(r).iter_mut().zip(&b) {
                *x += bv;
            }
        }
        Ok(c)
    }

    pub(crate) fn check_patches(&self, patches: &PatchSet) -> Result<()> {
        if !patches.is_empty() && patches.feature_dim() != self.config.patch_features {
            return input_err(format!(
                "patch features are {} wide, model expects {}",
                patches.feature_dim(),
                self.config.patch_features
            ));
        }
        Ok(())
    }

    pub(crate) fn check_sequence(&self, seq: &MixedSequence) -> Result<()> {
        if seq.is_empty() {
            return input_err("empty sequence");
        }
        if seq.len() > self.config.max_seq {
            return input_err(format!(
                "sequence of {} exceeds max_seq {}",
                seq.len(),
                self.config.max_seq
            ));
        }
        self.check_patches(seq.patches)?;
        let k = seq.patches.len();
        for e in &seq.elements {
            match *e {
                Element::Text(id) if id as usize >= self.config.vocab => {
                    return input_err(format!("token {id} outside vocabulary of {}", self.config.vocab))
                }
                Element::Patch(p) | Element::CopiedPatch(p) if p >= k => {
                    return input_err(format!("patch {p} with only {k} patches"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
