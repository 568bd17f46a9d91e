//! Pointing over continuous patch embeddings.
//!
//! The output space is the vocabulary followed by the `K` patches of the
//! current image. Generation logits and pointer logits are concatenated and
//! normalized by a single softmax; no mixing gate is involved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::numerics::tensor::{self, dot, log_sum_exp, vec_matmul, Tensor2};
use crate::numerics::top_k_indices;

/// One decoded symbol: a vocabulary token or a pointer to patch `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugToken {
    #[serde(rename = "v")]
    Vocab(u32),
    #[serde(rename = "p")]
    Ptr(u32),
}

impl AugToken {
    /// Index into the concatenated `[vocab ‖ patches]` space.
    pub fn global_index(self, vocab_size: usize) -> usize {
        match self {
            AugToken::Vocab(id) => id as usize,
            AugToken::Ptr(k) => vocab_size + k as usize,
        }
    }

    pub fn from_global_index(idx: usize, vocab_size: usize) -> Self {
        if idx < vocab_size {
            AugToken::Vocab(idx as u32)
        } else {
            AugToken::Ptr((idx - vocab_size) as u32)
        }
    }

    pub fn is_ptr(self) -> bool {
        matches!(self, AugToken::Ptr(_))
    }
}

/// Generation and pointer logits for one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct AugLogits {
    pub gen: Vec<f64>,
    pub ptr: Vec<f64>,
}

impl AugLogits {
    pub fn new(gen: Vec<f64>, ptr: Vec<f64>) -> Self {
        Self { gen, ptr }
    }

    pub fn vocab_size(&self) -> usize {
        self.gen.len()
    }

    pub fn num_patches(&self) -> usize {
        self.ptr.len()
    }

    /// `[gen ‖ ptr]`
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.gen.len() + self.ptr.len());
        v.extend_from_slice(&self.gen);
        v.extend_from_slice(&self.ptr);
        v
    }

    /// Sets every pointer logit to `-inf`.
    pub fn mask_all_pointers(&mut self) {
        self.ptr.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
    }
}

/// The query and key projections of the pointer head (no biases).
#[derive(Clone, Debug, PartialEq)]
pub struct PointerHead {
    pub query: Tensor2,
    pub key: Tensor2,
}

impl PointerHead {
    /// Both projections set to `I / √D`.
    pub fn identity_scaled(dim: usize) -> Self {
        let m = Tensor2::identity(dim).scale(1.0 / (dim as f64).sqrt());
        Self {
            query: m.clone(),
            key: m,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }

    fn check(&self) -> Result<()> {
        let d = self.query.rows();
        if self.query.shape() != (d, d) || self.key.shape() != (d, d) {
            return Err(Error::Dimension {
                op: "pointer_head",
                detail: format!("{:?} / {:?}", self.query.shape(), self.key.shape()),
            });
        }
        Ok(())
    }

    /// `L_k` applied to each patch row.
    pub fn keys(&self, patches: &Tensor2) -> Result<Tensor2> {
        self.check()?;
        patches.matmul(&self.key)
    }
}

/// `logit[k] = ⟨h L_q, c_k L_k⟩ / √D` for every patch row `c_k`.
pub fn pointer_logits(hidden: &[f64], patches: &Tensor2, head: &PointerHead) -> Result<Vec<f64>> {
    head.check()?;
    let d = head.dim();
    if hidden.len() != d || (patches.rows() > 0 && patches.cols() != d) {
        return Err(Error::Dimension {
            op: "pointer_logits",
            detail: format!("hidden {} / patches {:?} / D {d}", hidden.len(), patches.shape()),
        });
    }
    if patches.rows() == 0 {
        return Ok(Vec::new());
    }
    let keys = head.keys(patches)?;
    Ok(pointer_logits_from_keys(hidden, &head.query, &keys))
}

/// Pointer logits given precomputed keys `c L_k` (one row per patch).
pub fn pointer_logits_from_keys(hidden: &[f64], query: &Tensor2, keys: &Tensor2) -> Vec<f64> {
    let q = vec_matmul(hidden, query);
    let scale = 1.0 / (query.rows() as f64).sqrt();
    (0..keys.rows()).map(|k| dot(&q, keys.row(k)) * scale).collect()
}

/// Softmax over `[gen ‖ ptr]`. `-inf` entries get exactly zero mass.
pub fn augmented_distribution(logits: &AugLogits) -> Vec<f64> {
    let mut v = logits.concat();
    tensor::softmax_in_place(&mut v);
    v
}

/// Reference gated mixture: `λ·softmax(gen)` on vocabulary slots and
/// `(1-λ)·softmax(ptr)` on patch slots. Used as a test oracle.
pub fn gated_mixture_reference(gen: &[f64], ptr: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return input_err(format!("gate {lambda} outside [0, 1]"));
    }
    let mut pg = gen.to_vec();
    tensor::softmax_in_place(&mut pg);
    let mut pp = ptr.to_vec();
    if !pp.is_empty() {
        tensor::softmax_in_place(&mut pp);
    }
    let mut out: Vec<f64> = pg.iter().map(|p| lambda * p).collect();
    out.extend(pp.iter().map(|p| (1.0 - lambda) * p));
    Ok(out)
}

/// Gate value for which the gated mixture reproduces the augmented softmax:
/// `Z_gen / (Z_gen + Z_ptr)`, computed in log space.
pub fn equivalent_gate(gen: &[f64], ptr: &[f64]) -> f64 {
    if ptr.is_empty() {
        return 1.0;
    }
    let lg = log_sum_exp(gen);
    let lp = log_sum_exp(ptr);
    1.0 / (1.0 + (lp - lg).exp())
}

/// Z-loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZLossConfig {
    pub k: usize,
    pub lambda: f64,
    /// Use `λ·(log Z̄)²` instead of `λ·log Z̄`.
    pub squared: bool,
}

impl Default for ZLossConfig {
    fn default() -> Self {
        Self {
            k: 40,
            lambda: 1e-5,
            squared: false,
        }
    }
}

/// `log Σ_{j ∈ TopK} exp(x_j)` over the concatenated logits, `k` clipped to
/// the width, ties broken toward the lower index.
pub fn top_k_log_partition(logits: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return input_err("z-loss k must be at least 1");
    }
    let idx = top_k_indices(logits, k);
    let sel: Vec<f64> = idx.iter().map(|&j| logits[j]).collect();
    Ok(log_sum_exp(&sel))
}

/// Z-loss for one step.
pub fn zloss(logits: &AugLogits, cfg: &ZLossConfig) -> Result<f64> {
    let lz = top_k_log_partition(&logits.concat(), cfg.k)?;
    Ok(if cfg.squared {
        cfg.lambda * lz * lz
    } else {
        cfg.lambda * lz
    })
}

/// How a token is chosen from a distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    #[default]
    Argmax,
    Sample {
        temperature: f64,
        seed: u64,
    },
}

/// Picks a global index from `dist` and maps it to an [`AugToken`].
/// Argmax ties go to the lower index. Sampling with temperature `τ` draws
/// from `p^(1/τ)` renormalized.
pub fn select<R: Rng + ?Sized>(dist: &[f64], vocab_size: usize, policy: &Policy, rng: &mut R) -> AugToken {
    let idx = match policy {
        Policy::Argmax => argmax(dist),
        Policy::Sample { temperature, .. } => {
            let t = temperature.max(1e-6);
            let w: Vec<f64> = if (t - 1.0).abs() < f64::EPSILON {
                dist.to_vec()
            } else {
                dist.iter()
                    .map(|p| if *p > 0.0 { p.powf(1.0 / t) } else { 0.0 })
                    .collect()
            };
            let total: f64 = w.iter().sum();
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = argmax(dist);
            for (i, wi) in w.iter().enumerate() {
                acc += wi;
                if u < acc && *wi > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    AugToken::from_global_index(idx, vocab_size)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
