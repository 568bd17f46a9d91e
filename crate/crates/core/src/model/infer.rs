//! Incremental inference with per-layer key/value caches.

use super::{Element, Model};
use crate::error::{input_err, Result};
use crate::numerics::tensor::{dot, gelu, layer_norm_row, softmax_in_place, vec_matmul, Tensor2};
use crate::numerics::ParamId;
use crate::pointer::AugLogits;

/// Keys and values of every processed position, per layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of feeding one element.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Final normed hidden state `h_t`.
    pub hidden: Vec<f64>,
    pub logits: AugLogits,
    /// `[layer][head]` attention over positions `0..=t`.
    pub attention: Vec<Vec<Vec<f64>>>,
}

impl StepOutput {
    /// Head-averaged attention row of `layer`.
    pub fn layer_attention(&self, layer: usize) -> Vec<f64> {
        let heads = &self.attention[layer];
        let mut out = vec![0.0; heads[0].len()];
        for h in heads {
            for (o, v) in out.iter_mut().zip(h) {
                *o += v;
            }
        }
        let n = heads.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

impl Model {
    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.layers)
    }

    fn affine(&self, x: &[f64], w: ParamId, b: ParamId) -> Vec<f64> {
        let mut y = vec_matmul(x, self.store.value(w));
        for (v, bv) in y.iter_mut().zip(self.store.value(b).data()) {
            *v += bv;
        }
        y
    }

    fn norm(&self, x: &[f64], g: ParamId, b: ParamId) -> Vec<f64> {
        layer_norm_row(x, self.store.value(g).data(), self.store.value(b).data())
    }

    /// Feeds `element` at the next position. `patch_emb` are the projected
    /// patches and `patch_keys` their pointer keys.
    pub fn step(
        &self,
        cache: &mut KvCache,
        element: Element,
        patch_emb: &Tensor2,
        patch_keys: &Tensor2,
    ) -> Result<StepOutput> {
        let t = cache.len();
        if t >= self.config.max_seq {
            return input_err(format!("position {t} exceeds max_seq {}", self.config.max_seq));
        }
        let k = patch_emb.rows();
        let mut x = match element {
            Element::Text(id) if (id as usize) < self.config.vocab => {
                self.store.value(self.ids.tok_emb).row(id as usize).to_vec()
            }
            Element::Patch(p) | Element::CopiedPatch(p) if p < k => patch_emb.row(p).to_vec(),
            other => return input_err(format!("element {other:?} out of range")),
        };
        for (v, p) in x.iter_mut().zip(self.store.value(self.ids.pos_emb).row(t)) {
            *v += p;
        }

        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(self.config.layers);
        for (l, b) in self.ids.blocks.iter().enumerate() {
            let h = self.norm(&x, b.ln1_g, b.ln1_b);
            let q = self.affine(&h, b.wq, b.bq);
            cache.keys[l].push(self.affine(&h, b.wk, b.bk));
            cache.values[l].push(self.affine(&h, b.wv, b.bv));
            let keys = &cache.keys[l];
            let values = &cache.values[l];
            let mut cat = vec![0.0; self.config.dim];
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let mut s: Vec<f64> = keys
                    .iter()
                    .map(|kr| dot(&q[r.clone()], &kr[r.clone()]) * scale)
                    .collect();
                softmax_in_place(&mut s);
                for (p, vr) in s.iter().zip(values) {
                    for (o, v) in cat[r.clone()].iter_mut().zip(&vr[r.clone()]) {
                        *o += p * v;
                    }
                }
                probs.push(s);
            }
            let a = self.affine(&cat, b.wo, b.bo);
            x.iter_mut().zip(&a).for_each(|(xv, av)| *xv += av);
            let h2 = self.norm(&x, b.ln2_g, b.ln2_b);
            let mut m = self.affine(&h2, b.w1, b.b1);
            m.iter_mut().for_each(|v| *v = gelu(*v));
            let m = self.affine(&m, b.w2, b.b2);
            x.iter_mut().zip(&m).for_each(|(xv, mv)| *xv += mv);
            attention.push(probs);
        }
        let hidden = self.norm(&x, self.ids.lnf_g, self.ids.lnf_b);
        let logits = self.logits_for_hidden(&hidden, patch_keys);
        Ok(StepOutput {
            hidden,
            logits,
            attention,
        })
    }
}
