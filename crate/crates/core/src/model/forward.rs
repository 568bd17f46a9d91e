use super::{Element, MixedSequence, Model};
use crate::data::GroundedTrace;
use crate::error::{input_err, Result};
use crate::numerics::tensor::{vec_matmul, Tensor2};
use crate::numerics::{Graph, NodeId};
use crate::pointer::{argmax, pointer_logits_from_keys, AugLogits, AugToken, ZLossConfig};

/// Node handles produced by [`Model::forward_graph`].
pub struct GraphForward {
    /// Input rows: embeddings plus positions (`T × D`).
    pub embedded: NodeId,
    /// Projected patch vectors `c` (`K × D`).
    pub patch_emb: NodeId,
    /// Residual stream after each block.
    pub layer_outputs: Vec<NodeId>,
    /// `[layer][head]` causal attention probabilities (`T × T`).
    pub attention: Vec<Vec<NodeId>>,
    /// Final normed hidden states (`T × D`).
    pub hidden: NodeId,
}

/// Plain values of one full forward pass.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub final_hidden: Tensor2,
    pub layer_outputs: Vec<Tensor2>,
    /// `[layer][head]`, empty unless attention was requested.
    pub attention: Vec<Vec<Tensor2>>,
    pub patch_embeddings: Tensor2,
}

/// Teacher-forced input layout of one trace: image, prompt, then the target
/// shifted right by one. Pointers re-enter as copied patches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLayout {
    pub elements: Vec<Element>,
    /// Positions whose output predicts `targets[i]`.
    pub positions: Vec<usize>,
    /// Gold indices in the concatenated `[vocab ‖ patches]` space.
    pub targets: Vec<usize>,
}

pub fn training_layout(trace: &GroundedTrace, vocab_size: usize) -> Result<TrainingLayout> {
    if trace.prompt.is_empty() {
        return input_err("trace has an empty prompt");
    }
    if trace.target.is_empty() {
        return input_err("trace has an empty target");
    }
    let k = trace.patches.len();
    let mut elements: Vec<Element> = (0..k).map(Element::Patch).collect();
    elements.extend(trace.prompt.iter().map(|&t| Element::Text(t)));
    let first = elements.len() - 1;
    for t in &trace.target[..trace.target.len() - 1] {
        elements.push(match *t {
            AugToken::Vocab(id) => Element::Text(id),
            AugToken::Ptr(p) => Element::CopiedPatch(p as usize),
        });
    }
    Ok(TrainingLayout {
        positions: (first..first + trace.target.len()).collect(),
        targets: trace.target.iter().map(|t| t.global_index(vocab_size)).collect(),
        elements,
    })
}

/// Summed cross-entropy and summed z-loss over the rows of `logits`.
pub fn augmented_loss(
    g: &mut Graph,
    logits: NodeId,
    targets: &[usize],
    zcfg: &ZLossConfig,
) -> Result<(NodeId, NodeId)> {
    let ce = g.cross_entropy_sum(logits, targets)?;
    let mut lz = g.top_k_log_sum_exp(logits, zcfg.k)?;
    if zcfg.squared {
        lz = g.square(lz);
    }
    let zsum = g.sum_all(lz);
    let z = g.scale(zsum, zcfg.lambda);
    Ok((ce, z))
}

/// Loss value and teacher-forced diagnostics for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Mean per target position of cross-entropy plus z-loss.
    pub loss: f64,
    pub ce: f64,
    pub zloss: f64,
    pub positions: usize,
    pub ptr_correct: usize,
    pub ptr_total: usize,
}

impl LossReport {
    pub fn pointer_accuracy(&self) -> f64 {
        if self.ptr_total == 0 {
            0.0
        } else {
            self.ptr_correct as f64 / self.ptr_total as f64
        }
    }
}

impl Model {
    fn embed_graph(&self, g: &mut Graph, seq: &MixedSequence) -> Result<(NodeId, NodeId)> {
        self.check_sequence(seq)?;
        let ids = &self.ids;
        let d = self.config.dim;
        let patch_emb = if seq.patches.is_empty() {
            g.input(Tensor2::zeros(0, d))
        } else {
            let raw = g.input(seq.patches.vectors.clone());
            let w = g.param(ids.patch_w);
            let b = g.param(ids.patch_b);
            g.linear(raw, w, Some(b))?
        };
        let tok = g.param(ids.tok_emb);
        let map: Vec<(usize, usize)> = seq
            .elements
            .iter()
            .map(|e| match *e {
                Element::Text(id) => (0, id as usize),
                Element::Patch(k) | Element::CopiedPatch(k) => (1, k),
            })
            .collect();
        let content = g.select_rows(&[tok, patch_emb], &map)?;
        let pos = g.param(ids.pos_emb);
        let pos_map: Vec<(usize, usize)> = (0..seq.len()).map(|t| (0, t)).collect();
        let pos_rows = g.select_rows(&[pos], &pos_map)?;
        Ok((g.add(content, pos_rows)?, patch_emb))
    }

    /// Records the full forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph, seq: &MixedSequence) -> Result<GraphForward> {
        let (embedded, patch_emb) = self.embed_graph(g, seq)?;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = embedded;
        let mut layer_outputs = Vec::with_capacity(self.ids.blocks.len());
        let mut attention = Vec::with_capacity(self.ids.blocks.len());
        for b in &self.ids.blocks {
            let (g1, b1) = (g.param(b.ln1_g), g.param(b.ln1_b));
            let h = g.layer_norm(x, g1, b1)?;
            let (wq, bq) = (g.param(b.wq), g.param(b.bq));
            let (wk, bk) = (g.param(b.wk), g.param(b.bk));
            let (wv, bv) = (g.param(b.wv), g.param(b.bv));
            let q = g.linear(h, wq, Some(bq))?;
            let k = g.linear(h, wk, Some(bk))?;
            let v = g.linear(h, wv, Some(bv))?;
            let mut outs = Vec::with_capacity(heads);
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let s = g.matmul_bt(qh, kh)?;
                let s = g.scale(s, scale);
                let p = g.causal_softmax(s)?;
                outs.push(g.matmul(p, vh)?);
                probs.push(p);
            }
            let cat = g.concat_cols(&outs)?;
            let (wo, bo) = (g.param(b.wo), g.param(b.bo));
            let a = g.linear(cat, wo, Some(bo))?;
            x = g.add(x, a)?;
            let (g2, b2) = (g.param(b.ln2_g), g.param(b.ln2_b));
            let h2 = g.layer_norm(x, g2, b2)?;
            let (w1, bias1) = (g.param(b.w1), g.param(b.b1));
            let m = g.linear(h2, w1, Some(bias1))?;
            let m = g.gelu(m);
            let (w2, bias2) = (g.param(b.w2), g.param(b.b2));
            let m = g.linear(m, w2, Some(bias2))?;
            x = g.add(x, m)?;
            layer_outputs.push(x);
            attention.push(probs);
        }
        let (gf, bf) = (g.param(self.ids.lnf_g), g.param(self.ids.lnf_b));
        let hidden = g.layer_norm(x, gf, bf)?;
        Ok(GraphForward {
            embedded,
            patch_emb,
            layer_outputs,
            attention,
            hidden,
        })
    }

    /// Input rows for `seq`: token embedding or projected patch, plus the
    /// positional embedding.
    pub fn embed_mixed(&self, seq: &MixedSequence) -> Result<Tensor2> {
        let mut g = Graph::new(&self.store);
        let (e, _) = self.embed_graph(&mut g, seq)?;
        Ok(g.value(e).clone())
    }

    pub fn forward(&self, seq: &MixedSequence, record_attention: bool) -> Result<HiddenStates> {
        let mut g = Graph::new(&self.store);
        let fw = self.forward_graph(&mut g, seq)?;
        let attention = if record_attention {
            fw.attention
                .iter()
                .map(|heads| heads.iter().map(|&p| g.value(p).clone()).collect())
                .collect()
        } else {
            Vec::new()
        };
        Ok(HiddenStates {
            final_hidden: g.value(fw.hidden).clone(),
            layer_outputs: fw.layer_outputs.iter().map(|&n| g.value(n).clone()).collect(),
            attention,
            patch_embeddings: g.value(fw.patch_emb).clone(),
        })
    }

    /// Generation and pointer logits for one final hidden row.
    pub fn logits_for_hidden(&self, hidden: &[f64], patch_keys: &Tensor2) -> AugLogits {
        let mut gen = vec_matmul(hidden, self.store.value(self.ids.lm_w));
        for (x, b) in gen.iter_mut().zip(self.store.value(self.ids.lm_b).data()) {
            *x += b;
        }
        let ptr = pointer_logits_from_keys(hidden, self.store.value(self.ids.ptr_q), patch_keys);
        AugLogits::new(gen, ptr)
    }

    /// Pointer keys `c L_k` for projected patches `c`.
    pub fn pointer_keys(&self, patch_emb: &Tensor2) -> Result<Tensor2> {
        if patch_emb.rows() == 0 {
            return Ok(Tensor2::zeros(0, self.config.dim));
        }
        patch_emb.matmul(self.store.value(self.ids.ptr_k))
    }

    /// Logits at the last position of `seq`, recomputed from scratch.
    pub fn next_logits_full(&self, seq: &MixedSequence) -> Result<AugLogits> {
        let hs = self.forward(seq, false)?;
        let keys = self.pointer_keys(&hs.patch_embeddings)?;
        let last = hs.final_hidden.rows() - 1;
        Ok(self.logits_for_hidden(hs.final_hidden.row(last), &keys))
    }

    /// Records the batch loss on `g`: mean over all target positions of the
    /// augmented-space cross-entropy plus z-loss.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        batch: &[&GroundedTrace],
        zcfg: &ZLossConfig,
    ) -> Result<(NodeId, LossReport)> {
        if batch.is_empty() {
            return input_err("empty batch");
        }
        let v = self.config.vocab;
        let d = self.config.dim;
        let mut ce_total: Option<NodeId> = None;
        let mut z_total: Option<NodeId> = None;
        let mut report = LossReport::default();
        for trace in batch {
            trace.validate(v)?;
            let layout = training_layout(trace, v)?;
            let seq = MixedSequence::new(layout.elements.clone(), &trace.patches);
            let fw = self.forward_graph(g, &seq)?;
            let map: Vec<(usize, usize)> = layout.positions.iter().map(|&p| (0, p)).collect();
            let h = g.select_rows(&[fw.hidden], &map)?;
            let (lw, lb) = (g.param(self.ids.lm_w), g.param(self.ids.lm_b));
            let gen = g.linear(h, lw, Some(lb))?;
            let lq = g.param(self.ids.ptr_q);
            let lk = g.param(self.ids.ptr_k);
            let q = g.matmul(h, lq)?;
            let keys = g.matmul(fw.patch_emb, lk)?;
            let ptr = g.matmul_bt(q, keys)?;
            let ptr = g.scale(ptr, 1.0 / (d as f64).sqrt());
            let logits = g.concat_cols(&[gen, ptr])?;
            let (ce, z) = augmented_loss(g, logits, &layout.targets, zcfg)?;

            let lv = g.value(logits);
            for (r, &t) in layout.targets.iter().enumerate() {
                if t >= v {
                    report.ptr_total += 1;
                    if argmax(lv.row(r)) == t {
                        report.ptr_correct += 1;
                    }
                }
            }
            report.positions += layout.targets.len();
            ce_total = Some(match ce_total {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
            z_total = Some(match z_total {
                Some(acc) => g.add(acc, z)?,
                None => z,
            });
        }
        let n = report.positions as f64;
        let ce = g.scale(ce_total.expect("non-empty batch"), 1.0 / n);
        let z = g.scale(z_total.expect("non-empty batch"), 1.0 / n);
        let loss = g.add(ce, z)?;
        report.ce = g.value(ce).get(0, 0);
        report.zloss = g.value(z).get(0, 0);
        report.loss = g.value(loss).get(0, 0);
        Ok((loss, report))
    }

    /// Batch loss value without gradients.
    pub fn training_loss(&self, batch: &[&GroundedTrace], zcfg: &ZLossConfig) -> Result<LossReport> {
        let mut g = Graph::new(&self.store);
        Ok(self.loss_graph(&mut g, batch, zcfg)?.1)
    }
}
