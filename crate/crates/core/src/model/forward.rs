use rand::Rng as _;

use super::masking::{build_tlm_batch, IdBatch, MaskedBatch, IGNORE};
use super::permutation::PermutationBatch;
use super::{block_group, ModelParameters};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::CLS;

/// One forward pass over a parameter snapshot, recorded on a fresh tape.
///
/// Built with [`Forward::new`] it runs deterministically with dropout off;
/// [`Forward::training`] enables dropout driven by the given stream.
pub struct Forward<'p> {
    tape: Tape,
    params: &'p ModelParameters,
    vars: Vec<Option<Var>>,
    dropout: Option<Rng>,
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ModelParameters) -> Self {
        Forward { tape: Tape::new(), vars: vec![None; params.len()], params, dropout: None }
    }

    pub fn training(params: &'p ModelParameters, rng: Rng) -> Self {
        let mut f = Forward::new(params);
        if params.config().dropout > 0.0 {
            f.dropout = Some(rng);
        }
        f
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// For adding loss terms on top of the model outputs.
    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        if let Some(v) = self.vars[id] {
            return Ok(v);
        }
        let v = self.tape.param(id, self.params.tensors()[id].clone());
        self.vars[id] = Some(v);
        Ok(v)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.params.config().dropout;
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - p;
        let factors: Vec<f64> = (0..self.tape.value(x).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.mul_const(x, factors)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.p(w)?;
        let b = self.p(b)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, g, b)
    }

    fn check_len(&self, t: usize) -> Result<()> {
        let max = self.params.config().max_seq_len;
        if t > max {
            return Err(Error::SequenceTooLong { len: t, max });
        }
        Ok(())
    }

    fn positions(&mut self, t: usize) -> Result<Var> {
        let pos = self.p("positional.weight")?;
        self.tape.slice(pos, 0, 0, t)
    }

    /// Token + position (+ segment) embeddings, normalized: `[B, T, d]`.
    fn embed(&mut self, ids: &IdBatch, segments: Option<&[u8]>) -> Result<Var> {
        self.check_len(ids.seq_len)?;
        let shape = [ids.batch, ids.seq_len];
        let table = self.p("token_embeddings.weight")?;
        let idx: Vec<usize> = ids.ids.iter().map(|&i| i as usize).collect();
        let tok = self.tape.embedding(table, &idx, &shape)?;
        let pos = self.positions(ids.seq_len)?;
        let mut x = self.tape.add(tok, pos)?;
        if let Some(seg) = segments {
            let table = self.p("segment.weight")?;
            let idx: Vec<usize> = seg.iter().map(|&s| s as usize).collect();
            let s = self.tape.embedding(table, &idx, &shape)?;
            x = self.tape.add(x, s)?;
        }
        let x = self.layer_norm(x, "embedding_norm")?;
        self.dropout(x)
    }

    /// Initial query stream: learned query vector + position, normalized.
    fn query_init(&mut self, batch: usize, t: usize) -> Result<Var> {
        let d = self.params.config().d_model;
        let q = self.p("query_stream.weight")?;
        let pos = self.positions(t)?;
        let x = self.tape.add(pos, q)?;
        let x = self.tape.reshape(x, &[1, t, d])?;
        let x = self.tape.concat(&vec![x; batch], 0)?;
        self.layer_norm(x, "embedding_norm")
    }

    /// Multi-head attention with queries from `q_in` and keys/values from
    /// `kv_in`, restricted by `mask` (`B × H × T × T`).
    fn attention(&mut self, layer: usize, q_in: Var, kv_in: Var, mask: &[bool]) -> Result<Var> {
        let cfg = self.params.config();
        let (h, d) = (cfg.n_heads, cfg.d_model);
        let dh = d / h;
        let s = self.tape.shape(q_in).to_vec();
        let (b, t) = (s[0], s[1]);
        let g = block_group(layer);
        let q = self.linear(q_in, &format!("{g}.attn.wq"), &format!("{g}.attn.bq"))?;
        let k = self.linear(kv_in, &format!("{g}.attn.wk"), &format!("{g}.attn.bk"))?;
        let v = self.linear(kv_in, &format!("{g}.attn.wv"), &format!("{g}.attn.bv"))?;
        let q = self.tape.reshape(q, &[b, t, h, dh])?;
        let q = self.tape.permute(q, &[0, 2, 1, 3])?;
        let k = self.tape.reshape(k, &[b, t, h, dh])?;
        let kt = self.tape.permute(k, &[0, 2, 3, 1])?;
        let v = self.tape.reshape(v, &[b, t, h, dh])?;
        let v = self.tape.permute(v, &[0, 2, 1, 3])?;
        let scores = self.tape.matmul(q, kt)?;
        let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = self.tape.masked_softmax(scores, mask)?;
        let ctx = self.tape.matmul(probs, v)?;
        let ctx = self.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.tape.reshape(ctx, &[b, t, d])?;
        self.linear(ctx, &format!("{g}.attn.wo"), &format!("{g}.attn.bo"))
    }

    /// Post-LN block: `x' = LN(x + Attn(x, kv)); LN(x' + FFN(x'))`.
    fn block(&mut self, layer: usize, x: Var, kv: Var, mask: &[bool]) -> Result<Var> {
        let g = block_group(layer);
        let a = self.attention(layer, x, kv, mask)?;
        let a = self.dropout(a)?;
        let x = self.tape.add(x, a)?;
        let x = self.layer_norm(x, &format!("{g}.ln1"))?;
        let f = self.linear(x, &format!("{g}.ffn.w1"), &format!("{g}.ffn.b1"))?;
        let f = self.tape.gelu(f);
        let f = self.linear(f, &format!("{g}.ffn.w2"), &format!("{g}.ffn.b2"))?;
        let f = self.dropout(f)?;
        let x = self.tape.add(x, f)?;
        self.layer_norm(x, &format!("{g}.ln2"))
    }

    fn expand_heads(&self, mask_btt: &[bool], b: usize, t: usize) -> Vec<bool> {
        let h = self.params.config().n_heads;
        let mut out = Vec::with_capacity(b * h * t * t);
        for bi in 0..b {
            let m = &mask_btt[bi * t * t..(bi + 1) * t * t];
            for _ in 0..h {
                out.extend_from_slice(m);
            }
        }
        out
    }

    fn padding_mask(&self, ids: &IdBatch) -> Vec<bool> {
        let (b, t) = (ids.batch, ids.seq_len);
        let mut m = Vec::with_capacity(b * t * t);
        for bi in 0..b {
            let keys = &ids.attn_mask[bi * t..(bi + 1) * t];
            for _ in 0..t {
                m.extend_from_slice(keys);
            }
        }
        self.expand_heads(&m, b, t)
    }

    /// Final hidden states `[B, T, d]` under the padding mask.
    pub fn encode(&mut self, ids: &IdBatch, segments: Option<&[u8]>) -> Result<Var> {
        let mask = self.padding_mask(ids);
        let mut x = self.embed(ids, segments)?;
        for l in 0..self.params.config().n_layers {
            x = self.block(l, x, x, &mask)?;
        }
        Ok(x)
    }

    /// LM-head logits for `rows` (`[N, d]`) -> `[N, V]`.
    fn lm_logits(&mut self, rows: Var) -> Result<Var> {
        let w = if self.params.config().tie_mlm_head {
            let e = self.p("token_embeddings.weight")?;
            self.tape.permute(e, &[1, 0])?
        } else {
            self.p("mlm_head.weight")?
        };
        let b = self.p("mlm_head.bias")?;
        let y = self.tape.matmul(rows, w)?;
        self.tape.add(y, b)
    }

    /// Gather `[B, T, d]` hidden states at flat positions -> `[N, d]`.
    fn gather(&mut self, h: Var, positions: &[usize]) -> Result<Var> {
        let s = self.tape.shape(h).to_vec();
        let flat = self.tape.reshape(h, &[s[0] * s[1], s[2]])?;
        self.tape.embedding(flat, positions, &[positions.len()])
    }

    /// Mean negative log-likelihood of the masked tokens.
    pub fn mlm_loss(&mut self, batch: &MaskedBatch) -> Result<Var> {
        let positions: Vec<usize> = (0..batch.target_ids.len()).filter(|&i| batch.target_ids[i] != IGNORE).collect();
        if positions.is_empty() {
            return Err(Error::NothingToPredict);
        }
        let h = self.encode(&batch.inputs, batch.segment_ids.as_deref())?;
        let rows = self.gather(h, &positions)?;
        let logits = self.lm_logits(rows)?;
        let targets: Vec<usize> = positions.iter().map(|&i| batch.target_ids[i] as usize).collect();
        let active = vec![true; targets.len()];
        self.tape.cross_entropy(logits, &targets, &active)
    }

    /// Query-stream hidden states `[B, T, d]` of the two-stream encoder.
    pub fn plm_query_states(&mut self, batch: &PermutationBatch) -> Result<Var> {
        let ids = &batch.inputs;
        let (b, t) = (ids.batch, ids.seq_len);
        let content_mask = self.expand_heads(&batch.content_mask, b, t);
        let query_mask = self.expand_heads(&batch.query_mask, b, t);
        let mut h = self.embed(ids, None)?;
        let mut g = self.query_init(b, t)?;
        for l in 0..self.params.config().n_layers {
            let h_next = self.block(l, h, h, &content_mask)?;
            g = self.block(l, g, h, &query_mask)?;
            h = h_next;
        }
        Ok(g)
    }

    /// LM logits from the query stream at the predicted positions, in flat
    /// position order.
    pub fn plm_logits(&mut self, batch: &PermutationBatch) -> Result<(Var, Vec<usize>)> {
        let positions: Vec<usize> = (0..batch.predict_flags.len()).filter(|&i| batch.predict_flags[i]).collect();
        if positions.is_empty() {
            return Err(Error::NothingToPredict);
        }
        let g = self.plm_query_states(batch)?;
        let rows = self.gather(g, &positions)?;
        Ok((self.lm_logits(rows)?, positions))
    }

    pub fn plm_loss(&mut self, batch: &PermutationBatch) -> Result<Var> {
        let (logits, positions) = self.plm_logits(batch)?;
        let targets: Vec<usize> = positions.iter().map(|&i| batch.inputs.ids[i] as usize).collect();
        let active = vec![true; targets.len()];
        self.tape.cross_entropy(logits, &targets, &active)
    }

    /// Two-class logits `[B, 2]` from the final CLS representation.
    pub fn classify_logits(&mut self, ids: &IdBatch) -> Result<Var> {
        if ids.seq_len == 0 || (0..ids.batch).any(|b| ids.row(b)[0] != CLS) {
            return Err(Error::MissingCls);
        }
        let h = self.encode(ids, None)?;
        let cls = self.tape.slice(h, 1, 0, 1)?;
        let cls = self.tape.reshape(cls, &[ids.batch, self.params.config().d_model])?;
        let w = self.p("cls_head.weight")?;
        self.tape.matmul(cls, w)
    }
}

pub fn mlm_loss(params: &ModelParameters, batch: &MaskedBatch) -> Result<f64> {
    let mut f = Forward::new(params);
    let l = f.mlm_loss(batch)?;
    Ok(f.tape().value(l).item())
}

/// Translation-LM loss on parallel `(src, tgt)` id pairs (content ids only).
pub fn tlm_loss(
    params: &ModelParameters,
    pairs: &[(Vec<u32>, Vec<u32>)],
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let batch = build_tlm_batch(pairs, params.config().max_seq_len, mask_prob, rng)?;
    mlm_loss(params, &batch)
}

pub fn plm_loss(params: &ModelParameters, batch: &PermutationBatch) -> Result<f64> {
    let mut f = Forward::new(params);
    let l = f.plm_loss(batch)?;
    Ok(f.tape().value(l).item())
}

pub fn classify(params: &ModelParameters, ids: &IdBatch) -> Result<Tensor> {
    let mut f = Forward::new(params);
    let l = f.classify_logits(ids)?;
    Ok(f.tape().value(l).clone())
}
