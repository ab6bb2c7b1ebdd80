use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{is_special, CLS, MASK, PAD, SEP};

/// Target value at positions that are not predicted.
pub const IGNORE: u32 = u32::MAX;

/// Right-padded `B × T` block of token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct IdBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    /// true at real (non-PAD) positions
    pub attn_mask: Vec<bool>,
}

impl IdBatch {
    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

pub fn pad_batch(seqs: &[Vec<u32>]) -> IdBatch {
    let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * t);
    let mut attn_mask = Vec::with_capacity(seqs.len() * t);
    for s in seqs {
        ids.extend_from_slice(s);
        attn_mask.extend(std::iter::repeat_n(true, s.len()));
        ids.extend(std::iter::repeat_n(PAD, t - s.len()));
        attn_mask.extend(std::iter::repeat_n(false, t - s.len()));
    }
    IdBatch { batch: seqs.len(), seq_len: t, ids, attn_mask }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub inputs: IdBatch,
    /// Original token at masked positions, [`IGNORE`] elsewhere.
    pub target_ids: Vec<u32>,
    pub n_masked: Vec<usize>,
    /// Segment id (0/1) per position; only set for the translation objective.
    pub segment_ids: Option<Vec<u8>>,
}

impl MaskedBatch {
    pub fn total_masked(&self) -> usize {
        self.n_masked.iter().sum()
    }
}

/// Replace a random subset of non-special tokens by MASK.
///
/// Each eligible position is picked independently with `mask_prob`. When
/// sampling picks nothing but something is eligible (and `mask_prob > 0`) one
/// position is forced; when it would pick every position of the sequence one
/// is released, so `0 < N < T`.
pub fn apply_mlm_masking(seqs: &[Vec<u32>], mask_prob: f64, rng: &mut Rng) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::invalid(format!("mask_prob {mask_prob} outside [0, 1]")));
    }
    let mut inputs = pad_batch(seqs);
    let t = inputs.seq_len;
    let mut target_ids = vec![IGNORE; inputs.ids.len()];
    let mut n_masked = Vec::with_capacity(seqs.len());
    for (b, s) in seqs.iter().enumerate() {
        let eligible: Vec<usize> = (0..s.len()).filter(|&i| !is_special(s[i])).collect();
        let mut picked: Vec<usize> =
            eligible.iter().copied().filter(|_| mask_prob > 0.0 && rng.random::<f64>() < mask_prob).collect();
        if picked.is_empty() && mask_prob > 0.0 {
            if let Some(&i) = eligible.choose(rng) {
                picked.push(i);
            }
        }
        if !picked.is_empty() && picked.len() == s.len() {
            let drop = rng.random_range(0..picked.len());
            picked.remove(drop);
        }
        for &i in &picked {
            target_ids[b * t + i] = s[i];
            inputs.ids[b * t + i] = MASK;
        }
        n_masked.push(picked.len());
    }
    Ok(MaskedBatch { inputs, target_ids, n_masked, segment_ids: None })
}

/// `[CLS] src [SEP] tgt [SEP]` with segment ids 0/1, then MLM masking over
/// both halves. An empty `tgt` yields `[CLS] src [SEP]`, all segment 0.
pub fn build_tlm_batch(
    pairs: &[(Vec<u32>, Vec<u32>)],
    max_seq_len: usize,
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<MaskedBatch> {
    let mut seqs = Vec::with_capacity(pairs.len());
    let mut segs = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        let specials = if tgt.is_empty() { 2 } else { 3 };
        let len = src.len() + tgt.len() + specials;
        if len > max_seq_len {
            return Err(Error::SequenceTooLong { len, max: max_seq_len });
        }
        let mut s = Vec::with_capacity(len);
        s.push(CLS);
        s.extend_from_slice(src);
        s.push(SEP);
        let mut seg = vec![0u8; s.len()];
        if !tgt.is_empty() {
            s.extend_from_slice(tgt);
            s.push(SEP);
            seg.resize(s.len(), 1);
        }
        seqs.push(s);
        segs.push(seg);
    }
    let mut batch = apply_mlm_masking(&seqs, mask_prob, rng)?;
    let t = batch.inputs.seq_len;
    let mut flat = vec![0u8; batch.inputs.ids.len()];
    for (b, seg) in segs.iter().enumerate() {
        flat[b * t..b * t + seg.len()].copy_from_slice(seg);
    }
    batch.segment_ids = Some(flat);
    Ok(batch)
}
