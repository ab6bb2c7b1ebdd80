use rand::seq::SliceRandom;

use super::masking::{pad_batch, IdBatch};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::is_special;

/// Inputs for the permutation objective.
///
/// Per example the factorization order lists special positions first (in
/// sequence order), then the content positions in a uniformly random order,
/// then padding. The last `ceil(c · n_content)` content positions of the
/// order are predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationBatch {
    pub inputs: IdBatch,
    /// `B × T`: `order[b][k]` is the position visited at step `k`.
    pub factorization_order: Vec<usize>,
    /// `B × T`, indexed by position.
    pub predict_flags: Vec<bool>,
    /// `B × T × T`: position `i` may attend to `j` iff `j` comes no later than `i`.
    pub content_mask: Vec<bool>,
    /// `B × T × T`: position `i` may attend to `j` iff `j` comes strictly before `i`.
    pub query_mask: Vec<bool>,
}

impl PermutationBatch {
    pub fn order(&self, b: usize) -> &[usize] {
        let t = self.inputs.seq_len;
        &self.factorization_order[b * t..(b + 1) * t]
    }

    pub fn n_predicted(&self) -> usize {
        self.predict_flags.iter().filter(|&&f| f).count()
    }
}

pub fn build_permutation_batch(seqs: &[Vec<u32>], predict_frac: f64, rng: &mut Rng) -> Result<PermutationBatch> {
    if !(predict_frac > 0.0 && predict_frac <= 0.5) {
        return Err(Error::invalid(format!("predict fraction {predict_frac} outside (0, 0.5]")));
    }
    let inputs = pad_batch(seqs);
    let (bsz, t) = (inputs.batch, inputs.seq_len);
    let mut factorization_order = Vec::with_capacity(bsz * t);
    let mut predict_flags = vec![false; bsz * t];
    let mut content_mask = vec![false; bsz * t * t];
    let mut query_mask = vec![false; bsz * t * t];
    for (b, s) in seqs.iter().enumerate() {
        let specials: Vec<usize> = (0..s.len()).filter(|&i| is_special(s[i])).collect();
        let mut content: Vec<usize> = (0..s.len()).filter(|&i| !is_special(s[i])).collect();
        content.shuffle(rng);
        let n_pred = (predict_frac * content.len() as f64).ceil() as usize;
        for &i in &content[content.len() - n_pred..] {
            predict_flags[b * t + i] = true;
        }
        let order: Vec<usize> = specials.into_iter().chain(content).chain(s.len()..t).collect();
        let mut rank = vec![0; t];
        for (k, &pos) in order.iter().enumerate() {
            rank[pos] = k;
        }
        for i in 0..t {
            for j in 0..t {
                content_mask[(b * t + i) * t + j] = rank[j] <= rank[i];
                query_mask[(b * t + i) * t + j] = rank[j] < rank[i];
            }
        }
        factorization_order.extend(order);
    }
    Ok(PermutationBatch { inputs, factorization_order, predict_flags, content_mask, query_mask })
}
