use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::{LabeledExample, Origin};
use crate::error::{Error, Result};
use crate::parallel::{self, Exec};
use crate::rng::Rng;
use crate::tokenizer::{is_special, Vocabulary};
use crate::word2vec::{nearest_neighbors_with, EmbeddingTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentOps {
    pub synonym_replacement: bool,
    pub random_swap: bool,
    pub random_insertion: bool,
    pub random_deletion: bool,
}

impl Default for AugmentOps {
    fn default() -> Self {
        AugmentOps { synonym_replacement: true, random_swap: false, random_insertion: false, random_deletion: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Per-token probability, also the intensity of the other ops.
    pub replace_prob: f64,
    pub min_cosine: f64,
    pub k_candidates: usize,
    pub copies_per_example: usize,
    pub ops: AugmentOps,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            replace_prob: 0.1,
            min_cosine: 0.5,
            k_candidates: 5,
            copies_per_example: 1,
            ops: AugmentOps::default(),
        }
    }
}

impl AugmentConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(Error::invalid(format!("replace_prob {} outside [0, 1]", self.replace_prob)));
        }
        if !(-1.0..=1.0).contains(&self.min_cosine) {
            return Err(Error::invalid(format!("min_cosine {} outside [-1, 1]", self.min_cosine)));
        }
        Ok(())
    }
}

/// Replacement candidates per token id: up to `k` nearest neighbours with
/// cosine at least `min_cosine`. Specials have none.
#[derive(Clone, Debug, PartialEq)]
pub struct SynonymTable {
    candidates: Vec<Vec<u32>>,
}

impl SynonymTable {
    pub fn build(table: &EmbeddingTable, k: usize, min_cosine: f64) -> Result<Self> {
        Self::build_with(Exec::best(), table, k, min_cosine)
    }

    pub fn build_with(exec: Exec, table: &EmbeddingTable, k: usize, min_cosine: f64) -> Result<Self> {
        let v = table.rows();
        let k = k.min(v.saturating_sub(1));
        let ids: Vec<u32> = (0..v as u32).collect();
        let lists = parallel::map(exec, ids, |id| -> Result<Vec<u32>> {
            if is_special(id) || k == 0 {
                return Ok(Vec::new());
            }
            Ok(nearest_neighbors_with(Exec::Sequential, table, id, k)?
                .into_iter()
                .filter(|&(_, c)| c >= min_cosine)
                .map(|(n, _)| n)
                .collect())
        });
        Ok(SynonymTable { candidates: lists.into_iter().collect::<Result<_>>()? })
    }

    pub fn candidates(&self, id: u32) -> &[u32] {
        self.candidates.get(id as usize).map_or(&[], Vec::as_slice)
    }
}

fn ops_count(p: f64, len: usize) -> usize {
    ((p * len as f64).round() as usize).max(1)
}

/// One augmented variant of a token sequence. Synonym replacement runs
/// first, then swap, insertion and deletion when enabled.
pub fn augment_ids(ids: &[u32], synonyms: &SynonymTable, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<u32> {
    let p = cfg.replace_prob;
    let mut out = ids.to_vec();
    if cfg.ops.synonym_replacement {
        for t in out.iter_mut() {
            if !is_special(*t) && rng.random::<f64>() < p {
                if let Some(&s) = synonyms.candidates(*t).choose(rng) {
                    *t = s;
                }
            }
        }
    }
    let content = |v: &[u32]| -> Vec<usize> { (0..v.len()).filter(|&i| !is_special(v[i])).collect() };
    if cfg.ops.random_swap && p > 0.0 {
        let pos = content(&out);
        if pos.len() >= 2 {
            for _ in 0..ops_count(p, pos.len()) {
                let a = *pos.choose(rng).unwrap();
                let b = *pos.choose(rng).unwrap();
                out.swap(a, b);
            }
        }
    }
    if cfg.ops.random_insertion && p > 0.0 {
        let n = ops_count(p, content(&out).len());
        for _ in 0..n {
            let pos = content(&out);
            let Some(&src) = pos.choose(rng) else { break };
            let Some(&s) = synonyms.candidates(out[src]).choose(rng) else { continue };
            let at = *pos.choose(rng).unwrap();
            out.insert(at, s);
        }
    }
    if cfg.ops.random_deletion && p > 0.0 {
        let pos = content(&out);
        let mut keep = vec![true; out.len()];
        for &i in &pos {
            keep[i] = rng.random::<f64>() >= p;
        }
        if !pos.is_empty() && pos.iter().all(|&i| !keep[i]) {
            keep[*pos.choose(rng).unwrap()] = true;
        }
        out = out.into_iter().zip(keep).filter(|&(_, k)| k).map(|(t, _)| t).collect();
    }
    out
}

/// Originals followed by `copies_per_example` variants of each, labels
/// carried over. A variant whose tokens did not change repeats the source
/// text verbatim.
pub fn augment_dataset(
    data: &[LabeledExample],
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Vec<LabeledExample>> {
    cfg.validate()?;
    table.check_vocab(vocab)?;
    let synonyms = SynonymTable::build(table, cfg.k_candidates, cfg.min_cosine)?;
    let mut out = Vec::with_capacity(data.len() * (1 + cfg.copies_per_example));
    for e in data {
        out.push(e.clone());
        let ids = vocab.encode(&e.text, usize::MAX, false).ids;
        for _ in 0..cfg.copies_per_example {
            let new = augment_ids(&ids, &synonyms, cfg, rng);
            let text = if new == ids { e.text.clone() } else { vocab.decode(&new)? };
            out.push(LabeledExample { text, label: e.label, origin: Origin::Augmented });
        }
    }
    Ok(out)
}
