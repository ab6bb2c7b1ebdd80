//! Skip-gram with negative sampling over subword ids.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{self, Exec};
use crate::rng::{Rng, SeedStream};
use crate::tensor::Tensor;
use crate::tokenizer::{hash_hex, is_special, Vocabulary};

const MAGIC: &[u8; 6] = b"XFEMB1";
const LOSS_WINDOW: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgnsConfig {
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Frequent-token subsampling threshold; 0 disables subsampling.
    pub subsample_threshold: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig { window: 5, negatives: 5, epochs: 5, lr: 0.025, subsample_threshold: 1e-3, seed: 0 }
    }
}

/// Context-independent vectors, one row per vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
    vocab_hash: [u8; 16],
}

#[derive(Clone, Debug, Default)]
pub struct SgnsStats {
    /// Mean loss over the last 1,000 pairs of each epoch.
    pub epoch_loss: Vec<f64>,
    pub pairs_seen: usize,
}

impl EmbeddingTable {
    pub fn new(matrix: Tensor, vocab_hash: [u8; 16]) -> Result<Self> {
        if matrix.ndim() != 2 {
            return Err(Error::shape("embedding table", format!("expected 2-D matrix, got {:?}", matrix.shape())));
        }
        if !matrix.is_finite() {
            return Err(Error::invalid("embedding table contains non-finite values"));
        }
        Ok(EmbeddingTable { matrix, vocab_hash })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn vocab_hash(&self) -> [u8; 16] {
        self.vocab_hash
    }

    pub fn row(&self, id: u32) -> &[f64] {
        self.matrix.row(id as usize)
    }

    /// Fails unless the table was trained for exactly this vocabulary.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let h = vocab.hash();
        if h != self.vocab_hash || self.rows() != vocab.len() {
            return Err(Error::VocabHashMismatch { table: hash_hex(&self.vocab_hash), vocab: hash_hex(&h) });
        }
        Ok(())
    }

    /// Copy with the mean non-special row subtracted from every non-special
    /// row. Small corpora give vectors sharing one dominant direction; this
    /// removes it.
    pub fn centered(&self) -> EmbeddingTable {
        let (v, d) = (self.rows(), self.dim());
        let ids: Vec<usize> = (0..v).filter(|&i| !is_special(i as u32)).collect();
        let mut mean = vec![0.0; d];
        for &i in &ids {
            for (m, x) in mean.iter_mut().zip(self.matrix.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= ids.len().max(1) as f64);
        let mut matrix = self.matrix.clone();
        for &i in &ids {
            for (x, m) in matrix.row_mut(i).iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        EmbeddingTable { matrix, vocab_hash: self.vocab_hash }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&self.vocab_hash)?;
        let mut buf = Vec::with_capacity(self.matrix.numel() * 4);
        for &v in self.matrix.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("embedding file", "bad magic"));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let rows = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let dim = u32::from_le_bytes(u) as usize;
        let mut vocab_hash = [0u8; 16];
        r.read_exact(&mut vocab_hash)?;
        let mut buf = vec![0u8; rows * dim * 4];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        EmbeddingTable::new(Tensor::new(vec![rows, dim], data)?, vocab_hash)
    }
}

/// (center, context) pairs with a per-position window drawn uniformly from
/// `1..=window`. Special tokens are neither centers nor contexts.
pub fn build_pairs(corpus: &[Vec<u32>], window: usize, rng: &mut Rng) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for seq in corpus {
        for (i, &center) in seq.iter().enumerate() {
            let w = if window <= 1 { 1 } else { rng.random_range(1..=window) };
            if is_special(center) {
                continue;
            }
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(seq.len() - 1);
            for (j, &ctx) in seq.iter().enumerate().take(hi + 1).skip(lo) {
                if j != i && !is_special(ctx) {
                    pairs.push((center, ctx));
                }
            }
        }
    }
    pairs
}

/// Loss of one (center, context, negatives) example and its gradients with
/// respect to the center vector, the context vector and each negative.
pub fn sgns_loss_and_grads(
    center: &[f64],
    context: &[f64],
    negatives: &[&[f64]],
) -> (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let s = dot(center, context);
    let mut loss = -log_sigmoid(s);
    let gpos = sigmoid(s) - 1.0;
    let mut dcenter: Vec<f64> = context.iter().map(|v| gpos * v).collect();
    let dcontext: Vec<f64> = center.iter().map(|u| gpos * u).collect();
    let mut dnegs = Vec::with_capacity(negatives.len());
    for n in negatives {
        let sn = dot(center, n);
        loss -= log_sigmoid(-sn);
        let g = sigmoid(sn);
        for (dc, v) in dcenter.iter_mut().zip(n.iter()) {
            *dc += g * v;
        }
        dnegs.push(center.iter().map(|u| g * u).collect());
    }
    (loss, dcenter, dcontext, dnegs)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn train_sgns(corpus: &[Vec<u32>], vocab: &Vocabulary, dim: usize, cfg: &SgnsConfig) -> Result<EmbeddingTable> {
    train_sgns_with_stats(corpus, vocab, dim, cfg).map(|(t, _)| t)
}

pub fn train_sgns_with_stats(
    corpus: &[Vec<u32>],
    vocab: &Vocabulary,
    dim: usize,
    cfg: &SgnsConfig,
) -> Result<(EmbeddingTable, SgnsStats)> {
    if cfg.window == 0 || cfg.negatives == 0 {
        return Err(Error::invalid("window and negatives must be at least 1"));
    }
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let v = vocab.len();
    if let Some(&bad) = corpus.iter().flatten().find(|&&id| id as usize >= v) {
        return Err(Error::TokenOutOfRange { id: bad, size: v });
    }
    let has_pair = corpus.iter().any(|s| s.iter().filter(|&&id| !is_special(id)).count() >= 2);
    if !has_pair {
        return Err(Error::CorpusTooSmall);
    }

    let seeds = SeedStream::new(cfg.seed);
    let bound = 0.5 / dim as f64;
    let mut input = Tensor::uniform(&[v, dim], -bound, bound, &mut seeds.rng("sgns/init"));
    let mut output = vec![0.0; v * dim];
    let mut stats = SgnsStats::default();

    let mut counts = vec![0u64; v];
    for &id in corpus.iter().flatten() {
        if !is_special(id) {
            counts[id as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75)))
        .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
    let keep_prob: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if cfg.subsample_threshold <= 0.0 || c == 0 {
                return 1.0;
            }
            let f = c as f64 / total as f64;
            let t = cfg.subsample_threshold;
            ((f / t).sqrt() + 1.0) * t / f
        })
        .collect();

    let mut rng = seeds.rng("sgns/train");
    let total_steps = (cfg.epochs as u64 * total).max(1) as f64;
    let mut processed = 0u64;
    let mut recent = std::collections::VecDeque::with_capacity(LOSS_WINDOW);
    let mut neg_ids = Vec::with_capacity(cfg.negatives);

    for _ in 0..cfg.epochs {
        for seq in corpus {
            let kept: Vec<u32> = seq
                .iter()
                .copied()
                .filter(|&id| {
                    !is_special(id) && (keep_prob[id as usize] >= 1.0 || rng.random::<f64>() < keep_prob[id as usize])
                })
                .collect();
            processed += seq.iter().filter(|&&id| !is_special(id)).count() as u64;
            let lr = cfg.lr * (1.0 - processed as f64 / total_steps).max(1e-4);
            let pairs = build_pairs(std::slice::from_ref(&kept), cfg.window, &mut rng);
            for (c, o) in pairs {
                neg_ids.clear();
                for _ in 0..cfg.negatives {
                    let n = noise.sample(&mut rng) as u32;
                    if n != o {
                        neg_ids.push(n);
                    }
                }
                let (cu, co) = (c as usize * dim, o as usize * dim);
                let loss = {
                    let center = &input.data()[cu..cu + dim];
                    let negs: Vec<&[f64]> =
                        neg_ids.iter().map(|&n| &output[n as usize * dim..(n as usize + 1) * dim]).collect();
                    let (loss, dc, dctx, dn) = sgns_loss_and_grads(center, &output[co..co + dim], &negs);
                    for (w, g) in output[co..co + dim].iter_mut().zip(&dctx) {
                        *w -= lr * g;
                    }
                    for (&n, g) in neg_ids.iter().zip(&dn) {
                        let base = n as usize * dim;
                        for (w, gv) in output[base..base + dim].iter_mut().zip(g) {
                            *w -= lr * gv;
                        }
                    }
                    for (w, g) in input.data_mut()[cu..cu + dim].iter_mut().zip(&dc) {
                        *w -= lr * g;
                    }
                    loss
                };
                if recent.len() == LOSS_WINDOW {
                    recent.pop_front();
                }
                recent.push_back(loss);
                stats.pairs_seen += 1;
            }
        }
        if !recent.is_empty() {
            stats.epoch_loss.push(recent.iter().sum::<f64>() / recent.len() as f64);
        }
    }
    Ok((EmbeddingTable::new(input, vocab.hash())?, stats))
}

/// The `k` most cosine-similar non-special tokens to `token_id`, most similar
/// first, ties broken by smaller id.
pub fn nearest_neighbors(table: &EmbeddingTable, token_id: u32, k: usize) -> Result<Vec<(u32, f64)>> {
    nearest_neighbors_with(Exec::best(), table, token_id, k)
}

pub fn nearest_neighbors_with(exec: Exec, table: &EmbeddingTable, token_id: u32, k: usize) -> Result<Vec<(u32, f64)>> {
    let v = table.rows();
    if token_id as usize >= v {
        return Err(Error::TokenOutOfRange { id: token_id, size: v });
    }
    if k >= v {
        return Err(Error::invalid(format!("k = {k} must be smaller than the vocabulary ({v})")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let q = table.row(token_id);
    let qn = norm(q);
    let ids: Vec<u32> = (0..v as u32).filter(|&i| i != token_id && !is_special(i)).collect();
    let mut scored = parallel::map(exec, ids, |i| {
        let r = table.row(i);
        let denom = qn * norm(r);
        let cos = if denom > 0.0 { q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / denom } else { 0.0 };
        (i, cos)
    });
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
