//! Moving a pre-trained encoder to a new language: embedding swap, freezing
//! and classifier fine-tuning, plus embedding-based data augmentation.

mod augment;
mod data;

pub use augment::{augment_dataset, augment_ids, AugmentConfig, AugmentOps, SynonymTable};
pub use data::{read_jsonl, write_jsonl, LabeledExample, Origin};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::model::{
    pad_batch, Forward, ModelParameters, CLS_HEAD, EMBEDDING_NORM, INIT_STD, MLM_HEAD, POSITIONAL, QUERY_STREAM,
    SEGMENT, TOKEN_EMBEDDINGS,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::parallel::{self, Exec};
use crate::rng::SeedStream;
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, NUM_SPECIALS};
use crate::word2vec::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePreset {
    /// Everything trains.
    None,
    /// Token embeddings fixed, the rest trains.
    TokenEmbeddings,
    /// Only token embeddings and the classifier train.
    EncoderAll,
    /// Like `TokenEmbeddings`, for runs whose token embeddings are random
    /// rather than trained on target text.
    EmbeddingsRandom,
}

impl FreezePreset {
    pub const ALL: [FreezePreset; 4] =
        [FreezePreset::None, FreezePreset::TokenEmbeddings, FreezePreset::EncoderAll, FreezePreset::EmbeddingsRandom];

    pub fn name(self) -> &'static str {
        match self {
            FreezePreset::None => "none",
            FreezePreset::TokenEmbeddings => "token_embeddings",
            FreezePreset::EncoderAll => "encoder_all",
            FreezePreset::EmbeddingsRandom => "embeddings_random",
        }
    }
}

impl fmt::Display for FreezePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreezePreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown freeze plan {s:?}")))
    }
}

/// Parameter groups that receive no optimizer updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePlan {
    frozen_groups: BTreeSet<String>,
}

impl FreezePlan {
    pub fn preset(preset: FreezePreset, params: &ModelParameters) -> FreezePlan {
        let frozen_groups = match preset {
            FreezePreset::None => BTreeSet::new(),
            FreezePreset::TokenEmbeddings | FreezePreset::EmbeddingsRandom => {
                BTreeSet::from([TOKEN_EMBEDDINGS.to_string()])
            }
            FreezePreset::EncoderAll => {
                params.groups().into_iter().filter(|g| g != TOKEN_EMBEDDINGS && g != CLS_HEAD).collect()
            }
        };
        FreezePlan { frozen_groups }
    }

    /// A custom plan. The classifier head can never be frozen.
    pub fn custom<I: IntoIterator<Item = S>, S: Into<String>>(groups: I) -> Result<FreezePlan> {
        let frozen_groups: BTreeSet<String> = groups.into_iter().map(Into::into).collect();
        if frozen_groups.contains(CLS_HEAD) {
            return Err(Error::invalid("the classifier head cannot be frozen"));
        }
        Ok(FreezePlan { frozen_groups })
    }

    pub fn frozen_groups(&self) -> &BTreeSet<String> {
        &self.frozen_groups
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen_groups.contains(group)
    }

    pub fn mask(&self, params: &ModelParameters) -> Vec<bool> {
        params.mask_for_groups(&self.frozen_groups)
    }
}

/// Seeded N(0, 0.02) table bound to `vocab`, for runs without trained
/// embeddings.
pub fn random_embeddings(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let mut rng = SeedStream::new(seed).rng("embeddings/random");
    EmbeddingTable::new(Tensor::randn(&[vocab.len(), dim], INIT_STD, &mut rng), vocab.hash())
}

/// Graft target-language token embeddings onto `params`.
///
/// Token embeddings become the table's rows, except the special tokens' rows
/// which are redrawn from N(0, 0.02) (the table never trains them). The LM
/// head is untied and rebuilt for the new vocabulary: its weight starts as
/// the transposed table and its bias at zero. Every other group is returned
/// untouched.
pub fn swap_embeddings(
    params: &ModelParameters,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    seed: u64,
) -> Result<ModelParameters> {
    let d = params.config().d_model;
    if table.dim() != d {
        return Err(Error::DimensionMismatch { table: table.dim(), model: d });
    }
    table.check_vocab(vocab)?;
    let v = vocab.len();
    let mut rng = SeedStream::new(seed).rng("swap/specials");
    let mut emb = table.matrix().clone();
    for id in 0..NUM_SPECIALS.min(v) {
        let fresh = Tensor::randn(&[d], INIT_STD, &mut rng);
        emb.row_mut(id).copy_from_slice(fresh.data());
    }
    let mut head = Tensor::zeros(&[d, v]);
    for (i, row) in emb.data().chunks_exact(d).enumerate() {
        for (k, &x) in row.iter().enumerate() {
            head.data_mut()[k * v + i] = x;
        }
    }
    let mut out = params.clone();
    out.put("token_embeddings.weight", emb);
    out.put("mlm_head.weight", head);
    out.put("mlm_head.bias", Tensor::zeros(&[v]));
    let cfg = out.config_mut();
    cfg.vocab_size = v;
    cfg.tie_mlm_head = false;
    out.set_vocab_hash(vocab.hash());
    Ok(out)
}

/// Groups that a swap is allowed to touch.
pub fn swap_groups() -> BTreeSet<String> {
    BTreeSet::from([TOKEN_EMBEDDINGS.to_string(), MLM_HEAD.to_string()])
}

/// Groups outside the encoder stack proper, in init order.
pub fn embedding_side_groups() -> [&'static str; 5] {
    [TOKEN_EMBEDDINGS, POSITIONAL, SEGMENT, EMBEDDING_NORM, QUERY_STREAM]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { lr: 2e-5, batch_size: 32, max_len: 180, epochs: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Macro-F1 on the dev set; absent when there is no dev set.
    pub dev_f1: Option<f64>,
    pub dev_binary_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneHistory {
    pub epochs: Vec<EpochRecord>,
}

fn encode_all(vocab: &Vocabulary, data: &[LabeledExample], max_len: usize) -> Vec<Vec<u32>> {
    data.iter().map(|e| vocab.encode(&e.text, max_len, true).ids).collect()
}

fn effective_max_len(params: &ModelParameters, max_len: usize) -> usize {
    max_len.min(params.config().max_seq_len).max(2)
}

fn check_vocab(params: &ModelParameters, vocab: &Vocabulary) -> Result<()> {
    let h = vocab.hash();
    if h != params.vocab_hash() || vocab.len() != params.config().vocab_size {
        return Err(Error::VocabHashMismatch {
            table: crate::tokenizer::hash_hex(&params.vocab_hash()),
            vocab: crate::tokenizer::hash_hex(&h),
        });
    }
    Ok(())
}

/// Train the classifier on `train`, leaving frozen groups bit-identical.
///
/// Each epoch visits the training set in a fresh seeded order, in batches
/// of `cfg.batch_size`, then scores `dev`.
pub fn fine_tune(
    params: &ModelParameters,
    plan: &FreezePlan,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    cfg: &FineTuneConfig,
) -> Result<(ModelParameters, FineTuneHistory)> {
    if train.iter().all(|e| e.label == 0) || train.iter().all(|e| e.label == 1) {
        return Err(Error::SingleClass);
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if plan.is_frozen(CLS_HEAD) {
        return Err(Error::invalid("the classifier head cannot be frozen"));
    }
    check_vocab(params, vocab)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let max_len = effective_max_len(params, cfg.max_len);
    let ids = encode_all(vocab, train, max_len);
    let labels: Vec<usize> = train.iter().map(|e| e.label as usize).collect();
    let streams = SeedStream::new(cfg.seed).child("finetune");
    let mut params = params.clone();
    let frozen = plan.mask(&params);
    let mut state = AdamState::new(params.tensors());
    let mut history = FineTuneHistory::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut streams.rng(&format!("order/{epoch}")));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|&i| ids[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads;
            {
                let mut f = Forward::training(&params, streams.rng(&format!("dropout/{epoch}/{bi}")));
                let logits = f.classify_logits(&pad_batch(&seqs))?;
                let loss = f.tape_mut().cross_entropy(logits, &targets, &vec![true; targets.len()])?;
                loss_sum += f.tape().value(loss).item() * chunk.len() as f64;
                grads = f.backward(loss)?;
            }
            adam_step(params.tensors_mut(), &grads, &mut state, &adam, &frozen)?;
        }
        let (dev_f1, dev_binary_f1) = if dev.is_empty() {
            (None, None)
        } else {
            let c = evaluate(&params, vocab, dev, max_len)?;
            (Some(c.macro_f1()), Some(c.positive_f1()))
        };
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, dev_f1, dev_binary_f1 });
    }
    Ok((params, history))
}

const PREDICT_CHUNK: usize = 64;

/// Argmax labels for `texts`, computed in independent chunks.
pub fn predict<S: AsRef<str> + Sync>(
    params: &ModelParameters,
    vocab: &Vocabulary,
    texts: &[S],
    max_len: usize,
) -> Result<Vec<u8>> {
    predict_with(Exec::best(), params, vocab, texts, max_len)
}

pub fn predict_with<S: AsRef<str> + Sync>(
    exec: Exec,
    params: &ModelParameters,
    vocab: &Vocabulary,
    texts: &[S],
    max_len: usize,
) -> Result<Vec<u8>> {
    check_vocab(params, vocab)?;
    let max_len = effective_max_len(params, max_len);
    let chunks: Vec<&[S]> = texts.chunks(PREDICT_CHUNK).collect();
    let parts = parallel::map(exec, chunks, |chunk| -> Result<Vec<u8>> {
        let seqs: Vec<Vec<u32>> = chunk.iter().map(|t| vocab.encode(t.as_ref(), max_len, true).ids).collect();
        let logits = crate::model::classify(params, &pad_batch(&seqs))?;
        Ok(logits.data().chunks_exact(2).map(|r| u8::from(r[1] > r[0])).collect())
    });
    let mut out = Vec::with_capacity(texts.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Confusion counts of the classifier on `data`.
pub fn evaluate(
    params: &ModelParameters,
    vocab: &Vocabulary,
    data: &[LabeledExample],
    max_len: usize,
) -> Result<Confusion> {
    let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
    let preds = predict(params, vocab, &texts, max_len)?;
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    Confusion::from_predictions(&preds, &labels)
}
