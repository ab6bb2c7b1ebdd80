//! A small post-LN transformer encoder with MLM, TLM and PLM objectives and a
//! two-class sequence head.
//!
//! Parameters live in a flat, named store. Every tensor belongs to a *group*
//! (`token_embeddings`, `positional`, `blocks.0`, `cls_head`, ...); groups are
//! the unit of freezing and of checkpoint diffs.

mod checkpoint;
mod forward;
mod masking;
mod permutation;
mod pretrain;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

pub use checkpoint::{changed_groups, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{classify, mlm_loss, plm_loss, tlm_loss, Forward};
pub use masking::{apply_mlm_masking, build_tlm_batch, pad_batch, IdBatch, MaskedBatch, IGNORE};
pub use permutation::{build_permutation_batch, PermutationBatch};
pub use pretrain::{pretrain, Objective, PretrainConfig, PretrainData};

pub const INIT_STD: f64 = 0.02;

pub const TOKEN_EMBEDDINGS: &str = "token_embeddings";
pub const POSITIONAL: &str = "positional";
pub const SEGMENT: &str = "segment";
pub const EMBEDDING_NORM: &str = "embedding_norm";
pub const QUERY_STREAM: &str = "query_stream";
pub const MLM_HEAD: &str = "mlm_head";
pub const CLS_HEAD: &str = "cls_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Output projection of the LM head shares the token embedding matrix.
    pub tie_mlm_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 200,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 180,
            dropout: 0.1,
            tie_mlm_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must be at least 2"));
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return Err(Error::invalid("vocab_size must exceed the special tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if self.d_ff == 0 {
            return Err(Error::invalid("d_ff must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Starting point of this toolkit's own pre-training run.
    PretrainedSurrogate,
    /// Randomized weights, never pre-trained.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    vocab_hash: [u8; 16],
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Group a tensor name belongs to: `blocks.<i>` for encoder layers, else the
/// first path component.
pub fn group_of(name: &str) -> &str {
    if let Some(rest) = name.strip_prefix("blocks.") {
        let end = rest.find('.').map_or(name.len(), |i| "blocks.".len() + i);
        &name[..end]
    } else {
        name.split('.').next().unwrap_or(name)
    }
}

pub fn block_group(i: usize) -> String {
    format!("blocks.{i}")
}

impl ModelParameters {
    /// Fresh parameters. Weight matrices, embeddings, biases and norm shifts
    /// are drawn from N(0, 0.02); norm scales start at 1.
    pub fn init(cfg: &ModelConfig, seed: u64, mode: InitMode) -> Result<Self> {
        cfg.validate()?;
        let label = match mode {
            InitMode::PretrainedSurrogate => "init/pretrained-surrogate",
            InitMode::Random => "init/random",
        };
        let mut rng = SeedStream::new(seed).rng(label);
        let (v, d, f, l) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let mut p =
            ModelParameters { config: cfg.clone(), vocab_hash: [0; 16], names: Vec::new(), tensors: Vec::new() };
        let add = |p: &mut ModelParameters, name: String, t: Tensor| {
            p.names.push(name);
            p.tensors.push(t);
        };
        let mut normal = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);

        add(&mut p, "token_embeddings.weight".into(), normal(&[v, d]));
        add(&mut p, "positional.weight".into(), normal(&[l, d]));
        add(&mut p, "segment.weight".into(), normal(&[2, d]));
        add(&mut p, "embedding_norm.gamma".into(), Tensor::full(&[d], 1.0));
        add(&mut p, "embedding_norm.beta".into(), normal(&[d]));
        add(&mut p, "query_stream.weight".into(), normal(&[d]));
        for i in 0..cfg.n_layers {
            let b = block_group(i);
            for w in ["wq", "wk", "wv", "wo"] {
                add(&mut p, format!("{b}.attn.{w}"), normal(&[d, d]));
                add(&mut p, format!("{b}.attn.b{}", &w[1..]), normal(&[d]));
            }
            add(&mut p, format!("{b}.ln1.gamma"), Tensor::full(&[d], 1.0));
            add(&mut p, format!("{b}.ln1.beta"), normal(&[d]));
            add(&mut p, format!("{b}.ffn.w1"), normal(&[d, f]));
            add(&mut p, format!("{b}.ffn.b1"), normal(&[f]));
            add(&mut p, format!("{b}.ffn.w2"), normal(&[f, d]));
            add(&mut p, format!("{b}.ffn.b2"), normal(&[d]));
            add(&mut p, format!("{b}.ln2.gamma"), Tensor::full(&[d], 1.0));
            add(&mut p, format!("{b}.ln2.beta"), normal(&[d]));
        }
        add(&mut p, "mlm_head.bias".into(), normal(&[v]));
        if !cfg.tie_mlm_head {
            add(&mut p, "mlm_head.weight".into(), normal(&[d, v]));
        }
        add(&mut p, "cls_head.weight".into(), normal(&[d, 2]));
        Ok(p)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab_hash: [u8; 16],
        names: Vec<String>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let p = ModelParameters { config, vocab_hash, names, tensors };
        for required in ["token_embeddings.weight", "positional.weight", "mlm_head.bias", "cls_head.weight"] {
            p.id(required)?;
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_hash(&self) -> [u8; 16] {
        self.vocab_hash
    }

    pub fn set_vocab_hash(&mut self, h: [u8; 16]) {
        self.vocab_hash = h;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    /// Group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for n in &self.names {
            let g = group_of(n);
            if seen.insert(g.to_string()) {
                out.push(g.to_string());
            }
        }
        out
    }

    /// (name, tensor) pairs belonging to `group`.
    pub fn group(&self, group: &str) -> Vec<(&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| group_of(n) == group)
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    /// Per-tensor flags: true where the tensor's group is in `groups`.
    pub fn mask_for_groups(&self, groups: &BTreeSet<String>) -> Vec<bool> {
        self.names.iter().map(|n| groups.contains(group_of(n))).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Replace a tensor (possibly with a new shape) or append it.
    pub(crate) fn put(&mut self, name: &str, t: Tensor) {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.tensors[i] = t,
            None => {
                // keep group members contiguous: insert after the last tensor of the same group
                let g = group_of(name).to_string();
                let at = self.names.iter().rposition(|n| group_of(n) == g).map_or(self.names.len(), |i| i + 1);
                self.names.insert(at, name.to_string());
                self.tensors.insert(at, t);
            }
        }
    }

    pub(crate) fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }
}

/// Convenience wrapper over [`ModelParameters::init`].
pub fn init_model(cfg: &ModelConfig, seed: u64, mode: InitMode) -> Result<ModelParameters> {
    ModelParameters::init(cfg, seed, mode)
}
