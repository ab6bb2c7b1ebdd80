use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forward::Forward;
use super::masking::{apply_mlm_masking, build_tlm_batch};
use super::permutation::build_permutation_batch;
use super::ModelParameters;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Tlm,
    Plm,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Mlm, Objective::Tlm, Objective::Plm];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Tlm => "tlm",
            Objective::Plm => "plm",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown objective {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    /// Fraction of content positions predicted by the permutation objective.
    pub predict_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 200, batch_size: 16, lr: 1e-3, mask_prob: 0.15, predict_frac: 1.0 / 6.0 }
    }
}

/// Training text for [`pretrain`]. `sequences` are `[CLS] .. [SEP]` id
/// sequences; `pairs` are content-only parallel id pairs for the translation
/// objective.
#[derive(Clone, Debug, Default)]
pub struct PretrainData {
    pub sequences: Vec<Vec<u32>>,
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

/// Run `cfg.steps` Adam steps of `objective`, cycling through reshuffled
/// passes over the data. Returns the loss of every step.
pub fn pretrain(
    params: &mut ModelParameters,
    objective: Objective,
    data: &PretrainData,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = match objective {
        Objective::Tlm => data.pairs.len(),
        _ => data.sequences.len(),
    };
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let streams = SeedStream::new(seed).child(&format!("pretrain/{}", objective.name()));
    let mut order_rng = streams.rng("order");
    let mut batch_rng = streams.rng("batches");
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(params.tensors());
    let frozen = vec![false; params.len()];
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(n) {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut order_rng);
            }
            idx.push(order.pop().unwrap());
        }
        let grads;
        {
            let mut f = Forward::training(params, streams.rng(&format!("dropout/{step}")));
            let loss = match objective {
                Objective::Mlm => {
                    let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| data.sequences[i].clone()).collect();
                    let batch = apply_mlm_masking(&seqs, cfg.mask_prob, &mut batch_rng)?;
                    f.mlm_loss(&batch)?
                }
                Objective::Tlm => {
                    let pairs: Vec<_> = idx.iter().map(|&i| data.pairs[i].clone()).collect();
                    let batch = build_tlm_batch(&pairs, params.config().max_seq_len, cfg.mask_prob, &mut batch_rng)?;
                    f.mlm_loss(&batch)?
                }
                Objective::Plm => {
                    let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| data.sequences[i].clone()).collect();
                    let batch = build_permutation_batch(&seqs, cfg.predict_frac, &mut batch_rng)?;
                    f.plm_loss(&batch)?
                }
            };
            losses.push(f.tape().value(loss).item());
            grads = f.backward(loss)?;
        }
        adam_step(params.tensors_mut(), &grads, &mut state, &adam, &frozen)?;
    }
    Ok(losses)
}
