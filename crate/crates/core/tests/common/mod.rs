//! Helpers shared by the integration test targets: finite-difference
//! gradient checks, a brute-force BPE oracle and small fixtures.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use xfer::autodiff::{Gradients, Tape, Var};
use xfer::model::{
    apply_mlm_masking, build_permutation_batch, build_tlm_batch, init_model, mlm_loss, plm_loss, Forward, InitMode,
    ModelConfig, ModelParameters,
};
use xfer::rng::{Rng, SeedStream};
use xfer::tokenizer::{pretokenize, train_vocab, Vocabulary, CLS, NUM_SPECIALS, SEP};
use xfer::transfer::LabeledExample;
use xfer::word2vec::{train_sgns, EmbeddingTable, SgnsConfig};
use xfer::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

/// Elementwise relative error; entries where both sides are below `1e-7`
/// in magnitude count as agreeing.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> xfer::Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Max relative error between backward and central differences for the
/// scalar `sum(f(inputs) * w)`, `w` a fixed random weighting.
pub fn check_op<F>(seed: u64, shapes: &[&[usize]], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> xfer::Result<Var>,
{
    let mut rng = SeedStream::new(seed).rng("gradcheck/op");
    let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
    let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (f64, Option<Gradients>, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        let out = f(&mut tape, &vars).expect("op");
        let out_value = tape.value(out).clone();
        match weights {
            Some(w) => {
                let loss = weighted_sum(&mut tape, out, w).expect("loss");
                let g = tape.backward(loss).expect("backward");
                (tape.value(loss).item(), Some(g), out_value)
            }
            None => (0.0, None, out_value),
        }
    };
    let (_, _, probe) = eval(&inputs, None);
    let weights = Tensor::randn(probe.shape(), 1.0, &mut rng);
    let (_, grads, _) = eval(&inputs, Some(&weights));
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let numeric = central_difference(|h| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[k] += h;
                eval(&moved, Some(&weights)).0
            });
            let analytic = grads.get(i).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

/// Fourth-order central difference `(-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

pub type OpCheck = fn(u64) -> f64;

/// One finite-difference check per differentiable op.
pub fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("matmul", |s| check_op(s, &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]))),
        ("matmul_shared_rhs", |s| check_op(s, &[&[2, 3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]))),
        ("matmul_batched", |s| check_op(s, &[&[2, 3, 4], &[2, 4, 3]], |t, v| t.matmul(v[0], v[1]))),
        ("add", |s| check_op(s, &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]))),
        ("add_bias", |s| check_op(s, &[&[2, 3, 4], &[4]], |t, v| t.add(v[0], v[1]))),
        ("mul", |s| check_op(s, &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]))),
        ("mul_const", |s| {
            let factors: Vec<f64> = (0..12usize).map(|i| if i.is_multiple_of(3) { 0.0 } else { 1.25 }).collect();
            check_op(s, &[&[3, 4]], move |t, v| t.mul_const(v[0], factors.clone()))
        }),
        ("scale", |s| check_op(s, &[&[3, 4]], |t, v| Ok(t.scale(v[0], -0.7)))),
        ("softmax", |s| check_op(s, &[&[3, 5]], |t, v| t.softmax(v[0]))),
        ("masked_softmax", |s| {
            let mask: Vec<bool> = (0..15).map(|i| i % 5 != 2 && i / 5 != 2).collect();
            check_op(s, &[&[3, 5]], move |t, v| t.masked_softmax(v[0], &mask))
        }),
        ("layer_norm", |s| check_op(s, &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2]))),
        ("gelu", |s| check_op(s, &[&[4, 5]], |t, v| Ok(t.gelu(v[0])))),
        ("embedding", |s| check_op(s, &[&[6, 4]], |t, v| t.embedding(v[0], &[1, 5, 1, 0, 3, 3], &[2, 3]))),
        ("concat_rows", |s| check_op(s, &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0))),
        ("concat_cols", |s| check_op(s, &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", |s| check_op(s, &[&[2, 5, 3]], |t, v| t.slice(v[0], 1, 1, 3))),
        ("reshape", |s| check_op(s, &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]))),
        ("permute", |s| check_op(s, &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]))),
        ("cross_entropy", |s| {
            check_op(s, &[&[4, 5]], |t, v| {
                let loss = t.cross_entropy(v[0], &[0, 4, 2, 1], &[true, true, false, true])?;
                let one = t.constant(Tensor::scalar(1.0));
                t.mul(loss, one)
            })
        }),
        ("sum", |s| {
            check_op(s, &[&[3, 4]], |t, v| {
                let x = t.sum(v[0]);
                let one = t.constant(Tensor::scalar(1.0));
                t.mul(x, one)
            })
        }),
    ]
}

pub fn tiny_config(tied: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 16,
        dropout: 0.0,
        tie_mlm_head: tied,
    }
}

/// Parameters drawn at a scale where every gradient entry is well above
/// round-off, so relative errors are meaningful.
pub fn gradcheck_params(seed: u64, tied: bool) -> ModelParameters {
    let mut p = init_model(&tiny_config(tied), seed, InitMode::Random).unwrap();
    let mut rng = SeedStream::new(seed).rng("gradcheck/params");
    let names = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        let std = if name.ends_with(".gamma") { 0.1 } else { 0.5 };
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x = base + n;
        }
    }
    p
}

pub fn random_content(rng: &mut Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(NUM_SPECIALS as u32..vocab as u32)).collect()
}

pub fn with_cls_sep(content: &[u32]) -> Vec<u32> {
    let mut s = vec![CLS];
    s.extend_from_slice(content);
    s.push(SEP);
    s
}

/// Relative error of two sampled entries of every parameter tensor.
pub fn check_model_loss<A, N>(params: &mut ModelParameters, rng: &mut Rng, analytic: A, numeric: N) -> f64
where
    A: Fn(&ModelParameters) -> Gradients,
    N: Fn(&ModelParameters) -> f64,
{
    let grads = analytic(params);
    let mut worst: f64 = 0.0;
    for id in 0..params.len() {
        let n = params.tensors()[id].numel();
        for _ in 0..2 {
            let k = rng.random_range(0..n);
            let orig = params.tensors()[id].data()[k];
            let fd = central_difference(|h| {
                params.tensors_mut()[id].data_mut()[k] = orig + h;
                numeric(params)
            });
            params.tensors_mut()[id].data_mut()[k] = orig;
            let a = grads.get(id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(rel_err(a, fd));
        }
    }
    worst
}

fn batch_seqs(rng: &mut Rng, vocab: usize) -> Vec<Vec<u32>> {
    (0..3)
        .map(|_| {
            let len = rng.random_range(3..=7);
            with_cls_sep(&random_content(rng, vocab, len))
        })
        .collect()
}

pub fn mlm_check(seed: u64) -> f64 {
    let mut params = gradcheck_params(seed, seed.is_multiple_of(2));
    let mut rng = SeedStream::new(seed).rng("gradcheck/mlm");
    let seqs = batch_seqs(&mut rng, 16);
    let batch = apply_mlm_masking(&seqs, 0.3, &mut rng).unwrap();
    check_model_loss(
        &mut params,
        &mut rng,
        |p| {
            let mut f = Forward::new(p);
            let l = f.mlm_loss(&batch).unwrap();
            f.backward(l).unwrap()
        },
        |p| mlm_loss(p, &batch).unwrap(),
    )
}

pub fn tlm_check(seed: u64) -> f64 {
    let mut params = gradcheck_params(seed, seed % 2 == 1);
    let mut rng = SeedStream::new(seed).rng("gradcheck/tlm");
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..2)
        .map(|_| {
            let a = rng.random_range(1..=4);
            let b = rng.random_range(1..=4);
            (random_content(&mut rng, 16, a), random_content(&mut rng, 16, b))
        })
        .collect();
    let batch = build_tlm_batch(&pairs, 16, 0.3, &mut rng).unwrap();
    check_model_loss(
        &mut params,
        &mut rng,
        |p| {
            let mut f = Forward::new(p);
            let l = f.mlm_loss(&batch).unwrap();
            f.backward(l).unwrap()
        },
        |p| mlm_loss(p, &batch).unwrap(),
    )
}

pub fn plm_check(seed: u64) -> f64 {
    let mut params = gradcheck_params(seed, seed.is_multiple_of(2));
    let mut rng = SeedStream::new(seed).rng("gradcheck/plm");
    let seqs = batch_seqs(&mut rng, 16);
    let batch = build_permutation_batch(&seqs, 0.5, &mut rng).unwrap();
    check_model_loss(
        &mut params,
        &mut rng,
        |p| {
            let mut f = Forward::new(p);
            let l = f.plm_loss(&batch).unwrap();
            f.backward(l).unwrap()
        },
        |p| plm_loss(p, &batch).unwrap(),
    )
}

pub fn loss_checks() -> Vec<(&'static str, OpCheck)> {
    vec![("mlm", mlm_check), ("tlm", tlm_check), ("plm", plm_check)]
}

/// Merge sequence by recounting every adjacent pair over the whole corpus
/// each round. Returns the merged `(left, right)` strings in order.
pub fn bpe_oracle(corpus: &[String], vocab_size: usize) -> Vec<(String, String)> {
    let mut words: Vec<Vec<String>> =
        corpus.iter().flat_map(|l| pretokenize(l)).map(|w| w.chars().map(String::from).collect()).collect();
    let alphabet: BTreeSet<String> = words.iter().flatten().cloned().collect();
    let mut known: BTreeSet<String> = alphabet;
    let mut merges = Vec::new();
    while known.len() + NUM_SPECIALS < vocab_size {
        let mut best: Option<((String, String), usize)> = None;
        let mut candidates: BTreeSet<(String, String)> = BTreeSet::new();
        for w in &words {
            for p in w.windows(2) {
                candidates.insert((p[0].clone(), p[1].clone()));
            }
        }
        // BTreeSet order is lexicographic, so the first maximum wins ties
        for c in candidates {
            let count: usize = words.iter().map(|w| w.windows(2).filter(|p| p[0] == c.0 && p[1] == c.1).count()).sum();
            if best.as_ref().is_none_or(|(_, n)| count > *n) {
                best = Some((c, count));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let merged = format!("{l}{r}");
        for w in &mut words {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        known.insert(merged);
        merges.push((l, r));
    }
    merges
}

/// Lines of random words over a small alphabet; Zipf-ish so merges have
/// real frequency structure.
pub fn random_corpus(seed: u64, lines: usize) -> Vec<String> {
    let mut rng = SeedStream::new(seed).rng("corpus");
    let alphabet: Vec<char> = "abcdefgh".chars().collect();
    let stems: Vec<String> = (0..30)
        .map(|_| {
            let n = rng.random_range(1..=5);
            (0..n).map(|_| *alphabet.choose(&mut rng).unwrap()).collect()
        })
        .collect();
    (0..lines)
        .map(|_| {
            let n = rng.random_range(1..=6);
            let words: Vec<&str> = (0..n)
                .map(|_| {
                    let r: f64 = rng.random();
                    stems[((r * r) * stems.len() as f64) as usize].as_str()
                })
                .collect();
            words.join(" ")
        })
        .collect()
}

/// About 5,000 content tokens from a sparse random bigram chain over a
/// 200-entry vocabulary: `sequences` for MLM/PLM, and the same text paired
/// with an id-relabelled copy for TLM.
pub fn learning_fixture() -> (ModelConfig, xfer::model::PretrainData) {
    let cfg = ModelConfig {
        vocab_size: 200,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        max_seq_len: 64,
        dropout: 0.1,
        tie_mlm_head: true,
    };
    let mut rng = SeedStream::new(0).rng("fixture");
    let content: Vec<u32> = (NUM_SPECIALS as u32..200).collect();
    let successors: Vec<Vec<u32>> =
        (0..200).map(|_| (0..3).map(|_| *content.choose(&mut rng).unwrap()).collect()).collect();
    let mut relabel = content.clone();
    rand::seq::SliceRandom::shuffle(relabel.as_mut_slice(), &mut rng);
    let translate = |s: &[u32]| -> Vec<u32> { s.iter().map(|&t| relabel[t as usize - NUM_SPECIALS]).collect() };
    let mut texts = Vec::new();
    for _ in 0..250 {
        let mut s = vec![*content.choose(&mut rng).unwrap()];
        while s.len() < 20 {
            let prev = *s.last().unwrap() as usize;
            s.push(*successors[prev].choose(&mut rng).unwrap());
        }
        texts.push(s);
    }
    let data = xfer::model::PretrainData {
        sequences: texts.iter().map(|s| with_cls_sep(s)).collect(),
        pairs: texts[..125].iter().map(|s| (s.clone(), translate(s))).collect(),
    };
    (cfg, data)
}

/// Loss of `objective` on a fixed evaluation batch, dropout off.
pub fn eval_loss(params: &ModelParameters, objective: xfer::model::Objective, data: &xfer::model::PretrainData) -> f64 {
    use xfer::model::Objective;
    let mut rng = SeedStream::new(99).rng("eval-batch");
    match objective {
        Objective::Mlm => {
            let b = apply_mlm_masking(&data.sequences[..64], 0.15, &mut rng).unwrap();
            mlm_loss(params, &b).unwrap()
        }
        Objective::Tlm => {
            let b = build_tlm_batch(&data.pairs[..32], params.config().max_seq_len, 0.15, &mut rng).unwrap();
            mlm_loss(params, &b).unwrap()
        }
        Objective::Plm => {
            let b = build_permutation_batch(&data.sequences[..64], 1.0 / 6.0, &mut rng).unwrap();
            plm_loss(params, &b).unwrap()
        }
    }
}

/// Sentences `left X right` where X is one of two interchangeable words,
/// plus control words that each own a disjoint set of contexts.
pub fn interchangeable_corpus() -> (Vec<String>, Vocabulary) {
    let mut rng = SeedStream::new(1).rng("corpus");
    let shared_ctx = ["kol", "mir", "tas", "bev", "nud"];
    let controls: [(&str, [&str; 3]); 4] = [
        ("gaf", ["pel", "rov", "sim"]),
        ("hup", ["dak", "lin", "wes"]),
        ("jor", ["fet", "gan", "yul"]),
        ("zeb", ["cim", "hol", "pux"]),
    ];
    let mut lines = Vec::new();
    for _ in 0..4000 {
        if rng.random::<bool>() {
            let x = if rng.random::<bool>() { "aqa" } else { "ibi" };
            let l = shared_ctx.choose(&mut rng).unwrap();
            let r = shared_ctx.choose(&mut rng).unwrap();
            lines.push(format!("{l} {x} {r}"));
        } else {
            let (w, ctx) = controls.choose(&mut rng).unwrap();
            let l = ctx.choose(&mut rng).unwrap();
            let r = ctx.choose(&mut rng).unwrap();
            lines.push(format!("{l} {w} {r}"));
        }
    }
    let vocab = train_vocab(&lines, 400, 0).unwrap();
    (lines, vocab)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

pub const POSITIVE: [&str; 3] = ["sel", "vam", "tor"];
pub const NEGATIVE: [&str; 3] = ["gux", "bip", "raw"];
pub const FILLER: [&str; 8] = ["ka", "lo", "mi", "nu", "pe", "qi", "ru", "sa"];

/// Filler words plus one or two sentiment words of a single polarity.
pub fn lexicon_task(seed: u64, n: usize) -> Vec<LabeledExample> {
    let mut rng = SeedStream::new(seed).rng("lexicon-task");
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let lex = if label == 1 { &POSITIVE } else { &NEGATIVE };
            let mut words: Vec<&str> = (0..rng.random_range(3..7)).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
            for _ in 0..rng.random_range(1..3) {
                let at = rng.random_range(0..=words.len());
                words.insert(at, lex.choose(&mut rng).unwrap());
            }
            LabeledExample::new(words.join(" "), label)
        })
        .collect()
}

pub fn lexicon_vocab() -> Vocabulary {
    let texts: Vec<String> = lexicon_task(0, 400).into_iter().map(|e| e.text).collect();
    train_vocab(&texts, 200, 0).unwrap()
}

pub fn classifier_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        dropout: 0.0,
        tie_mlm_head: false,
    }
}

pub fn bound_model(vocab: &Vocabulary, seed: u64) -> ModelParameters {
    let mut p = init_model(&classifier_config(vocab), seed, InitMode::Random).unwrap();
    p.set_vocab_hash(vocab.hash());
    p
}

pub fn group_bytes(p: &ModelParameters, group: &str) -> Vec<u64> {
    p.group(group).iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect()
}

pub fn target_table(vocab: &Vocabulary, dim: usize) -> EmbeddingTable {
    let texts: Vec<String> = lexicon_task(7, 400).into_iter().map(|e| e.text).collect();
    let ids: Vec<Vec<u32>> = texts.iter().map(|t| vocab.encode(t, usize::MAX, false).ids).collect();
    let cfg = SgnsConfig { epochs: 2, ..SgnsConfig::default() };
    train_sgns(&ids, vocab, dim, &cfg).unwrap()
}

pub fn source_model(tied: bool) -> ModelParameters {
    let source = train_vocab(&random_corpus(1, 200), 60, 0).unwrap();
    let cfg = ModelConfig { vocab_size: source.len(), tie_mlm_head: tied, ..classifier_config(&source) };
    let mut p = init_model(&cfg, 5, InitMode::PretrainedSurrogate).unwrap();
    p.set_vocab_hash(source.hash());
    p
}
