//! `xfer`: command-line front end for the transfer toolkit.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use xfer::harness::{self, CellFile, Grid, HarnessSettings};
use xfer::model::{
    init_model, pretrain, read_checkpoint, write_checkpoint, InitMode, ModelConfig, ModelParameters, Objective,
    PretrainConfig, PretrainData,
};
use xfer::rng::SeedStream;
use xfer::tokenizer::{train_vocab, Vocabulary};
use xfer::transfer::{
    augment_dataset, evaluate, fine_tune, read_jsonl, swap_embeddings, write_jsonl, AugmentConfig, FineTuneConfig,
    FreezePlan, FreezePreset,
};
use xfer::word2vec::{train_sgns, EmbeddingTable, SgnsConfig};

#[derive(Parser)]
#[command(name = "xfer", version, about = "Move small transformer encoders to new languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a BPE vocabulary from a text corpus (one sentence per line).
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train skip-gram embeddings for a vocabulary.
    TrainEmbeddings {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Subtract the mean vector from the trained table.
        #[arg(long)]
        center: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a source encoder. For `tlm` every corpus line holds a
    /// sentence pair separated by a tab.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "plm")]
        objective: Objective,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        d_ff: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap target-language embeddings into a checkpoint. The target
    /// vocabulary is copied next to the output as `<out>.vocab.tsv`.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the sentiment classifier on JSONL data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value = "token_embeddings", value_parser = ["none", "token_embeddings", "encoder_all"])]
        freeze: String,
        #[arg(long, default_value_t = 2e-5)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 180)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<checkpoint>.vocab.tsv`.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Add synonym-replaced copies of every example.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long, default_value_t = 0.1)]
        replace_prob: f64,
        #[arg(long, default_value_t = 0.5)]
        min_cosine: f64,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid on synthetic languages.
    Experiment {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run one cell at several training-set sizes.
    SizeSweep {
        #[arg(long)]
        cell: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Vocabulary::read_tsv(BufReader::new(f)).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    vocab.write_tsv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    EmbeddingTable::read(BufReader::new(f)).with_context(|| format!("reading embeddings {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_checkpoint(BufReader::new(f)).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Vec<xfer::transfer::LabeledExample>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))
}

/// Where `transfer` and `finetune` leave the vocabulary a checkpoint is bound to.
fn vocab_sidecar(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".vocab.tsv");
    checkpoint.with_file_name(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTokenizer { corpus, vocab_size, seed, out } => {
            let vocab = train_vocab(&read_lines(&corpus)?, vocab_size, seed)?;
            save_vocab(&vocab, &out)?;
            eprintln!("{} tokens, {} merges -> {}", vocab.len(), vocab.merges().len(), out.display());
        }
        Command::TrainEmbeddings { corpus, vocab, dim, epochs, seed, center, out } => {
            let vocab = load_vocab(&vocab)?;
            let ids: Vec<Vec<u32>> =
                read_lines(&corpus)?.iter().map(|l| vocab.encode(l, usize::MAX, false).ids).collect();
            let cfg = SgnsConfig { epochs, seed, ..SgnsConfig::default() };
            let mut table = train_sgns(&ids, &vocab, dim, &cfg)?;
            if center {
                table = table.centered();
            }
            let mut w = create(&out)?;
            table.write(&mut w)?;
            w.flush()?;
            eprintln!("{}x{} table -> {}", table.rows(), table.dim(), out.display());
        }
        Command::Pretrain {
            corpus,
            vocab,
            objective,
            steps,
            lr,
            batch_size,
            d_model,
            layers,
            heads,
            d_ff,
            max_len,
            seed,
            out,
        } => {
            let vocab = load_vocab(&vocab)?;
            let cfg = ModelConfig {
                vocab_size: vocab.len(),
                d_model,
                n_layers: layers,
                n_heads: heads,
                d_ff,
                max_seq_len: max_len,
                ..HarnessSettings::default().model
            };
            let mut params = init_model(&cfg, seed, InitMode::PretrainedSurrogate)?;
            params.set_vocab_hash(vocab.hash());
            let lines = read_lines(&corpus)?;
            let mut data = PretrainData::default();
            if objective == Objective::Tlm {
                for (n, line) in lines.iter().enumerate() {
                    let Some((s, t)) = line.split_once('\t') else {
                        bail!("line {}: expected a tab-separated sentence pair", n + 1);
                    };
                    let (s, t) = (vocab.encode(s, usize::MAX, false).ids, vocab.encode(t, usize::MAX, false).ids);
                    if s.len() + t.len() + 3 <= max_len {
                        data.pairs.push((s, t));
                    }
                }
            } else {
                data.sequences = lines.iter().map(|l| vocab.encode(l, max_len, true).ids).collect();
            }
            let pcfg = PretrainConfig { steps, lr, batch_size, ..PretrainConfig::default() };
            let losses = pretrain(&mut params, objective, &data, &pcfg, seed)?;
            save_checkpoint(&params, &out)?;
            save_vocab(&vocab, &vocab_sidecar(&out))?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                eprintln!("{} loss {first:.3} -> {last:.3} over {steps} steps -> {}", objective.name(), out.display());
            }
        }
        Command::Transfer { checkpoint, vocab, embeddings, seed, out } => {
            let params = load_checkpoint(&checkpoint)?;
            let vocab = load_vocab(&vocab)?;
            let table = load_table(&embeddings)?;
            let swapped = swap_embeddings(&params, &vocab, &table, seed)?;
            save_checkpoint(&swapped, &out)?;
            save_vocab(&vocab, &vocab_sidecar(&out))?;
            eprintln!("swapped in {} target tokens -> {}", vocab.len(), out.display());
        }
        Command::Finetune {
            checkpoint,
            train,
            dev,
            freeze,
            lr,
            batch_size,
            epochs,
            max_len,
            seed,
            vocab,
            out,
            report,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let vocab = load_vocab(&vocab.unwrap_or_else(|| vocab_sidecar(&checkpoint)))?;
            let train = load_dataset(&train)?;
            let dev = load_dataset(&dev)?;
            let preset: FreezePreset = freeze.parse()?;
            let plan = FreezePlan::preset(preset, &params);
            let cfg = FineTuneConfig { lr, batch_size, max_len, epochs, seed };
            let (tuned, history) = fine_tune(&params, &plan, &vocab, &train, &dev, &cfg)?;
            save_checkpoint(&tuned, &out)?;
            save_vocab(&vocab, &vocab_sidecar(&out))?;
            let dev_scores = if dev.is_empty() {
                serde_json::Value::Null
            } else {
                let c = evaluate(&tuned, &vocab, &dev, max_len)?;
                json!({
                    "macro_f1": c.macro_f1(),
                    "binary_f1": c.positive_f1(),
                    "accuracy": c.accuracy(),
                    "confusion": c,
                })
            };
            let metrics = json!({
                "freeze": preset,
                "frozen_groups": plan.frozen_groups(),
                "config": cfg,
                "train_examples": train.len(),
                "dev_examples": dev.len(),
                "history": history,
                "dev": dev_scores,
            });
            let mut w = create(&report)?;
            serde_json::to_writer_pretty(&mut w, &metrics)?;
            w.write_all(b"\n")?;
            w.flush()?;
            if let Some(last) = history.epochs.last() {
                eprintln!("epoch {} train loss {:.4} dev F1 {:?}", last.epoch, last.train_loss, last.dev_f1);
            }
        }
        Command::Augment { input, vocab, embeddings, copies, replace_prob, min_cosine, k, seed, out } => {
            let data = load_dataset(&input)?;
            let vocab = load_vocab(&vocab)?;
            let table = load_table(&embeddings)?;
            let cfg = AugmentConfig {
                replace_prob,
                min_cosine,
                k_candidates: k,
                copies_per_example: copies,
                ..AugmentConfig::default()
            };
            let mut rng = SeedStream::new(seed).rng("cli/augment");
            let augmented = augment_dataset(&data, &table, &vocab, &cfg, &mut rng)?;
            let mut w = create(&out)?;
            write_jsonl(&augmented, &mut w)?;
            w.flush()?;
            eprintln!("{} -> {} examples -> {}", data.len(), augmented.len(), out.display());
        }
        Command::Experiment { grid, out } => {
            let text = fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid = Grid::from_json(&text)?;
            let report = harness::run_grid(&grid, &out)?;
            summarize(&report);
        }
        Command::SizeSweep { cell, sizes, seeds, out } => {
            let text = fs::read_to_string(&cell).with_context(|| format!("reading {}", cell.display()))?;
            let cell = CellFile::from_json(&text)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let report = harness::size_sweep(&cell, &sizes, &seeds, &out)?;
            summarize(&report);
        }
    }
    Ok(())
}

fn summarize(report: &harness::Report) {
    for c in &report.cells {
        match (&c.summary, &c.error) {
            (Some(s), _) => {
                eprintln!("{:24} mean F1 {:.3} (min {:.3}, max {:.3})", c.cell_id, s.mean_f1, s.min_f1, s.max_f1)
            }
            (None, e) => eprintln!("{:24} failed: {}", c.cell_id, e.as_deref().unwrap_or("no results")),
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
