//! Synthetic language pairs, the ablation grid and the dataset-size sweep.
//!
//! A [`Workbench`] owns everything the cells of one run share: the generated
//! languages, both vocabularies, the fixed target dev/test split and caches
//! of pre-trained source models and target embedding tables (one per
//! objective/seed and per seed respectively). Cells only read from it, so
//! they can run in parallel.

mod report;
pub mod synth;

pub use crate::metrics::{binary_f1, f1_score, Confusion};
pub use report::{write_timings, CellReport, Report, ReportKind, SeedResult, Summary, REPORT_FORMAT_VERSION};
pub use synth::{
    generate_language, generate_pair, LanguagePair, LanguagePairSpec, SyntheticLangSpec, SyntheticLanguage,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    init_model, pretrain, InitMode, ModelConfig, ModelParameters, Objective, PretrainConfig, PretrainData,
};
use crate::parallel::{self, Exec};
use crate::rng::SeedStream;
use crate::tokenizer::{train_vocab, Vocabulary};
use crate::transfer::{
    evaluate, fine_tune, random_embeddings, swap_embeddings, FineTuneConfig, FreezePlan, FreezePreset, LabeledExample,
};
use crate::word2vec::{train_sgns, EmbeddingTable, SgnsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingInit {
    Word2vec,
    Random,
}

/// Fine-tuning knobs of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellTraining {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
}

impl Default for CellTraining {
    fn default() -> Self {
        CellTraining { lr: 1e-4, batch_size: 32, epochs: 3, max_len: 180 }
    }
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub cell_id: String,
    pub weight_init: InitMode,
    pub freeze_plan: FreezePreset,
    pub embedding_init: EmbeddingInit,
    pub train_size: usize,
    pub seeds: Vec<u64>,
    pub objective_for_pretrain: Objective,
    #[serde(default)]
    pub training: CellTraining,
}

/// Everything shared by the cells of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessSettings {
    pub languages: LanguagePairSpec,
    pub vocab_size: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Its `seed` is replaced by the cell seed.
    pub embeddings: SgnsConfig,
    /// Subtract the mean vector from trained tables before the swap.
    pub center_embeddings: bool,
    pub test_size: usize,
    pub dev_size: usize,
}

impl Default for HarnessSettings {
    fn default() -> Self {
        HarnessSettings {
            languages: LanguagePairSpec::default(),
            vocab_size: 600,
            model: ModelConfig {
                vocab_size: 600,
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                d_ff: 64,
                max_seq_len: 32,
                dropout: 0.1,
                tie_mlm_head: true,
            },
            pretrain: PretrainConfig { steps: 400, ..Default::default() },
            embeddings: SgnsConfig { epochs: 20, ..Default::default() },
            center_embeddings: true,
            test_size: 1000,
            dev_size: 200,
        }
    }
}

/// A grid file: the shared settings plus its cells. A bare array of cells
/// is accepted too and runs with default settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(default)]
    pub settings: HarnessSettings,
    pub cells: Vec<ExperimentConfig>,
}

impl Grid {
    pub fn from_json(s: &str) -> Result<Grid> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum File {
            Full(Grid),
            Cells(Vec<ExperimentConfig>),
        }
        Ok(match serde_json::from_str(s)? {
            File::Full(g) => g,
            File::Cells(cells) => Grid { settings: HarnessSettings::default(), cells },
        })
    }
}

/// A size-sweep cell file: one cell, optionally with settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFile {
    #[serde(default)]
    pub settings: HarnessSettings,
    pub cell: ExperimentConfig,
}

impl CellFile {
    pub fn from_json(s: &str) -> Result<CellFile> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum File {
            Full(CellFile),
            Bare(ExperimentConfig),
        }
        Ok(match serde_json::from_str(s)? {
            File::Full(c) => c,
            File::Bare(cell) => CellFile { settings: HarnessSettings::default(), cell },
        })
    }
}

type Shared<T> = Arc<OnceLock<std::result::Result<Arc<T>, String>>>;

struct Cache<K, T> {
    slots: Mutex<BTreeMap<K, Shared<T>>>,
}

impl<K: Ord + Clone, T> Cache<K, T> {
    fn new() -> Self {
        Cache { slots: Mutex::new(BTreeMap::new()) }
    }

    /// Build each value once, even under concurrent requests for the same key.
    fn get(&self, key: K, build: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        let slot = self.slots.lock().unwrap().entry(key).or_default().clone();
        slot.get_or_init(|| build().map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(|e| Error::invalid(format!("shared artifact failed: {e}")))
    }
}

pub struct Workbench {
    settings: HarnessSettings,
    langs: LanguagePair,
    source_vocab: Vocabulary,
    joint_vocab: OnceLock<Vocabulary>,
    target_vocab: Vocabulary,
    target_corpus_ids: Vec<Vec<u32>>,
    test: Vec<LabeledExample>,
    dev: Vec<LabeledExample>,
    pool: Vec<LabeledExample>,
    pretrained: Cache<(Objective, u64), ModelParameters>,
    tables: Cache<u64, EmbeddingTable>,
    exec: Exec,
}

/// Take `n` examples with labels as close to half/half as the data allows,
/// earliest first; the rest keep their order.
fn balanced_split(data: &[LabeledExample], n: usize) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let positives = data.iter().filter(|e| e.label == 1).count();
    let want_pos = (n / 2).min(positives).max(n.saturating_sub(data.len() - positives));
    let mut quota = [n - want_pos, want_pos];
    let (mut taken, mut rest) = (Vec::with_capacity(n), Vec::with_capacity(data.len() - n));
    for e in data {
        let q = &mut quota[usize::from(e.label)];
        if *q > 0 {
            *q -= 1;
            taken.push(e.clone());
        } else {
            rest.push(e.clone());
        }
    }
    (taken, rest)
}

impl Workbench {
    pub fn new(settings: HarnessSettings) -> Result<Workbench> {
        settings.model.validate()?;
        let langs = generate_pair(&settings.languages)?;
        let source_vocab = train_vocab(&langs.source.corpus, settings.vocab_size, 0)?;
        let target_vocab = train_vocab(&langs.target.corpus, settings.vocab_size, 0)?;
        let target_corpus_ids =
            langs.target.corpus.iter().map(|s| target_vocab.encode(s, usize::MAX, false).ids).collect();
        let data = &langs.target.dataset;
        let held_out = settings.test_size + settings.dev_size;
        if held_out >= data.len() {
            return Err(Error::SizeExceedsData { requested: held_out, available: data.len() });
        }
        let (test, rest) = balanced_split(data, settings.test_size);
        let (dev, pool) = balanced_split(&rest, settings.dev_size);
        Ok(Workbench {
            settings,
            langs,
            source_vocab,
            joint_vocab: OnceLock::new(),
            target_vocab,
            target_corpus_ids,
            test,
            dev,
            pool,
            pretrained: Cache::new(),
            tables: Cache::new(),
            exec: Exec::best(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn settings(&self) -> &HarnessSettings {
        &self.settings
    }

    pub fn languages(&self) -> &LanguagePair {
        &self.langs
    }

    pub fn target_vocab(&self) -> &Vocabulary {
        &self.target_vocab
    }

    pub fn test_set(&self) -> &[LabeledExample] {
        &self.test
    }

    pub fn dev_set(&self) -> &[LabeledExample] {
        &self.dev
    }

    pub fn train_pool(&self) -> &[LabeledExample] {
        &self.pool
    }

    /// The vocabulary the source model is pre-trained with. The translation
    /// objective reads both languages, so it gets a joint vocabulary.
    fn pretrain_vocab(&self, objective: Objective) -> Result<&Vocabulary> {
        if objective != Objective::Tlm {
            return Ok(&self.source_vocab);
        }
        if let Some(v) = self.joint_vocab.get() {
            return Ok(v);
        }
        let both: Vec<&String> = self.langs.source.corpus.iter().chain(&self.langs.target.corpus).collect();
        let v = train_vocab(&both, self.settings.vocab_size, 0)?;
        Ok(self.joint_vocab.get_or_init(|| v))
    }

    fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig { vocab_size: vocab.len(), ..self.settings.model.clone() }
    }

    /// Source encoder after pre-training with `objective`, built once per
    /// (objective, seed).
    pub fn pretrained(&self, objective: Objective, seed: u64) -> Result<Arc<ModelParameters>> {
        self.pretrained.get((objective, seed), || {
            let vocab = self.pretrain_vocab(objective)?;
            let max = self.settings.model.max_seq_len;
            let mut params = init_model(&self.model_config(vocab), seed, InitMode::PretrainedSurrogate)?;
            params.set_vocab_hash(vocab.hash());
            let mut data = PretrainData::default();
            if objective == Objective::Tlm {
                let content = |s: &str| vocab.encode(s, usize::MAX, false).ids;
                data.pairs = self
                    .langs
                    .parallel
                    .iter()
                    .map(|(s, t)| (content(s), content(t)))
                    .filter(|(s, t)| s.len() + t.len() + 3 <= max)
                    .collect();
            } else {
                data.sequences = self.langs.source.corpus.iter().map(|s| vocab.encode(s, max, true).ids).collect();
            }
            pretrain(&mut params, objective, &data, &self.settings.pretrain, seed)?;
            Ok(params)
        })
    }

    /// Skip-gram table for the target vocabulary, built once per seed.
    pub fn word2vec(&self, seed: u64) -> Result<Arc<EmbeddingTable>> {
        self.tables.get(seed, || {
            let cfg = SgnsConfig { seed, ..self.settings.embeddings.clone() };
            let t = train_sgns(&self.target_corpus_ids, &self.target_vocab, self.settings.model.d_model, &cfg)?;
            Ok(if self.settings.center_embeddings { t.centered() } else { t })
        })
    }

    /// The first `size` examples of a seeded shuffle of the training pool,
    /// so smaller subsets are prefixes of larger ones.
    pub fn train_subset(&self, size: usize, seed: u64) -> Result<Vec<LabeledExample>> {
        if size > self.pool.len() {
            return Err(Error::SizeExceedsData { requested: size, available: self.pool.len() });
        }
        let mut idx: Vec<usize> = (0..self.pool.len()).collect();
        idx.shuffle(&mut SeedStream::new(seed).rng("harness/subset"));
        Ok(idx[..size].iter().map(|&i| self.pool[i].clone()).collect())
    }

    /// Encoder ready for fine-tuning on the target: pre-trained or random
    /// weights with target embeddings swapped in.
    pub fn transferred(&self, cell: &ExperimentConfig, seed: u64) -> Result<ModelParameters> {
        let base = match cell.weight_init {
            InitMode::PretrainedSurrogate => (*self.pretrained(cell.objective_for_pretrain, seed)?).clone(),
            InitMode::Random => {
                let vocab = self.pretrain_vocab(cell.objective_for_pretrain)?;
                let mut p = init_model(&self.model_config(vocab), seed, InitMode::Random)?;
                p.set_vocab_hash(vocab.hash());
                p
            }
        };
        let table = match cell.embedding_init {
            EmbeddingInit::Word2vec => self.word2vec(seed)?,
            EmbeddingInit::Random => {
                Arc::new(random_embeddings(&self.target_vocab, self.settings.model.d_model, seed)?)
            }
        };
        swap_embeddings(&base, &self.target_vocab, &table, seed)
    }

    /// The whole pipeline for one (cell, seed); returns the fine-tuned
    /// parameters along with the scores.
    pub fn run_seed(&self, cell: &ExperimentConfig, seed: u64) -> Result<(ModelParameters, SeedResult)> {
        let params = self.transferred(cell, seed)?;
        let train = self.train_subset(cell.train_size, seed)?;
        let plan = FreezePlan::preset(cell.freeze_plan, &params);
        let t = &cell.training;
        let cfg = FineTuneConfig { lr: t.lr, batch_size: t.batch_size, max_len: t.max_len, epochs: t.epochs, seed };
        let (params, history) = fine_tune(&params, &plan, &self.target_vocab, &train, &self.dev, &cfg)?;
        let c = evaluate(&params, &self.target_vocab, &self.test, t.max_len)?;
        let result = SeedResult {
            seed,
            f1: c.macro_f1(),
            binary_f1: c.positive_f1(),
            accuracy: c.accuracy(),
            positive_rate: c.positive_rate(),
            train_subset_hash: subset_hash(&train),
            history,
        };
        Ok((params, result))
    }

    fn run_cells(&self, cells: &[ExperimentConfig]) -> Vec<(CellReport, f64)> {
        let jobs: Vec<(usize, u64)> =
            cells.iter().enumerate().flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s))).collect();
        let outcomes = parallel::map(self.exec, jobs.clone(), |(i, seed)| {
            let start = Instant::now();
            let r = self.run_seed(&cells[i], seed).map(|(_, r)| r);
            (r, start.elapsed().as_secs_f64())
        });
        let mut per_cell: Vec<(Vec<SeedResult>, Option<String>, f64)> = vec![(Vec::new(), None, 0.0); cells.len()];
        for ((i, seed), (r, secs)) in jobs.into_iter().zip(outcomes) {
            let slot = &mut per_cell[i];
            slot.2 += secs;
            match r {
                Ok(r) => slot.0.push(r),
                Err(e) => {
                    if slot.1.is_none() {
                        slot.1 = Some(format!("seed {seed}: {e}"));
                    }
                }
            }
        }
        cells
            .iter()
            .zip(per_cell)
            .map(|(c, (results, error, secs))| {
                let results = if error.is_some() { Vec::new() } else { results };
                let report = CellReport {
                    cell_id: c.cell_id.clone(),
                    config: c.clone(),
                    summary: Summary::of(&results),
                    results,
                    error,
                };
                (report, secs)
            })
            .collect()
    }

    fn assemble(&self, kind: ReportKind, runs: Vec<(CellReport, f64)>) -> (Report, BTreeMap<String, f64>) {
        let timings = runs.iter().map(|(c, s)| (c.cell_id.clone(), *s)).collect();
        let report = Report {
            format_version: REPORT_FORMAT_VERSION,
            kind,
            settings: self.settings.clone(),
            cells: runs.into_iter().map(|(c, _)| c).collect(),
        };
        (report, timings)
    }

    /// Run every cell. A failing cell is recorded in the report and does not
    /// stop the others; an invalid grid is rejected before anything runs.
    pub fn run_grid(&self, cells: &[ExperimentConfig]) -> Result<(Report, BTreeMap<String, f64>)> {
        validate_grid(cells)?;
        Ok(self.assemble(ReportKind::Grid, self.run_cells(cells)))
    }

    /// Re-run `base` at each training-set size; cell ids become
    /// `<base>@<size>`.
    pub fn size_sweep(
        &self,
        base: &ExperimentConfig,
        sizes: &[usize],
        seeds: &[u64],
    ) -> Result<(Report, BTreeMap<String, f64>)> {
        if sizes.is_empty() || sizes.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!("sizes must be non-empty and ascending, got {sizes:?}")));
        }
        if let Some(&max) = sizes.last() {
            if max > self.pool.len() {
                return Err(Error::SizeExceedsData { requested: max, available: self.pool.len() });
            }
        }
        let cells: Vec<ExperimentConfig> = sizes
            .iter()
            .map(|&n| ExperimentConfig {
                cell_id: format!("{}@{n}", base.cell_id),
                train_size: n,
                seeds: seeds.to_vec(),
                ..base.clone()
            })
            .collect();
        // equal sizes share an id; run each distinct size once
        let mut seen = BTreeSet::new();
        let distinct: Vec<ExperimentConfig> =
            cells.iter().filter(|c| seen.insert(c.cell_id.clone())).cloned().collect();
        let runs = self.run_cells(&distinct);
        let by_id: BTreeMap<String, (CellReport, f64)> = runs.into_iter().map(|r| (r.0.cell_id.clone(), r)).collect();
        let runs = cells.iter().map(|c| by_id[&c.cell_id].clone()).collect();
        Ok(self.assemble(ReportKind::SizeSweep, runs))
    }
}

/// Cell ids must be unique and every cell needs at least one seed.
pub fn validate_grid(cells: &[ExperimentConfig]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for c in cells {
        if !seen.insert(c.cell_id.as_str()) {
            return Err(Error::DuplicateCell(c.cell_id.clone()));
        }
        if c.seeds.is_empty() {
            return Err(Error::invalid(format!("cell {:?} has no seeds", c.cell_id)));
        }
    }
    Ok(())
}

/// Hex digest of a training subset's texts and labels.
pub fn subset_hash(data: &[LabeledExample]) -> String {
    let mut h = Sha256::new();
    for e in data {
        h.update(e.text.as_bytes());
        h.update([0, e.label]);
    }
    h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Build a workbench for `grid`, run it and write the report (plus
/// `timings.json`) into `out_dir`.
pub fn run_grid(grid: &Grid, out_dir: &Path) -> Result<Report> {
    validate_grid(&grid.cells)?;
    let bench = Workbench::new(grid.settings.clone())?;
    let (report, timings) = bench.run_grid(&grid.cells)?;
    report.write(out_dir)?;
    write_timings(out_dir, &timings)?;
    Ok(report)
}

pub fn size_sweep(cell: &CellFile, sizes: &[usize], seeds: &[u64], out_dir: &Path) -> Result<Report> {
    let bench = Workbench::new(cell.settings.clone())?;
    let (report, timings) = bench.size_sweep(&cell.cell, sizes, seeds)?;
    report.write(out_dir)?;
    write_timings(out_dir, &timings)?;
    Ok(report)
}
