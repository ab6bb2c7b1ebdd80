//! Acceptance run: one PASS/FAIL line per criterion with the measured
//! values and the pinned tolerances.
//!
//! Every criterion always runs and reports. The process exits non-zero on a
//! failure only when `XFER_ACCEPTANCE_STRICT=1`; `XFER_ACCEPTANCE_ONLY=5,7`
//! restricts the run to the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;
use xfer::harness::{f1_score, CellTraining, EmbeddingInit, ExperimentConfig, HarnessSettings, Workbench};
use xfer::model::{changed_groups, init_model, pretrain, write_checkpoint, InitMode, Objective, PretrainConfig};
use xfer::rng::SeedStream;
use xfer::tokenizer::train_vocab;
use xfer::transfer::{fine_tune, swap_embeddings, swap_groups, FineTuneConfig, FreezePlan, FreezePreset};

const SEEDS: [u64; 3] = [0, 1, 2];
const MAIN_SIZE: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn bench() -> &'static Workbench {
    static W: OnceLock<Workbench> = OnceLock::new();
    W.get_or_init(|| Workbench::new(HarnessSettings::default()).expect("workbench"))
}

fn cell(
    id: &str,
    weight_init: InitMode,
    freeze_plan: FreezePreset,
    embedding_init: EmbeddingInit,
    n: usize,
) -> ExperimentConfig {
    ExperimentConfig {
        cell_id: id.into(),
        weight_init,
        freeze_plan,
        embedding_init,
        train_size: n,
        seeds: SEEDS.to_vec(),
        objective_for_pretrain: Objective::Plm,
        training: CellTraining::default(),
    }
}

fn random_weights(n: usize) -> ExperimentConfig {
    cell("random-weights", InitMode::Random, FreezePreset::None, EmbeddingInit::Word2vec, n)
}

fn frozen_encoder(n: usize) -> ExperimentConfig {
    cell("frozen-encoder", InitMode::PretrainedSurrogate, FreezePreset::EncoderAll, EmbeddingInit::Word2vec, n)
}

fn fine_tune_all(n: usize) -> ExperimentConfig {
    cell("fine-tune-all", InitMode::PretrainedSurrogate, FreezePreset::None, EmbeddingInit::Word2vec, n)
}

fn mean_f1(c: ExperimentConfig) -> f64 {
    let (report, _) = bench().run_grid(&[c]).expect("grid");
    let cell = &report.cells[0];
    cell.mean_f1().unwrap_or_else(|| panic!("cell {} failed: {:?}", cell.cell_id, cell.error))
}

fn gradient_checks() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for (name, check) in common::op_checks().into_iter().chain(common::loss_checks()) {
        count += 1;
        for seed in 0..common::INSTANCES {
            let err = check(seed);
            if err > worst.0 || !err.is_finite() {
                worst = (err, format!("{name} seed {seed}"));
            }
        }
    }
    outcome(
        worst.0 < common::GRAD_TOL,
        format!(
            "{count} ops and losses x {} seeds, max relative error {:.2e} at {} (< {:.0e})",
            common::INSTANCES,
            worst.0,
            worst.1,
            common::GRAD_TOL
        ),
    )
}

fn tokenizer_oracle() -> Outcome {
    let mut mismatched = Vec::new();
    for seed in 0..10 {
        let corpus = common::random_corpus(seed, 200);
        let v = train_vocab(&corpus, 80, seed).expect("vocab");
        let merges: Vec<(String, String)> = v
            .merges()
            .iter()
            .map(|m| (v.token(m.left).unwrap().to_string(), v.token(m.right).unwrap().to_string()))
            .collect();
        if merges != common::bpe_oracle(&corpus, 80) {
            mismatched.push(seed);
        }
    }
    let v = train_vocab(&common::random_corpus(11, 200), 90, 0).expect("vocab");
    let mut rng = SeedStream::new(0).rng("fuzz");
    let alphabet: Vec<char> = "abcdefgh ".chars().collect();
    let mut broken = 0;
    for _ in 0..1000 {
        let len = rng.random_range(0..=40);
        let s: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        if v.decode(&v.encode(&s, usize::MAX, true).ids).ok().as_deref() != Some(s.as_str()) {
            broken += 1;
        }
    }
    outcome(
        mismatched.is_empty() && broken == 0,
        format!(
            "oracle mismatches on corpora {mismatched:?} of 10; {broken} of 1000 fuzzed strings fail to round-trip"
        ),
    )
}

fn freeze_and_swap() -> Outcome {
    let vocab = common::lexicon_vocab();
    let params = common::bound_model(&vocab, 1);
    let train = common::lexicon_task(1, 64);
    let cfg = FineTuneConfig { lr: 1e-2, epochs: 1, ..FineTuneConfig::default() };
    let mut problems = Vec::new();
    for preset in FreezePreset::ALL {
        let plan = FreezePlan::preset(preset, &params);
        let (after, _) = fine_tune(&params, &plan, &vocab, &train, &[], &cfg).expect("fine-tune");
        let moved: Vec<&String> = plan
            .frozen_groups()
            .iter()
            .filter(|g| common::group_bytes(&params, g) != common::group_bytes(&after, g))
            .collect();
        if !moved.is_empty() {
            problems.push(format!("{preset}: frozen {moved:?} moved"));
        }
        if changed_groups(&params, &after).is_empty() {
            problems.push(format!("{preset}: nothing trained"));
        }
    }
    let table = common::target_table(&vocab, 16);
    let mut diffs = BTreeSet::new();
    for tied in [true, false] {
        let source = common::source_model(tied);
        let swapped = swap_embeddings(&source, &vocab, &table, 0).expect("swap");
        diffs.insert(changed_groups(&source, &swapped));
    }
    let swap_ok = diffs.len() == 1 && diffs.first() == Some(&swap_groups());
    if !swap_ok {
        problems.push(format!("swap changed {diffs:?}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} presets keep frozen groups byte-identical and train the rest; swap diff = {:?}",
                FreezePreset::ALL.len(),
                swap_groups()
            )
        } else {
            problems.join("; ")
        },
    )
}

fn learning_sanity() -> Outcome {
    let (cfg, data) = common::learning_fixture();
    let schedule = PretrainConfig { steps: 200, batch_size: 32, lr: 2e-3, ..PretrainConfig::default() };
    let uniform = (cfg.vocab_size as f64).ln();
    let mut pass = true;
    let mut parts = Vec::new();
    for obj in [Objective::Mlm, Objective::Tlm, Objective::Plm] {
        let mut params = init_model(&cfg, 0, InitMode::PretrainedSurrogate).expect("init");
        let start = common::eval_loss(&params, obj, &data);
        pretrain(&mut params, obj, &data, &schedule, 0).expect("pretrain");
        let end = common::eval_loss(&params, obj, &data);
        let near = (start - uniform).abs() / uniform < 0.15;
        let fell = end < 0.9 * start;
        pass &= near && fell;
        parts.push(format!("{} {start:.3} -> {end:.3} ({:.2}x)", obj.name(), end / start));
    }
    outcome(
        pass,
        format!(
            "ln|V| = {uniform:.3}, start within 15%, 200 steps (batch 32, lr 2e-3) to < 0.9x: {}",
            parts.join(", ")
        ),
    )
}

fn transfer_ordering() -> Outcome {
    let random = mean_f1(random_weights(MAIN_SIZE));
    let frozen = mean_f1(frozen_encoder(MAIN_SIZE));
    let all = mean_f1(fine_tune_all(MAIN_SIZE));
    let ordered = random < frozen && frozen < all;
    let band = (random - 0.5).abs() <= 0.1;
    let margin = frozen >= random + 0.05;
    outcome(
        ordered && band && margin,
        format!(
            "n={MAIN_SIZE}, mean macro-F1 over 3 seeds: random {random:.3} < frozen {frozen:.3} < fine-tune {all:.3} [{}]; random in 0.5 +/- 0.1 [{}]; frozen >= random + 0.05 [{}]",
            ok(ordered),
            ok(band),
            ok(margin)
        ),
    )
}

fn embedding_init() -> Outcome {
    let w2v = mean_f1(cell(
        "word2vec-embeddings",
        InitMode::PretrainedSurrogate,
        FreezePreset::TokenEmbeddings,
        EmbeddingInit::Word2vec,
        MAIN_SIZE,
    ));
    let rnd = mean_f1(cell(
        "random-embeddings",
        InitMode::PretrainedSurrogate,
        FreezePreset::TokenEmbeddings,
        EmbeddingInit::Random,
        MAIN_SIZE,
    ));
    outcome(
        w2v >= rnd,
        format!(
            "n={MAIN_SIZE}, frozen token embeddings, mean macro-F1 over 3 seeds: word2vec {w2v:.3} >= random {rnd:.3}"
        ),
    )
}

fn size_sweep() -> Outcome {
    let sizes = [100, 500, 1000, 5000];
    let curve = |c: ExperimentConfig| -> Vec<f64> {
        let (report, _) = bench().size_sweep(&c, &sizes, &SEEDS).expect("sweep");
        report.cells.iter().map(|c| c.mean_f1().expect("cell")).collect()
    };
    let pre = curve(fine_tune_all(0));
    let rnd = curve(random_weights(0));
    let rises = pre[3] > pre[0];
    let dominates = pre.iter().zip(&rnd).all(|(p, r)| p >= r);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    outcome(
        rises && dominates,
        format!(
            "sizes {sizes:?}: pretrained {} vs random {}; 5000 > 100 [{}]; pretrained >= random everywhere [{}]",
            fmt(&pre),
            fmt(&rnd),
            ok(rises),
            ok(dominates)
        ),
    )
}

fn pipeline_run() -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let bench = Workbench::new(HarnessSettings::default()).expect("workbench");
    let c = ExperimentConfig { seeds: vec![0], ..fine_tune_all(200) };
    let (params, _) = bench.run_seed(&c, 0).expect("run");
    let mut ckpt = Vec::new();
    write_checkpoint(&params, &mut ckpt).expect("checkpoint");
    let (report, _) = bench.run_grid(&[c]).expect("grid");
    let dir = tempfile::tempdir().expect("tempdir");
    report.write(dir.path()).expect("report");
    let json = std::fs::read(dir.path().join("report.json")).expect("read");
    let csv = std::fs::read(dir.path().join("report.csv")).expect("read");
    (ckpt, json, csv)
}

fn determinism() -> Outcome {
    let a = pipeline_run();
    let b = pipeline_run();
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    outcome(
        same.iter().all(|&s| s),
        format!(
            "two fresh pipeline runs: checkpoint ({} bytes) identical [{}], report.json identical [{}], report.csv identical [{}]",
            a.0.len(),
            ok(same[0]),
            ok(same[1]),
            ok(same[2])
        ),
    )
}

fn f1_oracle() -> Outcome {
    // (tp, fp, fn, tn) and the macro-F1 worked out by hand as a fraction
    let cases: [((usize, usize, usize, usize), f64); 10] = [
        ((2, 1, 1, 1), 7.0 / 12.0),
        ((5, 0, 0, 5), 1.0),
        ((0, 5, 5, 0), 0.0),
        ((5, 5, 0, 0), 1.0 / 3.0),
        ((0, 0, 5, 5), 1.0 / 3.0),
        ((3, 1, 2, 4), 23.0 / 33.0),
        ((1, 0, 0, 0), 1.0 / 2.0),
        ((4, 2, 1, 3), 23.0 / 33.0),
        ((7, 3, 2, 8), 299.0 / 399.0),
        ((1, 2, 3, 4), 41.0 / 91.0),
    ];
    let mut wrong = Vec::new();
    for ((tp, fp, fn_, tn), want) in cases {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (p, y, n) in [(1, 1, tp), (1, 0, fp), (0, 1, fn_), (0, 0, tn)] {
            preds.extend(std::iter::repeat_n(p, n));
            labels.extend(std::iter::repeat_n(y, n));
        }
        let got = f1_score(&preds, &labels).expect("f1");
        if got != want {
            wrong.push(format!("{:?}: {got} != {want}", (tp, fp, fn_, tn)));
        }
    }
    outcome(
        wrong.is_empty(),
        if wrong.is_empty() {
            "10 enumerated confusion matrices match their hand-computed fractions exactly".to_string()
        } else {
            wrong.join("; ")
        },
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome, u64); 9] = [
        (1, "gradient checks", gradient_checks, 120),
        (2, "tokenizer oracle", tokenizer_oracle, 60),
        (3, "freeze/swap soundness", freeze_and_swap, 120),
        (4, "learning sanity", learning_sanity, 300),
        (5, "random < frozen < fine-tune", transfer_ordering, 900),
        (6, "word2vec vs random embeddings", embedding_init, 600),
        (7, "dataset-size sweep", size_sweep, 1200),
        (8, "determinism", determinism, u64::MAX),
        (9, "f1 oracle", f1_oracle, u64::MAX),
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("XFER_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("XFER_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (id, name, run, limit) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let in_time = Duration::from_secs_f64(secs) < Duration::from_secs(limit);
        let pass = result.pass && in_time;
        let budget = if limit == u64::MAX {
            format!("{secs:.1} s")
        } else {
            format!("{secs:.1} s < {limit} s [{}]", ok(in_time))
        };
        println!("criterion {id} {}: {name}: {}; {budget}", if pass { "PASS" } else { "FAIL" }, result.detail);
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: criteria {failed:?} failed");
        if strict {
            std::process::exit(1);
        }
    }
}
