use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use xfer::kernels::matmul_nn;
use xfer::model::{init_model, InitMode, ModelConfig};
use xfer::parallel::Exec;
use xfer::rng::SeedStream;
use xfer::tokenizer::train_vocab;
use xfer::transfer::{predict_with, SynonymTable};
use xfer::word2vec::{nearest_neighbors_with, EmbeddingTable};
use xfer::Tensor;

const PATHS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = SeedStream::new(0).rng("bench");
    for n in [64, 256] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        let mut out = vec![0.0; n * n];
        for (name, exec) in PATHS {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| matmul_nn(exec, a.data(), b.data(), &mut out, n, n, n))
            });
        }
    }
    g.finish();
}

fn neighbours(c: &mut Criterion) {
    let mut g = c.benchmark_group("neighbours");
    let mut rng = SeedStream::new(1).rng("bench");
    let table = EmbeddingTable::new(Tensor::randn(&[2000, 64], 1.0, &mut rng), [0; 16]).unwrap();
    let small = EmbeddingTable::new(Tensor::randn(&[400, 32], 1.0, &mut rng), [0; 16]).unwrap();
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::new("query", name), |b| {
            b.iter(|| nearest_neighbors_with(exec, &table, 17, 10).unwrap())
        });
        g.bench_function(BenchmarkId::new("synonym-table", name), |b| {
            b.iter(|| SynonymTable::build_with(exec, &small, 5, 0.5).unwrap())
        });
    }
    g.finish();
}

fn prediction(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict");
    g.sample_size(10);
    let words = ["ka", "lo", "mi", "nu", "sel", "vam", "gux", "bip"];
    let texts: Vec<String> =
        (0..256).map(|i| (0..12).map(|j| words[(i * 7 + j * 3) % words.len()]).collect::<Vec<_>>().join(" ")).collect();
    let vocab = train_vocab(&texts, 60, 0).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    let mut params = init_model(&cfg, 0, InitMode::Random).unwrap();
    params.set_vocab_hash(vocab.hash());
    for (name, exec) in PATHS {
        g.bench_function(name, |b| b.iter(|| predict_with(exec, &params, &vocab, &texts, 32).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, matmul, neighbours, prediction);
criterion_main!(benches);
