use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ktransformer::cluster::kmeans_fit;
use ktransformer::metrics::{corpus_bleu, BleuConfig};
use ktransformer::tensor::matmul;
use ktransformer::{ClusterMode, Graph, Pass, Reduction};
use ktransformer_bench::{random_ids, random_matrix, small_model};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let points = random_matrix(50, 64, 3).cast::<f64>();
    c.bench_function("kmeans 50x64 k=4", |bench| {
        bench.iter(|| kmeans_fit(black_box(&points), 4, 0, 100, 1e-6).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let src = random_ids(20, 64, 4);
    let tgt = random_ids(20, 64, 5);
    let mut group = c.benchmark_group("pair loss forward+backward");
    for mode in [ClusterMode::Off, ClusterMode::Both] {
        let model = small_model(mode);
        group.bench_function(mode.to_string(), |bench| {
            bench.iter(|| {
                let mut g = Graph::with_params(model.params());
                let (loss, _) = model
                    .pair_loss(&mut g, &src, &tgt, &mut Pass::eval(), Reduction::Mean, None)
                    .unwrap();
                g.backward(loss).unwrap();
                g.param_grads()
            })
        });
    }
    group.finish();

    let model = small_model(ClusterMode::Both);
    c.bench_function("greedy decode 20 tokens", |bench| {
        bench.iter(|| model.greedy_translate(black_box(&src), 20).unwrap())
    });
}

fn bench_bleu(c: &mut Criterion) {
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..200)
        .map(|i| (random_ids(25, 30, i), random_ids(25, 30, i + 1000)))
        .collect();
    c.bench_function("corpus bleu 200 pairs", |bench| {
        bench.iter(|| corpus_bleu(black_box(&pairs), &BleuConfig::default()).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_kmeans, bench_model, bench_bleu);
criterion_main!(benches);
