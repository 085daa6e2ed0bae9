use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use pfn_bench::random_matrix;
use pfn_core::attention::{dva_forward, va_forward, AttentionParams};
use pfn_core::numerics::{matmul, SeededRng};
use pfn_core::training::{init_model, training_batch, train_step, AdamW};
use pfn_core::{gp::gp_predict, AttentionKind, AttentionSpec, GPHyper, TrainConfig};

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 128, 256] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
    }
    g.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    let d = 32;
    for n in [64, 256] {
        let ctx_x = random_matrix(n, d, 3);
        let ctx_y = random_matrix(n, d, 4);
        let q = random_matrix(64, d, 5);
        for kind in [AttentionKind::Va, AttentionKind::Dva] {
            let spec = AttentionSpec::new(kind, d, 4);
            let params = AttentionParams::init(&spec, d, d, &mut SeededRng::new(6));
            g.bench_with_input(BenchmarkId::new(kind.name(), n), &n, |bch, _| {
                bch.iter(|| match kind {
                    AttentionKind::Dva => dva_forward(&ctx_x, &ctx_y, &q, &spec, &params).unwrap(),
                    _ => va_forward(&ctx_x, &q, &spec, &params).unwrap(),
                })
            });
        }
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for kind in ["va", "dva"] {
        let text = format!(
            "prior = 1d\npoints_per_dataset = 100\nbatch_size = 8\nwidth = 32\nffn_dim = 64\nheads = 4\nbucket_count = 100\nattention = {kind}\n"
        );
        let cfg = TrainConfig::from_text(&text).unwrap();
        let mut model = init_model(&cfg).unwrap();
        let mut opt = AdamW::new(model.params(), cfg.weight_decay);
        let batch = training_batch(&cfg, 0).unwrap();
        g.bench_function(kind, |bch| bch.iter(|| train_step(&mut model, &mut opt, &batch, 1e-4, cfg.clip_norm).unwrap()));
    }
    g.finish();
}

fn bench_gp(c: &mut Criterion) {
    let mut g = c.benchmark_group("gp_predict");
    let hyper = GPHyper::shared(0.3, 1.0, 1e-2);
    for n in [50, 200] {
        let x = random_matrix(n, 1, 7);
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        let xs = random_matrix(100, 1, 8);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| gp_predict(&hyper, &x, &y, &xs).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_attention, bench_train_step, bench_gp);
criterion_main!(benches);
