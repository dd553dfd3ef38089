use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hmer::exec::map_ordered;
use hmer::kernels::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, matmul, ConvGeom};
use hmer::params::Init;
use hmer::data::Sample;
use hmer::{Exec, Model, ModelConfig, Tensor, TrainConfig, Trainer, Vocabulary};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn conv(c: &mut Criterion) {
    let geom = ConvGeom {
        n: 1,
        cin: 16,
        h: 32,
        w: 64,
        cout: 16,
        kh: 3,
        kw: 3,
        stride: (1, 1),
        pad: (1, 1),
    };
    let mut init = Init::new(1);
    let x = init.uniform(&[1, 16, 32, 64], 1);
    let w = init.uniform(&[16, 16, 3, 3], 144);
    let dy = init.uniform(&[1, 16, 32, 64], 1);
    let mut group = c.benchmark_group("conv2d_3x3_16ch_32x64");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| conv2d_forward(exec, &geom, x.data(), w.data(), None))
        });
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| {
                (
                    conv2d_backward_input(exec, &geom, dy.data(), w.data()),
                    conv2d_backward_weight(exec, &geom, dy.data(), x.data()),
                )
            })
        });
    }
    group.finish();
}

fn matmul_bench(c: &mut Criterion) {
    let mut init = Init::new(2);
    let a = init.uniform(&[128, 128], 1);
    let b = init.uniform(&[128, 128], 1);
    let mut group = c.benchmark_group("matmul_128");
    for (name, exec) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| matmul(exec, a.data(), b.data(), 128, 128, 128))
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let vocab = Vocabulary::from_tokens(["<sos>", "<eol>", "a", "b", "+", "="]).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.decoder.max_decode_len = 8;
    let model = Model::new(&cfg, &vocab, 3).unwrap();
    let mut init = Init::new(4);
    let images: Vec<Tensor> = (0..8).map(|_| init.uniform(&[1, 1, 32, 64], 1)).collect();
    let mut group = c.benchmark_group("greedy_decode_batch8");
    group.sample_size(10);
    for (name, exec) in MODES {
        let m = model.clone().with_exec(Exec::Sequential);
        group.bench_function(name, |b| {
            b.iter(|| map_ordered(exec, &images, |img| m.greedy_decode(img).unwrap().tokens))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let vocab = Vocabulary::from_tokens(["<sos>", "<eol>", "a", "b", "+", "="]).unwrap();
    let model = Model::new(&ModelConfig::default(), &vocab, 5).unwrap();
    let sample = Sample {
        id: "bench".into(),
        image: Init::new(6).uniform(&[1, 1, 32, 64], 1),
        target: vec![2, 4, 3, 5, 2],
    };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut trainer = Trainer::new(model.clone().with_exec(exec), TrainConfig::default()).unwrap();
        group.bench_function(name, |b| b.iter(|| trainer.train_step(&sample).unwrap().loss));
    }
    group.finish();
}

criterion_group!(benches, conv, matmul_bench, decode, train_step);
criterion_main!(benches);
