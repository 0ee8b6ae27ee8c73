use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use flowprobe_core::encoder::IdentityEmbedding;
use flowprobe_core::faces::{reference_render, PIXELS};
use flowprobe_core::probes::{contrast, sharpness};
use flowprobe_core::{
    sample, AdapterCond, AdapterStack, BackboneArch, FlowBackbone, Graph, PromptTransform,
    SampleRequest, Tensor,
};

fn ramp(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &(m, k, n) in &[(16, 1024, 256), (256, 256, 256), (64, 1024, 1024)] {
        let (a, b) = (ramp(m, k), ramp(k, n));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(), |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let backbone = FlowBackbone::init(&BackboneArch::default(), 1).unwrap();
    let x = ramp(16, PIXELS);
    let ts: Vec<f64> = (0..16).map(|i| (i as f64 + 0.5) / 16.0).collect();
    let prompts: Vec<usize> = (0..16).map(|i| i % 3).collect();
    c.bench_function("backbone_forward_batch16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            black_box(backbone.forward(&mut g, xv, &ts, &prompts, None, None).unwrap());
        })
    });
    c.bench_function("backbone_forward_backward_batch16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.watch(x.clone());
            let v = backbone.forward(&mut g, xv, &ts, &prompts, None, None).unwrap();
            let loss = g.sum(v);
            black_box(g.grad_wrt(loss, &[xv]).unwrap());
        })
    });
}

fn sampling(c: &mut Criterion) {
    let backbone = FlowBackbone::init(&BackboneArch::default(), 1).unwrap();
    let adapter = AdapterStack::init(backbone.block_count(), 2);
    let e_id = IdentityEmbedding::from_raw(&[1.0, 0.5, -0.25, 0.0, 0.3, -0.7, 0.2, 0.1]).unwrap();
    let mut group = c.benchmark_group("sample");
    group.sample_size(20);
    for &(steps, guidance) in &[(4usize, 0.0), (28, 3.5)] {
        group.bench_function(format!("T{steps}_g{guidance}"), |bench| {
            bench.iter(|| {
                let req = SampleRequest {
                    steps,
                    guidance,
                    prompt: PromptTransform::plain(),
                    adapter: Some(AdapterCond::single(&adapter, &e_id, 1.0)),
                    seed: 3,
                    capture_streams: true,
                };
                black_box(sample(&backbone, &req).unwrap())
            })
        });
    }
    group.finish();
}

fn probes(c: &mut Criterion) {
    let img = reference_render(4);
    c.bench_function("sharpness", |bench| bench.iter(|| sharpness(black_box(&img))));
    c.bench_function("contrast", |bench| bench.iter(|| contrast(black_box(&img))));
}

criterion_group!(benches, matmul, forward_backward, sampling, probes);
criterion_main!(benches);
