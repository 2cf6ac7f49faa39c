use candle_core::{DType, Device, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use uwkit_bench::{detection_scene, feature_map, values};
use uwkit_core::eupg::roi_align;
use uwkit_core::graph::{build_graph, mask_nodes};
use uwkit_core::metrics::evaluate;
use uwkit_core::mgukd::{Gat, GatConfig};
use uwkit_core::synth::{degrade, generate_scene};
use uwkit_core::{BBox, EncoderConfig, ParamStore, SceneConfig, VitEncoder};

fn graphs(c: &mut Criterion) {
    let f = feature_map(14, 14, 64, DType::F32);
    c.bench_function("build_graph 14x14x64 k=11", |b| b.iter(|| build_graph(black_box(&f), 11).unwrap()));
    let g = build_graph(&f, 11).unwrap();
    c.bench_function("mask_nodes 196 @ 0.65", |b| b.iter(|| mask_nodes(black_box(&g), 0.65, 3).unwrap()));
    let ps = ParamStore::new(0, DType::F32);
    let gat = Gat::new(&ps, &GatConfig::default(), 64, 128).unwrap();
    let masked = mask_nodes(&g, 0.65, 3).unwrap();
    c.bench_function("gat reconstruct 196 nodes 64->128", |b| b.iter(|| gat.reconstruct(black_box(&masked)).unwrap()));
}

fn roi(c: &mut Criterion) {
    let tokens = Tensor::from_vec(values(32 * 32 * 64, 4), (32 * 32, 64), &Device::Cpu)
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap();
    let boxes: Vec<BBox> = (0..16)
        .map(|i| {
            let o = 4.0 * i as f64;
            BBox::new(o, o / 2.0, o + 40.0, o / 2.0 + 30.0)
        })
        .collect();
    c.bench_function("roi_align 16 boxes 32x32x64 -> 14x14", |b| {
        b.iter(|| roi_align(black_box(&tokens), None, 32, 32, &boxes, 128, 14).unwrap())
    });
}

fn ap(c: &mut Criterion) {
    let (preds, gts) = detection_scene(40);
    c.bench_function("evaluate 40 instances 80 predictions", |b| b.iter(|| evaluate(black_box(&preds), &gts).unwrap()));
}

fn encoder(c: &mut Criterion) {
    for (name, cfg) in [("student", EncoderConfig::student()), ("teacher", EncoderConfig::teacher())] {
        let ps = ParamStore::frozen(0, DType::F32);
        let enc = VitEncoder::new(&ps, &cfg).unwrap();
        let x = Tensor::from_vec(values(4 * 3 * 128 * 128, 5), (4, 3, 128, 128), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        c.bench_function(&format!("{name} encoder forward batch 4"), |b| b.iter(|| enc.encode(black_box(&x)).unwrap()));
    }
}

fn synth(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    c.bench_function("generate + degrade one 128px scene", |b| {
        b.iter(|| degrade(&generate_scene(black_box(11), &cfg).unwrap()).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = graphs, roi, ap, encoder, synth
}
criterion_main!(benches);
