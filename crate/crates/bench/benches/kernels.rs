use criterion::{black_box, criterion_group, criterion_main, Criterion};
use pseudoview::attention::{attention_step, pmp_chain};
use pseudoview::bank::{PrototypeBank, PseudoConfig};
use pseudoview::contourlet::{dfb_decompose, lp_decompose, lp_reconstruct, Contourlet};
use pseudoview::model::{ForwardContext, Model, ModelConfig};
use pseudoview_bench::{gaussian, scene_sample};

fn contourlet(c: &mut Criterion) {
    let x = gaussian(&[64, 64, 1], 1);
    c.bench_function("lp_roundtrip_64", |b| {
        b.iter(|| {
            let (low, high) = lp_decompose(black_box(&x)).unwrap();
            lp_reconstruct(&low, &high).unwrap()
        })
    });
    let h = gaussian(&[32, 32, 1], 2);
    c.bench_function("dfb_z3_32", |b| b.iter(|| dfb_decompose(black_box(&h), 3).unwrap()));
    let ct = Contourlet::new(2, 3).unwrap();
    let f = gaussian(&[8, 8, 2], 3);
    c.bench_function("texture_t2_z3_8x8x2", |b| b.iter(|| ct.texture(black_box(&f)).unwrap()));
}

fn attention(c: &mut Criterion) {
    let f = gaussian(&[64, 48], 4);
    let fp = gaussian(&[64, 48], 5);
    c.bench_function("attention_step_64x48", |b| b.iter(|| attention_step(black_box(&f), black_box(&fp)).unwrap()));
    c.bench_function("pmp_chain_m4_64x48", |b| b.iter(|| pmp_chain(black_box(&f), black_box(&fp), 4).unwrap()));
}

fn bank(c: &mut Criterion) {
    let dim = 528;
    let stream: Vec<Vec<f64>> = (0..256).map(|i| gaussian(&[dim], 100 + i).into_data()).collect();
    c.bench_function("bank_observe_256x528_n64", |b| {
        b.iter(|| {
            let mut bank = PrototypeBank::new(64, dim).unwrap();
            for p in &stream {
                bank.observe(p).unwrap();
            }
            bank
        })
    });
    let mut bank = PrototypeBank::new(64, dim).unwrap();
    for p in &stream {
        bank.observe(p).unwrap();
    }
    let cfg = PseudoConfig::default();
    c.bench_function("generate_pseudo_528_n64", |b| {
        b.iter(|| bank.generate_pseudo(black_box(&stream[0]), &cfg, None).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let (image, labels) = scene_sample(7);
    let mut bank = model.new_bank().unwrap().unwrap();
    for p in model.forward(&image, &mut ForwardContext::warmup()).unwrap().descriptors {
        bank.observe(&p).unwrap();
    }
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("forward_warmup", |b| {
        b.iter(|| model.forward(black_box(&image), &mut ForwardContext::warmup()).unwrap())
    });
    group.bench_function("loss_and_grads_pmp", |b| {
        b.iter(|| model.loss_and_grads(black_box(&image), &labels, &mut ForwardContext::pmp(&bank)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, contourlet, attention, bank, model);
criterion_main!(benches);
