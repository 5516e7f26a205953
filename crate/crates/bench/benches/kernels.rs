use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;
use vox_core::autodiff::{draw_features, AttentionMode, Tape, Tensor};
use vox_core::eval::auc_of;
use vox_core::seed;
use vox_core::vq::{quantize, Codebook, CodebookConfig};

fn randn(shape: &[usize], s: u64) -> Tensor<f32> {
    let mut r = seed::rng(s);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0f32..1.0))
}

fn conv(c: &mut Criterion) {
    let x = randn(&[1, 8, 16, 16, 16], 1);
    let w = randn(&[16, 8, 3, 3, 3], 2);
    c.bench_function("conv3d 8->16 16^3 fwd+bwd", |b| {
        b.iter(|| {
            let mut t = Tape::<f32>::new();
            let xv = t.constant(x.clone());
            let wv = t.param(w.clone());
            let y = t.conv3d(xv, wv, None, 1, 1).unwrap();
            let l = t.sum(y);
            black_box(t.backward(l).unwrap());
        })
    });
}

fn attention(c: &mut Criterion) {
    let (len, dim, heads) = (512, 64, 4);
    let q = randn(&[1, len, dim], 3);
    let k = randn(&[1, len, dim], 4);
    let v = randn(&[1, len, dim], 5);
    let omega = draw_features::<f32, _>(&mut seed::rng(6), 64, dim / heads, true);
    for (name, mode) in [("exact", AttentionMode::Exact), ("favor", AttentionMode::Favor(omega))] {
        c.bench_function(&format!("causal attention {name} L=512"), |b| {
            b.iter(|| {
                let mut t = Tape::<f32>::new();
                let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
                black_box(t.attention(qv, kv, vv, heads, &mode).unwrap());
            })
        });
    }
}

fn vq(c: &mut Criterion) {
    let cfg = CodebookConfig::toy();
    let book = Codebook::new(cfg, &mut seed::rng(7)).unwrap();
    let rows = 8 * 8 * 8;
    let z = randn(&[rows, book.dim()], 8).into_data();
    c.bench_function("quantize 512 rows", |b| {
        b.iter(|| black_box(quantize(&z, [8, 8, 8], &book).unwrap()))
    });
}

fn auc(c: &mut Criterion) {
    let mut r = seed::rng(9);
    let pos: Vec<f64> = (0..1000).map(|_| r.gen()).collect();
    let neg: Vec<f64> = (0..1000).map(|_| r.gen()).collect();
    c.bench_function("auc 1000x1000", |b| b.iter(|| black_box(auc_of(&pos, &neg).unwrap())));
}

criterion_group!(benches, conv, attention, vq, auc);
criterion_main!(benches);
