use criterion::{black_box, criterion_group, criterion_main, Criterion};
use fluvinv::generator::{Architecture, Generator, GridGeometry, LatentVector, NeuralGenerator, ProceduralGenerator};
use fluvinv::geophysics::{BurdenConfig, PsfConfig, RockPhysicsParams, SeismicModel};
use fluvinv::{Precision, Tape, Tensor};

fn ramp(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) / 100.0).collect()).unwrap()
}

fn conv_benchmark(c: &mut Criterion) {
    let x = ramp(vec![8, 8, 32, 32]);
    let w = ramp(vec![8, 8, 3, 3, 3]);
    let mut group = c.benchmark_group("conv3d 8x8x32x32, 8->8, k3");
    group.sample_size(20);
    group.bench_function("forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new(Precision::F32);
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            black_box(tape.conv3d(xv, wv, None).unwrap());
        })
    });
    group.bench_function("forward + backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new(Precision::F32);
            let xv = tape.input(x.clone());
            let wv = tape.input(w.clone());
            let y = tape.conv3d(xv, wv, None).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s, &Tensor::scalar(1.0)).unwrap());
        })
    });
    group.finish();
}

fn generator_benchmark(c: &mut Criterion) {
    let neural = NeuralGenerator::random(Architecture::desk(), 1).unwrap();
    let procedural = ProceduralGenerator::new(GridGeometry::desk(), 16).unwrap();
    let z = LatentVector(vec![0.3; 16]);
    let mut group = c.benchmark_group("generator desk");
    group.sample_size(20);
    group.bench_function("neural forward", |b| b.iter(|| neural.generate(black_box(&z), None).unwrap()));
    group.bench_function("procedural forward", |b| {
        b.iter(|| procedural.generate(black_box(&z), None).unwrap())
    });
    group.finish();
}

fn seismic_benchmark(c: &mut Criterion) {
    let gen = ProceduralGenerator::new(GridGeometry::desk(), 16).unwrap();
    let grid = gen.generate(&LatentVector(vec![0.3; 16]), None).unwrap();
    let model = SeismicModel::for_grid(
        &grid,
        RockPhysicsParams::default(),
        BurdenConfig::default(),
        PsfConfig::default(),
    )
    .unwrap();
    let mut group = c.benchmark_group("seismic desk");
    group.sample_size(20);
    group.bench_function("forward", |b| b.iter(|| model.forward(black_box(&grid)).unwrap()));
    group.finish();
}

criterion_group!(benches, conv_benchmark, generator_benchmark, seismic_benchmark);
criterion_main!(benches);
