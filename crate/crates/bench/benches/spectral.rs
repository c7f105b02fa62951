use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spectral_pe::graph::{normalized_adjacency, normalized_laplacian, perturb_edges};
use spectral_pe::lab::davis_kahan_verify;
use spectral_pe::pe::{laplacian_eigenmap_from, LeConvention};
use spectral_pe::peg::{PegArch, PegModel};
use spectral_pe::spe::{spe_forward, spectral_input, SpeConfig, SpeParams};
use spectral_pe::spectral::{eta_distance, sym_eig};
use spectral_pe_bench::fixture;

fn eigensolver(c: &mut Criterion) {
    let mut group = c.benchmark_group("sym_eig");
    for n in [16, 32, 64] {
        let (_, l) = fixture(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &l, |b, l| b.iter(|| sym_eig(black_box(l)).unwrap()));
    }
    group.finish();
}

fn procrustes(c: &mut Criterion) {
    let (g, l) = fixture(64, 2);
    let eig = sym_eig(&l).unwrap();
    let z1 = laplacian_eigenmap_from(&eig, 8, LeConvention::IncludeZero).unwrap().z;
    let l2 = normalized_laplacian(&perturb_edges(&g, 0.0, 0.1, 3).unwrap()).unwrap();
    let z2 = laplacian_eigenmap_from(&sym_eig(&l2).unwrap(), 8, LeConvention::IncludeZero).unwrap().z;
    c.bench_function("eta_distance 64x8", |b| b.iter(|| eta_distance(black_box(&z1), black_box(&z2)).unwrap()));
    c.bench_function("davis_kahan_verify 64", |b| b.iter(|| davis_kahan_verify(&l, &l2, 0, 7).unwrap()));
}

fn encoders(c: &mut Criterion) {
    let (g, l) = fixture(64, 4);
    let eig = sym_eig(&l).unwrap();
    let z = laplacian_eigenmap_from(&eig, 8, LeConvention::IncludeZero).unwrap().z;
    let a_hat = normalized_adjacency(&g).unwrap();
    let x = z.matmul(&z.transpose());
    let model = PegModel::init(x.cols(), &[32], 8, &PegArch::default(), 0).unwrap();
    c.bench_function("peg forward 64", |b| b.iter(|| model.forward(&a_hat, black_box(&x), &z).unwrap()));

    let inp = spectral_input(&eig, 8).unwrap();
    let params = SpeParams::random(&SpeConfig { d: 8, ..Default::default() }, 0).unwrap();
    let a = g.adjacency();
    c.bench_function("spe forward 64", |b| b.iter(|| spe_forward(&params, black_box(&inp.v), &inp.lambda, &a).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().measurement_time(Duration::from_secs(3)).sample_size(20);
    targets = eigensolver, procrustes, encoders
}
criterion_main!(benches);
