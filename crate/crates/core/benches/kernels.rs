use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmdense::arch::{ArchSpec, Model};
use mmdense::kernels::{conv2d_same, Dims4, KernelDims};
use mmdense::parallel::with_sequential;
use mmdense::separate::{mwf, SourceEstimateSet};
use mmdense::signal::{stft, AudioClip};
use mmdense::Tensor;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Runs `f` once on the parallel path and once forced sequential.
fn both<F: Fn()>(c: &mut Criterion, group: &str, param: &str, elems: u64, f: F) {
    let mut g = c.benchmark_group(group);
    g.throughput(Throughput::Elements(elems));
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", param), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", param), |b| {
        b.iter(|| with_sequential(&f))
    });
    g.finish();
}

fn conv(c: &mut Criterion) {
    for (ch, frames, bins, out) in [(16, 64, 256, 8), (30, 64, 512, 8)] {
        let d = Dims4::new(2, ch, frames, bins);
        let k = KernelDims { out, inp: ch, kt: 3, kf: 3 };
        let x = random(d.numel(), 1);
        let w = random(out * k.taps(), 2);
        let macs = (d.n * d.plane() * out * k.taps()) as u64;
        both(c, "conv2d_3x3", &format!("{ch}x{frames}x{bins}"), macs, || {
            std::hint::black_box(conv2d_same(&x, d, &w, k, None, (1, 1)));
        });
    }
}

fn front_end(c: &mut Criterion) {
    let len = 44_100 * 5;
    let clip = AudioClip::new(vec![random(len, 3), random(len, 4)], 44_100).unwrap();
    both(c, "stft", "5s_stereo", len as u64, || {
        std::hint::black_box(stft(&clip).unwrap());
    });

    let spec = stft(&clip).unwrap();
    let mag = spec.magnitude();
    let est = SourceEstimateSet::new(
        [("a".to_string(), mag.clone()), ("b".to_string(), mag)].into_iter().collect(),
    )
    .unwrap();
    let cells = (spec.frames() * spec.bins()) as u64;
    both(c, "mwf", "5s_two_sources", cells, || {
        std::hint::black_box(mwf(&est, &spec, 1).unwrap());
    });
}

fn model(c: &mut Criterion) {
    let spec = ArchSpec::mmdensenet_table1().scaled_widths(0.5);
    let m = Model::<f32>::build(&spec).unwrap();
    let x = Tensor::new(vec![1, 2, 64, 1024], random(2 * 64 * 1024, 5)).unwrap();
    both(c, "infer_halved_mmdensenet", "64x1024", 64 * 1024, || {
        std::hint::black_box(m.infer(x.clone()).unwrap());
    });
}

criterion_group!(benches, conv, front_end, model);
criterion_main!(benches);
