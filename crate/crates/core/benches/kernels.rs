//! Sequential versus rayon execution of the same kernels.
//!
//! Both modes run the identical closures; `parallel::set_enabled` only
//! switches the scheduler, so the timings isolate the fan-out cost and gain.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fogseg_core::parallel;
use fogseg_core::seg::{SegNet, SegNetConfig};
use fogseg_core::tensor::kernels::{batch_norm_forward, conv2d_forward};
use fogseg_core::tensor::ConvGeometry;
use fogseg_core::Tensor;

fn wave(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0)
}

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    let x = wave(&[4, 32, 32, 64]);
    let w = wave(&[32, 32, 3, 3]);
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| conv2d_forward(&x, &w, None, ConvGeometry::new(1, 1)).unwrap())
        });
    }
    group.finish();
}

fn norm(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_norm");
    let (n, ch, plane) = (4, 64, 32 * 64);
    let x = wave(&[n * ch * plane]);
    let (gamma, beta) = (vec![1.0f32; ch], vec![0.0f32; ch]);
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_norm_forward(x.data(), [n, ch, plane], &gamma, &beta, None, 1e-5))
        });
    }
    group.finish();
}

fn segnet(c: &mut Criterion) {
    let mut group = c.benchmark_group("segnet_forward_64x128");
    group.sample_size(10);
    let cfg = SegNetConfig {
        input_height: 64,
        input_width: 128,
        ..Default::default()
    };
    let mut net = SegNet::new(&cfg, 0).unwrap();
    let rgb = wave(&[1, 3, cfg.input_height, cfg.input_width]);
    let ld = wave(&[1, cfg.ld_channels(), cfg.input_height, cfg.input_width]);
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| net.predict(&rgb, &ld).unwrap()));
    }
    group.finish();
    parallel::set_enabled(true);
}

criterion_group!(benches, conv, norm, segnet);
criterion_main!(benches);
