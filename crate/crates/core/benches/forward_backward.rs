//! Forward and forward+backward timings on a 64x64 crop with the desk
//! architecture. Run once as is and once with `--no-default-features` to
//! compare the rayon and sequential builds; the `threads=1` rows show the
//! parallel build pinned to one worker.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dgcrf::grad::backprop_dgcrf;
use dgcrf::image::add_gaussian_noise;
use dgcrf::par::with_threads;
use dgcrf::train::{psnr_loss, random_init, sigma2_of, TrainConfig};
use dgcrf::{dgcrf_forward, synth, DgcrfModel};

const BUILD: &str = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };

fn bench(c: &mut Criterion) {
    let cfg = TrainConfig::desk();
    let clean = synth::scene(64, 64, 3).unwrap();
    let noisy = add_gaussian_noise(&clean, 25.0, 1, false).unwrap();
    let model = DgcrfModel::from_bank(cfg.architecture(), random_init(cfg.k, cfg.d, 0, 0.1)).unwrap();
    let sigma2 = sigma2_of(25.0);

    let mut group = c.benchmark_group(format!("desk_64x64/{BUILD}"));
    group.sample_size(10);
    for threads in [0usize, 1] {
        let label = if threads == 0 { "threads=all".to_string() } else { format!("threads={threads}") };
        group.bench_function(BenchmarkId::new("forward", &label), |b| {
            b.iter(|| with_threads(threads, || dgcrf_forward(&noisy, sigma2, &model).unwrap()))
        });
        group.bench_function(BenchmarkId::new("forward_backward", &label), |b| {
            b.iter(|| {
                with_threads(threads, || {
                    let (y, cache) = dgcrf_forward(&noisy, sigma2, &model).unwrap();
                    let loss = psnr_loss(&y, &clean).unwrap();
                    backprop_dgcrf(&loss.grad, &cache, &model).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
