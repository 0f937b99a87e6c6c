//! Input generators shared by the benchmarks.

use joulemeter::counter::{mask_register, Domain, EnergySample, StreamId};

/// `n` samples of one package stream drawing a steady 180 W plus a sawtooth,
/// sampled once per second at E = 14. Wraps about every 1300 samples.
pub fn pkg_samples(n: usize) -> Vec<EnergySample> {
    let stream = StreamId::new(Domain::Pkg, 0);
    let mut counter: u64 = 0;
    (0..n)
        .map(|i| {
            counter += (180 + (i % 40) as u64) << 14;
            EnergySample::new(i as u64 * 1_000_000_000, stream, mask_register(counter))
        })
        .collect()
}

/// `n` points on `31 log2 x + 246` with a small deterministic wobble.
pub fn core_power_points(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let x = 1.0 + (i % 128) as f64;
            (x, 31.0 * x.log2() + 246.0 + ((i * 7919) % 13) as f64 * 0.1)
        })
        .collect()
}
