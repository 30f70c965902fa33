//! Inputs shared by the benchmarks.

use protodiv::data_io::{generate_synthetic, stack_batch, Sample, SyntheticSpec};
use protodiv::Tensor;

/// A stacked synthetic batch of `n` images of side `size`.
pub fn batch(n: usize, size: usize) -> (Tensor, Tensor) {
    let samples = generate_synthetic(&SyntheticSpec {
        size,
        count: n,
        seed: 11,
        ..SyntheticSpec::default()
    })
    .expect("synthetic data");
    let refs: Vec<&Sample> = samples.iter().collect();
    stack_batch(&refs).expect("uniform batch")
}

/// Per-pixel normalized random class probabilities `(c, h, w)`.
pub fn probabilities(c: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::from_fn(&[c, h, w], |i| 0.05 + ((i * 7919) % 101) as f64 / 101.0);
    let hw = h * w;
    for p in 0..hw {
        let s: f64 = (0..c).map(|k| t.data()[k * hw + p]).sum();
        for k in 0..c {
            t.data_mut()[k * hw + p] /= s;
        }
    }
    t
}
