//! Criterion benchmarks for the hot kernels; see `benches/kernels.rs`.

use focusfuse_core::synth::scene;
use focusfuse_core::{Plane, Shape, Tensor};

/// Deterministic grayscale input for the benchmarks.
pub fn input_plane(size: usize) -> Plane {
    scene(size, size, 42)
}

/// Deterministic tensor with values in [-1, 1].
pub fn input_tensor(shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |n, c, y, x| (((n * 31 + c * 17 + y * 7 + x * 3) % 97) as f32 / 48.5) - 1.0)
}
