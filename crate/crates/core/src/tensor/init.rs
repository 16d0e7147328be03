//! Weight initialization.

use rand::Rng;

use crate::tensor::Tensor;

/// Xavier (Glorot) uniform initialization: values drawn from
/// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
///
/// For conv kernels `[Cout, Cin, kH, kW]` the fans include the receptive
/// field: `fan_in = Cin*kH*kW`, `fan_out = Cout*kH*kW`. Shapes with fewer
/// than 2 dims are bias-like and not accepted here; use [`zeros`].
pub fn xavier_init<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    assert!(shape.len() >= 2, "xavier_init requires a weight shape, got {shape:?}");
    let receptive: usize = shape[2..].iter().product::<usize>().max(1);
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// All-zero tensor; the initializer for bias terms.
pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec())
}
