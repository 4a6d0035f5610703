#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Fan-in/fan-out of a weight shape. The last two dims are (inputs, outputs)
/// and any leading dims form the receptive field, so a `k x k x Cin x Cout`
/// kernel has fan-in `k*k*Cin`.
pub fn fans(shape: &[usize]) -> Option<(usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return None;
    }
    let receptive: usize = shape[..r - 2].iter().product();
    Some((receptive * shape[r - 2], receptive * shape[r - 1]))
}

pub fn xavier_bound(shape: &[usize]) -> Option<f64> {
    fans(shape).map(|(i, o)| (6.0 / (i + o) as f64).sqrt())
}

/// Xavier-uniform weights, deterministic in `(shape, seed)`. Rank-1 shapes
/// (biases) get the constant 0.
pub fn xavier_init<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let Some(bound) = xavier_bound(shape) else {
        return Tensor::zeros(shape);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::cst(dist.sample(&mut rng)))
}
