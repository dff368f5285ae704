use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctensor::ComplexTensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> ComplexTensor<f64> {
    let n: usize = shape.iter().product();
    let re = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let im = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ComplexTensor::new(shape, re, im).unwrap()
}
