//! Seeded random fixtures shared by unit tests.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvKernel;
use crate::tensor::{C64, ImageTensor, KSpaceTensor};

pub(crate) fn random_complex_array(
    shape: (usize, usize, usize),
    seed: u64,
) -> Array3<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(shape, |_| {
        C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    })
}

pub(crate) fn random_complex_array4(
    shape: (usize, usize, usize, usize),
    seed: u64,
) -> Array4<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| {
        C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    })
}

pub(crate) fn random_kspace(nx: usize, ny: usize, c: usize, seed: u64) -> KSpaceTensor {
    KSpaceTensor::new(random_complex_array((nx, ny, c), seed)).unwrap()
}

pub(crate) fn random_image(nx: usize, ny: usize, c: usize, seed: u64) -> ImageTensor {
    ImageTensor::new(random_complex_array((nx, ny, c), seed)).unwrap()
}

pub(crate) fn random_kernel(
    nkx: usize,
    nky: usize,
    cin: usize,
    cout: usize,
    dilation: (usize, usize),
    seed: u64,
) -> ConvKernel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let taps = Array4::from_shape_fn((nkx, nky, cin, cout), |_| {
        C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    ConvKernel::centered(taps, dilation).unwrap()
}
