//! Complex multichannel 2D grids in the Fourier (k-space) and image domains.
//!
//! Conventions pinned here and relied on everywhere else:
//!
//! * DFTs are unitary, so total energy and white-noise variance are identical
//!   in both domains.
//! * k-space is stored in centered layout: the DC coefficient sits at index
//!   `(nx/2, ny/2)`. [`dft2`] applies the shift, [`idft2`] undoes it.
//! * All convolutions are circular (periodic). This makes the convolution
//!   theorem exact to machine precision rather than approximate.

use ndarray::{Array3, Zip};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type C64 = Complex64;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    KSpace,
    Image,
}

fn validate(data: &Array3<C64>, what: &'static str) -> Result<()> {
    let (nx, ny, c) = data.dim();
    if nx < 2 || ny < 2 || c < 1 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: grid must be at least 2x2 with one channel, got {nx}x{ny}x{c}"
        )));
    }
    if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

macro_rules! tensor_type {
    ($name:ident, $domain:expr, $label:literal) => {
        /// Complex `[nx, ny, coils]` grid tagged with its domain.
        #[derive(Clone, Debug)]
        pub struct $name {
            data: Array3<C64>,
        }

        impl $name {
            pub fn new(data: Array3<C64>) -> Result<Self> {
                validate(&data, $label)?;
                Ok(Self { data })
            }

            pub fn zeros(nx: usize, ny: usize, coils: usize) -> Self {
                Self {
                    data: Array3::zeros((nx, ny, coils)),
                }
            }

            pub fn domain(&self) -> Domain {
                $domain
            }

            pub fn data(&self) -> &Array3<C64> {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut Array3<C64> {
                &mut self.data
            }

            pub fn into_data(self) -> Array3<C64> {
                self.data
            }

            pub fn nx(&self) -> usize {
                self.data.dim().0
            }

            pub fn ny(&self) -> usize {
                self.data.dim().1
            }

            pub fn coils(&self) -> usize {
                self.data.dim().2
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            }

            /// Squared Frobenius norm over all voxels and channels.
            pub fn energy(&self) -> f64 {
                self.data.iter().map(|z| z.norm_sqr()).sum()
            }

            pub fn max_abs(&self) -> f64 {
                self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
            }

            pub fn scaled(&self, factor: C64) -> Self {
                Self {
                    data: self.data.mapv(|z| z * factor),
                }
            }

            pub fn add(&self, other: &Self) -> Result<Self> {
                if self.data.dim() != other.data.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "add: {:?} vs {:?}",
                        self.data.dim(),
                        other.data.dim()
                    )));
                }
                let mut out = self.data.clone();
                Zip::from(&mut out).and(&other.data).for_each(|a, &b| *a += b);
                Ok(Self { data: out })
            }

            pub fn sub(&self, other: &Self) -> Result<Self> {
                if self.data.dim() != other.data.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "sub: {:?} vs {:?}",
                        self.data.dim(),
                        other.data.dim()
                    )));
                }
                let mut out = self.data.clone();
                Zip::from(&mut out).and(&other.data).for_each(|a, &b| *a -= b);
                Ok(Self { data: out })
            }
        }
    };
}

tensor_type!(KSpaceTensor, Domain::KSpace, "k-space tensor");
tensor_type!(ImageTensor, Domain::Image, "image tensor");

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn rustfft::Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn fft_plan(len: usize, inverse: bool) -> Arc<dyn rustfft::Fft<f64>> {
    PLANNER.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// Unnormalized 2D FFT per channel, in place over a fresh copy.
pub(crate) fn fft2_raw(data: &Array3<C64>, inverse: bool) -> Array3<C64> {
    let (nx, ny, nc) = data.dim();
    let mut out = data.clone();
    let plan_x = fft_plan(nx, inverse);
    let plan_y = fft_plan(ny, inverse);
    let mut col = vec![C64::new(0.0, 0.0); nx];
    for c in 0..nc {
        // along y: rows are contiguous in memory order [x, y, c]? They are
        // strided by nc, so copy into scratch.
        let mut row = vec![C64::new(0.0, 0.0); ny];
        for x in 0..nx {
            for y in 0..ny {
                row[y] = out[[x, y, c]];
            }
            plan_y.process(&mut row);
            for y in 0..ny {
                out[[x, y, c]] = row[y];
            }
        }
        for y in 0..ny {
            for x in 0..nx {
                col[x] = out[[x, y, c]];
            }
            plan_x.process(&mut col);
            for x in 0..nx {
                out[[x, y, c]] = col[x];
            }
        }
    }
    out
}

/// Rotate both grid axes by `+floor(n/2)` (moves index 0 to the center).
pub(crate) fn fftshift2(data: &Array3<C64>) -> Array3<C64> {
    let (nx, ny, nc) = data.dim();
    let (sx, sy) = (nx / 2, ny / 2);
    let mut out = Array3::zeros((nx, ny, nc));
    for x in 0..nx {
        for y in 0..ny {
            for c in 0..nc {
                out[[(x + sx) % nx, (y + sy) % ny, c]] = data[[x, y, c]];
            }
        }
    }
    out
}

/// Inverse of [`fftshift2`].
pub(crate) fn ifftshift2(data: &Array3<C64>) -> Array3<C64> {
    let (nx, ny, nc) = data.dim();
    let (sx, sy) = (nx / 2, ny / 2);
    let mut out = Array3::zeros((nx, ny, nc));
    for x in 0..nx {
        for y in 0..ny {
            for c in 0..nc {
                out[[x, y, c]] = data[[(x + sx) % nx, (y + sy) % ny, c]];
            }
        }
    }
    out
}

/// Orthonormal forward 2D DFT per channel, image domain to centered k-space.
pub fn dft2(x: &ImageTensor) -> KSpaceTensor {
    let (nx, ny, _) = x.data().dim();
    let scale = 1.0 / ((nx * ny) as f64).sqrt();
    let spectrum = fft2_raw(x.data(), false).mapv(|z| z * scale);
    KSpaceTensor {
        data: fftshift2(&spectrum),
    }
}

/// Orthonormal inverse 2D DFT per channel, centered k-space to image domain.
pub fn idft2(s: &KSpaceTensor) -> ImageTensor {
    let (nx, ny, _) = s.data().dim();
    let scale = 1.0 / ((nx * ny) as f64).sqrt();
    let unshifted = ifftshift2(s.data());
    ImageTensor {
        data: fft2_raw(&unshifted, true).mapv(|z| z * scale),
    }
}

/// Checked variants rejecting non-finite input with a diagnostic.
pub fn dft2_checked(x: &ImageTensor) -> Result<KSpaceTensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("dft2 input"));
    }
    Ok(dft2(x))
}

pub fn idft2_checked(s: &KSpaceTensor) -> Result<ImageTensor> {
    if !s.is_finite() {
        return Err(Error::NonFinite("idft2 input"));
    }
    Ok(idft2(s))
}

/// Raw array variant used by internal operators that carry no domain tag.
pub(crate) fn idft2_array(s: &Array3<C64>) -> Array3<C64> {
    let (nx, ny, _) = s.dim();
    let scale = 1.0 / ((nx * ny) as f64).sqrt();
    fft2_raw(&ifftshift2(s), true).mapv(|z| z * scale)
}

/// Relative deviation `max|a - b| / max|a|`, the contract metric used by the
/// dual-domain equivalence checks.
pub fn rel_max_deviation<D: ndarray::Dimension>(
    a: &ndarray::Array<C64, D>,
    b: &ndarray::Array<C64, D>,
) -> f64 {
    assert_eq!(a.dim(), b.dim(), "rel_max_deviation shape mismatch");
    let denom = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let num = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max);
    if denom == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / denom
    }
}
