//! Coil noise covariance and pre-whitening.
//!
//! Channel noise is modelled as circularly-symmetric complex Gaussian with a
//! Hermitian positive-definite covariance `Σ`. Pre-whitening applies
//! `y = W x` with `W = L⁻¹` from the Cholesky factorization `Σ = L Lᴴ`, so
//! that `W Σ Wᴴ = I` (equivalently `Wᴴ W = Σ⁻¹`).

use nalgebra::{Cholesky, DMatrix, Dyn};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::{C64, KSpaceTensor};

#[derive(Clone, Debug)]
pub struct NoiseModel {
    covariance: Array2<C64>,
    /// Lower-triangular Cholesky factor `L` with `Σ = L Lᴴ`.
    coloring: Array2<C64>,
    /// `W = L⁻¹`, lower triangular.
    whitening: Array2<C64>,
}

fn to_nalgebra(a: &Array2<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn to_ndarray(m: &DMatrix<C64>) -> Array2<C64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

impl NoiseModel {
    /// Build a model from a Hermitian positive-definite covariance matrix.
    pub fn new(covariance: Array2<C64>) -> Result<Self> {
        let c = covariance.nrows();
        if c == 0 || covariance.ncols() != c {
            return Err(Error::InvalidArgument(format!(
                "covariance must be square and non-empty, got {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let mut herm_dev: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..c {
            for j in 0..c {
                let z = covariance[[i, j]];
                if !z.re.is_finite() || !z.im.is_finite() {
                    return Err(Error::NonFinite("noise covariance"));
                }
                herm_dev = herm_dev.max((z - covariance[[j, i]].conj()).norm());
                scale = scale.max(z.norm());
            }
        }
        if scale == 0.0 || herm_dev > 1e-10 * scale {
            return Err(Error::InvalidArgument(
                "noise covariance must be Hermitian and nonzero".into(),
            ));
        }
        let chol: Cholesky<C64, Dyn> = Cholesky::new(to_nalgebra(&covariance))
            .ok_or(Error::SingularCovariance)?;
        let l = chol.l();
        let whitening = l
            .clone()
            .try_inverse()
            .ok_or(Error::SingularCovariance)?;
        Ok(Self {
            covariance,
            coloring: to_ndarray(&l),
            whitening: to_ndarray(&whitening),
        })
    }

    /// Identity covariance over `c` channels.
    pub fn identity(c: usize) -> Result<Self> {
        Self::new(Array2::from_shape_fn((c, c), |(i, j)| {
            C64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
        }))
    }

    /// Exponentially decaying cross-channel correlation: unit variance per
    /// channel and `Σ[i,j] = ρ^|i-j|`.
    pub fn exponential(c: usize, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!(
                "correlation decay must lie in [0, 1), got {rho}"
            )));
        }
        Self::new(Array2::from_shape_fn((c, c), |(i, j)| {
            C64::new(rho.powi((i as i64 - j as i64).unsigned_abs() as i32), 0.0)
        }))
    }

    pub fn channels(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &Array2<C64> {
        &self.covariance
    }

    /// `L` with `Σ = L Lᴴ`; maps unit-variance noise to model noise.
    pub fn coloring(&self) -> &Array2<C64> {
        &self.coloring
    }

    /// `W = L⁻¹`; maps model noise to unit-variance noise.
    pub fn whitening(&self) -> &Array2<C64> {
        &self.whitening
    }

    /// Apply a channel-mixing matrix to every k-space sample.
    fn mix(&self, s: &KSpaceTensor, m: &Array2<C64>) -> Result<KSpaceTensor> {
        let c = self.channels();
        if s.coils() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                input: s.coils(),
            });
        }
        let (nx, ny, _) = s.data().dim();
        let mut out = ndarray::Array3::zeros((nx, ny, c));
        for i in 0..nx {
            for j in 0..ny {
                for co in 0..c {
                    let mut acc = C64::new(0.0, 0.0);
                    for ci in 0..c {
                        acc += m[[co, ci]] * s.data()[[i, j, ci]];
                    }
                    out[[i, j, co]] = acc;
                }
            }
        }
        KSpaceTensor::new(out)
    }

    /// Transform data so its channel noise covariance becomes the identity.
    pub fn prewhiten(&self, s: &KSpaceTensor) -> Result<KSpaceTensor> {
        self.mix(s, &self.whitening)
    }

    /// Inverse of [`prewhiten`](Self::prewhiten): reimpose the model
    /// covariance on unit-variance data.
    pub fn color(&self, s: &KSpaceTensor) -> Result<KSpaceTensor> {
        self.mix(s, &self.coloring)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_max_deviation;
    use crate::testutil::random_kspace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn matmul(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
        let (n, k) = a.dim();
        let m = b.ncols();
        Array2::from_shape_fn((n, m), |(i, j)| {
            (0..k).map(|t| a[[i, t]] * b[[t, j]]).sum()
        })
    }

    fn adjoint(a: &Array2<C64>) -> Array2<C64> {
        Array2::from_shape_fn((a.ncols(), a.nrows()), |(i, j)| a[[j, i]].conj())
    }

    #[test]
    fn whitening_normalizes_covariance() {
        let nm = NoiseModel::exponential(4, 0.3).unwrap();
        let w = nm.whitening();
        let wsw = matmul(&matmul(w, nm.covariance()), &adjoint(w));
        let eye = NoiseModel::identity(4).unwrap().covariance().clone();
        let dev: f64 = (&wsw - &eye).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(dev < 1e-12, "WΣWᴴ deviates from identity by {dev}");
        // and WᴴW = Σ⁻¹, checked as Σ WᴴW = I
        let swhw = matmul(nm.covariance(), &matmul(&adjoint(w), w));
        let dev: f64 = (&swhw - &eye).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(dev < 1e-12);
    }

    #[test]
    fn diagonal_covariance_rescales_channels() {
        let cov = Array2::from_shape_fn((2, 2), |(i, j)| {
            C64::new(
                match (i, j) {
                    (0, 0) => 4.0,
                    (1, 1) => 1.0,
                    _ => 0.0,
                },
                0.0,
            )
        });
        let nm = NoiseModel::new(cov).unwrap();
        let s = random_kspace(4, 4, 2, 7);
        let w = nm.prewhiten(&s).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((w.data()[[i, j, 0]] - 0.5 * s.data()[[i, j, 0]]).norm() < 1e-14);
                assert!((w.data()[[i, j, 1]] - s.data()[[i, j, 1]]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn color_then_whiten_round_trips() {
        let nm = NoiseModel::exponential(3, 0.5).unwrap();
        let s = random_kspace(6, 6, 3, 8);
        let back = nm.prewhiten(&nm.color(&s).unwrap()).unwrap();
        assert!(rel_max_deviation(s.data(), back.data()) < 1e-12);
    }

    #[test]
    fn colored_samples_reproduce_covariance() {
        let c = 3;
        let nm = NoiseModel::exponential(c, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut emp = Array2::<C64>::zeros((c, c));
        for _ in 0..n {
            let x: Vec<C64> = (0..c)
                .map(|_| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    // unit total variance split across real and imaginary parts
                    C64::new(re, im) / 2f64.sqrt()
                })
                .collect();
            let l = nm.coloring();
            let y: Vec<C64> = (0..c)
                .map(|i| (0..c).map(|j| l[[i, j]] * x[j]).sum())
                .collect();
            for i in 0..c {
                for j in 0..c {
                    emp[[i, j]] += y[i] * y[j].conj();
                }
            }
        }
        emp.mapv_inplace(|z| z / n as f64);
        for i in 0..c {
            for j in 0..c {
                let want = nm.covariance()[[i, j]];
                assert!(
                    (emp[[i, j]] - want).norm() < 0.03,
                    "empirical covariance [{i},{j}] = {} vs {}",
                    emp[[i, j]],
                    want
                );
            }
        }
    }

    #[test]
    fn non_hermitian_or_singular_rejected() {
        let bad = Array2::from_shape_fn((2, 2), |(i, j)| C64::new((i + 2 * j) as f64, 0.0));
        assert!(NoiseModel::new(bad).is_err());
        let singular = Array2::from_elem((2, 2), C64::new(1.0, 0.0));
        assert!(matches!(
            NoiseModel::new(singular),
            Err(Error::SingularCovariance)
        ));
    }
}
