//! Synthetic multi-coil acquisition: an analytic ellipse phantom with a
//! smooth phase map, ring-of-lobes coil sensitivities, correlated complex
//! Gaussian noise, and retrospective comb undersampling with a centered
//! auto-calibration (ACS) block.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace_ops::rss;
use crate::noise_model::NoiseModel;
use crate::tensor::{dft2, C64, ImageTensor, KSpaceTensor};

/// Which ky lines are acquired: an `R`-comb anchored at ky = 0 plus a
/// contiguous centered ACS block.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SamplingPattern {
    pub r: usize,
    /// `(start_ky, n_lines)` of the fully sampled central block.
    pub acs: (usize, usize),
    ny: usize,
}

impl SamplingPattern {
    pub fn new(ny: usize, r: usize, n_acs: usize) -> Result<Self> {
        if r == 0 || ny % r != 0 {
            return Err(Error::CombMismatch { r, ny });
        }
        if n_acs == 0 || n_acs > ny {
            return Err(Error::InvalidArgument(format!(
                "ACS block of {n_acs} lines does not fit {ny} ky lines"
            )));
        }
        Ok(Self {
            r,
            acs: ((ny - n_acs) / 2, n_acs),
            ny,
        })
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn is_acs(&self, ky: usize) -> bool {
        ky >= self.acs.0 && ky < self.acs.0 + self.acs.1
    }

    pub fn is_comb(&self, ky: usize) -> bool {
        ky % self.r == 0
    }

    pub fn is_acquired(&self, ky: usize) -> bool {
        self.is_comb(ky) || self.is_acs(ky)
    }

    /// Boolean acquisition mask `[nx, ny]` (constant along x).
    pub fn mask(&self, nx: usize) -> Array2<bool> {
        Array2::from_shape_fn((nx, self.ny), |(_, ky)| self.is_acquired(ky))
    }
}

/// One ellipse of the piecewise-constant object, in normalized coordinates
/// (FOV spans [-1, 1] on both axes).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    /// Added to the intensity inside the ellipse (may be negative).
    pub intensity: f64,
}

/// Full description of a reproducible synthetic acquisition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: (usize, usize),
    pub coils: usize,
    pub ellipses: Vec<Ellipse>,
    /// Coefficients of the smooth phase map
    /// `φ(x, y) = c0 + c1·x + c2·y + c3·x·y + c4·x² + c5·y²`.
    pub phase_coeffs: [f64; 6],
    pub r: usize,
    pub n_acs: usize,
    /// Cross-channel correlation decay of the noise covariance.
    pub noise_rho: f64,
    /// Standard deviation of the complex noise per k-space sample/channel.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: (64, 64),
            coils: 8,
            ellipses: vec![
                Ellipse {
                    center: (0.0, 0.0),
                    semi_axes: (0.72, 0.9),
                    angle: 0.0,
                    intensity: 1.0,
                },
                Ellipse {
                    center: (0.0, 0.05),
                    semi_axes: (0.62, 0.78),
                    angle: 0.0,
                    intensity: -0.3,
                },
                Ellipse {
                    center: (0.22, 0.2),
                    semi_axes: (0.2, 0.28),
                    angle: 0.5,
                    intensity: 0.25,
                },
                Ellipse {
                    center: (-0.22, 0.15),
                    semi_axes: (0.24, 0.18),
                    angle: -0.4,
                    intensity: -0.2,
                },
                Ellipse {
                    center: (0.0, -0.35),
                    semi_axes: (0.16, 0.12),
                    angle: 0.0,
                    intensity: 0.35,
                },
            ],
            phase_coeffs: [0.1, 0.6, -0.4, 0.3, -0.5, 0.2],
            r: 4,
            n_acs: 24,
            noise_rho: 0.2,
            sigma: 0.02,
            seed: 0,
        }
    }
}

/// A generated acquisition with its ground truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Noisy, fully sampled k-space.
    pub full_kspace: KSpaceTensor,
    /// Noise-free sensitivity-weighted coil images.
    pub truth_image: ImageTensor,
    pub sensitivities: ImageTensor,
    pub pattern: SamplingPattern,
    pub noise_model: NoiseModel,
    pub sigma: f64,
    pub seed: u64,
}

fn object_value(spec: &PhantomSpec, x: f64, y: f64) -> C64 {
    let mut mag = 0.0;
    for e in &spec.ellipses {
        let (dx, dy) = (x - e.center.0, y - e.center.1);
        let (c, s) = (e.angle.cos(), e.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        if (u / e.semi_axes.0).powi(2) + (v / e.semi_axes.1).powi(2) <= 1.0 {
            mag += e.intensity;
        }
    }
    if mag == 0.0 {
        return C64::new(0.0, 0.0);
    }
    let p = spec.phase_coeffs;
    let phase = p[0] + p[1] * x + p[2] * y + p[3] * x * y + p[4] * x * x + p[5] * y * y;
    C64::from_polar(mag, phase)
}

/// Gaussian-lobe sensitivities on a ring around the field of view, with a
/// smooth per-coil phase, normalized so the root-sum-of-squares is exactly 1
/// at every voxel.
fn make_sensitivities(grid: (usize, usize), coils: usize) -> Result<ImageTensor> {
    let (nx, ny) = grid;
    let mut s = Array3::<C64>::zeros((nx, ny, coils));
    let radius = 1.4;
    let width = 1.1;
    for c in 0..coils {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / coils as f64;
        let (cx, cy) = (radius * theta.cos(), radius * theta.sin());
        for i in 0..nx {
            for j in 0..ny {
                let x = 2.0 * (i as f64 + 0.5) / nx as f64 - 1.0;
                let y = 2.0 * (j as f64 + 0.5) / ny as f64 - 1.0;
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let phase = 0.5 * (x * cy - y * cx) + theta;
                s[[i, j, c]] = C64::from_polar(mag, phase);
            }
        }
    }
    let norm = rss(&s);
    for i in 0..nx {
        for j in 0..ny {
            let n = norm[[i, j]];
            if n <= 0.0 {
                return Err(Error::Degenerate(
                    "coil sensitivities vanish at a voxel".into(),
                ));
            }
            for c in 0..coils {
                s[[i, j, c]] /= n;
            }
        }
    }
    ImageTensor::new(s)
}

/// Draw dense i.i.d. circularly-symmetric unit-variance complex noise
/// (`Var(re) = Var(im) = 1/2` each) for every k-space sample and channel.
pub fn unit_noise(grid: (usize, usize), coils: usize, rng: &mut ChaCha8Rng) -> KSpaceTensor {
    let (nx, ny) = grid;
    let scale = 0.5f64.sqrt();
    let data = Array3::from_shape_fn((nx, ny, coils), |_| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re * scale, im * scale)
    });
    KSpaceTensor::new(data).expect("finite noise draw")
}

/// Generate a dataset from a phantom description. Deterministic per seed.
pub fn generate(spec: &PhantomSpec) -> Result<Dataset> {
    let (nx, ny) = spec.grid;
    if spec.coils < 2 {
        return Err(Error::InvalidArgument(
            "at least two coils required".into(),
        ));
    }
    if spec.sigma < 0.0 {
        return Err(Error::InvalidArgument("sigma must be non-negative".into()));
    }
    let pattern = SamplingPattern::new(ny, spec.r, spec.n_acs)?;
    let sensitivities = make_sensitivities(spec.grid, spec.coils)?;
    let mut truth = Array3::<C64>::zeros((nx, ny, spec.coils));
    for i in 0..nx {
        for j in 0..ny {
            let x = 2.0 * (i as f64 + 0.5) / nx as f64 - 1.0;
            let y = 2.0 * (j as f64 + 0.5) / ny as f64 - 1.0;
            let obj = object_value(spec, x, y);
            for c in 0..spec.coils {
                truth[[i, j, c]] = obj * sensitivities.data()[[i, j, c]];
            }
        }
    }
    let truth_image = ImageTensor::new(truth)?;
    let clean = dft2(&truth_image);
    let noise_model = NoiseModel::exponential(spec.coils, spec.noise_rho)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut full = clean.data().clone();
    if spec.sigma > 0.0 {
        let white = unit_noise(spec.grid, spec.coils, &mut rng);
        let colored = noise_model.color(&white)?;
        full.zip_mut_with(colored.data(), |a, &n| *a += spec.sigma * n);
    }
    Ok(Dataset {
        full_kspace: KSpaceTensor::new(full)?,
        truth_image,
        sensitivities,
        pattern,
        noise_model,
        sigma: spec.sigma,
        seed: spec.seed,
    })
}

/// Zero-filled undersampled k-space plus the contiguous ACS block.
pub fn undersample(d: &Dataset) -> Result<(KSpaceTensor, KSpaceTensor)> {
    let s = d.full_kspace.data();
    let (nx, ny, nc) = s.dim();
    let mut zero_filled = Array3::zeros((nx, ny, nc));
    for ky in 0..ny {
        if d.pattern.is_acquired(ky) {
            zero_filled
                .slice_mut(ndarray::s![.., ky, ..])
                .assign(&s.slice(ndarray::s![.., ky, ..]));
        }
    }
    let (a0, na) = d.pattern.acs;
    let acs = s.slice(ndarray::s![.., a0..a0 + na, ..]).to_owned();
    Ok((KSpaceTensor::new(zero_filled)?, KSpaceTensor::new(acs)?))
}

/// Comb-only zero-filled input (ACS-only lines dropped): the inference input
/// of the interpolation networks.
pub fn comb_input(d: &Dataset) -> Result<KSpaceTensor> {
    crate::kspace_ops::comb_select(&d.full_kspace, d.pattern.r, 0)
}

/// Voxels where the root-sum-of-squares of the ground truth reaches
/// `threshold` × its maximum.
pub fn roi_mask(d: &Dataset, threshold: f64) -> Result<Array2<bool>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ROI threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let r = rss(d.truth_image.data());
    let max = r.iter().cloned().fold(0.0, f64::max);
    Ok(r.mapv(|v| v >= threshold * max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_max_deviation;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            grid: (16, 16),
            coils: 4,
            n_acs: 8,
            r: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn noise_free_kspace_matches_truth_transform() {
        let mut spec = small_spec();
        spec.sigma = 0.0;
        let d = generate(&spec).unwrap();
        let k = dft2(&d.truth_image);
        assert!(rel_max_deviation(d.full_kspace.data(), k.data()) < 1e-12);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.full_kspace.data().iter().zip(b.full_kspace.data().iter()) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
        let mut other = spec;
        other.seed = 6;
        let c = generate(&other).unwrap();
        assert!(rel_max_deviation(a.full_kspace.data(), c.full_kspace.data()) > 1e-6);
    }

    #[test]
    fn sensitivities_have_unit_rss() {
        let d = generate(&small_spec()).unwrap();
        let r = rss(d.sensitivities.data());
        for v in r.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_noise_covariance_matches_model() {
        let spec = PhantomSpec {
            grid: (64, 64),
            coils: 4,
            sigma: 1.0,
            n_acs: 16,
            seed: 17,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        let clean = dft2(&d.truth_image);
        let noise = d.full_kspace.data() - clean.data();
        let n = (spec.grid.0 * spec.grid.1) as f64;
        for i in 0..spec.coils {
            for j in 0..spec.coils {
                let emp: C64 = noise
                    .slice(ndarray::s![.., .., i])
                    .iter()
                    .zip(noise.slice(ndarray::s![.., .., j]).iter())
                    .map(|(a, b)| a * b.conj())
                    .sum::<C64>()
                    / n;
                let want = d.noise_model.covariance()[[i, j]];
                assert!(
                    (emp - want).norm() < 0.03,
                    "entry [{i},{j}]: {emp} vs {want}"
                );
            }
        }
    }

    #[test]
    fn undersampling_keeps_comb_and_acs_only() {
        let d = generate(&small_spec()).unwrap();
        let (s0, acs) = undersample(&d).unwrap();
        for ky in 0..16 {
            let acquired = d.pattern.is_acquired(ky);
            let line_energy: f64 = s0
                .data()
                .slice(ndarray::s![.., ky, ..])
                .iter()
                .map(|z| z.norm_sqr())
                .sum();
            if acquired {
                assert!(line_energy > 0.0);
            } else {
                assert_eq!(line_energy, 0.0);
            }
        }
        assert_eq!(acs.ny(), 8);
        assert!(s0.energy() <= d.full_kspace.energy() + 1e-12);
    }

    #[test]
    fn r1_pattern_keeps_everything() {
        let mut spec = small_spec();
        spec.r = 1;
        let d = generate(&spec).unwrap();
        let (s0, _) = undersample(&d).unwrap();
        assert!(rel_max_deviation(d.full_kspace.data(), s0.data()) < 1e-15);
    }

    #[test]
    fn mask_partition_covers_grid_once() {
        let p = SamplingPattern::new(16, 4, 6).unwrap();
        for ky in 0..16 {
            let comb_only = p.is_comb(ky) && !p.is_acs(ky);
            let acs = p.is_acs(ky);
            let zero = !p.is_acquired(ky);
            assert_eq!(comb_only as u8 + acs as u8 + zero as u8, 1);
        }
    }

    #[test]
    fn roi_mask_behaves_at_extremes() {
        let d = generate(&small_spec()).unwrap();
        let tiny = roi_mask(&d, 1e-9).unwrap();
        let r = rss(d.truth_image.data());
        for (m, v) in tiny.iter().zip(r.iter()) {
            assert_eq!(*m, *v > 0.0);
        }
        let top = roi_mask(&d, 1.0).unwrap();
        assert!(top.iter().filter(|m| **m).count() >= 1);
        let default = roi_mask(&d, 0.1).unwrap();
        let frac = default.iter().filter(|m| **m).count() as f64 / 256.0;
        assert!(frac > 0.2 && frac < 0.8, "ROI fraction {frac}");
    }
}
