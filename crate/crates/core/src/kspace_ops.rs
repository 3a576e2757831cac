//! Domain-transfer operators: elementwise k-space masks as image-space
//! convolutions, comb line-selection in both domains, and the central crop
//! used for low-resolution noise analysis.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::tensor::{fft2_raw, idft2_array, C64, ImageTensor, KSpaceTensor};

/// Image-domain convolution operand of an elementwise k-space mask.
///
/// For every `s`: `idft2(s ⊙ a) = idft2(s) ⊛ Â`, where `⊛` is full-grid
/// circular convolution ([`conv_full`]); the unitary scale factor is absorbed.
pub fn mask_to_image_kernel(a: &KSpaceTensor) -> Array3<C64> {
    let n = (a.nx() * a.ny()) as f64;
    idft2_array(a.data()).mapv(|z| z / n.sqrt())
}

/// Full-grid circular convolution per channel, `out[l] = sum_u x[u] h[l-u]`,
/// evaluated through the FFT. `x` and `h` share shape `[nx, ny, c]`.
pub fn conv_full(x: &Array3<C64>, h: &Array3<C64>) -> Array3<C64> {
    assert_eq!(x.dim(), h.dim(), "conv_full shape mismatch");
    let (nx, ny, _) = x.dim();
    let n = (nx * ny) as f64;
    let mut spec_x = fft2_raw(x, false);
    let spec_h = fft2_raw(h, false);
    spec_x.zip_mut_with(&spec_h, |a, &b| *a *= b);
    fft2_raw(&spec_x, true).mapv(|z| z / n)
}

/// Direct-sum reference implementation of [`conv_full`] for small grids.
pub fn conv_full_naive(x: &Array3<C64>, h: &Array3<C64>) -> Array3<C64> {
    assert_eq!(x.dim(), h.dim(), "conv_full shape mismatch");
    let (nx, ny, nc) = x.dim();
    let mut out = Array3::zeros((nx, ny, nc));
    for c in 0..nc {
        for lx in 0..nx {
            for ly in 0..ny {
                let mut acc = C64::new(0.0, 0.0);
                for ux in 0..nx {
                    for uy in 0..ny {
                        let hx = (lx + nx - ux) % nx;
                        let hy = (ly + ny - uy) % ny;
                        acc += x[[ux, uy, c]] * h[[hx, hy, c]];
                    }
                }
                out[[lx, ly, c]] = acc;
            }
        }
    }
    out
}

fn check_comb(ny: usize, r: usize, offset: usize) -> Result<()> {
    if r == 0 || ny % r != 0 {
        return Err(Error::CombMismatch { r, ny });
    }
    if offset >= r {
        return Err(Error::InvalidArgument(format!(
            "comb offset {offset} must be < acceleration {r}"
        )));
    }
    Ok(())
}

/// k-space comb: zero every line whose ky index is not `offset (mod r)`.
pub fn comb_select(s: &KSpaceTensor, r: usize, offset: usize) -> Result<KSpaceTensor> {
    check_comb(s.ny(), r, offset)?;
    let mut out = s.data().clone();
    for y in 0..s.ny() {
        if y % r != offset {
            out.slice_mut(ndarray::s![.., y, ..]).fill(C64::new(0.0, 0.0));
        }
    }
    KSpaceTensor::new(out)
}

/// Image-domain comb profile: the 1D kernel whose circular convolution along
/// y equals multiplying k-space by the `ky ≡ offset (mod r)` indicator.
/// Only `r` entries are nonzero (an `r`-peak aliasing comb with phase ramps).
pub fn comb_image_profile(ny: usize, r: usize, offset: usize) -> Result<Vec<C64>> {
    check_comb(ny, r, offset)?;
    // specialize mask_to_image_kernel to a y-only mask: the profile is the
    // scaled 1D inverse DFT of the unshifted indicator
    let m = ny / 2;
    let mut profile = vec![C64::new(0.0, 0.0); ny];
    for v in 0..ny {
        let mut acc = C64::new(0.0, 0.0);
        for k in 0..ny {
            if (k + m) % r == offset % r {
                let phase = 2.0 * std::f64::consts::PI * (k as f64) * (v as f64) / ny as f64;
                acc += C64::new(0.0, phase).exp();
            }
        }
        profile[v] = acc / ny as f64;
    }
    // exact zeros away from the aliasing peaks
    for (v, z) in profile.iter_mut().enumerate() {
        if v % (ny / r) != 0 {
            *z = C64::new(0.0, 0.0);
        }
    }
    Ok(profile)
}

/// Image-domain application of the comb operator: circular convolution along
/// y with the `r`-peak profile (a phase-ramped sum of shifted copies).
pub fn comb_apply_image(x: &ImageTensor, r: usize, offset: usize) -> Result<ImageTensor> {
    let profile = comb_image_profile(x.ny(), r, offset)?;
    let (nx, ny, nc) = x.data().dim();
    let step = ny / r;
    let mut out = Array3::zeros((nx, ny, nc));
    for j in 0..r {
        let w = profile[j * step];
        if w.norm() == 0.0 {
            continue;
        }
        for ix in 0..nx {
            for iy in 0..ny {
                let src = (iy + ny - j * step) % ny;
                for c in 0..nc {
                    out[[ix, iy, c]] += w * x.data()[[ix, src, c]];
                }
            }
        }
    }
    ImageTensor::new(out)
}

/// Central crop of k-space (low-resolution analysis grid). The centered
/// storage layout makes this a literal center block extraction.
pub fn crop_center(s: &KSpaceTensor, grid: (usize, usize)) -> Result<KSpaceTensor> {
    let (mx, my) = grid;
    if mx > s.nx() || my > s.ny() || mx < 2 || my < 2 {
        return Err(Error::InvalidArgument(format!(
            "crop {mx}x{my} incompatible with grid {}x{}",
            s.nx(),
            s.ny()
        )));
    }
    let (x0, y0) = ((s.nx() - mx) / 2, (s.ny() - my) / 2);
    let out = s
        .data()
        .slice(ndarray::s![x0..x0 + mx, y0..y0 + my, ..])
        .to_owned();
    KSpaceTensor::new(out)
}

/// Root-sum-of-squares magnitude across channels.
pub fn rss(x: &Array3<C64>) -> Array2<f64> {
    let (nx, ny, nc) = x.dim();
    Array2::from_shape_fn((nx, ny), |(i, j)| {
        (0..nc).map(|c| x[[i, j, c]].norm_sqr()).sum::<f64>().sqrt()
    })
}
