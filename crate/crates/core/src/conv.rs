//! Complex convolution kernels with explicit tap offsets.
//!
//! A kernel stores its taps as `[nkx, nky, cin, cout]` together with the
//! integer grid offsets of each tap row/column. Dilated and offset-shifted
//! kernels (as used for per-offset interpolation of missing comb lines) are
//! expressed through the offset lists; the convolution itself is always
//! circular: `out[l] = sum_taps w[tap] * s[l - off]`.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastconv::{self, SplitKernel};
use crate::tensor::{fft2_raw, C64, KSpaceTensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvKernel {
    taps: Array4<C64>,
    off_x: Vec<i64>,
    off_y: Vec<i64>,
}

impl ConvKernel {
    pub fn new(taps: Array4<C64>, off_x: Vec<i64>, off_y: Vec<i64>) -> Result<Self> {
        let (nkx, nky, _, _) = taps.dim();
        if off_x.len() != nkx || off_y.len() != nky {
            return Err(Error::ShapeMismatch(format!(
                "kernel has {nkx}x{nky} taps but {}x{} offsets",
                off_x.len(),
                off_y.len()
            )));
        }
        if taps.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("kernel taps"));
        }
        Ok(ConvKernel { taps, off_x, off_y })
    }

    /// Centered kernel: tap `(i, j)` sits at offset
    /// `(i*dx - span_x/2, j*dy - span_y/2)`. The dilation-expanded extent
    /// must be odd so the anchor is a grid point.
    pub fn centered(taps: Array4<C64>, dilation: (usize, usize)) -> Result<Self> {
        let (nkx, nky, _, _) = taps.dim();
        let (dx, dy) = dilation;
        if dx == 0 || dy == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        let span_x = (nkx - 1) * dx;
        let span_y = (nky - 1) * dy;
        if span_x % 2 != 0 || span_y % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "dilation-expanded extent must be odd (got spans {span_x}+1, {span_y}+1 taps x dilation {dx},{dy})"
            )));
        }
        let off_x = (0..nkx)
            .map(|i| (i * dx) as i64 - (span_x / 2) as i64)
            .collect();
        let off_y = (0..nky)
            .map(|j| (j * dy) as i64 - (span_y / 2) as i64)
            .collect();
        Self::new(taps, off_x, off_y)
    }

    /// Unit delta kernel: identity under convolution.
    pub fn delta(channels: usize) -> Self {
        let mut taps = Array4::zeros((1, 1, channels, channels));
        for c in 0..channels {
            taps[[0, 0, c, c]] = C64::new(1.0, 0.0);
        }
        ConvKernel {
            taps,
            off_x: vec![0],
            off_y: vec![0],
        }
    }

    /// Shift every ky tap offset by a constant (used to anchor per-offset
    /// interpolation kernels on the missing comb lines).
    pub fn shifted_y(mut self, shift: i64) -> Self {
        for o in &mut self.off_y {
            *o += shift;
        }
        self
    }

    pub fn taps(&self) -> &Array4<C64> {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut Array4<C64> {
        &mut self.taps
    }

    pub fn off_x(&self) -> &[i64] {
        &self.off_x
    }

    pub fn off_y(&self) -> &[i64] {
        &self.off_y
    }

    pub fn cin(&self) -> usize {
        self.taps.dim().2
    }

    pub fn cout(&self) -> usize {
        self.taps.dim().3
    }

    pub fn span(&self) -> (usize, usize) {
        let sx = self.off_x.iter().max().unwrap() - self.off_x.iter().min().unwrap();
        let sy = self.off_y.iter().max().unwrap() - self.off_y.iter().min().unwrap();
        (sx as usize + 1, sy as usize + 1)
    }

    pub fn check_fits(&self, nx: usize, ny: usize) -> Result<()> {
        let (sx, sy) = self.span();
        if sx > nx || sy > ny {
            return Err(Error::FootprintTooLarge {
                span_x: sx,
                span_y: sy,
                nx,
                ny,
            });
        }
        Ok(())
    }

    pub(crate) fn split(&self) -> SplitKernel {
        SplitKernel::from_taps(&self.taps, &self.off_x, &self.off_y)
    }

    /// Brute-force composition `self ∘ other` (apply `other` first):
    /// the kernel whose convolution equals convolving by `other`, then `self`.
    pub fn compose(&self, other: &ConvKernel) -> Result<ConvKernel> {
        if self.cin() != other.cout() {
            return Err(Error::ChannelMismatch {
                input: other.cout(),
                expected: self.cin(),
            });
        }
        use std::collections::BTreeMap;
        let mut acc: BTreeMap<(i64, i64), Array3<C64>> = BTreeMap::new();
        for (ia, &oxa) in self.off_x.iter().enumerate() {
            for (ja, &oya) in self.off_y.iter().enumerate() {
                for (ib, &oxb) in other.off_x.iter().enumerate() {
                    for (jb, &oyb) in other.off_y.iter().enumerate() {
                        let entry = acc
                            .entry((oxa + oxb, oya + oyb))
                            .or_insert_with(|| Array3::zeros((other.cin(), self.cout(), 1)));
                        for ci in 0..other.cin() {
                            for cm in 0..other.cout() {
                                for co in 0..self.cout() {
                                    entry[[ci, co, 0]] +=
                                        other.taps[[ib, jb, ci, cm]] * self.taps[[ia, ja, cm, co]];
                                }
                            }
                        }
                    }
                }
            }
        }
        // composed offsets are not necessarily a tensor grid; realize on the
        // bounding grid of distinct x and y offsets
        let xs: Vec<i64> = {
            let mut v: Vec<i64> = acc.keys().map(|k| k.0).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let ys: Vec<i64> = {
            let mut v: Vec<i64> = acc.keys().map(|k| k.1).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut taps = Array4::zeros((xs.len(), ys.len(), other.cin(), self.cout()));
        for ((ox, oy), block) in &acc {
            let i = xs.binary_search(ox).unwrap();
            let j = ys.binary_search(oy).unwrap();
            for ci in 0..other.cin() {
                for co in 0..self.cout() {
                    taps[[i, j, ci, co]] = block[[ci, co, 0]];
                }
            }
        }
        ConvKernel::new(taps, xs, ys)
    }
}

/// Circular complex convolution of a k-space tensor with a kernel.
pub fn circ_conv2(s: &KSpaceTensor, w: &ConvKernel) -> Result<KSpaceTensor> {
    circ_conv2_rows(s, w, None)
}

/// Same, evaluated only on the given ky rows (all other rows zero).
pub fn circ_conv2_rows(
    s: &KSpaceTensor,
    w: &ConvKernel,
    rows: Option<&[usize]>,
) -> Result<KSpaceTensor> {
    if s.coils() != w.cin() {
        return Err(Error::ChannelMismatch {
            input: s.coils(),
            expected: w.cin(),
        });
    }
    w.check_fits(s.nx(), s.ny())?;
    let planar = fastconv::Planar::from_complex(s.data());
    let out = fastconv::conv_forward(&planar, s.nx(), s.ny(), &w.split(), rows);
    KSpaceTensor::new(out.to_complex(s.nx(), s.ny()))
}

/// Image-domain multiplier of a k-space convolution kernel.
///
/// Zero-pads the taps onto the full grid and inverse-transforms so that for
/// every `s`: `idft2(circ_conv2(s, w)) = idft2(s) ⊙ multiplier`, with the
/// unitary-DFT scale factor absorbed. Returned as `[nx, ny, cin, cout]`.
pub fn kernel_to_multiplier(w: &ConvKernel, grid: (usize, usize)) -> Result<Array4<C64>> {
    let (nx, ny) = grid;
    w.check_fits(nx, ny)?;
    let (nkx, nky, cin, cout) = w.taps().dim();
    let mut out = Array4::zeros((nx, ny, cin, cout));
    // one padded plane per (cin, cout) pair; the raw (unnormalized) inverse
    // FFT of the unshifted padded taps is exactly the absorbed-scale
    // multiplier: sqrt(N) * IDFT_u = ifft_raw.
    let mut padded = Array3::zeros((nx, ny, 1));
    for a in 0..cin {
        for b in 0..cout {
            padded.fill(C64::new(0.0, 0.0));
            for i in 0..nkx {
                for j in 0..nky {
                    let x = w.off_x[i].rem_euclid(nx as i64) as usize;
                    let y = w.off_y[j].rem_euclid(ny as i64) as usize;
                    padded[[x, y, 0]] += w.taps[[i, j, a, b]];
                }
            }
            let plane = fft2_raw(&padded, true);
            for x in 0..nx {
                for y in 0..ny {
                    out[[x, y, a, b]] = plane[[x, y, 0]];
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise multiplier application: `out[v, co] = sum_ci s[v, ci] * m[v, ci, co]`.
pub fn apply_multiplier(s: &Array3<C64>, m: &Array4<C64>) -> Array3<C64> {
    let (nx, ny, cin) = s.dim();
    let (mx, my, mcin, cout) = m.dim();
    assert_eq!((nx, ny, cin), (mx, my, mcin), "multiplier shape mismatch");
    let mut out = Array3::zeros((nx, ny, cout));
    for x in 0..nx {
        for y in 0..ny {
            for co in 0..cout {
                let mut acc = C64::new(0.0, 0.0);
                for ci in 0..cin {
                    acc += s[[x, y, ci]] * m[[x, y, ci, co]];
                }
                out[[x, y, co]] = acc;
            }
        }
    }
    out
}
