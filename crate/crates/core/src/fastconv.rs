//! Planar-split complex convolution kernels.
//!
//! Complex feature maps are held as separate real/imaginary `[nvox, channels]`
//! matrices so each kernel tap becomes four real GEMMs. Voxel index is
//! `v = x * ny + y`, matching the C-order flattening of `[nx, ny, c]` arrays.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4};

use crate::tensor::C64;

#[derive(Clone, Debug)]
pub(crate) struct Planar {
    pub re: Array2<f64>,
    pub im: Array2<f64>,
}

impl Planar {
    pub fn zeros(nvox: usize, channels: usize) -> Self {
        Planar {
            re: Array2::zeros((nvox, channels)),
            im: Array2::zeros((nvox, channels)),
        }
    }

    pub fn from_complex(data: &Array3<C64>) -> Self {
        let (nx, ny, nc) = data.dim();
        let nvox = nx * ny;
        let mut re = Array2::zeros((nvox, nc));
        let mut im = Array2::zeros((nvox, nc));
        for x in 0..nx {
            for y in 0..ny {
                let v = x * ny + y;
                for c in 0..nc {
                    let z = data[[x, y, c]];
                    re[[v, c]] = z.re;
                    im[[v, c]] = z.im;
                }
            }
        }
        Planar { re, im }
    }

    pub fn to_complex(&self, nx: usize, ny: usize) -> Array3<C64> {
        let nc = self.re.dim().1;
        let mut out = Array3::zeros((nx, ny, nc));
        for x in 0..nx {
            for y in 0..ny {
                let v = x * ny + y;
                for c in 0..nc {
                    out[[x, y, c]] = C64::new(self.re[[v, c]], self.im[[v, c]]);
                }
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.re.dim().1
    }
}

/// One kernel tap as a real/imaginary `[cin, cout]` matrix pair.
#[derive(Clone, Debug)]
pub(crate) struct SplitTap {
    pub off_x: i64,
    pub off_y: i64,
    pub w_re: Array2<f64>,
    pub w_im: Array2<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct SplitKernel {
    pub taps: Vec<SplitTap>,
    pub cin: usize,
    pub cout: usize,
}

impl SplitKernel {
    /// `taps` laid out `[nkx, nky, cin, cout]` with explicit tap offsets.
    pub fn from_taps(taps: &Array4<C64>, off_x: &[i64], off_y: &[i64]) -> Self {
        let (nkx, nky, cin, cout) = taps.dim();
        let mut out = Vec::with_capacity(nkx * nky);
        for i in 0..nkx {
            for j in 0..nky {
                let mut w_re = Array2::zeros((cin, cout));
                let mut w_im = Array2::zeros((cin, cout));
                for a in 0..cin {
                    for b in 0..cout {
                        let z = taps[[i, j, a, b]];
                        w_re[[a, b]] = z.re;
                        w_im[[a, b]] = z.im;
                    }
                }
                out.push(SplitTap {
                    off_x: off_x[i],
                    off_y: off_y[j],
                    w_re,
                    w_im,
                });
            }
        }
        SplitKernel {
            taps: out,
            cin,
            cout,
        }
    }
}

#[inline]
fn wrap(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

/// Enumerate output voxels: either the full grid or only the given ky rows.
pub(crate) fn select_voxels(nx: usize, ny: usize, rows: Option<&[usize]>) -> Vec<usize> {
    match rows {
        None => (0..nx * ny).collect(),
        Some(rows) => {
            let mut v = Vec::with_capacity(nx * rows.len());
            for x in 0..nx {
                for &y in rows {
                    v.push(x * ny + y);
                }
            }
            v
        }
    }
}

fn gather(src: &Planar, indices: &[usize]) -> Planar {
    let nc = src.channels();
    let mut re = Array2::zeros((indices.len(), nc));
    let mut im = Array2::zeros((indices.len(), nc));
    for (row, &v) in indices.iter().enumerate() {
        re.row_mut(row).assign(&src.re.row(v));
        im.row_mut(row).assign(&src.im.row(v));
    }
    Planar { re, im }
}

/// Complex GEMM accumulate: `out += a * w` using four real GEMMs.
fn cgemm_acc(out: &mut Planar, a: &Planar, w_re: &Array2<f64>, w_im: &Array2<f64>) {
    general_mat_mul(1.0, &a.re, w_re, 1.0, &mut out.re);
    general_mat_mul(-1.0, &a.im, w_im, 1.0, &mut out.re);
    general_mat_mul(1.0, &a.re, w_im, 1.0, &mut out.im);
    general_mat_mul(1.0, &a.im, w_re, 1.0, &mut out.im);
}

/// Circular convolution `out[v] = sum_taps w[tap] * s[v - off]`, evaluated at
/// the selected output voxels only; all other rows of the result are zero.
pub(crate) fn conv_forward(
    s: &Planar,
    nx: usize,
    ny: usize,
    kernel: &SplitKernel,
    rows: Option<&[usize]>,
) -> Planar {
    let sel = select_voxels(nx, ny, rows);
    let mut acc = Planar::zeros(sel.len(), kernel.cout);
    let mut indices = vec![0usize; sel.len()];
    for tap in &kernel.taps {
        for (row, &v) in sel.iter().enumerate() {
            let x = (v / ny) as i64;
            let y = (v % ny) as i64;
            indices[row] = wrap(x - tap.off_x, nx) * ny + wrap(y - tap.off_y, ny);
        }
        let g = gather(s, &indices);
        cgemm_acc(&mut acc, &g, &tap.w_re, &tap.w_im);
    }
    // scatter into a full-size map
    let mut out = Planar::zeros(nx * ny, kernel.cout);
    for (row, &v) in sel.iter().enumerate() {
        out.re.row_mut(v).assign(&acc.re.row(row));
        out.im.row_mut(v).assign(&acc.im.row(row));
    }
    out
}

/// Gradient of the convolution output w.r.t. its input: given the upstream
/// pair-gradient `g` (nonzero on `rows` of the *output*), accumulates
/// `grad_in[u] += sum_taps g[u + off] * conj(w[tap])`.
pub(crate) fn conv_input_grad(
    g: &Planar,
    nx: usize,
    ny: usize,
    kernel: &SplitKernel,
    out_rows: Option<&[usize]>,
) -> Planar {
    let sel = select_voxels(nx, ny, out_rows);
    let g_sel = gather(g, &sel);
    let mut grad = Planar::zeros(nx * ny, kernel.cin);
    let mut buf = Planar::zeros(sel.len(), kernel.cin);
    for tap in &kernel.taps {
        buf.re.fill(0.0);
        buf.im.fill(0.0);
        // g * conj(w)^T: (g_re + i g_im)(w_re - i w_im)^T
        let wt_re = tap.w_re.t().to_owned();
        let wt_im = tap.w_im.t().to_owned();
        general_mat_mul(1.0, &g_sel.re, &wt_re, 1.0, &mut buf.re);
        general_mat_mul(1.0, &g_sel.im, &wt_im, 1.0, &mut buf.re);
        general_mat_mul(1.0, &g_sel.im, &wt_re, 1.0, &mut buf.im);
        general_mat_mul(-1.0, &g_sel.re, &wt_im, 1.0, &mut buf.im);
        for (row, &v) in sel.iter().enumerate() {
            let x = (v / ny) as i64;
            let y = (v % ny) as i64;
            let u = wrap(x - tap.off_x, nx) * ny + wrap(y - tap.off_y, ny);
            for c in 0..kernel.cin {
                grad.re[[u, c]] += buf.re[[row, c]];
                grad.im[[u, c]] += buf.im[[row, c]];
            }
        }
    }
    grad
}

/// Gradient of the loss w.r.t. the kernel taps:
/// `grad_w[tap][ci, co] = sum_v conj(s[v - off, ci]) * g[v, co]`.
pub(crate) fn conv_kernel_grad(
    s: &Planar,
    g: &Planar,
    nx: usize,
    ny: usize,
    kernel: &SplitKernel,
    out_rows: Option<&[usize]>,
) -> Vec<(Array2<f64>, Array2<f64>)> {
    let sel = select_voxels(nx, ny, out_rows);
    let g_sel = gather(g, &sel);
    let mut grads = Vec::with_capacity(kernel.taps.len());
    let mut indices = vec![0usize; sel.len()];
    for tap in &kernel.taps {
        for (row, &v) in sel.iter().enumerate() {
            let x = (v / ny) as i64;
            let y = (v % ny) as i64;
            indices[row] = wrap(x - tap.off_x, nx) * ny + wrap(y - tap.off_y, ny);
        }
        let src = gather(s, &indices);
        // conj(src)^T * g
        let mut gw_re = Array2::zeros((kernel.cin, kernel.cout));
        let mut gw_im = Array2::zeros((kernel.cin, kernel.cout));
        let st_re = src.re.t().to_owned();
        let st_im = src.im.t().to_owned();
        general_mat_mul(1.0, &st_re, &g_sel.re, 1.0, &mut gw_re);
        general_mat_mul(1.0, &st_im, &g_sel.im, 1.0, &mut gw_re);
        general_mat_mul(1.0, &st_re, &g_sel.im, 1.0, &mut gw_im);
        general_mat_mul(-1.0, &st_im, &g_sel.re, 1.0, &mut gw_im);
        grads.push((gw_re, gw_im));
    }
    grads
}
