//! Jacobians of the frozen image-space reconstruction.
//!
//! With activation masks frozen, every layer is an elementwise multiplier
//! followed by a full-grid circular convolution, so its Jacobian is a
//! channel-coupled circulant. The chain is evaluated backwards, one batch of
//! output voxels at a time, so that the enormous intermediate products the
//! naive nested sum would materialize never exist; peak memory is capped by a
//! configurable budget.

use ndarray::{Array2, Array3, Array4};

use crate::conv::apply_multiplier;
use crate::error::{Error, Result};
use crate::image_form::ImageSpaceParams;
use crate::kspace_ops::conv_full;
use crate::tensor::{C64, ImageTensor};

/// Default cap on peak resident tensor bytes (4 GiB).
pub const DEFAULT_BUDGET: usize = 4 << 30;

/// Dense Jacobian of one hidden layer, indexed
/// `[out_voxel, out_channel, in_voxel, in_channel]` with voxel index
/// `v = x·ny + y`.
#[derive(Clone, Debug)]
pub struct JacobianBlock {
    pub entries: Array4<C64>,
    pub layer: usize,
    pub grid: (usize, usize),
}

/// Evaluation controls for the chained Jacobian.
#[derive(Clone, Copy, Debug)]
pub struct ChainConfig {
    /// Peak resident tensor bytes allowed.
    pub budget_bytes: usize,
    /// Output rows evaluated per batch; `None` picks the largest batch the
    /// budget allows.
    pub batch_rows: Option<usize>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            budget_bytes: DEFAULT_BUDGET,
            batch_rows: None,
        }
    }
}

const BYTES_PER_ENTRY: usize = std::mem::size_of::<C64>();

/// Jacobian of hidden layer `n`:
/// `J[l,c;m,q] = ŵ_n[m,q,c] · Â_n[(l−m) mod N, c]`.
pub fn layer_jacobian(params: &ImageSpaceParams, n: usize, budget: usize) -> Result<JacobianBlock> {
    let layer = params
        .layers
        .get(n)
        .ok_or_else(|| Error::InvalidArgument(format!("no hidden layer {n}")))?;
    let (nx, ny) = params.grid;
    let nvox = nx * ny;
    let (_, _, cin, cout) = layer.multiplier.dim();
    let bytes = nvox * cout * nvox * cin * BYTES_PER_ENTRY;
    if bytes > budget {
        return Err(Error::BudgetExceeded {
            budget,
            required: bytes,
        });
    }
    let w = &layer.multiplier;
    let a = &layer.image_kernel;
    let entries = Array4::from_shape_fn((nvox, cout, nvox, cin), |(l, c, m, q)| {
        let (lx, ly) = (l / ny, l % ny);
        let (mx, my) = (m / ny, m % ny);
        let dx = (lx + nx - mx) % nx;
        let dy = (ly + ny - my) % ny;
        w[[mx, my, q, c]] * a[[dx, dy, c]]
    });
    Ok(JacobianBlock {
        entries,
        layer: n,
        grid: params.grid,
    })
}

/// Precomputed pieces for backward row evaluation: per hidden layer the
/// index-reversed image kernel (turning the backward correlation into the
/// forward convolution routine) and the channel-transposed multiplier.
struct BackwardPlan {
    rev_kernels: Vec<Array3<C64>>,
    mult_t: Vec<Array4<C64>>,
}

impl BackwardPlan {
    fn new(params: &ImageSpaceParams) -> Self {
        let rev_kernels = params
            .layers
            .iter()
            .map(|l| {
                let (nx, ny, c) = l.image_kernel.dim();
                Array3::from_shape_fn((nx, ny, c), |(x, y, ch)| {
                    l.image_kernel[[(nx - x) % nx, (ny - y) % ny, ch]]
                })
            })
            .collect();
        let mult_t = params
            .layers
            .iter()
            .map(|l| {
                let (nx, ny, ci, co) = l.multiplier.dim();
                Array4::from_shape_fn((nx, ny, co, ci), |(x, y, a, b)| l.multiplier[[x, y, b, a]])
            })
            .collect();
        Self {
            rev_kernels,
            mult_t,
        }
    }
}

fn last_channels(params: &ImageSpaceParams) -> usize {
    params
        .layers
        .last()
        .map(|l| l.multiplier.dim().3)
        .unwrap_or(params.coils)
}

/// One row of the end-to-end Jacobian: the gradient of
/// `Σ_c seed[c] · Ŝ_int[l, c]` with respect to every input voxel/channel,
/// including the acquired-data pass-through term.
fn backward_row(
    params: &ImageSpaceParams,
    plan: &BackwardPlan,
    l: (usize, usize),
    seed: &[C64],
) -> Array3<C64> {
    let (nx, ny) = params.grid;
    let clast = last_channels(params);
    // seed the chain after the per-offset final multipliers (voxel-diagonal)
    let mut g = Array3::zeros((nx, ny, clast));
    if !params.layers.is_empty() || !params.w_int.is_empty() {
        for w in &params.w_int {
            for q in 0..clast {
                let mut acc = C64::new(0.0, 0.0);
                for (c, s) in seed.iter().enumerate() {
                    acc += *s * w[[l.0, l.1, q, c]];
                }
                g[[l.0, l.1, q]] += acc;
            }
        }
    }
    // walk the hidden layers backwards
    for (layer_idx, _) in params.layers.iter().enumerate().rev() {
        let corr = conv_full(&g, &plan.rev_kernels[layer_idx]);
        g = apply_multiplier(&corr, &plan.mult_t[layer_idx]);
    }
    // routing a no-hidden-layer network: g already lives on input channels
    let mut row = if params.layers.is_empty() && !params.w_int.is_empty() {
        g
    } else if params.layers.is_empty() {
        Array3::zeros((nx, ny, params.coils))
    } else {
        g
    };
    for (c, s) in seed.iter().enumerate() {
        row[[l.0, l.1, c]] += *s;
    }
    row
}

/// Dense end-to-end Jacobian `J^int[l, c; m, q]` of the frozen map from the
/// aliased coil images to the unfolded coil images.
pub fn chain_jacobian(params: &ImageSpaceParams, cfg: &ChainConfig) -> Result<Array4<C64>> {
    let (nx, ny) = params.grid;
    let (nvox, c) = (nx * ny, params.coils);
    let out_bytes = nvox * c * nvox * c * BYTES_PER_ENTRY;
    let row_bytes = nvox * (c.max(last_channels(params))) * BYTES_PER_ENTRY * 3;
    if out_bytes + row_bytes > cfg.budget_bytes {
        return Err(Error::BudgetExceeded {
            budget: cfg.budget_bytes,
            required: out_bytes + row_bytes,
        });
    }
    let plan = BackwardPlan::new(params);
    let mut j = Array4::zeros((nvox, c, nvox, c));
    let rows: Vec<(usize, usize)> = (0..nvox * c).map(|i| (i / c, i % c)).collect();
    let batch = cfg.batch_rows.unwrap_or(rows.len()).max(1);
    for chunk in rows.chunks(batch) {
        for &(l, ch) in chunk {
            let mut seed = vec![C64::new(0.0, 0.0); c];
            seed[ch] = C64::new(1.0, 0.0);
            let row = backward_row(params, &plan, (l / ny, l % ny), &seed);
            for m in 0..nvox {
                for q in 0..c {
                    j[[l, ch, m, q]] = row[[m / ny, m % ny, q]];
                }
            }
        }
    }
    Ok(j)
}

/// Rows of the combined Jacobian `J^acc[l; m, q] = Σ_c p[l,c]·J^int[l,c;m,q]`
/// computed directly (one backward pass per output voxel, never touching the
/// full `J^int`).
pub fn combined_rows(
    params: &ImageSpaceParams,
    p: &Array3<C64>,
    cfg: &ChainConfig,
) -> Result<Array3<C64>> {
    let (nx, ny) = params.grid;
    let (nvox, c) = (nx * ny, params.coils);
    if p.dim() != (nx, ny, c) {
        return Err(Error::ShapeMismatch(format!(
            "combine weights {:?} vs grid {:?}×{c}",
            p.dim(),
            params.grid
        )));
    }
    let out_bytes = nvox * nvox * c * BYTES_PER_ENTRY;
    let row_bytes = nvox * (c.max(last_channels(params))) * BYTES_PER_ENTRY * 3;
    if out_bytes + row_bytes > cfg.budget_bytes {
        return Err(Error::BudgetExceeded {
            budget: cfg.budget_bytes,
            required: out_bytes + row_bytes,
        });
    }
    let plan = BackwardPlan::new(params);
    let mut j = Array3::zeros((nvox, nvox, c));
    let batch = cfg.batch_rows.unwrap_or(nvox).max(1);
    let rows: Vec<usize> = (0..nvox).collect();
    for chunk in rows.chunks(batch) {
        for &l in chunk {
            let (lx, ly) = (l / ny, l % ny);
            let seed: Vec<C64> = (0..c).map(|ch| p[[lx, ly, ch]]).collect();
            let row = backward_row(params, &plan, (lx, ly), &seed);
            for m in 0..nvox {
                for q in 0..c {
                    j[[l, m, q]] = row[[m / ny, m % ny, q]];
                }
            }
        }
    }
    Ok(j)
}

/// Contract the output-coil axis of `J^int` with the combine weights.
pub fn apply_combine(j_int: &Array4<C64>, p: &Array3<C64>) -> Result<Array3<C64>> {
    let (nvox, c, nvox_in, cin) = j_int.dim();
    let (px, py, pc) = p.dim();
    if px * py != nvox || pc != c {
        return Err(Error::ShapeMismatch(format!(
            "combine weights {:?} vs Jacobian {:?}",
            p.dim(),
            j_int.dim()
        )));
    }
    let ny = py;
    let mut out = Array3::zeros((nvox, nvox_in, cin));
    for l in 0..nvox {
        let (lx, ly) = (l / ny, l % ny);
        for m in 0..nvox_in {
            for q in 0..cin {
                let mut acc = C64::new(0.0, 0.0);
                for ch in 0..c {
                    acc += p[[lx, ly, ch]] * j_int[[l, ch, m, q]];
                }
                out[[l, m, q]] = acc;
            }
        }
    }
    Ok(out)
}

/// Mask-handling mode of a finite-difference probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdMode {
    /// Differentiate the frozen-mask image-space map (exactly linear).
    Frozen,
    /// Differentiate the full k-space network (masks re-evaluated), a
    /// real-linear operator in general.
    TrueBranch,
}

/// Central-difference Jacobian, reported as a real-linear operator: separate
/// response columns for real and imaginary unit perturbations of every input
/// voxel/channel.
#[derive(Clone, Debug)]
pub struct FdJacobian {
    /// Columns for +h real perturbations, `[out_vox, out_ch, in_vox, in_ch]`.
    pub re_cols: Array4<C64>,
    /// Columns for +h imaginary perturbations.
    pub im_cols: Array4<C64>,
    pub h: f64,
    pub mode: FdMode,
}

/// Probe `map` (aliased coil images → unfolded coil images) with central
/// differences of step `h` along every real and imaginary input direction.
pub fn fd_jacobian<F>(map: F, s0_img: &ImageTensor, h: f64, mode: FdMode) -> Result<FdJacobian>
where
    F: Fn(&ImageTensor) -> Result<ImageTensor>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (nx, ny, c) = s0_img.data().dim();
    let nvox = nx * ny;
    let mut re_cols = Array4::zeros((nvox, c, nvox, c));
    let mut im_cols = Array4::zeros((nvox, c, nvox, c));
    let probe = |m: usize, q: usize, delta: C64| -> Result<Array2<C64>> {
        let (mx, my) = (m / ny, m % ny);
        let mut plus = s0_img.data().clone();
        plus[[mx, my, q]] += delta;
        let mut minus = s0_img.data().clone();
        minus[[mx, my, q]] -= delta;
        let fp = map(&ImageTensor::new(plus)?)?;
        let fm = map(&ImageTensor::new(minus)?)?;
        let scale = 1.0 / (2.0 * h);
        Ok(Array2::from_shape_fn((nvox, c), |(l, ch)| {
            (fp.data()[[l / ny, l % ny, ch]] - fm.data()[[l / ny, l % ny, ch]]) * scale
        }))
    };
    for m in 0..nvox {
        for q in 0..c {
            let col = probe(m, q, C64::new(h, 0.0))?;
            for l in 0..nvox {
                for ch in 0..c {
                    re_cols[[l, ch, m, q]] = col[[l, ch]];
                }
            }
            let col = probe(m, q, C64::new(0.0, h))?;
            for l in 0..nvox {
                for ch in 0..c {
                    im_cols[[l, ch, m, q]] = col[[l, ch]];
                }
            }
        }
    }
    Ok(FdJacobian {
        re_cols,
        im_cols,
        h,
        mode,
    })
}

/// Persist a 4-index Jacobian in the tensor binary format: the trailing two
/// indices are flattened to one axis (`k = in_vox·C_in + in_ch`, documented in
/// the sidecar description).
pub fn save_jacobian(path: &std::path::Path, j: &Array4<C64>) -> Result<()> {
    let (a, b, c, d) = j.dim();
    let flat = Array3::from_shape_fn((a, b, c * d), |(x, y, k)| j[[x, y, k / d, k % d]]);
    crate::io::write_raw(path, &flat)?;
    let manifest = serde_json::json!({
        "shape": [a, b, c * d],
        "dtype": "c128",
        "layout": format!(
            "dense Jacobian [out_vox={a}, out_ch={b}, k={c}x{d}] with k = in_vox*{d} + in_ch"
        ),
    });
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(std::path::PathBuf::from(sidecar))?),
        &manifest,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grappa::{calibrate, image_space_weights, GrappaConfig};
    use crate::image_form::{build_params, grappa_as_network, LayerParams};
    use crate::kspace_ops::comb_select;
    use crate::raki::{forward, infer_kspace, Activation, NetworkSpec, TrainReport, TrainedNetwork};
    use crate::sim::{generate, undersample, PhantomSpec};
    use crate::tensor::{dft2, idft2, rel_max_deviation, KSpaceTensor};
    use crate::testutil::{random_complex_array, random_complex_array4, random_image, random_kspace};

    fn tiny_net(coils: usize, r: usize, seed: u64, activation: Activation) -> TrainedNetwork {
        let spec = NetworkSpec {
            coils,
            r,
            hidden_channels: vec![3, 2],
            hidden_kernels: vec![(3, 2), (1, 1)],
            final_kernel: (3, 2),
            slope: 0.1,
            activation,
        };
        let (hidden, finals) = spec.init_kernels(seed).unwrap();
        TrainedNetwork {
            spec,
            hidden,
            final_per_offset: finals,
            report: TrainReport {
                initial_loss: 0.0,
                final_loss: 0.0,
                epochs: 0,
                trajectory: vec![],
            },
        }
    }

    fn uniform_combine(nx: usize, ny: usize, c: usize) -> Array3<C64> {
        Array3::from_elem((nx, ny, c), C64::new(1.0 / c as f64, 0.0))
    }

    fn params_for(net: &TrainedNetwork, s0: &KSpaceTensor) -> ImageSpaceParams {
        let (nx, ny) = (s0.nx(), s0.ny());
        build_params(s0, net, &uniform_combine(nx, ny, net.spec.coils)).unwrap()
    }

    fn empty_params(grid: (usize, usize), coils: usize) -> ImageSpaceParams {
        ImageSpaceParams {
            layers: vec![],
            w_int: vec![],
            combine: uniform_combine(grid.0, grid.1, coils),
            fingerprint: 0,
            r: 1,
            grid,
            coils,
        }
    }

    #[test]
    fn unit_multiplier_delta_kernel_is_identity() {
        let (nx, ny, c) = (3, 2, 1);
        let mut kernel = Array3::zeros((nx, ny, c));
        kernel[[0, 0, 0]] = C64::new(1.0, 0.0);
        let mut params = empty_params((nx, ny), c);
        params.layers.push(LayerParams {
            multiplier: Array4::from_elem((nx, ny, c, c), C64::new(1.0, 0.0)),
            image_kernel: kernel,
        });
        let j = layer_jacobian(&params, 0, DEFAULT_BUDGET).unwrap();
        let n = nx * ny;
        for l in 0..n {
            for m in 0..n {
                let want = if l == m { 1.0 } else { 0.0 };
                assert!((j.entries[[l, 0, m, 0]] - C64::new(want, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_computed_circulant_on_4x1_grid() {
        let (nx, ny) = (4, 1);
        let w_vals = [
            C64::new(1.0, 0.5),
            C64::new(-0.5, 0.0),
            C64::new(0.0, 2.0),
            C64::new(0.3, -0.7),
        ];
        let a_vals = [
            C64::new(2.0, 0.0),
            C64::new(0.0, 1.0),
            C64::new(-1.0, 0.0),
            C64::new(0.5, 0.5),
        ];
        let mut params = empty_params((nx, ny), 1);
        params.layers.push(LayerParams {
            multiplier: Array4::from_shape_fn((nx, ny, 1, 1), |(x, _, _, _)| w_vals[x]),
            image_kernel: Array3::from_shape_fn((nx, ny, 1), |(x, _, _)| a_vals[x]),
        });
        let j = layer_jacobian(&params, 0, DEFAULT_BUDGET).unwrap();
        for l in 0..4 {
            for m in 0..4 {
                let want = w_vals[m] * a_vals[(l + 4 - m) % 4];
                assert!((j.entries[[l, 0, m, 0]] - want).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn layer_columns_match_frozen_layer_responses() {
        let (nx, ny, cin, cout) = (4, 4, 2, 3);
        let mut params = empty_params((nx, ny), cin);
        params.layers.push(LayerParams {
            multiplier: Array4::from_shape_fn((nx, ny, cin, cout), |(x, y, a, b)| {
                random_complex_array4((nx, ny, cin, cout), 200)[[x, y, a, b]]
            }),
            image_kernel: random_complex_array((nx, ny, cout), 201),
        });
        let layer = &params.layers[0];
        let j = layer_jacobian(&params, 0, DEFAULT_BUDGET).unwrap();
        let n = nx * ny;
        for m in 0..n {
            for q in 0..cin {
                let mut e = Array3::zeros((nx, ny, cin));
                e[[m / ny, m % ny, q]] = C64::new(1.0, 0.0);
                let resp = conv_full(&apply_multiplier(&e, &layer.multiplier), &layer.image_kernel);
                for l in 0..n {
                    for c in 0..cout {
                        let got = j.entries[[l, c, m, q]];
                        let want = resp[[l / ny, l % ny, c]];
                        assert!(
                            (got - want).norm() < 1e-12 * (1.0 + want.norm()),
                            "mismatch at l={l} c={c} m={m} q={q}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn identity_network_chain_is_identity() {
        let params = empty_params((3, 3), 2);
        let j = chain_jacobian(&params, &ChainConfig::default()).unwrap();
        for l in 0..9 {
            for c in 0..2 {
                for m in 0..9 {
                    for q in 0..2 {
                        let want = if l == m && c == q { 1.0 } else { 0.0 };
                        assert_eq!(j[[l, c, m, q]], C64::new(want, 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn grappa_chain_equals_composite_multiplier() {
        let spec = PhantomSpec {
            grid: (8, 8),
            coils: 2,
            r: 2,
            n_acs: 8,
            seed: 202,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        let (_, acs) = undersample(&d).unwrap();
        let config = GrappaConfig {
            kx_g: 3,
            ky_g: 2,
            min_equation_factor: 1,
            ..Default::default()
        };
        let set = calibrate(&acs, &d.pattern, &config).unwrap();
        let weights = image_space_weights(&set, (8, 8)).unwrap();
        let net = grappa_as_network(&set, 2);
        let s0 = comb_select(&d.full_kspace, 2, 0).unwrap();
        let params = params_for(&net, &s0);
        let j = chain_jacobian(&params, &ChainConfig::default()).unwrap();
        let ny = 8;
        for l in 0..64 {
            let (lx, ly) = (l / ny, l % ny);
            for c in 0..2 {
                for m in 0..64 {
                    for q in 0..2 {
                        let want = if l == m {
                            weights[[lx, ly, q, c]]
                        } else {
                            C64::new(0.0, 0.0)
                        };
                        assert!(
                            (j[[l, c, m, q]] - want).norm() < 1e-12 * (1.0 + want.norm()),
                            "Jacobian is not the multiplier at l={l} c={c} m={m} q={q}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn chain_columns_match_frozen_map_responses() {
        let net = tiny_net(2, 2, 203, Activation::CLReLU);
        let s0 = comb_select(&random_kspace(8, 8, 2, 204), 2, 0).unwrap();
        let params = params_for(&net, &s0);
        let j = chain_jacobian(&params, &ChainConfig::default()).unwrap();
        let ny = 8;
        for m in (0..64).step_by(7) {
            for q in 0..2 {
                let mut e = Array3::zeros((8, 8, 2));
                e[[m / ny, m % ny, q]] = C64::new(0.3, -0.8);
                let (resp, _) = crate::image_form::infer_image_space(
                    &ImageTensor::new(e.clone()).unwrap(),
                    &params,
                )
                .unwrap();
                let scale = C64::new(0.3, -0.8);
                for l in 0..64 {
                    for c in 0..2 {
                        let want = resp.data()[[l / ny, l % ny, c]];
                        let got = j[[l, c, m, q]] * scale;
                        assert!((got - want).norm() < 1e-10 * (1.0 + want.norm()));
                    }
                }
            }
        }
    }

    #[test]
    fn fd_frozen_matches_chain_jacobian() {
        let net = tiny_net(2, 2, 205, Activation::CLReLU);
        let s0 = comb_select(&random_kspace(8, 8, 2, 206), 2, 0).unwrap();
        let params = params_for(&net, &s0);
        let j = chain_jacobian(&params, &ChainConfig::default()).unwrap();
        let base = idft2(&s0);
        let p2 = params.clone();
        let fd = fd_jacobian(
            move |x| Ok(crate::image_form::infer_image_space(x, &p2)?.0),
            &base,
            1e-5,
            FdMode::Frozen,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for (idx, want) in j.indexed_iter() {
            let got_re = fd.re_cols[idx];
            let got_im = fd.im_cols[idx];
            let denom = want.norm().max(1e-6);
            worst = worst
                .max((got_re - want).norm() / denom)
                .max((got_im - want * C64::new(0.0, 1.0)).norm() / denom);
        }
        assert!(worst < 1e-6, "worst FD relative error {worst}");
    }

    #[test]
    fn true_branch_matches_frozen_away_from_branch_boundaries() {
        // all-positive weights and input keep every pre-activation in the
        // strictly-positive quadrant, where the rectifier is locally the
        // identity on both parts: the true local derivative equals the
        // frozen-mask one
        let mut net = tiny_net(2, 2, 207, Activation::CLReLU);
        // real positive taps times inputs with positive real and imaginary
        // parts keep both parts of every pre-activation strictly positive
        for k in net.hidden.iter_mut().chain(net.final_per_offset.iter_mut()) {
            for w in k.taps_mut().iter_mut() {
                *w = C64::new(w.re.abs() + 0.05, 0.0);
            }
        }
        let raw = random_kspace(8, 8, 2, 208);
        let s0 = KSpaceTensor::new(
            raw.data().mapv(|z| C64::new(z.re.abs() + 0.5, z.im.abs() + 0.5)),
        )
        .unwrap();
        // check the premise before relying on it: every pre-activation sits
        // far from both branch boundaries
        let fp = forward(&s0, &net).unwrap();
        for pre in &fp.pre_activations {
            for z in pre.data().iter() {
                assert!(z.re > 1e-3 && z.im > 1e-3, "near-boundary value {z}");
            }
        }
        let base = idft2(&s0);
        let params = params_for(&net, &s0);
        let p2 = params.clone();
        let frozen = fd_jacobian(
            move |x| Ok(crate::image_form::infer_image_space(x, &p2)?.0),
            &base,
            1e-6,
            FdMode::Frozen,
        )
        .unwrap();
        let net2 = net.clone();
        let tru = fd_jacobian(
            move |x| Ok(idft2(&infer_kspace(&dft2(x), &net2)?)),
            &base,
            1e-6,
            FdMode::TrueBranch,
        )
        .unwrap();
        let scale = frozen
            .re_cols
            .iter()
            .map(|z| z.norm())
            .fold(0.0f64, f64::max);
        let dev_re = rel_max_deviation(&frozen.re_cols, &tru.re_cols);
        let dev_im = rel_max_deviation(&frozen.im_cols, &tru.im_cols);
        assert!(scale > 0.0);
        assert!(
            dev_re < 1e-8 && dev_im < 1e-8,
            "branch-agreement deviation re={dev_re} im={dev_im}"
        );
    }

    #[test]
    fn apply_combine_trivials_and_loop_oracle() {
        // single coil, p ≡ 1
        let j1 = random_complex_array4((4, 1, 4, 1), 209);
        let p1 = Array3::from_elem((2, 2, 1), C64::new(1.0, 0.0));
        let acc = apply_combine(&j1, &p1).unwrap();
        for l in 0..4 {
            for m in 0..4 {
                assert_eq!(acc[[l, m, 0]], j1[[l, 0, m, 0]]);
            }
        }
        // basis vector selects one coil's rows
        let j = random_complex_array4((4, 3, 4, 3), 210);
        let mut e1 = Array3::zeros((2, 2, 3));
        for l in 0..4 {
            e1[[l / 2, l % 2, 1]] = C64::new(1.0, 0.0);
        }
        let acc = apply_combine(&j, &e1).unwrap();
        for l in 0..4 {
            for m in 0..4 {
                for q in 0..3 {
                    assert_eq!(acc[[l, m, q]], j[[l, 1, m, q]]);
                }
            }
        }
        // random p: brute-force contraction
        let p = random_complex_array((2, 2, 3), 211);
        let acc = apply_combine(&j, &p).unwrap();
        for l in 0..4 {
            for m in 0..4 {
                for q in 0..3 {
                    let mut want = C64::new(0.0, 0.0);
                    for c in 0..3 {
                        want += p[[l / 2, l % 2, c]] * j[[l, c, m, q]];
                    }
                    assert!((acc[[l, m, q]] - want).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn combined_rows_agrees_with_full_contraction() {
        let net = tiny_net(2, 2, 212, Activation::CLReLU);
        let s0 = comb_select(&random_kspace(8, 8, 2, 213), 2, 0).unwrap();
        let params = params_for(&net, &s0);
        let p = random_complex_array((8, 8, 2), 214);
        let j = chain_jacobian(&params, &ChainConfig::default()).unwrap();
        let want = apply_combine(&j, &p).unwrap();
        let got = combined_rows(&params, &p, &ChainConfig::default()).unwrap();
        assert!(rel_max_deviation(&want, &got) < 1e-12);
    }

    #[test]
    fn batched_and_unbatched_are_bitwise_identical() {
        let net = tiny_net(2, 2, 215, Activation::CLReLU);
        let s0 = comb_select(&random_kspace(8, 8, 2, 216), 2, 0).unwrap();
        let params = params_for(&net, &s0);
        let full = chain_jacobian(&params, &ChainConfig::default()).unwrap();
        for batch in [1usize, 3, 17] {
            let cfg = ChainConfig {
                batch_rows: Some(batch),
                ..Default::default()
            };
            let j = chain_jacobian(&params, &cfg).unwrap();
            assert_eq!(full, j, "batch size {batch} changed bits");
        }
        let p = uniform_combine(8, 8, 2);
        let base = combined_rows(&params, &p, &ChainConfig::default()).unwrap();
        let cfg = ChainConfig {
            batch_rows: Some(5),
            ..Default::default()
        };
        assert_eq!(base, combined_rows(&params, &p, &cfg).unwrap());
    }

    #[test]
    fn budget_is_enforced() {
        let net = tiny_net(2, 2, 217, Activation::CLReLU);
        let s0 = comb_select(&random_kspace(8, 8, 2, 218), 2, 0).unwrap();
        let params = params_for(&net, &s0);
        let cfg = ChainConfig {
            budget_bytes: 1024,
            batch_rows: None,
        };
        assert!(matches!(
            chain_jacobian(&params, &cfg),
            Err(Error::BudgetExceeded { .. })
        ));
        assert!(matches!(
            layer_jacobian(&params, 0, 1024),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let base = random_image(4, 4, 1, 219);
        let err = fd_jacobian(|x| Ok(x.clone()), &base, 0.0, FdMode::Frozen);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn jacobian_round_trips_through_disk_layout() {
        let j = random_complex_array4((4, 2, 4, 2), 220);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.c128");
        save_jacobian(&path, &j).unwrap();
        let flat = crate::io::read_raw(&path, [4, 2, 8]).unwrap();
        for ((a, b, c, d), v) in j.indexed_iter() {
            assert_eq!(flat[[a, b, c * 2 + d]], *v);
        }
    }
}
