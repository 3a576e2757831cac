//! Image-space reformulation of the interpolation network.
//!
//! A forward pass in k-space alternates convolutions with the split
//! rectification. Because the rectification only rescales the real and
//! imaginary parts, its action on the unperturbed data can be recorded as an
//! elementwise complex multiplier — the activation mask. With masks frozen,
//! every stage is either an elementwise multiplication or a convolution, and
//! both commute with the DFT: k-space convolutions become image-space
//! multipliers, k-space masks become image-space convolution kernels, and the
//! whole reconstruction becomes an exactly linear map on the aliased image.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::conv::{apply_multiplier, circ_conv2, kernel_to_multiplier};
use crate::error::{Error, Result};
use crate::grappa::GrappaKernelSet;
use crate::kspace_ops::{conv_full, mask_to_image_kernel, rss};
use crate::raki::{
    clrelu_scalar, forward, Activation, NetworkSpec, TrainReport, TrainedNetwork,
};
use crate::sim::Dataset;
use crate::tensor::{C64, ImageTensor, KSpaceTensor};

/// Stable hash of the exact bit pattern of a tensor, used to tie frozen
/// parameters to the data they were extracted from.
pub fn data_fingerprint(s: &KSpaceTensor) -> u64 {
    let mut h = DefaultHasher::new();
    for z in s.data().iter() {
        z.re.to_bits().hash(&mut h);
        z.im.to_bits().hash(&mut h);
    }
    s.data().dim().hash(&mut h);
    h.finish()
}

/// Frozen activation masks of every hidden layer, in both domains.
#[derive(Clone, Debug)]
pub struct ActivationMaskSet {
    /// Elementwise k-space masks `A_n`.
    pub masks: Vec<KSpaceTensor>,
    /// Image-kernel forms `Â_n` (convolution operands).
    pub image_kernels: Vec<Array3<C64>>,
    /// Fingerprint of the `s0` the pre-activations came from.
    pub fingerprint: u64,
    pub slope: f64,
}

/// Mask value at one pre-activation sample: the unique complex scalar with
/// `A·z = clrelu(z)`, i.e. `clrelu(z)·conj(z)/|z|²`.
fn mask_value(z: C64, a: f64) -> C64 {
    clrelu_scalar(z, a) * z.conj() / z.norm_sqr()
}

/// Extract masks from the pre-activations of a forward pass on `s0`.
/// Where `|S'| < 1e-12·max|S'|` the ratio is 0/0; the mask is set to 1.
pub fn extract_masks(
    pre_activations: &[KSpaceTensor],
    spec: &NetworkSpec,
    s0: &KSpaceTensor,
) -> ActivationMaskSet {
    let mut masks = Vec::with_capacity(pre_activations.len());
    for pre in pre_activations {
        let eps = 1e-12 * pre.max_abs();
        let data = pre.data().mapv(|z| {
            if z.norm() < eps || matches!(spec.activation, Activation::Identity) {
                C64::new(1.0, 0.0)
            } else {
                mask_value(z, spec.slope)
            }
        });
        masks.push(KSpaceTensor::new(data).expect("bounded mask values"));
    }
    let image_kernels = masks.iter().map(mask_to_image_kernel).collect();
    ActivationMaskSet {
        masks,
        image_kernels,
        fingerprint: data_fingerprint(s0),
        slope: spec.slope,
    }
}

/// One hidden layer in image space: a channel-mixing multiplier followed by a
/// per-channel convolution with the mask's image kernel.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub multiplier: Array4<C64>,
    pub image_kernel: Array3<C64>,
}

/// Everything needed to reconstruct in the image domain.
#[derive(Clone, Debug)]
pub struct ImageSpaceParams {
    pub layers: Vec<LayerParams>,
    /// Per missing-line-offset final multipliers (identity pass-through is
    /// applied separately).
    pub w_int: Vec<Array4<C64>>,
    /// Coil-combination weights `p` `[nx, ny, C]`.
    pub combine: Array3<C64>,
    pub fingerprint: u64,
    pub r: usize,
    pub grid: (usize, usize),
    pub coils: usize,
}

/// Transfer all frozen parameters to the image domain. The masks must have
/// been extracted from the same `s0` (fingerprint enforced).
pub fn to_image_space(
    net: &TrainedNetwork,
    masks: &ActivationMaskSet,
    s0: &KSpaceTensor,
    combine: &Array3<C64>,
) -> Result<ImageSpaceParams> {
    if masks.fingerprint != data_fingerprint(s0) {
        return Err(Error::FingerprintMismatch);
    }
    if masks.masks.len() != net.hidden.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} hidden layers",
            masks.masks.len(),
            net.hidden.len()
        )));
    }
    let grid = (s0.nx(), s0.ny());
    if combine.dim() != (grid.0, grid.1, net.spec.coils) {
        return Err(Error::ShapeMismatch(format!(
            "combine weights {:?} vs grid {grid:?} with {} coils",
            combine.dim(),
            net.spec.coils
        )));
    }
    let layers = net
        .hidden
        .iter()
        .zip(masks.image_kernels.iter())
        .map(|(k, a)| {
            Ok(LayerParams {
                multiplier: kernel_to_multiplier(k, grid)?,
                image_kernel: a.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let w_int = net
        .final_per_offset
        .iter()
        .map(|k| kernel_to_multiplier(k, grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageSpaceParams {
        layers,
        w_int,
        combine: combine.clone(),
        fingerprint: masks.fingerprint,
        r: net.spec.r,
        grid,
        coils: net.spec.coils,
    })
}

/// Run the frozen image-space pipeline: per hidden layer
/// `Ŝ_n = (Ŝ_{n−1} ⊙ ŵ_n) ⊛ Â_n`, then the per-offset final multipliers plus
/// the identity pass-through, then the coil combination.
///
/// Returns the unfolded coil images `Ŝ_int` and the combined image `Ŝ_acc`.
/// The map is exactly linear in `ŝ0`; it may be applied to perturbed inputs
/// (that is the point of freezing the masks).
pub fn infer_image_space(
    s0_img: &ImageTensor,
    params: &ImageSpaceParams,
) -> Result<(ImageTensor, Array2<C64>)> {
    let (nx, ny) = params.grid;
    if s0_img.nx() != nx || s0_img.ny() != ny || s0_img.coils() != params.coils {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} vs params grid {:?} with {} coils",
            s0_img.data().dim(),
            params.grid,
            params.coils
        )));
    }
    let mut cur = s0_img.data().clone();
    for layer in &params.layers {
        cur = conv_full(&apply_multiplier(&cur, &layer.multiplier), &layer.image_kernel);
    }
    let mut s_int = s0_img.data().clone();
    for w in &params.w_int {
        s_int += &apply_multiplier(&cur, w);
    }
    let mut s_acc = Array2::zeros((nx, ny));
    for x in 0..nx {
        for y in 0..ny {
            let mut acc = C64::new(0.0, 0.0);
            for c in 0..params.coils {
                acc += params.combine[[x, y, c]] * s_int[[x, y, c]];
            }
            s_acc[[x, y]] = acc;
        }
    }
    Ok((ImageTensor::new(s_int)?, s_acc))
}

/// Replay the frozen map in k-space: convolutions with the trained kernels,
/// elementwise mask multiplications instead of the rectification, identity
/// pass-through plus the per-offset final kernels. Linear, and equal to the
/// image-space pipeline through the DFT.
pub fn frozen_infer_kspace(
    s0: &KSpaceTensor,
    net: &TrainedNetwork,
    masks: &ActivationMaskSet,
) -> Result<KSpaceTensor> {
    let mut cur = s0.clone();
    for (k, a) in net.hidden.iter().zip(masks.masks.iter()) {
        let mut z = circ_conv2(&cur, k)?.into_data();
        z.zip_mut_with(a.data(), |v, &m| *v *= m);
        cur = KSpaceTensor::new(z)?;
    }
    let mut out = s0.data().clone();
    for k in &net.final_per_offset {
        out += circ_conv2(&cur, k)?.data();
    }
    KSpaceTensor::new(out)
}

/// Unit-gain coil-combination weights from the ground-truth sensitivities:
/// inside the ROI `p = conj(s)/Σ|s|²`, outside a root-sum-of-squares
/// normalized fallback.
pub fn coil_combine_weights(d: &Dataset, roi: &Array2<bool>) -> Result<Array3<C64>> {
    let s = d.sensitivities.data();
    let (nx, ny, nc) = s.dim();
    if roi.dim() != (nx, ny) {
        return Err(Error::ShapeMismatch(format!(
            "ROI {:?} vs grid ({nx}, {ny})",
            roi.dim()
        )));
    }
    let norms = rss(s);
    let mut p = Array3::zeros((nx, ny, nc));
    for x in 0..nx {
        for y in 0..ny {
            let n = norms[[x, y]];
            if roi[[x, y]] && n == 0.0 {
                return Err(Error::Degenerate(format!(
                    "zero sensitivity inside ROI at ({x}, {y})"
                )));
            }
            for c in 0..nc {
                p[[x, y, c]] = if roi[[x, y]] {
                    s[[x, y, c]].conj() / (n * n)
                } else if n > 0.0 {
                    s[[x, y, c]].conj() / n
                } else {
                    C64::new(0.0, 0.0)
                };
            }
        }
    }
    Ok(p)
}

/// View a calibrated linear kernel set as a network with no hidden layers:
/// routing it through the image-space machinery must reproduce the direct
/// multiplier construction.
pub fn grappa_as_network(set: &GrappaKernelSet, coils: usize) -> TrainedNetwork {
    TrainedNetwork {
        spec: NetworkSpec {
            coils,
            r: set.r,
            hidden_channels: vec![],
            hidden_kernels: vec![],
            final_kernel: (set.config.kx_g, set.config.ky_g),
            slope: 0.1,
            activation: Activation::Identity,
        },
        hidden: vec![],
        final_per_offset: set.kernels.clone(),
        report: TrainReport {
            initial_loss: 0.0,
            final_loss: 0.0,
            epochs: 0,
            trajectory: vec![],
        },
    }
}

/// Convenience: forward pass, mask extraction and parameter transfer in one
/// step for a given comb input.
pub fn build_params(
    s0: &KSpaceTensor,
    net: &TrainedNetwork,
    combine: &Array3<C64>,
) -> Result<ImageSpaceParams> {
    let fp = forward(s0, net)?;
    let masks = extract_masks(&fp.pre_activations, &net.spec, s0);
    to_image_space(net, &masks, s0, combine)
}

#[derive(Serialize, Deserialize)]
struct ParamsManifest {
    grid: [usize; 2],
    coils: usize,
    r: usize,
    fingerprint: u64,
    n_layers: usize,
    layer_channels: Vec<[usize; 2]>,
    w_int_channels: Vec<[usize; 2]>,
}

fn save_mult(dir: &Path, name: &str, m: &Array4<C64>) -> Result<()> {
    let (nx, ny, ci, co) = m.dim();
    let flat = Array3::from_shape_fn((nx, ny, ci * co), |(x, y, c)| m[[x, y, c / co, c % co]]);
    crate::io::write_raw(&dir.join(name), &flat)
}

fn load_mult(dir: &Path, name: &str, grid: (usize, usize), ch: [usize; 2]) -> Result<Array4<C64>> {
    let flat = crate::io::read_raw(&dir.join(name), [grid.0, grid.1, ch[0] * ch[1]])?;
    Ok(Array4::from_shape_fn(
        (grid.0, grid.1, ch[0], ch[1]),
        |(x, y, a, b)| flat[[x, y, a * ch[1] + b]],
    ))
}

/// Persist image-space parameters (tensor files plus a JSON manifest) so
/// inference can run without the k-space network.
pub fn save_params(dir: &Path, p: &ImageSpaceParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = ParamsManifest {
        grid: [p.grid.0, p.grid.1],
        coils: p.coils,
        r: p.r,
        fingerprint: p.fingerprint,
        n_layers: p.layers.len(),
        layer_channels: p
            .layers
            .iter()
            .map(|l| [l.multiplier.dim().2, l.multiplier.dim().3])
            .collect(),
        w_int_channels: p.w_int.iter().map(|w| [w.dim().2, w.dim().3]).collect(),
    };
    for (n, l) in p.layers.iter().enumerate() {
        save_mult(dir, &format!("w_{n}.c128"), &l.multiplier)?;
        crate::io::write_raw(&dir.join(format!("a_{n}.c128")), &l.image_kernel)?;
    }
    for (idx, w) in p.w_int.iter().enumerate() {
        save_mult(dir, &format!("w_int_{}.c128", idx + 1), w)?;
    }
    crate::io::write_raw(&dir.join("combine.c128"), &p.combine)?;
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("params.json"))?),
        &manifest,
    )?;
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<ImageSpaceParams> {
    let manifest: ParamsManifest = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(dir.join("params.json"))?,
    ))?;
    let grid = (manifest.grid[0], manifest.grid[1]);
    let mut layers = Vec::new();
    for n in 0..manifest.n_layers {
        let ch = manifest.layer_channels[n];
        layers.push(LayerParams {
            multiplier: load_mult(dir, &format!("w_{n}.c128"), grid, ch)?,
            image_kernel: crate::io::read_raw(
                &dir.join(format!("a_{n}.c128")),
                [grid.0, grid.1, ch[1]],
            )?,
        });
    }
    let mut w_int = Vec::new();
    for (idx, ch) in manifest.w_int_channels.iter().enumerate() {
        w_int.push(load_mult(dir, &format!("w_int_{}.c128", idx + 1), grid, *ch)?);
    }
    Ok(ImageSpaceParams {
        layers,
        w_int,
        combine: crate::io::read_raw(&dir.join("combine.c128"), [grid.0, grid.1, manifest.coils])?,
        fingerprint: manifest.fingerprint,
        r: manifest.r,
        grid,
        coils: manifest.coils,
    })
}
