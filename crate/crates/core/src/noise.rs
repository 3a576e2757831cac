//! Noise propagation through the frozen reconstruction: analytical g-factor
//! maps from the combined Jacobian, pseudo-replica Monte-Carlo estimation,
//! per-voxel normality testing of the replica statistics, and the
//! noise-level sweep experiment.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grappa::{calibrate, GrappaConfig, GrappaKernelSet};
use crate::image_form::{
    coil_combine_weights, extract_masks, frozen_infer_kspace, grappa_as_network, to_image_space,
    ActivationMaskSet, ImageSpaceParams,
};
use crate::jacobian::{combined_rows, ChainConfig};
use crate::kspace_ops::crop_center;
use crate::metrics::{evaluate, magnitude, MetricsReport, SsimConfig};
use crate::raki::{forward, infer_kspace, train, NetworkSpec, TrainConfig, TrainedNetwork};
use crate::sim::{comb_input, generate, roi_mask, undersample, unit_noise, Dataset, PhantomSpec};
use crate::tensor::{idft2, C64, KSpaceTensor};

/// Provenance of a g-factor map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GMethod {
    Analytical,
    MonteCarlo,
    FiniteDifference,
}

/// Per-voxel noise-amplification map, normalized by `√R`.
#[derive(Clone, Debug)]
pub struct GFactorMap {
    pub values: Array2<f64>,
    pub method: GMethod,
    pub r: usize,
}

/// Mask handling during replica reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Reuse the measured-data masks: each replica is a pure linear replay.
    Frozen,
    /// Re-run the k-space network per replica, refreshing the masks.
    Recompute,
}

/// Combined images of every replica, with the seeds that produced them.
#[derive(Clone, Debug)]
pub struct ReplicaStack {
    /// `[replica, x, y]`
    pub images: Array3<C64>,
    pub seeds: Vec<u64>,
    pub mode: MaskMode,
}

/// A reconstruction operator mapping an input k-space tensor to a combined
/// image, as used by the replica loop.
pub enum ReconOperator<'a> {
    /// Inverse DFT plus coil combination only (fully-sampled reference, R=1).
    Identity { combine: &'a Array2Combine },
    /// Calibrated linear kernels (masks play no role).
    Grappa {
        set: &'a GrappaKernelSet,
        combine: &'a Array2Combine,
    },
    /// Frozen-mask linear replay of a trained network.
    Frozen {
        net: &'a TrainedNetwork,
        masks: &'a ActivationMaskSet,
        combine: &'a Array2Combine,
    },
    /// Full nonlinear re-inference (masks refreshed).
    Recompute {
        net: &'a TrainedNetwork,
        combine: &'a Array2Combine,
    },
}

/// Coil-combination weights `[nx, ny, C]`.
pub type Array2Combine = ndarray::Array3<C64>;

fn combine_image(img: &crate::tensor::ImageTensor, p: &Array2Combine) -> Result<Array2<C64>> {
    let (nx, ny, c) = img.data().dim();
    if p.dim() != (nx, ny, c) {
        return Err(Error::ShapeMismatch(format!(
            "combine weights {:?} vs image {:?}",
            p.dim(),
            img.data().dim()
        )));
    }
    Ok(Array2::from_shape_fn((nx, ny), |(x, y)| {
        (0..c).map(|ch| p[[x, y, ch]] * img.data()[[x, y, ch]]).sum()
    }))
}

impl ReconOperator<'_> {
    /// Reconstruct and coil-combine one input.
    pub fn combined(&self, s0: &KSpaceTensor) -> Result<Array2<C64>> {
        match self {
            ReconOperator::Identity { combine } => combine_image(&idft2(s0), combine),
            ReconOperator::Grappa { set, combine } => {
                // full-grid convolutions, not the comb-row-restricted
                // inference: replicas carry noise on every line, and the
                // frozen linear map the Jacobian describes does not project.
                // On comb data the two coincide.
                let mut out = s0.data().clone();
                for k in &set.kernels {
                    out += crate::conv::circ_conv2(s0, k)?.data();
                }
                combine_image(&idft2(&KSpaceTensor::new(out)?), combine)
            }
            ReconOperator::Frozen {
                net,
                masks,
                combine,
            } => combine_image(&idft2(&frozen_infer_kspace(s0, net, masks)?), combine),
            ReconOperator::Recompute { net, combine } => {
                combine_image(&idft2(&infer_kspace(s0, net)?), combine)
            }
        }
    }

    pub fn mode(&self) -> MaskMode {
        match self {
            ReconOperator::Recompute { .. } => MaskMode::Recompute,
            _ => MaskMode::Frozen,
        }
    }
}

/// Replica-loop controls. `sigma` is the standard deviation of the complex
/// Gaussian noise added to every k-space sample (identity coil covariance —
/// the pre-whitened convention).
#[derive(Clone, Copy, Debug)]
pub struct MonteCarloConfig {
    pub n_replicas: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            n_replicas: 1000,
            sigma: 0.02,
            seed: 7,
        }
    }
}

/// Run the pseudo-replica loop: per replica, add seeded noise to `s0_base`,
/// reconstruct, and store the combined image. Replicas are independent jobs
/// with pre-assigned seeds; the result is identical for any schedule.
pub fn montecarlo_stack(
    op: &ReconOperator<'_>,
    s0_base: &KSpaceTensor,
    cfg: &MonteCarloConfig,
) -> Result<ReplicaStack> {
    if cfg.n_replicas < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 replicas, got {}",
            cfg.n_replicas
        )));
    }
    let seeds: Vec<u64> = (0..cfg.n_replicas as u64)
        .map(|i| cfg.seed.wrapping_add(i.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
        .collect();
    {
        let mut set = std::collections::HashSet::new();
        for s in &seeds {
            if !set.insert(*s) {
                return Err(Error::InvalidArgument(format!("replica seed collision {s}")));
            }
        }
    }
    let (nx, ny) = (s0_base.nx(), s0_base.ny());
    let coils = s0_base.coils();
    let results: Vec<Result<Array2<C64>>> = seeds
        .par_iter()
        .enumerate()
        .map(|(idx, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = unit_noise((nx, ny), coils, &mut rng);
            let mut data = s0_base.data().clone();
            data.zip_mut_with(noise.data(), |v, &n| *v += n * cfg.sigma);
            let replica = KSpaceTensor::new(data)?;
            let out = op.combined(&replica)?;
            if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::ReplicaDiverged { index: idx });
            }
            Ok(out)
        })
        .collect();
    let mut images = Array3::zeros((cfg.n_replicas, nx, ny));
    for (i, r) in results.into_iter().enumerate() {
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&r?);
    }
    Ok(ReplicaStack {
        images,
        seeds,
        mode: op.mode(),
    })
}

/// Per-voxel mean of the voxel magnitudes across the stack.
pub fn mean_magnitude_map(stack: &ReplicaStack) -> Array2<f64> {
    let (n, nx, ny) = stack.images.dim();
    Array2::from_shape_fn((nx, ny), |(x, y)| {
        (0..n).map(|i| stack.images[[i, x, y]].norm()).sum::<f64>() / n as f64
    })
}

/// Per-voxel unbiased variance of the voxel magnitudes across the stack.
pub fn variance_map(stack: &ReplicaStack) -> Array2<f64> {
    let (n, nx, ny) = stack.images.dim();
    let mean = mean_magnitude_map(stack);
    Array2::from_shape_fn((nx, ny), |(x, y)| {
        (0..n)
            .map(|i| {
                let d = stack.images[[i, x, y]].norm() - mean[[x, y]];
                d * d
            })
            .sum::<f64>()
            / (n as f64 - 1.0)
    })
}

/// Per-voxel SNR: mean magnitude over magnitude standard deviation
/// (infinite where the variance vanishes).
pub fn snr_map(stack: &ReplicaStack) -> Array2<f64> {
    let mean = mean_magnitude_map(stack);
    let var = variance_map(stack);
    Array2::from_shape_fn(mean.dim(), |i| {
        if var[i] > 0.0 {
            mean[i] / var[i].sqrt()
        } else {
            f64::INFINITY
        }
    })
}

/// g-factor from an accelerated and an identically-processed fully-sampled
/// replica stack: `g = (SNR_full / SNR_acc) / √R` per voxel.
pub fn gfactor_from_stacks(
    acc: &ReplicaStack,
    full: &ReplicaStack,
    r: usize,
) -> Result<GFactorMap> {
    if acc.images.dim().1 != full.images.dim().1 || acc.images.dim().2 != full.images.dim().2 {
        return Err(Error::ShapeMismatch(format!(
            "stack grids {:?} vs {:?}",
            acc.images.dim(),
            full.images.dim()
        )));
    }
    let var_acc = variance_map(acc);
    let var_full = variance_map(full);
    let mean_full = mean_magnitude_map(full);
    // identical replicas leave only accumulation round-off in the variance;
    // treat anything at that scale as exactly zero
    let effective = |v: f64, mean: f64| if v > (1e-12 * mean.max(1.0)).powi(2) { v } else { 0.0 };
    let degenerate = var_full
        .indexed_iter()
        .all(|(i, &v)| effective(v, mean_full[i]) == 0.0);
    if degenerate {
        return Err(Error::Degenerate(
            "all replicas identical (zero added noise): variance map is degenerate".to_string(),
        ));
    }
    let sqrt_r = (r as f64).sqrt();
    // the combined signal is identical in numerator and denominator of the
    // SNR ratio, so it cancels: g reduces to the magnitude-std ratio
    let values = Array2::from_shape_fn(var_acc.dim(), |i| {
        let vf = effective(var_full[i], mean_full[i]);
        if vf > 0.0 {
            (var_acc[i] / vf).sqrt() / sqrt_r
        } else {
            0.0
        }
    });
    Ok(GFactorMap {
        values,
        method: GMethod::MonteCarlo,
        r,
    })
}

fn check_psd(cov: &Array2<C64>) -> Result<()> {
    let c = cov.nrows();
    if cov.ncols() != c {
        return Err(Error::ShapeMismatch(format!(
            "covariance must be square, got {:?}",
            cov.dim()
        )));
    }
    for i in 0..c {
        for j in 0..c {
            if (cov[[i, j]] - cov[[j, i]].conj()).norm() > 1e-10 {
                return Err(Error::InvalidArgument(
                    "covariance is not Hermitian".to_string(),
                ));
            }
        }
    }
    // PSD via eigen decomposition of the Hermitian matrix
    let m = nalgebra::DMatrix::from_fn(c, c, |i, j| cov[[i, j]]);
    let eig = m.symmetric_eigenvalues();
    if eig.iter().any(|l| *l < -1e-10) {
        return Err(Error::InvalidArgument(
            "covariance is not positive semi-definite".to_string(),
        ));
    }
    Ok(())
}

/// Analytical g-factor from the combined Jacobian rows (`[l; m, q]`):
/// `Var_acc[l] = Σ_m row_m Σ² row_mᴴ`, `Var_full[l] = p_l Σ² p_lᴴ`,
/// `g = √(Var_acc/Var_full)/√R`. Pass an identity `Σ²` for pre-whitened data.
pub fn gfactor_analytical(
    j_acc: &Array3<C64>,
    p: &Array2Combine,
    cov: &Array2<C64>,
    r: usize,
    roi: Option<&Array2<bool>>,
    method: GMethod,
) -> Result<GFactorMap> {
    check_psd(cov)?;
    let (nvox, nvox_in, c) = j_acc.dim();
    let (nx, ny, pc) = p.dim();
    if nx * ny != nvox || pc != cov.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "Jacobian {:?} vs combine {:?} vs covariance {:?}",
            j_acc.dim(),
            p.dim(),
            cov.dim()
        )));
    }
    let sqrt_r = (r as f64).sqrt();
    let mut values = Array2::zeros((nx, ny));
    for l in 0..nvox {
        let (lx, ly) = (l / ny, l % ny);
        // Hermitian quadratic form per input voxel, summed over voxels
        let mut var_acc = C64::new(0.0, 0.0);
        for m in 0..nvox_in {
            for a in 0..c {
                for b in 0..c {
                    var_acc += j_acc[[l, m, a]] * cov[[a, b]] * j_acc[[l, m, b]].conj();
                }
            }
        }
        if var_acc.im.abs() > 1e-10 * var_acc.re.abs().max(1e-300) {
            return Err(Error::NonFinite(
                "accelerated variance has a non-negligible imaginary part",
            ));
        }
        let var_acc = var_acc.re;
        if var_acc < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "negative accelerated variance {var_acc} at voxel {l}"
            )));
        }
        let mut var_full = C64::new(0.0, 0.0);
        for a in 0..pc {
            for b in 0..pc {
                var_full += p[[lx, ly, a]] * cov[[a, b]] * p[[lx, ly, b]].conj();
            }
        }
        let var_full = var_full.re;
        let inside = roi.map(|m| m[[lx, ly]]).unwrap_or(true);
        if var_full <= 0.0 {
            if inside {
                return Err(Error::Degenerate(format!(
                    "zero fully-sampled variance inside ROI at voxel ({lx}, {ly})"
                )));
            }
            values[[lx, ly]] = 0.0;
        } else {
            values[[lx, ly]] = (var_acc.max(0.0) / var_full).sqrt() / sqrt_r;
        }
    }
    Ok(GFactorMap { values, method, r })
}

/// Everything the noise analysis needs at the (possibly cropped) analysis
/// grid: inputs, frozen parameters, combine weights, and ROI.
pub struct AnalysisContext {
    /// Aliased comb k-space at the analysis grid.
    pub s0: KSpaceTensor,
    /// Fully-sampled k-space at the analysis grid.
    pub full: KSpaceTensor,
    pub masks: ActivationMaskSet,
    pub params: ImageSpaceParams,
    pub combine: Array2Combine,
    pub roi: Array2<bool>,
    pub r: usize,
}

/// Crop the measured data to the analysis grid, re-run the network forward
/// pass there to extract masks, and assemble frozen image-space parameters.
/// Sensitivities and ROI are re-evaluated analytically on the analysis grid.
pub fn prepare_analysis(
    spec: &PhantomSpec,
    d: &Dataset,
    net: &TrainedNetwork,
    grid: (usize, usize),
    roi_threshold: f64,
) -> Result<AnalysisContext> {
    let s0 = crop_center(&comb_input(d)?, grid)?;
    let full = crop_center(&d.full_kspace, grid)?;
    let mut spec_small = spec.clone();
    spec_small.grid = grid;
    let d_small = generate(&spec_small)?;
    let roi = roi_mask(&d_small, roi_threshold)?;
    let combine = coil_combine_weights(&d_small, &roi)?;
    let fp = forward(&s0, net)?;
    let masks = extract_masks(&fp.pre_activations, &net.spec, &s0);
    let params = to_image_space(net, &masks, &s0, &combine)?;
    Ok(AnalysisContext {
        s0,
        full,
        masks,
        params,
        combine,
        roi,
        r: net.spec.r,
    })
}

/// Full Monte-Carlo product: accelerated stack, fully-sampled reference
/// stack, variance/SNR maps of the accelerated stack, and the g-factor map.
pub struct MonteCarloOutput {
    pub acc: ReplicaStack,
    pub full: ReplicaStack,
    pub variance: Array2<f64>,
    pub snr: Array2<f64>,
    pub g: GFactorMap,
}

/// Run both replica stacks (the fully-sampled reference is processed with the
/// same combine weights) and derive the maps.
pub fn gfactor_montecarlo(
    op: &ReconOperator<'_>,
    s0: &KSpaceTensor,
    full: &KSpaceTensor,
    combine: &Array2Combine,
    cfg: &MonteCarloConfig,
    r: usize,
) -> Result<MonteCarloOutput> {
    let acc = montecarlo_stack(op, s0, cfg)?;
    let reference_op = ReconOperator::Identity { combine };
    // same seeds as the accelerated stack: replica pairs share noise draws,
    // so the sampling error of the variance ratio largely cancels
    let full_stack = montecarlo_stack(&reference_op, full, cfg)?;
    let variance = variance_map(&acc);
    let snr = snr_map(&acc);
    let g = gfactor_from_stacks(&acc, &full_stack, r)?;
    Ok(MonteCarloOutput {
        acc,
        full: full_stack,
        variance,
        snr,
        g,
    })
}

/// Per-voxel Kolmogorov-Smirnov normality results on replica magnitudes.
#[derive(Clone, Debug)]
pub struct NormalityReport {
    pub d_stat: Array2<f64>,
    pub p_value: Array2<f64>,
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    /// `p > alpha` per voxel.
    pub pass: Array2<bool>,
    /// Voxels with zero sample deviation, excluded from the fraction.
    pub degenerate: Array2<bool>,
    /// Passing fraction over non-degenerate ROI voxels.
    pub fraction_passing: f64,
    pub alpha: f64,
}

/// Asymptotic Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{j−1} e^{−2 j² λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of each voxel's magnitude samples against a normal
/// distribution with parameters fitted from the same sample (no small-sample
/// correction — this follows the classical asymptotic p-value and is
/// anti-conservative, i.e. it under-rejects).
pub fn ks_normality(
    stack: &ReplicaStack,
    roi: &Array2<bool>,
    alpha: f64,
) -> Result<NormalityReport> {
    let (n, nx, ny) = stack.images.dim();
    if n < 50 {
        return Err(Error::InvalidArgument(format!(
            "normality testing needs at least 50 replicas, got {n}"
        )));
    }
    if roi.dim() != (nx, ny) {
        return Err(Error::ShapeMismatch(format!(
            "ROI {:?} vs stack grid ({nx}, {ny})",
            roi.dim()
        )));
    }
    let mut d_stat = Array2::zeros((nx, ny));
    let mut p_value = Array2::zeros((nx, ny));
    let mut mu = Array2::zeros((nx, ny));
    let mut sigma = Array2::zeros((nx, ny));
    let mut pass = Array2::from_elem((nx, ny), false);
    let mut degenerate = Array2::from_elem((nx, ny), false);
    let nf = n as f64;
    let lambda_scale = nf.sqrt() + 0.12 + 0.11 / nf.sqrt();
    let mut samples = vec![0.0f64; n];
    for x in 0..nx {
        for y in 0..ny {
            for (i, s) in samples.iter_mut().enumerate() {
                *s = stack.images[[i, x, y]].norm();
            }
            let m = samples.iter().sum::<f64>() / nf;
            let var = samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (nf - 1.0);
            mu[[x, y]] = m;
            sigma[[x, y]] = var.sqrt();
            if !(var > 0.0) {
                degenerate[[x, y]] = true;
                p_value[[x, y]] = f64::NAN;
                d_stat[[x, y]] = f64::NAN;
                continue;
            }
            samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let dist = Normal::new(m, var.sqrt())
                .map_err(|_| Error::Degenerate("fitted normal is degenerate".to_string()))?;
            let mut d = 0.0f64;
            for (i, s) in samples.iter().enumerate() {
                let cdf = dist.cdf(*s);
                d = d
                    .max((i as f64 + 1.0) / nf - cdf)
                    .max(cdf - i as f64 / nf);
            }
            d_stat[[x, y]] = d;
            let p = kolmogorov_q(lambda_scale * d);
            p_value[[x, y]] = p;
            pass[[x, y]] = p > alpha;
        }
    }
    let mut total = 0usize;
    let mut passing = 0usize;
    for x in 0..nx {
        for y in 0..ny {
            if roi[[x, y]] && !degenerate[[x, y]] {
                total += 1;
                if pass[[x, y]] {
                    passing += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Degenerate(
            "no usable ROI voxels for normality testing".to_string(),
        ));
    }
    Ok(NormalityReport {
        d_stat,
        p_value,
        mu,
        sigma,
        pass,
        degenerate,
        fraction_passing: passing as f64 / total as f64,
        alpha,
    })
}

/// Agreement statistics between two g-factor maps inside an ROI.
#[derive(Clone, Copy, Debug)]
pub struct GapStats {
    pub median_rel_gap: f64,
    pub p95_rel_gap: f64,
    pub pearson: f64,
    pub voxels: usize,
}

/// Per-voxel relative gap `|a−b|/|a|` quantiles plus the Pearson correlation
/// of the two maps inside the ROI.
pub fn gap_statistics(a: &GFactorMap, b: &GFactorMap, roi: &Array2<bool>) -> Result<GapStats> {
    if a.values.dim() != b.values.dim() || a.values.dim() != roi.dim() {
        return Err(Error::ShapeMismatch(format!(
            "map grids {:?}, {:?}, ROI {:?}",
            a.values.dim(),
            b.values.dim(),
            roi.dim()
        )));
    }
    if a.r != b.r {
        return Err(Error::InvalidArgument(format!(
            "comparing maps with different acceleration factors {} and {}",
            a.r, b.r
        )));
    }
    let mut gaps = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &inside) in roi.indexed_iter() {
        if inside && a.values[i] > 0.0 {
            gaps.push((a.values[i] - b.values[i]).abs() / a.values[i]);
            xs.push(a.values[i]);
            ys.push(b.values[i]);
        }
    }
    if gaps.len() < 2 {
        return Err(Error::Degenerate(
            "too few ROI voxels to compare maps".to_string(),
        ));
    }
    gaps.sort_by(|u, v| u.partial_cmp(v).unwrap());
    let quantile = |q: f64| gaps[((gaps.len() - 1) as f64 * q).round() as usize];
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let pearson = if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx * syy).sqrt()
    } else {
        0.0
    };
    Ok(GapStats {
        median_rel_gap: quantile(0.5),
        p95_rel_gap: quantile(0.95),
        pearson,
        voxels: gaps.len(),
    })
}

/// Reconstruction family used by the sweep.
pub enum ReconKind<'a> {
    Grappa(&'a GrappaConfig),
    Raki {
        spec: &'a NetworkSpec,
        train: &'a TrainConfig,
    },
}

/// Sweep controls: noise scales applied to the base acquisition noise,
/// replica settings, and the analysis grid.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub sigma_scales: Vec<f64>,
    pub mc: MonteCarloConfig,
    pub analysis_grid: (usize, usize),
    pub roi_threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sigma_scales: vec![1.0, 3.0, 5.0],
            mc: MonteCarloConfig::default(),
            analysis_grid: (32, 32),
            roi_threshold: 0.2,
        }
    }
}

/// One sweep point: reconstruction quality at the native grid plus both
/// g-factor estimates at the analysis grid.
pub struct SweepEntry {
    pub sigma_scale: f64,
    pub sigma: f64,
    pub metrics: MetricsReport,
    pub g_analytical: GFactorMap,
    pub g_mc: GFactorMap,
    pub snr: Array2<f64>,
    pub gap: GapStats,
}

/// Repeat the full pipeline at elevated acquisition-noise levels: the noisier
/// data retrains/recalibrates the reconstruction, and analytical and
/// Monte-Carlo g-factor maps are compared at each level. Noise is added to
/// both the undersampled and the fully-sampled reference data (same phantom
/// seed, scaled draws).
pub fn snr_sweep(
    base: &PhantomSpec,
    recon: &ReconKind<'_>,
    cfg: &SweepConfig,
) -> Result<Vec<SweepEntry>> {
    let mut out = Vec::new();
    for &scale in &cfg.sigma_scales {
        let mut spec = base.clone();
        spec.sigma = base.sigma * scale;
        let d = generate(&spec)?;
        let (_, acs) = undersample(&d)?;
        let s0 = comb_input(&d)?;
        let net = match recon {
            ReconKind::Grappa(gc) => {
                let set = calibrate(&acs, &d.pattern, gc)?;
                grappa_as_network(&set, spec.coils)
            }
            ReconKind::Raki {
                spec: net_spec,
                train: tc,
            } => train(&s0, &acs, d.pattern.acs.0, net_spec, tc)
                .map_err(|e| match e {
                    Error::Divergence { epoch } => Error::Divergence { epoch },
                    other => other,
                })?,
        };
        // native-grid quality metrics against the combined truth
        let roi_native = roi_mask(&d, cfg.roi_threshold)?;
        let p_native = coil_combine_weights(&d, &roi_native)?;
        let recon_img = idft2(&infer_kspace(&s0, &net)?);
        let combined = combine_image(&recon_img, &p_native)?;
        let truth = combine_image(&d.truth_image, &p_native)?;
        let metrics = evaluate(
            &magnitude(&combined),
            &magnitude(&truth),
            &roi_native,
            &SsimConfig::default(),
        )?;
        // cropped-grid noise analysis
        let ctx = prepare_analysis(&spec, &d, &net, cfg.analysis_grid, cfg.roi_threshold)?;
        let j_acc = combined_rows(&ctx.params, &ctx.combine, &ChainConfig::default())?;
        let eye = identity_cov(spec.coils);
        let g_analytical = gfactor_analytical(
            &j_acc,
            &ctx.combine,
            &eye,
            spec.r,
            Some(&ctx.roi),
            GMethod::Analytical,
        )?;
        let op = ReconOperator::Frozen {
            net: &net,
            masks: &ctx.masks,
            combine: &ctx.combine,
        };
        let mc = gfactor_montecarlo(&op, &ctx.s0, &ctx.full, &ctx.combine, &cfg.mc, spec.r)?;
        let gap = gap_statistics(&g_analytical, &mc.g, &ctx.roi)?;
        out.push(SweepEntry {
            sigma_scale: scale,
            sigma: spec.sigma,
            metrics,
            g_analytical,
            g_mc: mc.g,
            snr: mc.snr,
            gap,
        });
    }
    Ok(out)
}

/// Identity coil covariance (the pre-whitened convention).
pub fn identity_cov(c: usize) -> Array2<C64> {
    Array2::from_shape_fn((c, c), |(i, j)| {
        C64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_form::build_params;
    use crate::kspace_ops::comb_select;
    use crate::raki::{Activation, TrainReport};
    use crate::testutil::random_kspace;
    use ndarray::Array3 as NdArray3;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn uniform_combine(nx: usize, ny: usize, c: usize) -> Array2Combine {
        NdArray3::from_elem((nx, ny, c), C64::new(1.0 / c as f64, 0.0))
    }

    fn identity_net(coils: usize) -> TrainedNetwork {
        let spec = NetworkSpec {
            coils,
            r: 1,
            hidden_channels: vec![],
            hidden_kernels: vec![],
            final_kernel: (1, 1),
            slope: 0.1,
            activation: Activation::Identity,
        };
        let (hidden, finals) = spec.init_kernels(0).unwrap();
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

    fn grappa_toy() -> (Dataset, GrappaKernelSet) {
        let spec = PhantomSpec {
            grid: (8, 8),
            coils: 2,
            r: 2,
            n_acs: 8,
            seed: 300,
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
        (d, set)
    }

    #[test]
    fn identity_reconstruction_gives_unit_g() {
        let net = identity_net(2);
        let s0 = random_kspace(8, 8, 2, 301);
        let p = uniform_combine(8, 8, 2);
        let params = build_params(&s0, &net, &p).unwrap();
        let j = combined_rows(&params, &p, &ChainConfig::default()).unwrap();
        let g = gfactor_analytical(&j, &p, &identity_cov(2), 1, None, GMethod::Analytical)
            .unwrap();
        for v in g.values.iter() {
            assert!((v - 1.0).abs() < 1e-10, "g = {v}");
        }
        assert_eq!(g.method, GMethod::Analytical);
    }

    #[test]
    fn combine_scaling_cancels_in_g() {
        let (d, set) = grappa_toy();
        let net = grappa_as_network(&set, 2);
        let s0 = comb_select(&d.full_kspace, 2, 0).unwrap();
        let roi = roi_mask(&d, 0.2).unwrap();
        let p = coil_combine_weights(&d, &roi).unwrap();
        let params = build_params(&s0, &net, &p).unwrap();
        let j = combined_rows(&params, &p, &ChainConfig::default()).unwrap();
        let g1 =
            gfactor_analytical(&j, &p, &identity_cov(2), 2, Some(&roi), GMethod::Analytical)
                .unwrap();
        let alpha = C64::new(-2.5, 1.25);
        let p_scaled = p.mapv(|z| z * alpha);
        let params2 = build_params(&s0, &net, &p_scaled).unwrap();
        let j2 = combined_rows(&params2, &p_scaled, &ChainConfig::default()).unwrap();
        let g2 = gfactor_analytical(
            &j2,
            &p_scaled,
            &identity_cov(2),
            2,
            Some(&roi),
            GMethod::Analytical,
        )
        .unwrap();
        for (a, b) in g1.values.iter().zip(g2.values.iter()) {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn analytical_rejects_bad_covariance() {
        let net = identity_net(2);
        let s0 = random_kspace(4, 4, 2, 302);
        let p = uniform_combine(4, 4, 2);
        let params = build_params(&s0, &net, &p).unwrap();
        let j = combined_rows(&params, &p, &ChainConfig::default()).unwrap();
        let mut cov = identity_cov(2);
        cov[[0, 1]] = C64::new(0.5, 0.1); // not Hermitian
        assert!(gfactor_analytical(&j, &p, &cov, 1, None, GMethod::Analytical).is_err());
        let mut cov = identity_cov(2);
        cov[[0, 0]] = C64::new(-1.0, 0.0); // not PSD
        cov[[0, 1]] = C64::new(0.0, 0.0);
        assert!(gfactor_analytical(&j, &p, &cov, 1, None, GMethod::Analytical).is_err());
    }

    #[test]
    fn montecarlo_identity_g_is_one_within_sampling_bound() {
        let spec = PhantomSpec {
            grid: (8, 8),
            coils: 2,
            r: 1,
            n_acs: 4,
            seed: 303,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        let roi = roi_mask(&d, 0.2).unwrap();
        let p = coil_combine_weights(&d, &roi).unwrap();
        let op = ReconOperator::Identity { combine: &p };
        let cfg = MonteCarloConfig {
            n_replicas: 400,
            sigma: 0.01,
            seed: 304,
        };
        let out =
            gfactor_montecarlo(&op, &d.full_kspace, &d.full_kspace, &p, &cfg, 1).unwrap();
        let bound = 3.0 / (2.0 * cfg.n_replicas as f64).sqrt();
        for (i, &inside) in roi.indexed_iter() {
            if inside {
                assert!(
                    (out.g.values[i] - 1.0).abs() < bound,
                    "g = {} at {:?}",
                    out.g.values[i],
                    i
                );
            }
        }
        assert_eq!(out.g.method, GMethod::MonteCarlo);
    }

    #[test]
    fn zero_noise_is_degenerate() {
        let spec = PhantomSpec {
            grid: (8, 8),
            coils: 2,
            r: 1,
            n_acs: 4,
            seed: 305,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        let p = uniform_combine(8, 8, 2);
        let op = ReconOperator::Identity { combine: &p };
        let cfg = MonteCarloConfig {
            n_replicas: 16,
            sigma: 0.0,
            seed: 306,
        };
        let err = gfactor_montecarlo(&op, &d.full_kspace, &d.full_kspace, &p, &cfg, 1);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn replica_stacks_are_deterministic_with_unique_seeds() {
        let spec = PhantomSpec {
            grid: (8, 8),
            coils: 2,
            r: 1,
            n_acs: 4,
            seed: 307,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        let p = uniform_combine(8, 8, 2);
        let op = ReconOperator::Identity { combine: &p };
        let cfg = MonteCarloConfig {
            n_replicas: 32,
            sigma: 0.05,
            seed: 308,
        };
        let a = montecarlo_stack(&op, &d.full_kspace, &cfg).unwrap();
        let b = montecarlo_stack(&op, &d.full_kspace, &cfg).unwrap();
        assert_eq!(a.images, b.images);
        let unique: std::collections::HashSet<_> = a.seeds.iter().collect();
        assert_eq!(unique.len(), a.seeds.len());
        assert_eq!(a.mode, MaskMode::Frozen);
    }

    #[test]
    fn grappa_analytical_matches_montecarlo() {
        let (d, set) = grappa_toy();
        let net = grappa_as_network(&set, 2);
        let s0 = comb_select(&d.full_kspace, 2, 0).unwrap();
        let roi = roi_mask(&d, 0.2).unwrap();
        let p = coil_combine_weights(&d, &roi).unwrap();
        let params = build_params(&s0, &net, &p).unwrap();
        let j = combined_rows(&params, &p, &ChainConfig::default()).unwrap();
        let g_ana =
            gfactor_analytical(&j, &p, &identity_cov(2), 2, Some(&roi), GMethod::Analytical)
                .unwrap();
        let op = ReconOperator::Grappa {
            set: &set,
            combine: &p,
        };
        let cfg = MonteCarloConfig {
            n_replicas: 1000,
            sigma: 0.005,
            seed: 309,
        };
        let mc = gfactor_montecarlo(&op, &s0, &d.full_kspace, &p, &cfg, 2).unwrap();
        let gap = gap_statistics(&g_ana, &mc.g, &roi).unwrap();
        assert!(
            gap.median_rel_gap < 0.05,
            "median relative gap {}",
            gap.median_rel_gap
        );
        assert!(gap.voxels > 10);
    }

    #[test]
    fn normality_accepts_normal_and_rejects_uniform() {
        use rand::Rng;
        let n = 2000;
        let (nx, ny) = (10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(310);
        let mut normal_images = NdArray3::zeros((n, nx, ny));
        for i in 0..n {
            for x in 0..nx {
                for y in 0..ny {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    normal_images[[i, x, y]] = C64::new(10.0 + g, 0.0);
                }
            }
        }
        let nu = 10_000;
        let mut uniform_images = NdArray3::zeros((nu, 2, 2));
        let u = Uniform::new(0.0f64, 1.0);
        for i in 0..nu {
            for x in 0..2 {
                for y in 0..2 {
                    uniform_images[[i, x, y]] = C64::new(10.0 + rng.sample(u), 0.0);
                }
            }
        }
        let roi = Array2::from_elem((nx, ny), true);
        let stack = ReplicaStack {
            images: normal_images,
            seeds: (0..n as u64).collect(),
            mode: MaskMode::Frozen,
        };
        let rep = ks_normality(&stack, &roi, 0.05).unwrap();
        assert!(
            rep.fraction_passing > 0.9,
            "normal passing fraction {}",
            rep.fraction_passing
        );
        let stack_u = ReplicaStack {
            images: uniform_images,
            seeds: (0..nu as u64).collect(),
            mode: MaskMode::Frozen,
        };
        let roi_u = Array2::from_elem((2, 2), true);
        let rep_u = ks_normality(&stack_u, &roi_u, 0.05).unwrap();
        let max_p = rep_u.p_value.iter().cloned().fold(0.0f64, f64::max);
        assert!(max_p < 1e-6, "uniform samples should be rejected, max p {max_p}");
    }

    #[test]
    fn normality_flags_constant_voxels() {
        let n = 64;
        let images = NdArray3::from_elem((n, 3, 3), C64::new(2.0, 0.0));
        let mut roi = Array2::from_elem((3, 3), true);
        let stack = ReplicaStack {
            images,
            seeds: (0..n as u64).collect(),
            mode: MaskMode::Frozen,
        };
        let err = ks_normality(&stack, &roi, 0.05);
        assert!(matches!(err, Err(Error::Degenerate(_))));
        roi[[0, 0]] = true; // keep ROI shape, error is about all-degenerate voxels
    }

    #[test]
    fn gap_statistics_rejects_mixed_acceleration() {
        let a = GFactorMap {
            values: Array2::from_elem((2, 2), 1.0),
            method: GMethod::Analytical,
            r: 2,
        };
        let b = GFactorMap {
            values: Array2::from_elem((2, 2), 1.0),
            method: GMethod::MonteCarlo,
            r: 4,
        };
        let roi = Array2::from_elem((2, 2), true);
        assert!(gap_statistics(&a, &b, &roi).is_err());
    }

    #[test]
    fn sweep_runs_grappa_pipeline_end_to_end() {
        let base = PhantomSpec {
            grid: (16, 16),
            coils: 2,
            r: 2,
            n_acs: 10,
            sigma: 0.005,
            seed: 311,
            ..Default::default()
        };
        let gc = GrappaConfig {
            kx_g: 3,
            ky_g: 2,
            ..Default::default()
        };
        let cfg = SweepConfig {
            sigma_scales: vec![1.0, 3.0],
            mc: MonteCarloConfig {
                n_replicas: 200,
                sigma: 0.005,
                seed: 312,
            },
            analysis_grid: (16, 16),
            roi_threshold: 0.2,
        };
        let entries = snr_sweep(&base, &ReconKind::Grappa(&gc), &cfg).unwrap();
        assert_eq!(entries.len(), 2);
        for e in &entries {
            assert!(e.metrics.nmse.is_finite());
            assert!(e.g_analytical.values.iter().all(|v| v.is_finite()));
            assert!(e.g_mc.values.iter().all(|v| v.is_finite()));
            assert!(e.gap.median_rel_gap < 0.2, "gap {}", e.gap.median_rel_gap);
        }
    }
}
