//! Scan-specific complex-valued interpolation network: architecture,
//! split-activation (CLReLU) nonlinearity, full-batch ADAM training on the
//! auto-calibration block, and k-space inference.
//!
//! Layout conventions: hidden-layer kernels read only acquired comb lines
//! (all ky tap offsets are multiples of R); the final layer is one kernel per
//! missing-line offset r ∈ 1..R−1 whose ky offsets are ≡ r (mod R), so its
//! output lands exactly on the lines it must fill and no separate reassembly
//! step exists.

use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::ConvKernel;
use crate::error::{Error, Result};
use crate::fastconv::{conv_forward, conv_input_grad, conv_kernel_grad, Planar, SplitKernel};
use crate::tensor::{C64, KSpaceTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Leaky rectification applied separately to real and imaginary parts.
    CLReLU,
    /// No nonlinearity: the network is a composition of convolutions.
    Identity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub coils: usize,
    pub r: usize,
    pub hidden_channels: Vec<usize>,
    /// Tap counts `(kx, ky)` per hidden layer; ky taps are spaced by R.
    pub hidden_kernels: Vec<(usize, usize)>,
    /// Tap counts `(kx, ky)` of the final interpolation layer.
    pub final_kernel: (usize, usize),
    /// Negative-branch slope of the activation.
    pub slope: f64,
    pub activation: Activation,
}

impl NetworkSpec {
    /// Default architecture: two hidden layers of 128 and 64 channels with
    /// 5×2 (comb-dilated) and 1×1 kernels, 3×2 final layer, slope 0.1.
    pub fn standard(coils: usize, r: usize) -> Self {
        Self {
            coils,
            r,
            hidden_channels: vec![128, 64],
            hidden_kernels: vec![(5, 2), (1, 1)],
            final_kernel: (3, 2),
            slope: 0.1,
            activation: Activation::CLReLU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coils == 0 || self.r == 0 {
            return Err(Error::InvalidArgument(
                "coil count and acceleration must be positive".into(),
            ));
        }
        if !(self.slope > 0.0 && self.slope <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "activation slope must lie in (0, 1], got {}",
                self.slope
            )));
        }
        if self.hidden_channels.len() != self.hidden_kernels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} hidden channel counts vs {} hidden kernel shapes",
                self.hidden_channels.len(),
                self.hidden_kernels.len()
            )));
        }
        for (i, ((kx, ky), &nc)) in self
            .hidden_kernels
            .iter()
            .zip(self.hidden_channels.iter())
            .enumerate()
        {
            if *kx == 0 || *ky == 0 || nc == 0 {
                return Err(Error::InvalidArgument(format!(
                    "hidden layer {i} has empty kernel or zero channels"
                )));
            }
        }
        if self.final_kernel.0 == 0 || self.final_kernel.1 == 0 {
            return Err(Error::InvalidArgument("empty final kernel".into()));
        }
        Ok(())
    }

    /// Input channels of hidden layer `n`.
    fn cin(&self, n: usize) -> usize {
        if n == 0 {
            self.coils
        } else {
            self.hidden_channels[n - 1]
        }
    }

    fn last_channels(&self) -> usize {
        *self.hidden_channels.last().unwrap_or(&self.coils)
    }

    fn hidden_offsets(&self, n: usize) -> (Vec<i64>, Vec<i64>) {
        let (kx, ky) = self.hidden_kernels[n];
        let off_x = (0..kx as i64).map(|i| i - (kx / 2) as i64).collect();
        let off_y = (0..ky as i64)
            .map(|j| (j - (ky / 2) as i64) * self.r as i64)
            .collect();
        (off_x, off_y)
    }

    fn final_offsets(&self, offset_r: usize) -> (Vec<i64>, Vec<i64>) {
        let (kx, ky) = self.final_kernel;
        let off_x = (0..kx as i64).map(|i| i - (kx / 2) as i64).collect();
        let off_y = (0..ky as i64)
            .map(|j| offset_r as i64 + (j - (ky / 2) as i64) * self.r as i64)
            .collect();
        (off_x, off_y)
    }

    /// Seeded complex Glorot-style initialization (independent real and
    /// imaginary parts, variance 1/(fan_in + fan_out) each).
    pub fn init_kernels(&self, seed: u64) -> Result<(Vec<ConvKernel>, Vec<ConvKernel>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: (usize, usize, usize, usize)| -> Array4<C64> {
            let n_taps = shape.0 * shape.1;
            let sigma = (1.0 / ((shape.2 + shape.3) * n_taps) as f64).sqrt();
            Array4::from_shape_fn(shape, |_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                C64::new(re * sigma, im * sigma)
            })
        };
        let mut hidden = Vec::new();
        for n in 0..self.hidden_channels.len() {
            let (kx, ky) = self.hidden_kernels[n];
            let taps = draw((kx, ky, self.cin(n), self.hidden_channels[n]));
            let (off_x, off_y) = self.hidden_offsets(n);
            hidden.push(ConvKernel::new(taps, off_x, off_y)?);
        }
        let mut finals = Vec::new();
        for r in 1..self.r {
            let (kx, ky) = self.final_kernel;
            let taps = draw((kx, ky, self.last_channels(), self.coils));
            let (off_x, off_y) = self.final_offsets(r);
            finals.push(ConvKernel::new(taps, off_x, off_y)?);
        }
        Ok((hidden, finals))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub trajectory: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedNetwork {
    pub spec: NetworkSpec,
    pub hidden: Vec<ConvKernel>,
    /// One kernel per missing-line offset r ∈ 1..R−1; output channel c of
    /// kernel r is the interpolated coil c on lines ky ≡ r (mod R).
    pub final_per_offset: Vec<ConvKernel>,
    pub report: TrainReport,
}

/// Split leaky rectification (scalar): each of the real and imaginary parts
/// passes when positive and is scaled by `a` otherwise.
pub fn clrelu_scalar(z: C64, a: f64) -> C64 {
    C64::new(
        if z.re > 0.0 { z.re } else { a * z.re },
        if z.im > 0.0 { z.im } else { a * z.im },
    )
}

/// Elementwise split leaky rectification on a complex array.
pub fn clrelu(x: &Array3<C64>, a: f64) -> Array3<C64> {
    x.mapv(|z| clrelu_scalar(z, a))
}

fn clrelu_planar(z: &Planar, a: f64) -> Planar {
    Planar {
        re: z.re.mapv(|q| if q > 0.0 { q } else { a * q }),
        im: z.im.mapv(|q| if q > 0.0 { q } else { a * q }),
    }
}

/// Branch indicator used in backprop: 1 where the part is positive, `a`
/// where it is ≤ 0 (the sub-derivative convention at exactly zero).
fn clrelu_branch(z: &Planar, a: f64) -> (Array2<f64>, Array2<f64>) {
    (
        z.re.mapv(|q| if q > 0.0 { 1.0 } else { a }),
        z.im.mapv(|q| if q > 0.0 { 1.0 } else { a }),
    )
}

fn planar_add(acc: &mut Planar, other: &Planar) {
    acc.re += &other.re;
    acc.im += &other.im;
}

/// Full forward pass on the whole grid.
pub struct ForwardPass {
    /// `C·(R−1)` channels; channel `(r−1)·C + c` holds coil `c` of the
    /// offset-`r` interpolation (nonzero only on lines ky ≡ r mod R for
    /// comb-only input).
    pub s_int: KSpaceTensor,
    /// Pre-activation of every hidden layer.
    pub pre_activations: Vec<KSpaceTensor>,
}

fn forward_planar(
    s0: &Planar,
    nx: usize,
    ny: usize,
    hidden: &[ConvKernel],
    finals: &[ConvKernel],
    spec: &NetworkSpec,
    hidden_rows: Option<&[usize]>,
    final_rows: Option<&[Vec<usize>]>,
) -> (Vec<Planar>, Vec<Planar>, Vec<Planar>) {
    let mut pre = Vec::with_capacity(hidden.len());
    let mut post = Vec::with_capacity(hidden.len());
    let mut cur = s0.clone();
    for k in hidden {
        let z = conv_forward(&cur, nx, ny, &k.split(), hidden_rows);
        cur = match spec.activation {
            Activation::CLReLU => clrelu_planar(&z, spec.slope),
            Activation::Identity => z.clone(),
        };
        pre.push(z);
        post.push(cur.clone());
    }
    let outs = finals
        .iter()
        .enumerate()
        .map(|(idx, k)| {
            let rows = final_rows.map(|fr| fr[idx].as_slice());
            conv_forward(&cur, nx, ny, &k.split(), rows)
        })
        .collect();
    (pre, post, outs)
}

/// Run the network on a zero-filled comb input, retaining hidden-layer
/// pre-activations for activation-mask extraction.
pub fn forward(s0: &KSpaceTensor, net: &TrainedNetwork) -> Result<ForwardPass> {
    net.spec.validate()?;
    if s0.coils() != net.spec.coils {
        return Err(Error::ChannelMismatch {
            input: s0.coils(),
            expected: net.spec.coils,
        });
    }
    let (nx, ny) = (s0.nx(), s0.ny());
    for k in net.hidden.iter().chain(net.final_per_offset.iter()) {
        k.check_fits(nx, ny)?;
    }
    let planar = Planar::from_complex(s0.data());
    let (pre, _, outs) = forward_planar(
        &planar,
        nx,
        ny,
        &net.hidden,
        &net.final_per_offset,
        &net.spec,
        None,
        None,
    );
    let c = net.spec.coils;
    let mut s_int = Array3::zeros((nx, ny, c * outs.len().max(1)));
    if outs.is_empty() {
        // R = 1: no interpolation channels; keep an all-zero block
        s_int = Array3::zeros((nx, ny, c));
    }
    for (idx, o) in outs.iter().enumerate() {
        let block = o.to_complex(nx, ny);
        s_int
            .slice_mut(ndarray::s![.., .., idx * c..(idx + 1) * c])
            .assign(&block);
    }
    Ok(ForwardPass {
        s_int: KSpaceTensor::new(s_int)?,
        pre_activations: pre
            .iter()
            .map(|p| KSpaceTensor::new(p.to_complex(nx, ny)))
            .collect::<Result<_>>()?,
    })
}

/// Fill missing lines: acquired comb lines pass through unchanged; lines
/// ky ≡ r (mod R) come from the offset-r output block. Measured lines that
/// are not on the comb (ACS interior) are NOT reinserted.
pub fn infer_kspace(s0: &KSpaceTensor, net: &TrainedNetwork) -> Result<KSpaceTensor> {
    let fp = forward(s0, net)?;
    let mut out = s0.data().clone();
    let c = net.spec.coils;
    for idx in 0..net.final_per_offset.len() {
        let block = fp.s_int.data().slice(ndarray::s![.., .., idx * c..(idx + 1) * c]);
        out += &block;
    }
    KSpaceTensor::new(out)
}

/// Per-offset training targets: global ky rows and the measured values.
struct Targets {
    rows: Vec<Vec<usize>>,
    values: Vec<Planar>,
    /// Total number of scalar complex residuals.
    count: usize,
}

fn build_targets(
    acs: &KSpaceTensor,
    acs_start: usize,
    spec: &NetworkSpec,
    nx: usize,
    ny: usize,
) -> Result<Targets> {
    let c = spec.coils;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    let mut count = 0;
    for r in 1..spec.r {
        let target_rows: Vec<usize> = (acs_start..acs_start + acs.ny())
            .filter(|ky| ky % spec.r == r && *ky < ny)
            .collect();
        if target_rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "ACS block contains no lines with ky ≡ {r} (mod {})",
                spec.r
            )));
        }
        let mut v = Array3::<C64>::zeros((nx, ny, c));
        for &ky in &target_rows {
            v.slice_mut(ndarray::s![.., ky, ..])
                .assign(&acs.data().slice(ndarray::s![.., ky - acs_start, ..]));
        }
        count += target_rows.len() * nx * c;
        rows.push(target_rows);
        values.push(Planar::from_complex(&v));
    }
    Ok(Targets { rows, values, count })
}

struct Gradients {
    hidden: Vec<Array4<C64>>,
    finals: Vec<Array4<C64>>,
}

fn taps_from_split_grads(
    grads: Vec<(Array2<f64>, Array2<f64>)>,
    shape: (usize, usize, usize, usize),
) -> Array4<C64> {
    let (nkx, nky, cin, cout) = shape;
    let mut out = Array4::zeros(shape);
    for i in 0..nkx {
        for j in 0..nky {
            let (ref gre, ref gim) = grads[i * nky + j];
            for a in 0..cin {
                for b in 0..cout {
                    out[[i, j, a, b]] = C64::new(gre[[a, b]], gim[[a, b]]);
                }
            }
        }
    }
    out
}

/// Mean squared complex residual over all targets, and (optionally) its
/// gradient with respect to every kernel tap.
fn loss_and_grads(
    hidden: &[ConvKernel],
    finals: &[ConvKernel],
    spec: &NetworkSpec,
    input: &Planar,
    nx: usize,
    ny: usize,
    comb_rows: &[usize],
    targets: &Targets,
    want_grads: bool,
) -> (f64, Option<Gradients>) {
    let split_hidden: Vec<SplitKernel> = hidden.iter().map(|k| k.split()).collect();
    let split_finals: Vec<SplitKernel> = finals.iter().map(|k| k.split()).collect();
    let (pre, post, outs) = forward_planar(
        input,
        nx,
        ny,
        hidden,
        finals,
        spec,
        Some(comb_rows),
        Some(&targets.rows),
    );

    let norm = targets.count as f64;
    let mut loss = 0.0;
    // residual pair-gradients per offset, nonzero on target rows only
    let mut gs: Vec<Planar> = Vec::with_capacity(outs.len());
    for (idx, out) in outs.iter().enumerate() {
        let mut g = Planar::zeros(nx * ny, spec.coils);
        for &ky in &targets.rows[idx] {
            for x in 0..nx {
                let v = x * ny + ky;
                for c in 0..spec.coils {
                    let dre = out.re[[v, c]] - targets.values[idx].re[[v, c]];
                    let dim = out.im[[v, c]] - targets.values[idx].im[[v, c]];
                    loss += dre * dre + dim * dim;
                    g.re[[v, c]] = 2.0 * dre / norm;
                    g.im[[v, c]] = 2.0 * dim / norm;
                }
            }
        }
        gs.push(g);
    }
    loss /= norm;
    if !want_grads {
        return (loss, None);
    }

    let last = if hidden.is_empty() { input } else { &post[hidden.len() - 1] };
    let mut final_grads = Vec::with_capacity(finals.len());
    let mut g_last = Planar::zeros(nx * ny, spec.last_channels());
    for (idx, k) in split_finals.iter().enumerate() {
        let rows = Some(targets.rows[idx].as_slice());
        let gw = conv_kernel_grad(last, &gs[idx], nx, ny, k, rows);
        final_grads.push(taps_from_split_grads(gw, finals[idx].taps().dim()));
        planar_add(&mut g_last, &conv_input_grad(&gs[idx], nx, ny, k, rows));
    }

    let mut hidden_grads = vec![Array4::zeros((0, 0, 0, 0)); hidden.len()];
    let mut g = g_last;
    for n in (0..hidden.len()).rev() {
        // through the activation
        let gz = match spec.activation {
            Activation::CLReLU => {
                let (mre, mim) = clrelu_branch(&pre[n], spec.slope);
                Planar {
                    re: &g.re * &mre,
                    im: &g.im * &mim,
                }
            }
            Activation::Identity => g,
        };
        let below = if n == 0 { input } else { &post[n - 1] };
        let rows = Some(comb_rows);
        let gw = conv_kernel_grad(below, &gz, nx, ny, &split_hidden[n], rows);
        hidden_grads[n] = taps_from_split_grads(gw, hidden[n].taps().dim());
        g = conv_input_grad(&gz, nx, ny, &split_hidden[n], rows);
    }
    (
        loss,
        Some(Gradients {
            hidden: hidden_grads,
            finals: final_grads,
        }),
    )
}

struct AdamState {
    m: Array4<C64>,
    v: Array4<C64>,
}

fn adam_step(
    w: &mut Array4<C64>,
    g: &Array4<C64>,
    st: &mut AdamState,
    cfg: &TrainConfig,
    t: usize,
) {
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for ((wi, gi), (mi, vi)) in w
        .iter_mut()
        .zip(g.iter())
        .zip(st.m.iter_mut().zip(st.v.iter_mut()))
    {
        // real and imaginary parts are independent real parameters
        mi.re = b1 * mi.re + (1.0 - b1) * gi.re;
        mi.im = b1 * mi.im + (1.0 - b1) * gi.im;
        vi.re = b2 * vi.re + (1.0 - b2) * gi.re * gi.re;
        vi.im = b2 * vi.im + (1.0 - b2) * gi.im * gi.im;
        wi.re -= cfg.learning_rate * (mi.re / bc1) / ((vi.re / bc2).sqrt() + cfg.epsilon);
        wi.im -= cfg.learning_rate * (mi.im / bc1) / ((vi.im / bc2).sqrt() + cfg.epsilon);
    }
}

/// Train on the ACS block: the input is the full-grid zero-filled comb
/// (`comb`), the targets are the measured ACS lines with ky ≡ r (mod R),
/// `acs_start` being the global ky index of the first ACS line.
pub fn train(
    comb: &KSpaceTensor,
    acs: &KSpaceTensor,
    acs_start: usize,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<TrainedNetwork> {
    spec.validate()?;
    if cfg.epochs == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(
            "training needs epochs ≥ 1 and a positive learning rate".into(),
        ));
    }
    if comb.coils() != spec.coils || acs.coils() != spec.coils {
        return Err(Error::ChannelMismatch {
            input: comb.coils(),
            expected: spec.coils,
        });
    }
    let (nx, ny) = (comb.nx(), comb.ny());
    if ny % spec.r != 0 {
        return Err(Error::CombMismatch { r: spec.r, ny });
    }
    let (mut hidden, mut finals) = spec.init_kernels(cfg.seed)?;
    for k in hidden.iter().chain(finals.iter()) {
        k.check_fits(nx, ny)?;
    }
    let targets = build_targets(acs, acs_start, spec, nx, ny)?;
    let comb_rows: Vec<usize> = (0..ny).step_by(spec.r).collect();
    let input = Planar::from_complex(comb.data());

    let mut adam: Vec<AdamState> = hidden
        .iter()
        .chain(finals.iter())
        .map(|k| AdamState {
            m: Array4::zeros(k.taps().dim()),
            v: Array4::zeros(k.taps().dim()),
        })
        .collect();

    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let (loss, grads) = loss_and_grads(
            &hidden, &finals, spec, &input, nx, ny, &comb_rows, &targets, true,
        );
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if epoch == 0 {
            initial_loss = loss;
        }
        trajectory.push(loss);
        let grads = grads.expect("gradients requested");
        let t = epoch + 1;
        let n_hidden = hidden.len();
        for (n, k) in hidden.iter_mut().enumerate() {
            adam_step(k.taps_mut(), &grads.hidden[n], &mut adam[n], cfg, t);
        }
        for (idx, k) in finals.iter_mut().enumerate() {
            adam_step(
                k.taps_mut(),
                &grads.finals[idx],
                &mut adam[n_hidden + idx],
                cfg,
                t,
            );
        }
    }
    let (final_loss, _) = loss_and_grads(
        &hidden, &finals, spec, &input, nx, ny, &comb_rows, &targets, false,
    );
    if !final_loss.is_finite() {
        return Err(Error::Divergence { epoch: cfg.epochs });
    }
    Ok(TrainedNetwork {
        spec: spec.clone(),
        hidden,
        final_per_offset: finals,
        report: TrainReport {
            initial_loss,
            final_loss,
            epochs: cfg.epochs,
            trajectory,
        },
    })
}

/// Evaluate the training loss of an explicit parameter set (shared by the
/// finite-difference gradient checks).
#[cfg(test)]
pub(crate) fn eval_loss(
    hidden: &[ConvKernel],
    finals: &[ConvKernel],
    spec: &NetworkSpec,
    comb: &KSpaceTensor,
    acs: &KSpaceTensor,
    acs_start: usize,
) -> f64 {
    let (nx, ny) = (comb.nx(), comb.ny());
    let targets = build_targets(acs, acs_start, spec, nx, ny).unwrap();
    let comb_rows: Vec<usize> = (0..ny).step_by(spec.r).collect();
    let input = Planar::from_complex(comb.data());
    loss_and_grads(hidden, finals, spec, &input, nx, ny, &comb_rows, &targets, false).0
}

#[cfg(test)]
pub(crate) fn eval_grads(
    hidden: &[ConvKernel],
    finals: &[ConvKernel],
    spec: &NetworkSpec,
    comb: &KSpaceTensor,
    acs: &KSpaceTensor,
    acs_start: usize,
) -> (Vec<Array4<C64>>, Vec<Array4<C64>>) {
    let (nx, ny) = (comb.nx(), comb.ny());
    let targets = build_targets(acs, acs_start, spec, nx, ny).unwrap();
    let comb_rows: Vec<usize> = (0..ny).step_by(spec.r).collect();
    let input = Planar::from_complex(comb.data());
    let (_, g) = loss_and_grads(hidden, finals, spec, &input, nx, ny, &comb_rows, &targets, true);
    let g = g.unwrap();
    (g.hidden, g.finals)
}

/// Manifest entry for one serialized kernel.
#[derive(Serialize, Deserialize)]
struct KernelRecord {
    file: String,
    shape: [usize; 4],
    off_x: Vec<i64>,
    off_y: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkManifest {
    spec: NetworkSpec,
    report: TrainReport,
    hidden: Vec<KernelRecord>,
    final_per_offset: Vec<KernelRecord>,
}

fn save_kernel(dir: &Path, name: &str, k: &ConvKernel) -> Result<KernelRecord> {
    let (nkx, nky, cin, cout) = k.taps().dim();
    let flat = Array3::from_shape_fn((nkx, nky, cin * cout), |(i, j, c)| {
        k.taps()[[i, j, c / cout, c % cout]]
    });
    let file = format!("{name}.c128");
    crate::io::write_raw(&dir.join(&file), &flat)?;
    Ok(KernelRecord {
        file,
        shape: [nkx, nky, cin, cout],
        off_x: k.off_x().to_vec(),
        off_y: k.off_y().to_vec(),
    })
}

fn load_kernel(dir: &Path, rec: &KernelRecord) -> Result<ConvKernel> {
    let [nkx, nky, cin, cout] = rec.shape;
    let flat = crate::io::read_raw(&dir.join(&rec.file), [nkx, nky, cin * cout])?;
    let taps = Array4::from_shape_fn((nkx, nky, cin, cout), |(i, j, a, b)| {
        flat[[i, j, a * cout + b]]
    });
    ConvKernel::new(taps, rec.off_x.clone(), rec.off_y.clone())
}

/// Persist a trained network as per-layer tensor files plus a JSON manifest.
pub fn save_network(dir: &Path, net: &TrainedNetwork) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = NetworkManifest {
        spec: net.spec.clone(),
        report: net.report.clone(),
        hidden: net
            .hidden
            .iter()
            .enumerate()
            .map(|(n, k)| save_kernel(dir, &format!("hidden_{n}"), k))
            .collect::<Result<_>>()?,
        final_per_offset: net
            .final_per_offset
            .iter()
            .enumerate()
            .map(|(r, k)| save_kernel(dir, &format!("final_{}", r + 1), k))
            .collect::<Result<_>>()?,
    };
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("network.json"))?),
        &manifest,
    )?;
    Ok(())
}

pub fn load_network(dir: &Path) -> Result<TrainedNetwork> {
    let manifest: NetworkManifest = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(dir.join("network.json"))?,
    ))?;
    Ok(TrainedNetwork {
        hidden: manifest
            .hidden
            .iter()
            .map(|r| load_kernel(dir, r))
            .collect::<Result<_>>()?,
        final_per_offset: manifest
            .final_per_offset
            .iter()
            .map(|r| load_kernel(dir, r))
            .collect::<Result<_>>()?,
        spec: manifest.spec,
        report: manifest.report,
    })
}
