//! Property-based invariants of the core transforms: Fourier round trips,
//! convolution linearity, activation-mask identities, frozen-map linearity,
//! noise whitening, and metric ranges.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use recon_core::conv::{circ_conv2, ConvKernel};
use recon_core::image_form::build_params;
use recon_core::image_form::infer_image_space;
use recon_core::metrics::{nmse, psnr, ssim, SsimConfig};
use recon_core::noise_model::NoiseModel;
use recon_core::raki::{clrelu_scalar, Activation, NetworkSpec, TrainReport, TrainedNetwork};
use recon_core::tensor::{dft2, idft2, rel_max_deviation, C64, ImageTensor, KSpaceTensor};

const NX: usize = 4;
const NY: usize = 4;
const COILS: usize = 2;

fn complex_field(n: usize) -> impl Strategy<Value = Vec<C64>> {
    prop::collection::vec(
        (-10.0f64..10.0, -10.0f64..10.0).prop_map(|(re, im)| C64::new(re, im)),
        n,
    )
}

fn to_kspace(v: &[C64]) -> KSpaceTensor {
    KSpaceTensor::new(
        Array3::from_shape_vec((NX, NY, COILS), v.to_vec()).expect("shape"),
    )
    .expect("finite")
}

fn scalar() -> impl Strategy<Value = C64> {
    (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(re, im)| C64::new(re, im))
}

proptest! {
    /// The forward and inverse transforms are mutual inverses.
    #[test]
    fn dft_round_trip(v in complex_field(NX * NY * COILS)) {
        let s = to_kspace(&v);
        let back = dft2(&idft2(&s));
        prop_assert!(rel_max_deviation(s.data(), back.data()) < 1e-12);
    }

    /// The transforms are unitary: they preserve the total energy.
    #[test]
    fn dft_preserves_energy(v in complex_field(NX * NY * COILS)) {
        let s = to_kspace(&v);
        let img = idft2(&s);
        let ek: f64 = s.data().iter().map(|z| z.norm_sqr()).sum();
        let ei: f64 = img.data().iter().map(|z| z.norm_sqr()).sum();
        prop_assert!((ek - ei).abs() <= 1e-10 * ek.max(1.0));
    }

    /// Circular convolution is linear in its input.
    #[test]
    fn convolution_is_linear(
        a in complex_field(NX * NY * COILS),
        b in complex_field(NX * NY * COILS),
        taps in complex_field(3 * 2 * COILS * COILS),
        alpha in scalar(),
    ) {
        let kernel = ConvKernel::new(
            ndarray::Array4::from_shape_vec((3, 2, COILS, COILS), taps).expect("taps"),
            vec![-1, 0, 1],
            vec![0, 1],
        )
        .expect("kernel");
        let sa = to_kspace(&a);
        let sb = to_kspace(&b);
        let mixed = KSpaceTensor::new(sa.data().mapv(|z| z * alpha) + sb.data())
            .expect("mixed input");
        let lhs = circ_conv2(&mixed, &kernel).expect("conv");
        let rhs = circ_conv2(&sa, &kernel).expect("conv").data().mapv(|z| z * alpha)
            + circ_conv2(&sb, &kernel).expect("conv").data();
        let scale = lhs.data().iter().map(|z| z.norm()).fold(1.0, f64::max);
        let dev = lhs
            .data()
            .iter()
            .zip(rhs.iter())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        prop_assert!(dev <= 1e-10 * scale);
    }

    /// The activation mask reproduces the rectifier as a multiplication, and
    /// its magnitude is bounded by the slope and √2 limits.
    #[test]
    fn activation_mask_identity_and_bounds(
        re in -10.0f64..10.0,
        im in -10.0f64..10.0,
        slope in 0.05f64..1.0,
    ) {
        let z = C64::new(re, im);
        prop_assume!(z.norm() > 1e-6);
        let rectified = clrelu_scalar(z, slope);
        let mask = rectified * z.conj() / z.norm_sqr();
        prop_assert!((mask * z - rectified).norm() <= 1e-12 * rectified.norm().max(1.0));
        let lo = slope / 2.0f64.sqrt();
        let hi = 2.0f64.sqrt();
        prop_assert!(mask.norm() >= lo - 1e-12 && mask.norm() <= hi + 1e-12);
    }

    /// With the masks frozen, the image-space reconstruction is an exactly
    /// linear map of the input image.
    #[test]
    fn frozen_reconstruction_is_linear(
        a in complex_field(NX * NY * COILS),
        b in complex_field(NX * NY * COILS),
        alpha in scalar(),
        seed in 0u64..1000,
    ) {
        let spec = NetworkSpec {
            coils: COILS,
            r: 2,
            hidden_channels: vec![3],
            hidden_kernels: vec![(3, 2)],
            final_kernel: (3, 2),
            slope: 0.1,
            activation: Activation::CLReLU,
        };
        let (hidden, final_per_offset) = spec.init_kernels(seed).expect("kernels");
        let net = TrainedNetwork {
            spec,
            hidden,
            final_per_offset,
            report: TrainReport {
                initial_loss: 0.0,
                final_loss: 0.0,
                epochs: 0,
                trajectory: vec![],
            },
        };
        let sa = to_kspace(&a);
        let combine = Array3::from_elem((NX, NY, COILS), C64::new(0.5, -0.25));
        let params = build_params(&sa, &net, &combine).expect("params");
        let ia = idft2(&sa);
        let ib = idft2(&to_kspace(&b));
        let mixed = ImageTensor::new(ia.data().mapv(|z| z * alpha) + ib.data()).expect("mixed");
        let (lhs, _) = infer_image_space(&mixed, &params).expect("recon");
        let ra = infer_image_space(&ia, &params).expect("recon").0;
        let rb = infer_image_space(&ib, &params).expect("recon").0;
        let rhs = ra.data().mapv(|z| z * alpha) + rb.data();
        let scale = lhs.data().iter().map(|z| z.norm()).fold(1.0, f64::max);
        let dev = lhs
            .data()
            .iter()
            .zip(rhs.iter())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        prop_assert!(dev <= 1e-10 * scale);
    }

    /// Whitening inverts coloring exactly.
    #[test]
    fn whitening_inverts_coloring(
        v in complex_field(NX * NY * COILS),
        rho in 0.0f64..0.9,
    ) {
        let model = NoiseModel::exponential(COILS, rho).expect("model");
        let s = to_kspace(&v);
        let round = model.prewhiten(&model.color(&s).expect("color")).expect("whiten");
        prop_assert!(rel_max_deviation(s.data(), round.data()) < 1e-10);
    }

    /// Metric sanity: NMSE is non-negative and zero on identical images,
    /// SSIM is at most 1 and exactly 1 on identical images, PSNR reports its
    /// infinite flag consistently.
    #[test]
    fn metric_ranges(v in prop::collection::vec(0.01f64..10.0, NX * NY)) {
        let img = Array2::from_shape_vec((NX, NY), v).expect("shape");
        let roi = Array2::from_elem((NX, NY), true);
        let cfg = SsimConfig { window: 3, ..Default::default() };
        prop_assert_eq!(nmse(&img, &img, &roi).expect("nmse"), 0.0);
        let s = ssim(&img, &img, &roi, &cfg).expect("ssim");
        prop_assert!((s - 1.0).abs() < 1e-12);
        let (p, inf) = psnr(&img, &img, &roi).expect("psnr");
        prop_assert!(inf && p.is_infinite());
        let shifted = img.mapv(|x| x + 1.0);
        let n = nmse(&shifted, &img, &roi).expect("nmse");
        prop_assert!(n > 0.0);
        let (p2, inf2) = psnr(&shifted, &img, &roi).expect("psnr");
        prop_assert!(!inf2 && p2.is_finite());
        let s2 = ssim(&shifted, &img, &roi, &cfg).expect("ssim");
        prop_assert!(s2 <= 1.0 + 1e-12);
    }
}
