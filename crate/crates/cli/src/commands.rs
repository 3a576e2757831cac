//! The five experiment commands. Each one writes a resolved-config snapshot,
//! its artifacts, a wall-clock report, and a manifest referencing every file.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use recon_core::grappa::{calibrate, GrappaConfig, GrappaKernelSet};
use recon_core::image_form::{
    build_params, coil_combine_weights, grappa_as_network, infer_image_space,
};
use recon_core::jacobian::{apply_combine, combined_rows, fd_jacobian, ChainConfig, FdMode};
use recon_core::kspace_ops::rss;
use recon_core::metrics::{evaluate, magnitude, MetricsReport, SsimConfig};
use recon_core::noise::{
    gap_statistics, gfactor_analytical, gfactor_montecarlo, identity_cov, ks_normality,
    montecarlo_stack, prepare_analysis, snr_sweep, GMethod, MonteCarloConfig,
    ReconKind, ReconOperator, SweepConfig,
};
use recon_core::raki::{
    infer_kspace, train, Activation, NetworkSpec, TrainConfig, TrainReport, TrainedNetwork,
};
use recon_core::sim::{comb_input, generate, roi_mask, undersample, Dataset, PhantomSpec};
use recon_core::tensor::{idft2, rel_max_deviation};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Method};
use crate::output::RunWriter;
use crate::CliError;

/// Everything resolved from the config that the pipelines need.
struct Resolved {
    phantom: PhantomSpec,
    grappa: GrappaConfig,
    net_spec: NetworkSpec,
    train_cfg: TrainConfig,
}

fn resolve(cfg: &ExperimentConfig) -> Resolved {
    let phantom = cfg.phantom.resolve();
    let grappa = cfg.grappa.resolve();
    let (net_spec, train_cfg) = cfg.raki.resolve(cfg.method, phantom.coils, phantom.r);
    Resolved {
        phantom,
        grappa,
        net_spec,
        train_cfg,
    }
}

fn out_dir(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(command))
}

/// Fully expanded configuration snapshot: reproduces the run byte-for-byte.
fn snapshot(cfg: &ExperimentConfig, r: &Resolved) -> Result<Value, CliError> {
    Ok(json!({
        "method": cfg.method.label(),
        "phantom": serde_json::to_value(&r.phantom)?,
        "grappa": {
            "kx_g": r.grappa.kx_g,
            "ky_g": r.grappa.ky_g,
            "lambda": r.grappa.lambda,
            "min_equation_factor": r.grappa.min_equation_factor,
        },
        "network": serde_json::to_value(&r.net_spec)?,
        "training": serde_json::to_value(&r.train_cfg)?,
        "sigma_scales": cfg.sigma_scales,
        "n_replicas": cfg.n_replicas,
        "replica_sigma": cfg.replica_sigma,
        "analysis_grid": cfg.analysis_grid,
        "roi_threshold": cfg.roi_threshold,
        "normality_alpha": cfg.normality_alpha,
        "seed": cfg.seed,
        "budget_bytes": cfg.budget_bytes,
        "threads": cfg.threads,
    }))
}

fn start(cfg: &ExperimentConfig, command: &'static str) -> Result<(RunWriter, Resolved), CliError> {
    let r = resolve(cfg);
    let mut w = RunWriter::create(&out_dir(cfg, command), command)?;
    w.write_json(
        "resolved_config.json",
        &snapshot(cfg, &r)?,
        "resolved configuration snapshot",
    )?;
    Ok((w, r))
}

/// Pass-through network: no hidden layers, no interpolation kernels. Used
/// when the sampling is already complete (R = 1).
fn identity_network(coils: usize) -> TrainedNetwork {
    TrainedNetwork {
        spec: NetworkSpec {
            coils,
            r: 1,
            hidden_channels: vec![],
            hidden_kernels: vec![],
            final_kernel: (1, 1),
            slope: 0.1,
            activation: Activation::Identity,
        },
        hidden: vec![],
        final_per_offset: vec![],
        report: TrainReport {
            initial_loss: 0.0,
            final_loss: 0.0,
            epochs: 0,
            trajectory: vec![],
        },
    }
}

/// Calibrate or train the configured method and express it as a network so
/// every downstream stage sees the same interface. The kernel set is kept
/// when the method is the calibrated linear one (the replica loop can then
/// replay plain kernel inference).
fn build_network(
    r: &Resolved,
    method: Method,
    d: &Dataset,
) -> Result<(TrainedNetwork, Option<GrappaKernelSet>), CliError> {
    if r.phantom.r == 1 {
        return Ok((identity_network(r.phantom.coils), None));
    }
    let (_, acs) = undersample(d)?;
    match method {
        Method::Grappa => {
            let set = calibrate(&acs, &d.pattern, &r.grappa)?;
            let net = grappa_as_network(&set, r.phantom.coils);
            Ok((net, Some(set)))
        }
        Method::Raki | Method::RakiLinear => {
            let s0 = comb_input(d)?;
            let net = train(&s0, &acs, d.pattern.acs.0, &r.net_spec, &r.train_cfg)?;
            Ok((net, None))
        }
    }
}

fn metrics_json(m: &MetricsReport) -> Value {
    json!({
        "nmse": m.nmse,
        "ssim": m.ssim,
        "psnr": if m.psnr_infinite { Value::Null } else { json!(m.psnr) },
        "psnr_infinite": m.psnr_infinite,
        "roi_voxels": m.roi_voxels,
    })
}

fn mc_config(cfg: &ExperimentConfig) -> MonteCarloConfig {
    MonteCarloConfig {
        n_replicas: cfg.n_replicas,
        sigma: cfg.replica_sigma,
        seed: cfg.seed,
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (mut w, r) = start(cfg, "generate")?;
    let t0 = Instant::now();
    let d = generate(&r.phantom)?;
    let sim_secs = t0.elapsed().as_secs_f64();
    let (under, acs) = undersample(&d)?;
    let comb = comb_input(&d)?;
    let seed = Some(d.seed);
    w.save_kspace("full_kspace.c128", &d.full_kspace, seed, "noisy fully sampled k-space")?;
    w.save_kspace("undersampled.c128", &under, seed, "undersampled k-space (measured lines only)")?;
    w.save_kspace("acs.c128", &acs, seed, "auto-calibration block")?;
    w.save_kspace("comb_input.c128", &comb, seed, "zero-filled comb input to reconstruction")?;
    w.save_image("truth_image.c128", &d.truth_image, None, "noise-free coil images")?;
    w.save_image("sensitivities.c128", &d.sensitivities, None, "coil sensitivity maps")?;
    w.write_map("truth_rss", &rss(d.truth_image.data()), "root-sum-of-squares truth magnitude")?;
    w.write_json(
        "dataset.json",
        &json!({
            "grid": [r.phantom.grid.0, r.phantom.grid.1],
            "coils": r.phantom.coils,
            "r": d.pattern.r,
            "acs_start": d.pattern.acs.0,
            "acs_lines": d.pattern.acs.1,
            "sigma": d.sigma,
            "noise_rho": r.phantom.noise_rho,
            "seed": d.seed,
        }),
        "dataset description",
    )?;
    w.write_timings(&json!({ "simulate_secs": sim_secs }))?;
    w.finish()
}

pub fn cmd_reconstruct(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (mut w, r) = start(cfg, "reconstruct")?;
    let d = generate(&r.phantom)?;
    let t_fit = Instant::now();
    let (net, _) = build_network(&r, cfg.method, &d)?;
    let fit_secs = t_fit.elapsed().as_secs_f64();

    let s0 = comb_input(&d)?;
    let roi = roi_mask(&d, cfg.roi_threshold)?;
    let combine = coil_combine_weights(&d, &roi)?;

    // both inference domains, plus their deviation (the equivalence contract)
    let t_inf = Instant::now();
    let recon_k = infer_kspace(&s0, &net)?;
    let recon_img_from_k = idft2(&recon_k);
    let params = build_params(&s0, &net, &combine)?;
    let (recon_img, combined) = infer_image_space(&idft2(&s0), &params)?;
    let infer_secs = t_inf.elapsed().as_secs_f64();
    let deviation = rel_max_deviation(recon_img_from_k.data(), recon_img.data());

    let reference = rss(d.truth_image.data());
    let recon_mag = magnitude(&combined);
    let metrics = evaluate(&recon_mag, &reference, &roi, &SsimConfig::default())?;
    let error_map = Array2::from_shape_fn(reference.dim(), |ix| (recon_mag[ix] - reference[ix]).abs());

    w.save_kspace("recon_kspace.c128", &recon_k, Some(d.seed), "interpolated k-space")?;
    w.save_image("recon_coil_images.c128", &recon_img, Some(d.seed), "unfolded coil images")?;
    w.write_map("recon_magnitude", &recon_mag, "combined reconstruction magnitude")?;
    w.write_map("error_map", &error_map, "absolute error vs noise-free reference")?;
    w.write_mask("roi", &roi, "evaluation region of interest")?;
    let mut report = metrics_json(&metrics);
    report["domain_deviation"] = json!(deviation);
    report["method"] = json!(cfg.method.label());
    report["r"] = json!(r.phantom.r);
    report["sigma"] = json!(r.phantom.sigma);
    report["seed"] = json!(d.seed);
    w.write_json("metrics.json", &report, "quality metrics and domain-equivalence check")?;
    w.write_csv(
        "metrics.csv",
        "method,r,sigma,seed,nmse,ssim,psnr,domain_deviation",
        &[format!(
            "{},{},{},{},{},{},{},{}",
            cfg.method.label(),
            r.phantom.r,
            r.phantom.sigma,
            d.seed,
            metrics.nmse,
            metrics.ssim,
            metrics.psnr,
            deviation
        )],
        "metrics ledger row",
    )?;
    w.write_timings(&json!({ "fit_secs": fit_secs, "infer_secs": infer_secs }))?;
    w.finish()
}

pub fn cmd_gfactor(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (mut w, r) = start(cfg, "gfactor")?;
    let d = generate(&r.phantom)?;
    let (net, _) = build_network(&r, cfg.method, &d)?;
    let grid = (cfg.analysis_grid[0], cfg.analysis_grid[1]);
    let ctx = prepare_analysis(&r.phantom, &d, &net, grid, cfg.roi_threshold)?;
    let eye = identity_cov(r.phantom.coils);

    let t = Instant::now();
    let chain_cfg = ChainConfig {
        budget_bytes: cfg.budget_bytes,
        batch_rows: None,
    };
    let j = combined_rows(&ctx.params, &ctx.combine, &chain_cfg)?;
    let g_ana = gfactor_analytical(&j, &ctx.combine, &eye, ctx.r, Some(&ctx.roi), GMethod::Analytical)?;
    let ana_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let op = ReconOperator::Frozen {
        net: &net,
        masks: &ctx.masks,
        combine: &ctx.combine,
    };
    let mc = gfactor_montecarlo(&op, &ctx.s0, &ctx.full, &ctx.combine, &mc_config(cfg), ctx.r)?;
    let mc_secs = t.elapsed().as_secs_f64();

    // finite differences probe the frozen image-space map, which is exactly
    // complex-linear, so real-axis response columns are the full Jacobian
    let t = Instant::now();
    let s0_img = idft2(&ctx.s0);
    let fd = fd_jacobian(
        |img| Ok(infer_image_space(img, &ctx.params)?.0),
        &s0_img,
        1e-5,
        FdMode::Frozen,
    )?;
    let j_fd = apply_combine(&fd.re_cols, &ctx.combine)?;
    let g_fd = gfactor_analytical(
        &j_fd,
        &ctx.combine,
        &eye,
        ctx.r,
        Some(&ctx.roi),
        GMethod::FiniteDifference,
    )?;
    let fd_secs = t.elapsed().as_secs_f64();

    w.write_map("g_analytical", &g_ana.values, "analytical g-factor map")?;
    w.write_map("g_montecarlo", &mc.g.values, "Monte-Carlo pseudo-replica g-factor map")?;
    w.write_map("g_finite_difference", &g_fd.values, "finite-difference g-factor map")?;
    w.write_map("snr", &mc.snr, "replica SNR map")?;
    w.write_map("replica_variance", &mc.variance, "replica magnitude variance map")?;
    w.write_mask("roi", &ctx.roi, "analysis region of interest")?;

    let (nx, ny) = g_ana.values.dim();
    let mut rows = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            if ctx.roi[[x, y]] {
                rows.push(format!(
                    "{x},{y},{},{},{}",
                    g_ana.values[[x, y]],
                    mc.g.values[[x, y]],
                    g_fd.values[[x, y]]
                ));
            }
        }
    }
    w.write_csv(
        "g_scatter.csv",
        "x,y,g_analytical,g_montecarlo,g_finite_difference",
        &rows,
        "per-voxel g-factor scatter data",
    )?;

    let gap_mc = gap_statistics(&g_ana, &mc.g, &ctx.roi)?;
    let gap_fd = gap_statistics(&g_ana, &g_fd, &ctx.roi)?;
    w.write_json(
        "summary.json",
        &json!({
            "method": cfg.method.label(),
            "r": ctx.r,
            "n_replicas": cfg.n_replicas,
            "analytical_vs_montecarlo": {
                "median_rel_gap": gap_mc.median_rel_gap,
                "p95_rel_gap": gap_mc.p95_rel_gap,
                "pearson": gap_mc.pearson,
            },
            "analytical_vs_finite_difference": {
                "median_rel_gap": gap_fd.median_rel_gap,
                "p95_rel_gap": gap_fd.p95_rel_gap,
                "pearson": gap_fd.pearson,
            },
            "roi_voxels": gap_mc.voxels,
        }),
        "cross-estimator agreement summary",
    )?;
    w.write_timings(&json!({
        "analytical_secs": ana_secs,
        "montecarlo_secs": mc_secs,
        "finite_difference_secs": fd_secs,
    }))?;
    w.finish()
}

pub fn cmd_normality(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (mut w, r) = start(cfg, "normality")?;
    let d = generate(&r.phantom)?;
    let (net, set) = build_network(&r, cfg.method, &d)?;
    let grid = (cfg.analysis_grid[0], cfg.analysis_grid[1]);
    let ctx = prepare_analysis(&r.phantom, &d, &net, grid, cfg.roi_threshold)?;

    let op = match (&set, r.phantom.r) {
        (_, 1) => ReconOperator::Identity { combine: &ctx.combine },
        (Some(s), _) => ReconOperator::Grappa {
            set: s,
            combine: &ctx.combine,
        },
        (None, _) => ReconOperator::Recompute {
            net: &net,
            combine: &ctx.combine,
        },
    };
    let t = Instant::now();
    let stack = montecarlo_stack(&op, &ctx.s0, &mc_config(cfg))?;
    let replica_secs = t.elapsed().as_secs_f64();
    let report = ks_normality(&stack, &ctx.roi, cfg.normality_alpha)?;

    w.write_map("sigma_map", &report.sigma, "fitted per-voxel magnitude standard deviation")?;
    w.write_map("mu_map", &report.mu, "fitted per-voxel magnitude mean")?;
    w.write_map("p_map", &report.p_value, "Kolmogorov-Smirnov p-value map")?;
    w.write_map("d_map", &report.d_stat, "Kolmogorov-Smirnov statistic map")?;
    w.write_mask("pass_mask", &report.pass, "voxels consistent with a normal distribution")?;
    w.write_mask("roi", &ctx.roi, "analysis region of interest")?;

    // four marked voxels, evenly spaced through the ROI in scan order, each
    // with its full replica sample for histogram rendering
    let (nx, ny) = ctx.roi.dim();
    let roi_voxels: Vec<(usize, usize)> = (0..nx * ny)
        .map(|v| (v / ny, v % ny))
        .filter(|&(x, y)| ctx.roi[[x, y]])
        .collect();
    if roi_voxels.is_empty() {
        return Err(CliError::Config(
            "ROI is empty; lower roi_threshold".into(),
        ));
    }
    let n_marked = roi_voxels.len().min(4);
    let mut marked: Vec<(usize, usize)> = (0..n_marked)
        .map(|i| {
            let idx = if n_marked > 1 {
                i * (roi_voxels.len() - 1) / (n_marked - 1)
            } else {
                0
            };
            roi_voxels[idx]
        })
        .collect();
    marked.sort();
    marked.dedup();
    let mut marked_json = Vec::new();
    for (k, &(x, y)) in marked.iter().enumerate() {
        let rows: Vec<String> = (0..stack.images.dim().0)
            .map(|i| format!("{i},{}", stack.images[[i, x, y]].norm()))
            .collect();
        let name = format!("histogram_voxel_{k}.csv");
        w.write_csv(&name, "replica,magnitude", &rows, "marked-voxel replica samples")?;
        marked_json.push(json!({
            "file": name,
            "x": x,
            "y": y,
            "mu": report.mu[[x, y]],
            "sigma": report.sigma[[x, y]],
            "p_value": report.p_value[[x, y]],
        }));
    }

    w.write_json(
        "summary.json",
        &json!({
            "method": cfg.method.label(),
            "r": ctx.r,
            "n_replicas": cfg.n_replicas,
            "alpha": report.alpha,
            "fraction_passing": report.fraction_passing,
            "marked_voxels": marked_json,
        }),
        "normality summary",
    )?;
    w.write_timings(&json!({ "replica_secs": replica_secs }))?;
    w.finish()
}

pub fn cmd_snr_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (mut w, r) = start(cfg, "snr-sweep")?;
    let kind = match cfg.method {
        Method::Grappa => ReconKind::Grappa(&r.grappa),
        Method::Raki | Method::RakiLinear => ReconKind::Raki {
            spec: &r.net_spec,
            train: &r.train_cfg,
        },
    };
    let sweep_cfg = SweepConfig {
        sigma_scales: cfg.sigma_scales.clone(),
        mc: mc_config(cfg),
        analysis_grid: (cfg.analysis_grid[0], cfg.analysis_grid[1]),
        roi_threshold: cfg.roi_threshold,
    };
    let t = Instant::now();
    let entries = snr_sweep(&r.phantom, &kind, &sweep_cfg)?;
    let sweep_secs = t.elapsed().as_secs_f64();

    let mut rows = Vec::new();
    let mut panels = Vec::new();
    for e in &entries {
        let tag = format!("x{}", e.sigma_scale);
        w.write_map(
            &format!("g_analytical_{tag}"),
            &e.g_analytical.values,
            &format!("analytical g-factor at {tag} noise"),
        )?;
        w.write_map(
            &format!("g_montecarlo_{tag}"),
            &e.g_mc.values,
            &format!("Monte-Carlo g-factor at {tag} noise"),
        )?;
        w.write_map(&format!("snr_{tag}"), &e.snr, &format!("replica SNR at {tag} noise"))?;
        rows.push(format!(
            "{},{},{},{},{},{},{},{}",
            e.sigma_scale,
            e.sigma,
            e.metrics.nmse,
            e.metrics.ssim,
            e.metrics.psnr,
            e.gap.median_rel_gap,
            e.gap.p95_rel_gap,
            e.gap.pearson
        ));
        panels.push(json!({
            "sigma_scale": e.sigma_scale,
            "sigma": e.sigma,
            "metrics": metrics_json(&e.metrics),
            "median_rel_gap": e.gap.median_rel_gap,
            "p95_rel_gap": e.gap.p95_rel_gap,
            "pearson": e.gap.pearson,
            "agreement_within_10_percent": e.gap.median_rel_gap < 0.10,
        }));
    }
    w.write_csv(
        "sweep.csv",
        "sigma_scale,sigma,nmse,ssim,psnr,median_rel_gap,p95_rel_gap,pearson",
        &rows,
        "per-level sweep results",
    )?;
    w.write_json(
        "summary.json",
        &json!({
            "method": cfg.method.label(),
            "r": r.phantom.r,
            "n_replicas": cfg.n_replicas,
            "levels": panels,
        }),
        "noise-level sweep summary",
    )?;
    w.write_timings(&json!({ "sweep_secs": sweep_secs }))?;
    w.finish()
}
