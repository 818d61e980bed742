//! Command-line surface tying dataset generation, training, rendering and
//! evaluation together.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lumenfield::error::{Error, Result};
use lumenfield::metrics::{
    channel_means_u8, psnr_images, response_recovery_score, ssim_images, MetricReport, ViewMetrics,
};
use lumenfield::objective::LossConfig;
use lumenfield::rawproc;
use lumenfield::synthscene::{self, Degradation, SynthOptions};
use lumenfield::trainer::{self, Ablation, TrainConfig, TrainLog, Trainer};

#[derive(Parser)]
#[command(name = "lumenfield", version, about = "Low-light radiance field enhancement on synthetic raw data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RenderMode {
    Lowlight,
    Enhanced,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CaseSet {
    All,
    Autodiff,
    Losses,
    Render,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateArg {
    #[value(name = "no-ca")]
    NoCa,
    #[value(name = "no-smooth")]
    NoSmooth,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view low-light raw dataset.
    Synthesize {
        #[arg(long, default_value = "spheres")]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        views: usize,
        /// Image size as WxH.
        #[arg(long, default_value = "64x64")]
        size: String,
        /// Illumination attenuation factor.
        #[arg(long, default_value_t = 0.05)]
        dim: f64,
        /// Per-channel sensor tint as r,g,b.
        #[arg(long, default_value = "0.7,1.0,1.3")]
        tint: String,
        /// Signal-dependent noise scale.
        #[arg(long, default_value_t = 0.05)]
        beta: f64,
        /// Signal-independent noise floor.
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra exposure-ratio scaling of the stored raws (darkness sweep).
        #[arg(long, default_value_t = 1.0)]
        exposure_ratio: f64,
    },
    /// Train the radiance + response fields on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON or key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss/response ablation.
        #[arg(long)]
        ablate: Option<AblateArg>,
    },
    /// Render views from a trained checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = RenderMode::Enhanced)]
        mode: RenderMode,
        /// Rescale the comparison raws by this exposure ratio.
        #[arg(long)]
        exposure_ratio: Option<f64>,
    },
    /// Score renders against clean ground truth.
    Eval {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Run the finite-difference verification suites.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = CaseSet::All)]
        cases: CaseSet,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

/// Worker cap from LUMENFIELD_THREADS (0 or unset picks automatically).
fn configure_threads() {
    if let Ok(v) = std::env::var("LUMENFIELD_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synthesize { scene, out, views, size, dim, tint, beta, delta, seed, exposure_ratio } => {
            let (width, height) = parse_size(&size)?;
            let tint = parse_tint(&tint)?;
            let opts = SynthOptions {
                views,
                width,
                height,
                degradation: Degradation { dim, tint, beta, delta },
                seed,
                exposure_ratio,
                ..SynthOptions::default()
            };
            println!(
                "synthesize: scene={scene} out={} views={views} size={width}x{height} dim={dim} \
                 tint=({},{},{}) beta={beta} delta={delta} seed={seed} exposure_ratio={exposure_ratio}",
                out.display(),
                tint[0],
                tint[1],
                tint[2]
            );
            let primitives = synthscene::preset_scene(&scene)?;
            let dataset = synthscene::generate(&primitives, &opts)?;
            synthscene::write_dataset(&out, &dataset)?;
            println!("wrote {views} views to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { data, config, out, resume, ablate } => {
            let mut cfg = match &config {
                Some(path) => TrainConfig::from_text(&std::fs::read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            if let Some(ablate) = ablate {
                cfg.ablation = match ablate {
                    AblateArg::NoCa => Ablation::NoCa,
                    AblateArg::NoSmooth => Ablation::NoSmooth,
                    AblateArg::Baseline => Ablation::Baseline,
                };
            }
            println!("train: data={} out={} config={}", data.display(), out.display(), serde_json::to_string(&cfg)?);
            let dataset = synthscene::load_dataset(&data)?;
            let mut trainer = match &resume {
                Some(ckpt) => Trainer::resume(&dataset, cfg, ckpt)?,
                None => Trainer::new(&dataset, cfg)?,
            };
            std::fs::create_dir_all(&out)?;
            let mut log = TrainLog::to_file(&out.join("train_log.csv"))?;
            trainer.run(&out, &mut log)?;
            println!("finished at step {} -> {}", trainer.step, out.join("ckpt_final.lfck").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Render { ckpt, data, out, mode, exposure_ratio } => {
            let gamma = exposure_ratio.unwrap_or(1.0);
            println!(
                "render: ckpt={} data={} out={} mode={} exposure_ratio={gamma}",
                ckpt.display(),
                data.display(),
                out.display(),
                match mode {
                    RenderMode::Lowlight => "lowlight",
                    RenderMode::Enhanced => "enhanced",
                }
            );
            let loaded = trainer::load_checkpoint(&ckpt)?;
            let dataset = synthscene::load_dataset(&data)?;
            let loss_cfg = LossConfig {
                target_mean: loaded.target_mean,
                alpha_max: loaded.alpha_max,
                ..LossConfig::default()
            };
            std::fs::create_dir_all(&out)?;
            let renders = trainer::render_views(
                &loaded.params,
                &dataset,
                loaded.n_samples_per_ray,
                loaded.response_frozen,
                &loss_cfg,
                None,
            )?;
            for (idx, view) in &renders {
                let image = match mode {
                    RenderMode::Lowlight => &view.c_l,
                    RenderMode::Enhanced => &view.enhanced,
                };
                let png = rawproc::to_srgb(image, [1.0; 3], 2.2)?;
                rawproc::save_png(&out.join(format!("render_{idx:03}.png")), &png)?;
                synthscene::write_gt_f64(&out.join(format!("response_{idx:03}.f64")), &view.s_map)?;

                // comparison input from the (optionally rescaled) raw capture
                let raw = rawproc::subtract_black_level(&dataset.raws[*idx])?;
                let raw = rawproc::scale_exposure(&raw, gamma)?;
                let rgb = rawproc::demosaic_bilinear(&raw)?;
                let png = rawproc::to_srgb(&rgb, [1.0; 3], 2.2)?;
                rawproc::save_png(&out.join(format!("input_{idx:03}.png")), &png)?;
            }
            println!("wrote {} views to {}", renders.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { renders, gt, manifest, out } => {
            println!(
                "eval: renders={} gt={} manifest={} out={}",
                renders.display(),
                gt.display(),
                manifest.display(),
                out.display()
            );
            let report = evaluate(&renders, &gt, &manifest)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(&out)?), &report)?;
            print_report(&report);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, cases } => {
            let name = match cases {
                CaseSet::All => "all",
                CaseSet::Autodiff => "autodiff",
                CaseSet::Losses => "losses",
                CaseSet::Render => "render",
            };
            println!("gradcheck: cases={name} seed={seed}");
            let results = lumenfield::gradcheck::run_suite(name, seed)?;
            let mut failed = false;
            for r in &results {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "{status}  {:<28} max rel err {:.3e} (tolerance {:.0e})",
                    r.name, r.max_rel_err, r.tolerance
                );
                failed |= !r.passed();
            }
            if failed {
                eprintln!("error: gradient check tolerance breached");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_size(size: &str) -> Result<(usize, usize)> {
    let (w, h) = size
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::invalid(format!("--size must be WxH, got '{size}'")))?;
    let width = w.parse().map_err(|_| Error::invalid(format!("bad width '{w}'")))?;
    let height = h.parse().map_err(|_| Error::invalid(format!("bad height '{h}'")))?;
    Ok((width, height))
}

fn parse_tint(tint: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = tint.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!("--tint must be r,g,b, got '{tint}'")));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| Error::invalid(format!("bad tint component '{part}'")))?;
    }
    Ok(out)
}

fn evaluate(renders: &Path, gt_dir: &Path, manifest_path: &Path) -> Result<MetricReport> {
    let manifest: synthscene::DatasetManifest = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(manifest_path)
            .map_err(|e| Error::invalid(format!("{}: {e}", manifest_path.display())))?,
    ))?;

    let mut views = Vec::new();
    let mut response_sum = [0.0f64; 3];
    let mut response_pixels = 0usize;
    let mut responses_seen = 0usize;
    for (idx, view) in manifest.views.iter().enumerate() {
        let render_path = renders.join(format!("render_{idx:03}.png"));
        if !render_path.exists() {
            continue;
        }
        let render = rawproc::load_png(&render_path)?;
        let gt_path = gt_dir.join(&view.gt_path);
        if !gt_path.exists() {
            return Err(Error::invalid(format!("missing ground truth file {}", gt_path.display())));
        }
        let gt = synthscene::read_gt_f64(&gt_path, render.width, render.height)?;
        let gt8 = rawproc::to_srgb(&gt, [1.0; 3], 2.2)?;
        let psnr = psnr_images(&render, &gt8)?;
        let ssim = ssim_images(&render, &gt8)?;
        let rm = channel_means_u8(&render);
        let gm = channel_means_u8(&gt8);
        views.push(ViewMetrics {
            view: idx,
            psnr_db: if psnr.is_finite() { Some(psnr) } else { None },
            ssim,
            mean_gain: [rm[0] / gm[0], rm[1] / gm[1], rm[2] / gm[2]],
        });

        let response_path = renders.join(format!("response_{idx:03}.f64"));
        if response_path.exists() {
            let map = synthscene::read_gt_f64(&response_path, render.width, render.height)?;
            for p in &map.pixels {
                for k in 0..3 {
                    response_sum[k] += p[k];
                }
            }
            response_pixels += map.pixels.len();
            responses_seen += 1;
        }
    }
    if views.is_empty() {
        return Err(Error::invalid(format!("no render_###.png files found in {}", renders.display())));
    }
    let response = if responses_seen == views.len() && response_pixels > 0 {
        let mean = [
            response_sum[0] / response_pixels as f64,
            response_sum[1] / response_pixels as f64,
            response_sum[2] / response_pixels as f64,
        ];
        Some(response_recovery_score(mean, &manifest.degradation)?)
    } else {
        None
    };
    Ok(MetricReport::from_views(views, response))
}

fn print_report(report: &MetricReport) {
    println!("view   psnr(dB)   ssim     gain r/g/b");
    for v in &report.views {
        let psnr = v.psnr_db.map_or("inf".to_string(), |p| format!("{p:.2}"));
        println!(
            "{:>4}   {:>8}   {:.4}   {:.3}/{:.3}/{:.3}",
            v.view, psnr, v.ssim, v.mean_gain[0], v.mean_gain[1], v.mean_gain[2]
        );
    }
    let mean = report.mean_psnr_db.map_or("inf".to_string(), |p| format!("{p:.2}"));
    println!("mean   {:>8}   {:.4}", mean, report.mean_ssim);
    if let Some(r) = report.response_recovery {
        println!("response recovery error r/g/b: {:.4}/{:.4}/{:.4}", r[0], r[1], r[2]);
    }
}
