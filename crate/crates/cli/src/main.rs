//! Command-line front end: dataset generation, training, reconstruction,
//! evaluation, receptive-field analysis, and small artifact utilities.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use recon_core::baselines::{cg_tikhonov, CgConfig};
use recon_core::checkpoint::Checkpoint;
use recon_core::config::RunConfig;
use recon_core::erf::{effective_receptive_field, mass_outside_radius};
use recon_core::forward_model::{encode, generate_gaussian_mask};
use recon_core::image::ComplexImage;
use recon_core::metrics::{psnr, ssim};
use recon_core::net::{build, param_breakdown, param_count, reconstruct_image, ParamSet};
use recon_core::pgm::save_pgm;
use recon_core::phantom::{load_split, make_dataset, Sample};
use recon_core::tensorfile::save_tensor;
use recon_core::train::{train, OptimState, TrainConfig};
use recon_core::{Error, Result};

#[derive(Parser)]
#[command(name = "recon", version, about = "MRI reconstruction workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired undersampled/fully-sampled phantom dataset.
    GenData(GenDataArgs),
    /// Train a reconstruction model.
    Train(TrainArgs),
    /// Reconstruct one slice with a trained model.
    Reconstruct(ReconstructArgs),
    /// Score a trained model or a classical baseline on a split.
    Evaluate(EvaluateArgs),
    /// Average sensitivity of the center output to the input image.
    Erf(ErfArgs),
    /// Generate a single variable-density sampling mask.
    MaskGen(MaskGenArgs),
    /// Print the parameter count of a configuration.
    ParamCount(ParamCountArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Rewrite the checkpoint every this many steps (default: only at end).
    #[arg(long)]
    save_every: Option<u64>,
    /// Stop this session after this many additional steps; the saved
    /// checkpoint can be resumed later.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Slice index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Acceleration factor (must exist in the dataset).
    #[arg(long, default_value_t = 4)]
    r: u32,
    /// Output directory for rec.mrtn, rec.pgm, err.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Adjoint reconstruction of the acquired samples.
    ZeroFilled,
    /// Tikhonov-regularized least squares solved iteratively.
    CgTikhonov,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained model checkpoint (exclusive with --baseline).
    #[arg(long, conflicts_with_all = ["baseline", "config"])]
    ckpt: Option<PathBuf>,
    /// Classical method to score instead of a checkpoint.
    #[arg(long, value_enum, requires = "config")]
    baseline: Option<Baseline>,
    /// Run configuration (required with --baseline).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output CSV with one row per (slice, acceleration).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ErfArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Acceleration factor of the inputs to load.
    #[arg(long, default_value_t = 4)]
    r: u32,
    /// Feed the consistency blocks an all-zero mask, isolating the backbone.
    #[arg(long)]
    zero_mask: bool,
    /// Cap on the number of slices averaged.
    #[arg(long)]
    max_slices: Option<usize>,
    /// Output tensor file for the normalized map.
    #[arg(long)]
    out: PathBuf,
    /// Optional 8-bit rendering of the map.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct MaskGenArgs {
    /// Square mask extent.
    #[arg(long)]
    size: usize,
    /// Acceleration factor.
    #[arg(long = "R")]
    r: u32,
    /// Fully sampled central calibration extent.
    #[arg(long, default_value_t = 8)]
    calib: usize,
    /// Gaussian density width as a fraction of the extent (default: by R).
    #[arg(long)]
    sigma_frac: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long)]
    config: PathBuf,
}

/// Reference parameter count for the full-scale configuration.
const REFERENCE_PARAMS: f64 = 2.05e6;

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Erf(a) => run_erf(a),
        Command::MaskGen(a) => mask_gen(a),
        Command::ParamCount(a) => run_param_count(a),
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_text(&text)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = read_config(&a.config)?;
    make_dataset(&cfg, &a.out)?;
    // Record the generating configuration next to the data.
    let snapshot = a.out.join("config.cfg");
    std::fs::write(&snapshot, cfg.to_text()).map_err(|e| Error::io(&snapshot, e))?;
    println!(
        "wrote {} train / {} val / {} test slices at R {:?} to {}",
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        cfg.r_list,
        a.out.display()
    );
    Ok(())
}

/// Training samples are the concatenation of every configured acceleration.
fn load_training_samples(data: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for &r in &cfg.r_list {
        samples.extend(load_split(data, "train", r)?);
    }
    Ok(samples)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = read_config(&a.config)?;
    cfg.validate()?;
    let net_cfg = cfg.network();
    let samples = load_training_samples(&a.data, &cfg)?;
    create_dir(&a.out)?;

    let (mut params, mut optim, start_step) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_text != cfg.to_text() {
                return Err(Error::config(format!(
                    "checkpoint {} was trained under a different configuration",
                    path.display()
                )));
            }
            (ckpt.params, ckpt.optim, ckpt.step)
        }
        None => {
            let params = build(&net_cfg, cfg.net_seed)?;
            let optim = OptimState::zeros_like(&params);
            (params, optim, 0)
        }
    };

    let train_cfg = TrainConfig::from_run(&cfg);
    let loss_path = a.out.join("loss.csv");
    let mut log: File = if start_step == 0 {
        File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?
    } else {
        OpenOptions::new()
            .append(true)
            .open(&loss_path)
            .map_err(|e| Error::io(&loss_path, e))?
    };

    let ckpt_path = a.out.join("model.mrck");
    let horizon = a
        .stop_after
        .map_or(cfg.iters, |k| (start_step + k).min(cfg.iters));
    let mut at = start_step;
    let mut last_loss = f64::NAN;
    loop {
        let stop = a
            .save_every
            .map_or(horizon, |k| (at + k.max(1)).min(horizon));
        let rows = train(
            &samples,
            &net_cfg,
            &train_cfg,
            &mut params,
            &mut optim,
            at,
            Some(stop),
            Some(&mut log),
        )?;
        at = stop;
        if let Some(row) = rows.last() {
            last_loss = row.loss;
        }
        let ckpt = Checkpoint {
            config_text: cfg.to_text(),
            step: at,
            running_loss: last_loss,
            params,
            optim,
        };
        ckpt.save(&ckpt_path)?;
        Checkpoint { params, optim, .. } = ckpt;
        if at >= horizon {
            break;
        }
    }
    log.flush().map_err(|e| Error::io(&loss_path, e))?;
    println!("trained to step {at}, final logged loss {last_loss:e}");
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn load_slice(data: &Path, split: &str, index: usize, r: u32) -> Result<Sample> {
    let mut samples = load_split(data, split, r)?;
    if index >= samples.len() {
        return Err(Error::config(format!(
            "slice {index} out of range: split {split} has {} slices",
            samples.len()
        )));
    }
    Ok(samples.swap_remove(index))
}

fn run_reconstruct(a: ReconstructArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let cfg = RunConfig::from_text(&ckpt.config_text)?;
    let net_cfg = cfg.network();
    let s = load_slice(&a.data, &a.split, a.index, a.r)?;
    let x_r = reconstruct_image(&ckpt.params, &net_cfg, &s.x_us, &s.mask, &s.coils)?;
    create_dir(&a.out)?;

    let rec_t = x_r.to_channels();
    save_tensor(a.out.join("rec.mrtn"), &rec_t)?;
    save_pgm(a.out.join("rec.pgm"), &x_r.magnitude())?;
    let err = x_r.sub(&s.x_fs).magnitude();
    save_pgm(a.out.join("err.pgm"), &err)?;

    let p = psnr(&x_r.magnitude(), &s.x_fs.magnitude());
    let s_val = ssim(&x_r.magnitude(), &s.x_fs.magnitude())?;
    println!("slice {} R {}: psnr {:.4} dB, ssim {:.6}", a.index, a.r, p, s_val);
    Ok(())
}

enum Method {
    Model(Box<ParamSet>, RunConfig),
    ZeroFilled,
    CgTikhonov(CgConfig),
}

impl Method {
    fn reconstruct(&self, s: &Sample) -> Result<ComplexImage> {
        match self {
            Method::Model(params, cfg) => {
                reconstruct_image(params, &cfg.network(), &s.x_us, &s.mask, &s.coils)
            }
            Method::ZeroFilled => Ok(s.x_us.clone()),
            Method::CgTikhonov(cg) => {
                let y = encode(&s.x_fs, &s.coils, &s.mask)?;
                Ok(cg_tikhonov(&y, &s.coils, &s.mask, cg)?.0)
            }
        }
    }
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let (method, cfg) = match (&a.ckpt, a.baseline) {
        (Some(path), None) => {
            let ckpt = Checkpoint::load(path)?;
            let cfg = RunConfig::from_text(&ckpt.config_text)?;
            (Method::Model(Box::new(ckpt.params), cfg.clone()), cfg)
        }
        (None, Some(b)) => {
            let cfg_path = a
                .config
                .as_ref()
                .ok_or_else(|| Error::config("--baseline requires --config"))?;
            let cfg = read_config(cfg_path)?;
            let method = match b {
                Baseline::ZeroFilled => Method::ZeroFilled,
                Baseline::CgTikhonov => Method::CgTikhonov(CgConfig {
                    lambda: cfg.cg_lambda,
                    max_iters: cfg.cg_iters,
                    tol: cfg.cg_tol,
                }),
            };
            (method, cfg)
        }
        _ => return Err(Error::config("pass exactly one of --ckpt or --baseline")),
    };

    let mut csv = String::from("slice,R,psnr_db,ssim\n");
    let mut scored = 0usize;
    for &r in &cfg.r_list {
        let samples = load_split(&a.data, &a.split, r)?;
        for (i, s) in samples.iter().enumerate() {
            let x_r = method.reconstruct(s)?;
            // One metric path for every method: magnitude in, scores out.
            let p = psnr(&x_r.magnitude(), &s.x_fs.magnitude());
            let ss = ssim(&x_r.magnitude(), &s.x_fs.magnitude())?;
            csv.push_str(&format!("{i},{r},{p:.6},{ss:.6}\n"));
            scored += 1;
        }
    }
    std::fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    println!("scored {scored} reconstructions into {}", a.out.display());
    Ok(())
}

fn run_erf(a: ErfArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let cfg = RunConfig::from_text(&ckpt.config_text)?;
    let net_cfg = cfg.network();
    let mut samples = load_split(&a.data, &a.split, a.r)?;
    if let Some(cap) = a.max_slices {
        samples.truncate(cap);
    }
    let map = effective_receptive_field(&ckpt.params, &net_cfg, &samples, a.zero_mask)?;
    save_tensor(&a.out, &map.grid)?;
    if let Some(pgm) = &a.pgm {
        save_pgm(pgm, &map.grid)?;
    }
    let radius = net_cfg.h as f64 / 4.0;
    println!(
        "averaged {} slices; gradient mass outside radius {:.1}: {:.6}",
        map.slices_used,
        radius,
        mass_outside_radius(&map, radius)
    );
    Ok(())
}

fn mask_gen(a: MaskGenArgs) -> Result<()> {
    let mask = generate_gaussian_mask(a.size, a.size, a.r, a.calib, a.sigma_frac, a.seed)?;
    save_tensor(&a.out, mask.grid())?;
    println!(
        "mask {}x{} R {}: {} of {} samples kept",
        a.size,
        a.size,
        a.r,
        mask.count_ones(),
        a.size * a.size
    );
    Ok(())
}

fn run_param_count(a: ParamCountArgs) -> Result<()> {
    let cfg = read_config(&a.config)?;
    let net_cfg = cfg.network();
    net_cfg.validate()?;
    for (name, n) in param_breakdown(&net_cfg) {
        println!("{name:<16} {n:>10}");
    }
    let total = param_count(&net_cfg);
    let deviation = 100.0 * (total as f64 - REFERENCE_PARAMS) / REFERENCE_PARAMS;
    println!("total            {total:>10}");
    println!("reference        {REFERENCE_PARAMS:>10.3e}  (deviation {deviation:+.1}%)");
    Ok(())
}
