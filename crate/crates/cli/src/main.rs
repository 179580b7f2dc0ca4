//! Command-line frontend: training, generation, latent inversion,
//! evaluation, the bridging-property check, super-resolution and
//! manipulation — one subcommand each.
//!
//! Configuration resolves in three layers: preset defaults, then a flat
//! JSON config file, then individual flags; the fully resolved config is
//! written next to every run's outputs so a run can be reproduced from its
//! directory alone. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use petsgan::dipnet::DipNetCfg;
use petsgan::eval_apps::{
    self, evaluate, hires_upscale, manipulate, train_recon_dipnet, EvalCfg, EvalReport,
    FeatureExtractor, ReconCfg, Task, UpscaleCfg,
};
use petsgan::external_prior::{invert, InvertCfg, LatentGenerator, SocketGenerator};
use petsgan::imaging::{load_image, preprocess, resize, save_png, ResizeMode};
use petsgan::patchdist::{verify_proposition1, Boundary, Prop1Config};
use petsgan::trainer::{RunConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "petsgan",
    version,
    about = "Single-image generative training with external low-resolution priors and differentiable patch transfer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the full pipeline on one image.
    Train(TrainArgs),
    /// Generate samples from a trained checkpoint.
    Generate(GenerateArgs),
    /// Recover the latent of a pretrained generator for a target image.
    Invert(InvertArgs),
    /// Evaluate a checkpoint, or train+evaluate every image in a directory.
    Eval(EvalArgs),
    /// Check the low-to-full patch-distribution bridging property.
    VerifyProp1(VerifyArgs),
    /// Train a plug-in restorer that lifts a trained model's outputs by
    /// another power-of-two factor.
    Upscale(UpscaleArgs),
    /// Pull a composite/sketch/styled content image toward an exemplar's
    /// internal statistics.
    Manipulate(ManipulateArgs),
}

/// Flags shared by every command that builds a `RunConfig`. Each field of
/// the config maps to exactly one flag; omitted flags fall through to the
/// config file, then to the preset.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Starting preset: "desk" (minutes on a CPU) or "paper" (full scale).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Flat JSON config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_frac: Option<f32>,
    #[arg(long)]
    max_side: Option<usize>,
    #[arg(long)]
    down_factor: Option<usize>,
    #[arg(long)]
    batch_prior: Option<usize>,
    #[arg(long)]
    lr_g: Option<f32>,
    #[arg(long)]
    lr_f: Option<f32>,
    #[arg(long)]
    lr_d: Option<f32>,
    #[arg(long)]
    lr_dg: Option<f32>,
    #[arg(long)]
    lambda_ext: Option<f32>,
    #[arg(long)]
    lambda_int: Option<f32>,
    #[arg(long)]
    lambda_div: Option<f32>,
    #[arg(long)]
    lambda_sparse: Option<f32>,
    #[arg(long)]
    delta_sigma: Option<f32>,
    #[arg(long)]
    sigma_z: Option<f32>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    pt_window: Option<usize>,
    #[arg(long)]
    noise_channels: Option<usize>,
    #[arg(long)]
    pe_channels: Option<usize>,
    #[arg(long)]
    g_hidden: Option<usize>,
    #[arg(long)]
    g_depth: Option<usize>,
    #[arg(long)]
    dg_hidden: Option<usize>,
    #[arg(long)]
    dg_depth: Option<usize>,
    /// Patch embedder: "identity" or "conv".
    #[arg(long)]
    f_embedder: Option<String>,
    #[arg(long)]
    f_embed_dim: Option<usize>,
    #[arg(long)]
    f_ir_channels: Option<usize>,
    #[arg(long)]
    f_ir_res_blocks: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    d_layers: Option<usize>,
    /// Comma-separated dilation list, e.g. "1,2,4".
    #[arg(long, value_delimiter = ',')]
    d_dilations: Option<Vec<usize>>,
    #[arg(long)]
    d_circular: Option<bool>,
    /// One of: full, cascaded, no_external, no_internal, no_patch_adv.
    #[arg(long)]
    ablation: Option<String>,
    /// Prior source: synthetic, directory, socket.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    prior_path: Option<PathBuf>,
    #[arg(long)]
    prior_invert_iters: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training image (PNG or JPEG).
    #[arg(long)]
    image: PathBuf,
    /// Output root; defaults to $PETSGAN_RUNS_DIR or ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name; defaults to <unix-time>-<seed>.
    #[arg(long)]
    run_name: Option<String>,
    /// Also render this many samples into the run directory afterwards.
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 9)]
    n: usize,
    /// Output size as HxW, e.g. 256x384. Defaults to the training size.
    #[arg(long)]
    size: Option<String>,
    /// Output directory; defaults to <ckpt dir>/generated.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling stream label: same label + checkpoint reproduces the same
    /// images.
    #[arg(long, default_value = "cli")]
    label: String,
}

#[derive(Args)]
struct InvertArgs {
    /// Unix socket of a running generator endpoint.
    #[arg(long)]
    socket: PathBuf,
    /// Target image to invert.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    /// Write the generator's reconstruction here (PNG).
    #[arg(long)]
    save_recon: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluate this checkpoint...
    #[arg(long, conflicts_with = "images")]
    ckpt: Option<PathBuf>,
    /// ...or train-and-evaluate every PNG/JPEG in this directory.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Where reports go (directory mode); defaults next to the inputs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    n_samples: usize,
    #[arg(long, default_value_t = 5)]
    patch_size: usize,
    /// Feature-extractor seed (fixed random conv stack).
    #[arg(long, default_value_t = 1)]
    fx_seed: u64,
    /// Write the single-checkpoint report JSON here (ckpt mode).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct VerifyArgs {
    /// Reference image.
    #[arg(long)]
    image: PathBuf,
    /// Number of candidate low-resolution layouts to test.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Reconstruction training steps before the check.
    #[arg(long, default_value_t = 400)]
    recon_steps: usize,
    /// Write the JSON report here (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct UpscaleArgs {
    /// Trained base checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// High-resolution original of the training image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 48)]
    crop: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Output directory; defaults to <ckpt dir>/upscaled.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ManipulateArgs {
    /// Task: harmonize, style_transfer, edit, paint2image.
    #[arg(long)]
    task: String,
    /// Content image to correct.
    #[arg(long)]
    content: PathBuf,
    /// Exemplar whose statistics the content is pulled toward.
    #[arg(long)]
    image: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Reconstruction training steps for the one-stage model.
    #[arg(long, default_value_t = 400)]
    recon_steps: usize,
    #[command(flatten)]
    cfg: ConfigFlags,
}

/// A usage problem found after clap parsing (bad config key, malformed
/// value); exits 1 like any other usage error.
struct UsageError(String);

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<petsgan::Error> for CliError {
    fn from(e: petsgan::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Invert(a) => cmd_invert(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::VerifyProp1(a) => cmd_verify(a),
        Cmd::Upscale(a) => cmd_upscale(a),
        Cmd::Manipulate(a) => cmd_manipulate(a),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}

/// Resolve the three-layer config chain: preset, then config file, then
/// flags. Unknown file keys and malformed values are usage errors.
fn resolve_config(flags: &ConfigFlags) -> Result<RunConfig, CliError> {
    let base = match flags.preset.as_str() {
        "desk" => RunConfig::desk(),
        "paper" => RunConfig::paper(),
        other => {
            return Err(UsageError(format!(
                "unknown preset {other:?}; expected \"desk\" or \"paper\""
            ))
            .into())
        }
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let over: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", path.display())))?;
        let over = over.as_object().ok_or_else(|| {
            UsageError(format!("config {} must be a flat JSON object", path.display()))
        })?;
        let map = value.as_object_mut().expect("config is an object");
        for (k, v) in over {
            if !map.contains_key(k) {
                return Err(UsageError(format!(
                    "config {}: unknown key {k:?}",
                    path.display()
                ))
                .into());
            }
            map.insert(k.clone(), v.clone());
        }
    }
    let mut cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| UsageError(format!("config does not resolve: {e}")))?;
    apply_flags(&mut cfg, flags)?;
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

/// Parse a serde snake_case enum value from a CLI string.
fn enum_flag<T: serde::de::DeserializeOwned>(name: &str, s: &str) -> Result<T, UsageError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| UsageError(format!("invalid value {s:?} for --{name}")))
}

fn apply_flags(cfg: &mut RunConfig, f: &ConfigFlags) -> Result<(), UsageError> {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = &f.$field {
                cfg.$field = v.clone();
            }
        };
    }
    set!(seed);
    set!(epochs);
    set!(warmup_frac);
    set!(max_side);
    set!(down_factor);
    set!(batch_prior);
    set!(lr_g);
    set!(lr_f);
    set!(lr_d);
    set!(lr_dg);
    set!(lambda_ext);
    set!(lambda_int);
    set!(lambda_div);
    set!(lambda_sparse);
    set!(delta_sigma);
    set!(sigma_z);
    set!(temperature);
    set!(pt_window);
    set!(noise_channels);
    set!(pe_channels);
    set!(g_hidden);
    set!(g_depth);
    set!(dg_hidden);
    set!(dg_depth);
    set!(f_embed_dim);
    set!(f_ir_channels);
    set!(f_ir_res_blocks);
    set!(d_hidden);
    set!(d_layers);
    set!(d_dilations);
    set!(d_circular);
    set!(prior_invert_iters);
    set!(checkpoint_every);
    set!(log_every);
    if let Some(s) = &f.f_embedder {
        cfg.f_embedder = enum_flag("f-embedder", s)?;
    }
    if let Some(s) = &f.ablation {
        cfg.ablation = enum_flag("ablation", s)?;
    }
    if let Some(s) = &f.prior {
        cfg.prior = enum_flag("prior", s)?;
    }
    if let Some(p) = &f.prior_path {
        cfg.prior_path = Some(p.clone());
    }
    Ok(())
}

fn runs_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("PETSGAN_RUNS_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

fn make_run_dir(root: &Path, name: Option<&str>, seed: u64) -> Result<PathBuf, CliError> {
    let base = match name {
        Some(n) => n.to_string(),
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format!("{secs}-{seed}")
        }
    };
    for attempt in 0.. {
        let candidate = if attempt == 0 {
            root.join(&base)
        } else {
            root.join(format!("{base}.{attempt}"))
        };
        match std::fs::create_dir_all(root)
            .and_then(|_| std::fs::create_dir(&candidate))
        {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(CliError::Runtime(format!(
                    "cannot create run directory under {}: {e}",
                    root.display()
                )))
            }
        }
    }
    unreachable!()
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serialization: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&a.cfg)?;
    let image = load_image(&a.image)?;
    let root = runs_root(a.out.as_deref());
    let run_dir = make_run_dir(&root, a.run_name.as_deref(), cfg.seed)?;
    write_json(&cfg, &run_dir.join("config.json"))?;
    println!("run directory: {}", run_dir.display());

    let mut trainer = Trainer::new(cfg, &image, None)?;
    println!(
        "training at {}x{} (low {}x{}), {} epochs",
        trainer.full.dims().0,
        trainer.full.dims().1,
        trainer.low.dims().0,
        trainer.low.dims().1,
        trainer.cfg.epochs
    );
    let report = trainer.train(Some(&run_dir))?;
    let ckpt_path = run_dir.join("final.pkc");
    trainer.save_checkpoint(&ckpt_path)?;
    println!(
        "trained {} epochs in {:.1}s; checkpoint at {}",
        report.epochs_run,
        report.wall_s,
        ckpt_path.display()
    );
    if let Some(last) = report.metrics.last() {
        if let Some(r) = last.recon_l1 {
            println!("final reconstruction L1: {r:.4}");
        }
    }
    if a.samples > 0 {
        let (h, w) = trainer.full.dims();
        let batch = trainer.generate_samples(a.samples, h, w, "train-preview")?;
        let sample_dir = run_dir.join("samples");
        std::fs::create_dir_all(&sample_dir)
            .map_err(|e| CliError::Runtime(format!("cannot create samples dir: {e}")))?;
        for (i, img) in batch.images.iter().enumerate() {
            save_png(img, &sample_dir.join(format!("sample-{i}.png")))?;
        }
        println!("wrote {} samples to {}", a.samples, sample_dir.display());
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize), UsageError> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| UsageError(format!("size must look like 256x384, got {s:?}")))?;
    let h = h
        .trim()
        .parse::<usize>()
        .map_err(|_| UsageError(format!("bad height in --size {s:?}")))?;
    let w = w
        .trim()
        .parse::<usize>()
        .map_err(|_| UsageError(format!("bad width in --size {s:?}")))?;
    if h == 0 || w == 0 {
        return Err(UsageError("size must be positive".into()));
    }
    Ok((h, w))
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(UsageError("--n must be positive".into()).into());
    }
    let trainer = Trainer::load_checkpoint(&a.ckpt, None)?;
    let (h, w) = match &a.size {
        Some(s) => parse_size(s)?,
        None => trainer.full.dims(),
    };
    let out = a.out.unwrap_or_else(|| {
        a.ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join("generated")
    });
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let batch = trainer.generate_samples(a.n, h, w, &a.label)?;
    if batch.was_rounded() {
        eprintln!(
            "note: {}x{} rounded to {}x{} (outputs live on a x{} grid)",
            h, w, batch.actual.0, batch.actual.1, trainer.cfg.down_factor
        );
    }
    for (i, img) in batch.images.iter().enumerate() {
        save_png(img, &out.join(format!("sample-{i}.png")))?;
    }
    println!(
        "wrote {} samples of {}x{} to {}",
        a.n,
        batch.actual.0,
        batch.actual.1,
        out.display()
    );
    Ok(())
}

fn cmd_invert(a: InvertArgs) -> Result<(), CliError> {
    let mut gen = SocketGenerator::connect(&a.socket)?;
    let target = load_image(&a.image)?;
    let (c, h, w) = gen.output_dims();
    if c != 3 {
        return Err(CliError::Runtime(format!(
            "generator emits {c} channels; only 3 supported"
        )));
    }
    let fitted = if target.dims() != (h, w) {
        eprintln!(
            "note: resizing target {}x{} to generator output {}x{}",
            target.dims().0,
            target.dims().1,
            h,
            w
        );
        resize(&target, h, w, ResizeMode::Bicubic)?
    } else {
        target
    };
    let cfg = InvertCfg {
        iters: a.iters,
        lr: a.lr,
        ..InvertCfg::default()
    };
    let inv = invert(&mut gen, &fitted, &cfg)?;
    if let Some(out) = &a.save_recon {
        let recon = gen.decode(&inv.z)?;
        save_png(&recon, out)?;
        println!("reconstruction saved to {}", out.display());
    }
    let summary = serde_json::json!({
        "mse": inv.mse,
        "iters_run": inv.iters_run,
        "used_graph": inv.used_graph,
        "latent_dim": inv.z.len(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .map(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Runtime(format!(
            "no PNG/JPEG files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let fx = FeatureExtractor::fixed_random(a.fx_seed);
    let eval_cfg = EvalCfg {
        n_samples: a.n_samples,
        patch_size: a.patch_size,
    };
    match (&a.ckpt, &a.images) {
        (Some(ckpt), None) => {
            let trainer = Trainer::load_checkpoint(ckpt, None)?;
            let report = evaluate(&trainer, &fx, &eval_cfg, 0.0, "eval")?;
            let text = serde_json::to_string_pretty(&report).unwrap();
            println!("{text}");
            if let Some(path) = &a.report {
                write_json(&report, path)?;
            }
            Ok(())
        }
        (None, Some(dir)) => {
            let cfg = resolve_config(&a.cfg)?;
            let files = image_files(dir)?;
            let out_dir = a.out.clone().unwrap_or_else(|| dir.join("eval"));
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
            write_json(&cfg, &out_dir.join("config.json"))?;
            let mut rows: Vec<(String, EvalReport)> = Vec::new();
            for file in &files {
                let name = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".to_string());
                let image = load_image(file)?;
                let started = Instant::now();
                let mut trainer = Trainer::new(cfg.clone(), &image, None)?;
                trainer.train(None)?;
                let secs = started.elapsed().as_secs_f64();
                let report = evaluate(&trainer, &fx, &eval_cfg, secs, &name)?;
                println!(
                    "{name}: sifid {:.4}, diversity {:.4}, patch_dist {:.4} ({:.0}s)",
                    report.sifid, report.diversity, report.patch_dist, secs
                );
                write_json(&report, &out_dir.join(format!("{name}.report.json")))?;
                rows.push((name, report));
            }
            let csv_path = out_dir.join("aggregate.csv");
            eval_apps::write_csv(&rows, &csv_path)?;
            println!("aggregate CSV at {}", csv_path.display());
            Ok(())
        }
        _ => Err(UsageError("pass exactly one of --ckpt or --images".into()).into()),
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<(), CliError> {
    if a.samples == 0 {
        return Err(UsageError("--samples must be positive".into()).into());
    }
    let cfg = resolve_config(&a.cfg)?;
    let image = load_image(&a.image)?;
    let pre = preprocess(
        &image,
        cfg.max_side,
        cfg.down_factor,
        cfg.pt_window * cfg.down_factor,
    )?;
    let recon_cfg = ReconCfg {
        steps: a.recon_steps,
        seed: cfg.seed,
        lambda_sparse: cfg.lambda_sparse,
        dip: DipNetCfg {
            pt_window: cfg.pt_window,
            temperature: cfg.temperature,
            embedder: cfg.f_embedder,
            embed_dim: cfg.f_embed_dim,
            ir_channels: cfg.f_ir_channels,
            ir_res_blocks: cfg.f_ir_res_blocks,
            up_factor: cfg.down_factor,
        },
        ..ReconCfg::default()
    };
    let trained = train_recon_dipnet(&pre.full, &pre.low, &recon_cfg)?;
    println!("reconstruction PSNR: {:.2} dB", trained.psnr_db);

    // Candidates: augmented crops of the image itself, downscaled — close
    // to the reference's low-resolution patch distribution by construction.
    let provider = petsgan::trainer::build_provider(&cfg, &pre.full, &pre.low)?;
    let mut provider = provider;
    let (lh, lw) = pre.low.dims();
    let mut rng = petsgan::rng::Rng::new(cfg.seed, "verify/candidates");
    let candidates = provider.batch(&mut rng, a.samples, lh, lw)?;

    let prop_cfg = Prop1Config {
        s_full: cfg.pt_window,
        s_low: cfg.pt_window,
        boundary_full: Boundary::Valid,
        boundary_low: Boundary::Valid,
        psnr_floor_db: 15.0,
    };
    let report = verify_proposition1(&pre.full, &pre.low, &trained.dip, &candidates, &prop_cfg)?;
    let text = serde_json::to_string_pretty(&report).unwrap();
    println!("{text}");
    println!("holds: {}", report.holds);
    if let Some(path) = &a.out {
        write_json(&report, path)?;
    }
    Ok(())
}

fn cmd_upscale(a: UpscaleArgs) -> Result<(), CliError> {
    let trainer = Trainer::load_checkpoint(&a.ckpt, None)?;
    let hi = load_image(&a.image)?;
    let cfg = UpscaleCfg {
        steps: a.steps,
        crop: a.crop,
        ..UpscaleCfg::default()
    };
    let up = hires_upscale(&trainer, &hi, a.factor, &cfg, a.n)?;
    let out = a.out.unwrap_or_else(|| {
        a.ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join("upscaled")
    });
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    for (i, img) in up.syntheses.iter().enumerate() {
        save_png(img, &out.join(format!("upscaled-{i}.png")))?;
    }
    println!(
        "restorer PSNR {:.2} dB at x{}; wrote {} syntheses to {}",
        up.psnr_db,
        up.factor,
        up.syntheses.len(),
        out.display()
    );
    Ok(())
}

fn cmd_manipulate(a: ManipulateArgs) -> Result<(), CliError> {
    let task: Task = enum_flag("task", &a.task)?;
    let cfg = resolve_config(&a.cfg)?;
    let exemplar = load_image(&a.image)?;
    let content = load_image(&a.content)?;
    let pre = preprocess(
        &exemplar,
        cfg.max_side,
        cfg.down_factor,
        cfg.pt_window * cfg.down_factor,
    )?;
    let recon_cfg = ReconCfg {
        steps: a.recon_steps,
        seed: cfg.seed,
        lambda_sparse: cfg.lambda_sparse,
        dip: DipNetCfg {
            pt_window: cfg.pt_window,
            temperature: cfg.temperature,
            embedder: cfg.f_embedder,
            embed_dim: cfg.f_embed_dim,
            ir_channels: cfg.f_ir_channels,
            ir_res_blocks: cfg.f_ir_res_blocks,
            up_factor: cfg.down_factor,
        },
        ..ReconCfg::default()
    };
    let trained = train_recon_dipnet(&pre.full, &pre.low, &recon_cfg)?;
    println!(
        "one-stage model ready (reconstruction {:.2} dB)",
        trained.psnr_db
    );
    let m = manipulate(task, &content, &trained.dip)?;
    if m.resized {
        eprintln!(
            "note: content resized to {}x{} to fit the restoration grid",
            m.image.dims().0,
            m.image.dims().1
        );
    }
    save_png(&m.image, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
