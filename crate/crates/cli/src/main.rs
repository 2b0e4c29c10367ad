//! `focusfuse`: train the autoencoder, fuse images, evaluate and synthesize
//! test data.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use focusfuse_core::fusion::{fuse_pair, fuse_stack, SFMap};
use focusfuse_core::image::{load_image, save_image};
use focusfuse_core::metrics::{evaluate, EvalPair, PairData};
use focusfuse_core::synth::{scene, synth_pair, Geometry, SynthSpec};
use focusfuse_core::trainer::{train_with, Corpus, TrainConfig};
use focusfuse_core::weights::{file_crc, load_weights};
use focusfuse_core::{Error, FusionConfig, FusionMode, ImageBuffer, NetworkParams, Plane, RealImage};
use log::info;

#[derive(Parser)]
#[command(name = "focusfuse", version, about = "Multi-focus image fusion with deep-feature spatial frequency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder/decoder on a directory of images.
    Train(TrainArgs),
    /// Fuse two registered images.
    Fuse(FuseArgs),
    /// Fuse a focal stack left to right.
    Stack(StackArgs),
    /// Score fusion modes over a directory of `name_A`/`name_B` pairs.
    Eval(EvalArgs),
    /// Generate synthetic defocus pairs or a training corpus.
    Synth(SynthArgs),
    /// Print the parameter table and checksum of a weight file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of PNG/PGM/PPM training images.
    #[arg(long)]
    data: PathBuf,
    /// Output weight file; rewritten whenever validation loss improves.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 3.0)]
    lambda: f32,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    patch: usize,
    /// Random crops drawn from each image per epoch.
    #[arg(long, default_value_t = 1)]
    patches_per_image: usize,
    /// Fraction of the (name-sorted) images held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f32,
    /// JSON-lines training history.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct FusionArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "sf_dm")]
    mode: String,
    #[arg(long, default_value_t = 5)]
    sf_radius: usize,
    /// Morphology radius; defaults to the spatial-frequency radius.
    #[arg(long)]
    morph_radius: Option<usize>,
    /// Opening/closing repetitions.
    #[arg(long, default_value_t = 1)]
    morph_passes: usize,
    #[arg(long, default_value_t = 0.01)]
    area_fraction: f32,
    #[arg(long, default_value_t = 4)]
    gf_radius: usize,
    #[arg(long, default_value_t = 0.1)]
    gf_eps: f32,
}

impl FusionArgs {
    fn config(&self) -> anyhow::Result<FusionConfig> {
        let mode: FusionMode = self.mode.parse().map_err(usage)?;
        let cfg = FusionConfig {
            sf_radius: self.sf_radius,
            morph_radius: self.morph_radius.unwrap_or(self.sf_radius),
            morph_passes: self.morph_passes,
            area_fraction: self.area_fraction,
            gf_radius: self.gf_radius,
            gf_eps: self.gf_eps,
            mode,
            keep_intermediates: false,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    fusion: FusionArgs,
    first: PathBuf,
    second: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Write the final decision map as an 8-bit image.
    #[arg(long)]
    save_decision: Option<PathBuf>,
    /// Write SF maps and every decision-map stage into this directory.
    #[arg(long)]
    save_intermediates: Option<PathBuf>,
}

#[derive(Args)]
struct StackArgs {
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(required = true, num_args = 2..)]
    images: Vec<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    fusion: FusionArgs,
    /// Directory with `name_A.*`, `name_B.*` and optional `name_GT.*` files.
    #[arg(long)]
    pairs: PathBuf,
    /// Comma-separated fusion modes.
    #[arg(long, default_value = "sf_dm,sf,l1_norm,max,absmax,average")]
    modes: String,
    #[arg(long)]
    report: PathBuf,
    /// Optional CSV summary table.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Pairs fused concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Sharp source image.
    #[arg(long, conflicts_with_all = ["scene", "corpus"])]
    image: Option<PathBuf>,
    /// Use a procedural scene with this seed as the source.
    #[arg(long, conflicts_with = "corpus")]
    scene: Option<u64>,
    /// Write this many procedural scenes (a training corpus) instead of a pair.
    #[arg(long)]
    corpus: Option<usize>,
    /// Side length of procedural scenes.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 3.0)]
    sigma: f32,
    #[arg(long, default_value = "vertical-half")]
    geometry: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File-name stem of the generated pair.
    #[arg(long, default_value = "pair")]
    name: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    weights: PathBuf,
}

/// Bad flags or values detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numeric() => 3,
        Some(Error::InvalidArgument(_) | Error::UnknownMode(_)) => 1,
        _ => 2,
    }
}

fn load(path: &Path) -> anyhow::Result<RealImage> {
    Ok(load_image(path)?.to_real())
}

fn save(img: &RealImage, path: &Path) -> anyhow::Result<()> {
    save_image(&ImageBuffer::from_real(img), path)?;
    Ok(())
}

fn save_plane(p: &Plane, path: &Path) -> anyhow::Result<()> {
    save_image(&ImageBuffer::from_plane(p), path)?;
    Ok(())
}

fn weights(path: &Path) -> anyhow::Result<NetworkParams> {
    Ok(load_weights(path)?)
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = TrainConfig {
        lambda: a.lambda,
        base_lr: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        patch_size: a.patch,
        patches_per_image: a.patches_per_image,
        checkpoint: Some(a.out.clone()),
        history: a.history,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(usage)?;
    if !(0.0..1.0).contains(&a.val_fraction) {
        bail!(UsageError(format!("--val-fraction must lie in [0, 1), got {}", a.val_fraction)));
    }
    let corpus = Corpus::load_dir(&a.data, a.val_fraction)?;
    info!(
        "training on {} images, validating on {}",
        corpus.train.len(),
        corpus.validation.len()
    );
    let outcome = train_with(&corpus, &cfg, |r| {
        info!(
            "epoch {:>3}  lr {:.3e}  train {:.5}  val {:.5}  val ssim {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_ssim
        )
    })?;
    let best = &outcome.history[outcome.best_epoch];
    println!(
        "best epoch {}: val loss {:.5}, val ssim {:.4}; weights in {}",
        best.epoch,
        best.val_loss,
        best.val_ssim,
        a.out.display()
    );
    Ok(())
}

fn normalized(sf: &SFMap, peak: f32) -> Plane {
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    sf.values().map(|v| v * scale)
}

fn run_fuse(a: FuseArgs) -> anyhow::Result<()> {
    let mut cfg = a.fusion.config()?;
    cfg.keep_intermediates = a.save_intermediates.is_some();
    let params = weights(&a.fusion.weights)?;
    let (img1, img2) = (load(&a.first)?, load(&a.second)?);
    let result = fuse_pair(&img1, &img2, &params, &cfg)?;
    save(&result.fused, &a.output)?;
    if let Some(path) = &a.save_decision {
        let Some(d) = &result.decision else {
            bail!(UsageError(format!("mode {} produces no decision map", cfg.mode)));
        };
        save_image(&d.to_image(), path)?;
    }
    if let (Some(dir), Some(inter)) = (&a.save_intermediates, &result.intermediates) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let peak = inter.sf1.values().min_max().1.max(inter.sf2.values().min_max().1);
        save_plane(&normalized(&inter.sf1, peak), &dir.join("sf1.png"))?;
        save_plane(&normalized(&inter.sf2, peak), &dir.join("sf2.png"))?;
        save_image(&inter.initial.to_image(), dir.join("initial.png"))?;
        save_image(&inter.verified.to_image(), dir.join("verified.png"))?;
        save_plane(&inter.fused_initial, &dir.join("fused_initial.png"))?;
        if let Some(d) = &result.decision {
            save_image(&d.to_image(), dir.join("soft.png"))?;
        }
    }
    Ok(())
}

fn run_stack(a: StackArgs) -> anyhow::Result<()> {
    let cfg = a.fusion.config()?;
    let params = weights(&a.fusion.weights)?;
    let images = a.images.iter().map(|p| load(p)).collect::<anyhow::Result<Vec<_>>>()?;
    save(&fuse_stack(&images, &params, &cfg)?, &a.output)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Finds `name_A.ext` files and pairs them with `name_B` and `name_GT`.
fn discover_pairs(dir: &Path) -> anyhow::Result<Vec<EvalPair>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    let sibling = |stem: &str, tag: &str| {
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| dir.join(format!("{stem}_{tag}.{ext}")))
            .find(|p| p.exists())
    };
    let mut pairs = Vec::new();
    for path in &files {
        let Some(file_stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let Some(stem) = file_stem.strip_suffix("_A") else { continue };
        pairs.push(EvalPair {
            name: stem.to_string(),
            data: PairData::Files {
                a: path.clone(),
                // A missing partner is reported as a skipped pair.
                b: sibling(stem, "B").unwrap_or_else(|| dir.join(format!("{stem}_B.{ext}"))),
                truth: sibling(stem, "GT"),
            },
        });
    }
    if pairs.is_empty() {
        bail!(Error::Empty { what: "pair directory (no *_A images)" });
    }
    Ok(pairs)
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = a.fusion.config()?;
    let modes = a
        .modes
        .split(',')
        .map(|m| m.trim().parse::<FusionMode>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    if a.jobs == 0 {
        bail!(UsageError("--jobs must be at least 1".into()));
    }
    let params = weights(&a.fusion.weights)?;
    let pairs = discover_pairs(&a.pairs)?;
    let report = evaluate(&pairs, &modes, &params, &cfg, a.jobs)?;
    fs::write(&a.report, report.to_json()?).with_context(|| format!("writing {}", a.report.display()))?;
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    print!("{}", report.to_csv());
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.name, s.reason);
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    if let Some(count) = a.corpus {
        if a.size == 0 {
            bail!(UsageError("--size must be positive".into()));
        }
        for i in 0..count {
            let img = scene(a.size, a.size, a.seed.wrapping_add(i as u64));
            save_plane(&img, &a.out_dir.join(format!("scene_{i:04}.png")))?;
        }
        return Ok(());
    }
    let source = match (&a.image, a.scene) {
        (Some(path), None) => load(path)?,
        (None, Some(seed)) => RealImage::gray(scene(a.size, a.size, seed)),
        _ => bail!(UsageError("give exactly one of --image, --scene or --corpus".into())),
    };
    let geometry: Geometry = a.geometry.parse().map_err(usage)?;
    let pair = synth_pair(&SynthSpec {
        source,
        sigma: a.sigma,
        geometry,
        seed: a.seed,
    })?;
    let out = |tag: &str| a.out_dir.join(format!("{}_{tag}.png", a.name));
    save(&pair.a, &out("A"))?;
    save(&pair.b, &out("B"))?;
    save(&pair.truth, &out("GT"))?;
    save_plane(&pair.mask, &out("mask"))?;
    Ok(())
}

fn run_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let bytes = fs::read(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let params = weights(&a.weights)?;
    let plan = params.metadata.plan;
    println!("file      {}", a.weights.display());
    println!("format    {}", params.metadata.format_version);
    println!("crc32     {:#010x}", file_crc(&bytes));
    println!(
        "plan      growth {}, se hidden {}, decoder {:?}",
        plan.growth, plan.se_hidden, plan.decoder
    );
    println!("params    {}", params.parameter_count());
    println!();
    println!("{:<14} {:<16} {:>8} {:>11} {:>11} {:>11}", "name", "shape", "count", "min", "max", "mean");
    for (name, t) in params.entries() {
        let (lo, hi) = t.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mean = t.sum() / t.data().len() as f64;
        println!(
            "{:<14} {:<16} {:>8} {:>11.4e} {:>11.4e} {:>11.4e}",
            name,
            t.shape().to_string(),
            t.data().len(),
            lo,
            hi,
            mean
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Fuse(a) => run_fuse(a),
        Command::Stack(a) => run_stack(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
