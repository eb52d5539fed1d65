//! Command-line interface. [`run`] parses arguments and returns the exit code.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | usage error: bad flags or an invalid configuration |
//! | 2 | runtime error |

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::PromptSet;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fusion::CrossFusion;
use crate::io::{heatmap_overlay, list_images, load_image, save_image, side_by_side, write_array};
use crate::metrics::evaluate_dirs;
use crate::restore::restore_image;
use crate::synth::{generate_corpus, write_scenes};
use crate::train::{load_network, run_ablation, AblationPreset, Checkpoint, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dapled", version, about = "Joint low-light enhancement and deblurring guided by degradation heatmaps")]
pub struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write degraded/sharp training pairs and a manifest.
    Synth(SynthArgs),
    /// Train a restoration network.
    Train(TrainArgs),
    /// Restore one image or a directory of images.
    Restore(RestoreArgs),
    /// Export degradation heatmaps.
    Heatmap(HeatmapArgs),
    /// PSNR and SSIM of predictions against ground truth.
    Eval(EvalArgs),
    /// Train every ablation preset and print the result tables.
    Ablate(AblateArgs),
    /// Write procedural sharp scenes.
    Scenes(ScenesArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of pairs.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Directory of sharp source images; procedural scenes when omitted.
    #[arg(long, value_name = "DIR")]
    pub source: Option<PathBuf>,
    /// Side length of procedural scenes.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, value_name = "DIR", default_value = "corpus")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
    /// Overrides `train.out_dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides `train.iterations`.
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// An image file or a directory of images.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Also write `<name>_grid.png` with input and output side by side.
    #[arg(long)]
    pub grid: bool,
    /// Replaces the checkpoint's prompts; repeat for several.
    #[arg(long = "prompt", value_name = "TEXT")]
    pub prompts: Vec<String>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// An image file or a directory of images.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Replaces the configured prompts; repeat for several.
    #[arg(long = "prompt", value_name = "TEXT")]
    pub prompts: Vec<String>,
    /// Also write the raw cosine grids as `<name>.heat` arrays here.
    #[arg(long, value_name = "DIR")]
    pub raw_out: Option<PathBuf>,
    /// Overlay opacity.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    /// Write the per-image table here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated subset of presets; all six by default.
    #[arg(long, value_delimiter = ',', value_name = "NAMES")]
    pub presets: Vec<String>,
    /// Overrides `train.iterations` for every preset.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Write the markdown tables here as well as to stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScenesArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, value_name = "DIR", default_value = "scenes")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Train(a) => train(cfg, a, cli.config.is_some(), cli.seed),
        Command::Restore(a) => restore(a),
        Command::Heatmap(a) => heatmap(cfg, a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(cfg, a),
        Command::Scenes(a) => scenes(cfg, a),
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::config("--size must be positive"));
    }
    Ok(())
}

fn synth(cfg: Config, a: SynthArgs) -> Result<()> {
    check_size(a.size)?;
    let records = match &a.source {
        Some(src) => generate_corpus(src, &a.out, a.count, cfg.seed, &cfg.data.degradation)?,
        None => {
            let scenes = a.out.join("scenes");
            write_scenes(&scenes, a.count.max(1), a.size, cfg.seed)?;
            generate_corpus(&scenes, &a.out, a.count, cfg.seed, &cfg.data.degradation)?
        }
    };
    println!("wrote {} pairs to {}", records.len(), a.out.display());
    Ok(())
}

fn scenes(cfg: Config, a: ScenesArgs) -> Result<()> {
    check_size(a.size)?;
    let paths = write_scenes(&a.out, a.count, a.size, cfg.seed)?;
    println!("wrote {} scenes to {}", paths.len(), a.out.display());
    Ok(())
}

/// On resume the checkpoint's configuration is used unless `--config` is given.
fn train(mut cfg: Config, a: TrainArgs, explicit_config: bool, seed: Option<u64>) -> Result<()> {
    let ckpt = a.resume.as_deref().map(Checkpoint::read).transpose()?;
    if let (Some(c), false) = (&ckpt, explicit_config) {
        cfg = c.config.clone();
        if let Some(s) = seed {
            cfg.seed = s;
        }
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(o) = &a.out {
        cfg.train.out_dir = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    if a.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let out = cfg.out_dir();
    let mut trainer = Trainer::new(cfg)?;
    if let Some(c) = &ckpt {
        trainer.load_checkpoint(c)?;
        log::info!("resumed at iteration {}", trainer.iteration());
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, trainer.config().dump()).map_err(|e| Error::io(&cfg_path, e))?;
    let reports = trainer.fit(Some(&out))?;
    let m = trainer.evaluate_holdout()?;
    if let Some(r) = reports.last() {
        println!("iteration {}  rec loss {:.5}", r.iteration, r.loss.rec);
    }
    println!("holdout psnr {:.3}  ssim {:.4}", m.mean_psnr, m.mean_ssim);
    println!("checkpoints in {}", out.display());
    Ok(())
}

/// Files named by `input`: the file itself or the images in a directory.
fn inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        list_images(input)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::Validation(format!("input {} does not exist", input.display())))
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn restore(a: RestoreArgs) -> Result<()> {
    if !a.ckpt.is_file() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", a.ckpt.display())));
    }
    let files = inputs(&a.input)?;
    let (mut cfg, net) = load_network(&a.ckpt)?;
    if !a.prompts.is_empty() {
        cfg.fusion.prompts = a.prompts.clone();
    }
    let fusion = cfg.cross_fusion()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (mut done, mut skipped) = (0usize, 0usize);
    for f in &files {
        let img = match load_image(f) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", f.display());
                skipped += 1;
                continue;
            }
        };
        let restored = restore_image(&net, &fusion, &img)?;
        let name = stem(f);
        save_image(&restored, &a.out.join(format!("{name}.png")))?;
        if a.grid {
            save_image(&side_by_side(&[&img, &restored])?, &a.out.join(format!("{name}_grid.png")))?;
        }
        done += 1;
    }
    println!("restored {done} images, skipped {skipped}");
    if done == 0 && skipped > 0 {
        return Err(Error::Validation("no input image could be decoded".into()));
    }
    Ok(())
}

fn heatmap(mut cfg: Config, a: HeatmapArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Error::config("--alpha must lie in [0, 1]"));
    }
    if !a.prompts.is_empty() {
        cfg.fusion.prompts = a.prompts.clone();
    }
    let files = inputs(&a.input)?;
    let fusion: CrossFusion = cfg.cross_fusion()?;
    let prompts: &PromptSet = fusion.prompts();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    if let Some(r) = &a.raw_out {
        fs::create_dir_all(r).map_err(|e| Error::io(r, e))?;
    }
    let mut skipped = 0usize;
    for f in &files {
        let img = match load_image(f) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", f.display());
                skipped += 1;
                continue;
            }
        };
        let hm = fusion.normalized_heatmap(&img)?;
        let name = stem(f);
        let grid = &hm.normalized;
        for p in 0..grid.prompts {
            let overlay = heatmap_overlay(&img, &grid.plane(p), grid.rows, grid.cols, a.alpha)?;
            let suffix = if grid.prompts == 1 { String::new() } else { format!("_p{p}") };
            save_image(&overlay, &a.out.join(format!("{name}_heatmap{suffix}.png")))?;
        }
        let means: Vec<String> = (0..grid.prompts)
            .map(|p| {
                let plane = grid.plane(p);
                format!("{:.4}", plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64)
            })
            .collect();
        println!("{name}\t{}", means.join("\t"));
        if let Some(r) = &a.raw_out {
            write_array(
                &r.join(format!("{name}.heat")),
                &[hm.raw.rows, hm.raw.cols, hm.raw.prompts],
                &hm.raw.values,
            )?;
        }
    }
    log::info!("prompts: {:?}", prompts.texts());
    if skipped > 0 {
        eprintln!("skipped {skipped} images");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_dirs(&a.pred, &a.gt)?;
    let text = report.to_text();
    match &a.out {
        Some(p) => {
            fs::write(p, &text).map_err(|e| Error::io(p, e))?;
            println!("mean psnr {:.3}  ssim {:.4}", report.mean_psnr, report.mean_ssim);
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn ablate(mut cfg: Config, a: AblateArgs) -> Result<()> {
    let presets: Vec<AblationPreset> = if a.presets.is_empty() {
        AblationPreset::ALL.to_vec()
    } else {
        a.presets.iter().map(|s| s.trim().parse()).collect::<Result<_>>()?
    };
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let table = run_ablation(&cfg, &presets)?;
    let md = table.to_markdown();
    print!("{md}");
    if let Some(p) = &a.out {
        fs::write(p, &md).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
