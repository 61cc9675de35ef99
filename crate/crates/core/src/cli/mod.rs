//! Command-line front end: `train`, `denoise`, `bench`, `spectrum` and
//! `selftest`.
//!
//! Exit codes: 0 success, 1 usage, 2 data or config error, 3 invariant
//! failure.

pub mod bench;
pub mod memory;
pub mod selftest;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::data::spectrum::write_spectrum_csv;
use crate::data::{load_png, power_spectrum, psnr, save_png, ssim, Dataset};
use crate::error::Error;
use crate::model::{Checkpoint, CrwkvModel, ModelConfig, TAPS};
use crate::training::{denoise, LogRow, RunConfig, Trainer, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "crwkv", version, about = "CRWKV image denoising")]
pub struct Cli {
    /// Worker threads; 1 gives fully deterministic runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise one PNG or every PNG in a directory.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clean reference (file or directory with matching names).
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Run config the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Runtime and memory scaling.
    Bench {
        #[arg(long, value_enum)]
        mode: BenchMode,
        /// Ascending sizes: sequence lengths (wkv) or image sides (model).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Sequence lengths for the quadratic reference (wkv mode).
        #[arg(long, value_delimiter = ',')]
        reference_sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 4096)]
        budget_mb: usize,
        /// Run config providing the model (model mode; default config otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Radial power spectra of intermediate feature maps.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "enc1,enc2,enc3,latent")]
        tags: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fast invariant suite.
    Selftest {
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Wkv,
    Model,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => EXIT_INVARIANT,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::Train { config, out, resume } => cmd_train(&config, &out, resume.as_deref(), seed),
        Command::Denoise {
            checkpoint,
            input,
            out,
            clean,
            config,
        } => cmd_denoise(&checkpoint, &input, &out, clean.as_deref(), config.as_deref(), seed),
        Command::Bench {
            mode,
            sizes,
            reference_sizes,
            repeats,
            channels,
            budget_mb,
            config,
            out,
        } => {
            let opts = BenchOptions {
                mode,
                sizes,
                reference_sizes,
                repeats,
                channels,
                budget_bytes: budget_mb << 20,
                config,
                seed,
            };
            cmd_bench(&opts, &out)
        }
        Command::Spectrum {
            checkpoint,
            image,
            tags,
            out,
        } => cmd_spectrum(&checkpoint, &image, &tags, &out, seed),
        Command::Selftest {
            filter,
            csv,
            inject_fault,
        } => cmd_selftest(filter.as_deref(), csv.as_deref(), inject_fault.as_deref()),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Sidecar recording the command and seed next to outputs that cannot
/// carry them (PNGs, headered CSVs).
fn write_provenance(path: &Path, command: &str, seed: u64) -> CliResult {
    let body = json!({ "command": command, "seed": seed, "version": env!("CARGO_PKG_VERSION") });
    write(path, &format!("{}\n", serde_json::to_string_pretty(&body).expect("plain json")))
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    if !path.is_file() {
        return Err(Failure::usage(format!("config file {} not found", path.display())));
    }
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = &cfg.train.data_dir {
        if dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.train.data_dir = Some(base.join(dir));
        }
    }
    Ok(cfg)
}

fn training_data(cfg: &RunConfig, seed: u64) -> CliResult<Dataset> {
    match &cfg.train.data_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Failure::usage(format!("dataset directory {} not found", dir.display())));
            }
            Ok(Dataset::load_dir(dir)?)
        }
        None if cfg.train.synthetic_images > 0 => Ok(Dataset::synthetic(cfg.train.synthetic_images, cfg.train.synthetic_size, seed)),
        None => Err(Failure::usage("config sets neither data_dir nor synthetic_images")),
    }
}

pub fn cmd_train(config: &Path, out: &Path, resume: Option<&Path>, seed: u64) -> CliResult {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let data = training_data(&cfg, seed)?;
    create_dir(out)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone(), seed)?,
    };
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = if trainer.iteration > 0 && metrics_path.is_file() {
        fs::read_to_string(&metrics_path).map_err(|e| Failure::from(Error::io(&metrics_path, e)))?
    } else {
        format!("{METRICS_HEADER}\n")
    };
    let ck_path = out.join("model.ckpt");
    let mut last: Option<LogRow> = None;
    trainer.run(
        &data,
        &mut |row| {
            metrics.push_str(&row.csv_line());
            metrics.push('\n');
            log::info!("iter {} lr {:.3e} loss {:.5} psnr {:.2}", row.iter, row.lr, row.loss, row.psnr);
            last = Some(*row);
            fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))
        },
        &mut |tr| tr.checkpoint().save(&ck_path),
    )?;
    write(&metrics_path, &metrics)?;
    if trainer.iteration == 0 {
        trainer.checkpoint().save(&ck_path)?;
    }
    let summary = json!({
        "seed": trainer.seed,
        "iterations": trainer.iteration,
        "config_hash": cfg.hash(),
        "model_config_hash": cfg.model.hash(),
        "parameters": trainer.model.count_parameters(),
        "final": last.map(|r| json!({"iter": r.iter, "lr": r.lr, "loss": r.loss, "psnr": r.psnr})),
    });
    write(&out.join("run.json"), &format!("{}\n", serde_json::to_string_pretty(&summary).expect("plain json")))?;
    println!(
        "trained {} iterations ({} parameters); checkpoint {}",
        trainer.iteration,
        trainer.model.count_parameters(),
        ck_path.display()
    );
    Ok(())
}

fn png_files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Failure::usage(format!("input {} not found", path.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Failure::from(Error::io(path, e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> CliResult<CrwkvModel<f32>> {
    if !checkpoint.is_file() {
        return Err(Failure::usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(cfg_path) = config {
        let cfg = load_config(cfg_path)?;
        let (want, got) = (cfg.model.hash(), ck.config.hash());
        if want != got {
            return Err(Error::Config(format!("config hash mismatch: config {want}, checkpoint {got}")).into());
        }
    }
    Ok(ck.to_model::<f32>()?)
}

pub fn cmd_denoise(checkpoint: &Path, input: &Path, out: &Path, clean: Option<&Path>, config: Option<&Path>, seed: u64) -> CliResult {
    let model = load_model(checkpoint, config)?;
    let files = png_files(input)?;
    create_dir(out)?;
    for file in &files {
        let name = file.file_name().expect("file path");
        let noisy = load_png(file)?;
        let y = denoise(&model, &noisy)?;
        save_png(&y, &out.join(name))?;
        if let Some(c) = clean {
            let reference = if c.is_dir() { c.join(name) } else { c.to_path_buf() };
            let c = load_png(&reference)?;
            println!(
                "{}: noisy {:.2} dB, denoised {:.2} dB, ssim {:.4}",
                name.to_string_lossy(),
                psnr(&noisy, &c)?,
                psnr(&y, &c)?,
                ssim(&y, &c)?
            );
        }
    }
    write_provenance(&out.join("run.json"), "denoise", seed)?;
    println!("denoised {} image(s) into {}", files.len(), out.display());
    Ok(())
}

pub struct BenchOptions {
    pub mode: BenchMode,
    pub sizes: Vec<usize>,
    pub reference_sizes: Option<Vec<usize>>,
    pub repeats: usize,
    pub channels: usize,
    pub budget_bytes: usize,
    pub config: Option<PathBuf>,
    pub seed: u64,
}

fn ascending(sizes: &[usize]) -> CliResult {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::usage(format!("sizes must be ascending, got {sizes:?}")));
    }
    Ok(())
}

pub fn cmd_bench(opts: &BenchOptions, out: &Path) -> CliResult {
    ascending(&opts.sizes)?;
    let rows = match opts.mode {
        BenchMode::Wkv => {
            let reference = opts.reference_sizes.clone().unwrap_or_else(|| opts.sizes.clone());
            ascending(&reference)?;
            let cfg = bench::WkvBench {
                scan_sizes: opts.sizes.clone(),
                reference_sizes: reference,
                channels: opts.channels,
                repeats: opts.repeats,
                budget_bytes: opts.budget_bytes,
                seed: opts.seed,
            };
            bench::bench_wkv(&cfg)?
        }
        BenchMode::Model => {
            let config = match &opts.config {
                Some(p) => load_config(p)?.model,
                None => ModelConfig::default(),
            };
            let cfg = bench::ModelBench {
                config,
                sizes: opts.sizes.clone(),
                repeats: opts.repeats,
                budget_bytes: opts.budget_bytes,
                seed: opts.seed,
            };
            bench::bench_model(&cfg)?
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(out, &bench::rows_csv(&rows))?;
    write_provenance(&out.with_extension("json"), "bench", opts.seed)?;
    let x_of = |s: usize| match opts.mode {
        BenchMode::Wkv => s as f64,
        BenchMode::Model => (s * s) as f64,
    };
    let variants: &[&str] = match opts.mode {
        BenchMode::Wkv => &["scan", "reference"],
        BenchMode::Model => &["model"],
    };
    for v in variants {
        let fmt = |s: Option<f64>| s.map_or("n/a".to_string(), |s| format!("{s:.3}"));
        println!(
            "{v}: time slope {}, memory slope {}",
            fmt(bench::time_slope(&rows, v, x_of)),
            fmt(bench::memory_slope(&rows, v, x_of))
        );
    }
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

pub fn cmd_spectrum(checkpoint: &Path, image: &Path, tags: &[String], out: &Path, seed: u64) -> CliResult {
    if let Some(bad) = tags.iter().find(|t| !TAPS.contains(&t.as_str())) {
        return Err(Failure::usage(format!("unknown layer tag {bad:?}; available: {}", TAPS.join(", "))));
    }
    let model = load_model(checkpoint, None)?;
    let img = load_png(image)?;
    let padded = crate::model::pad_reflect(&img, crate::model::SIZE_MULTIPLE);
    let mut profiles = Vec::new();
    model.forward_taps(&padded, &mut |name, feat| {
        if tags.iter().any(|t| t == name) {
            profiles.push(power_spectrum(feat, name));
        }
    })?;
    create_dir(out)?;
    for p in &profiles {
        let path = out.join(format!("spectrum_{}.csv", p.layer));
        write_spectrum_csv(&path, std::slice::from_ref(p))?;
        println!("{}: {} bins -> {}", p.layer, p.log_amplitude.len(), path.display());
    }
    write_provenance(&out.join("run.json"), "spectrum", seed)
}

pub fn cmd_selftest(filter: Option<&str>, csv: Option<&Path>, fault: Option<&str>) -> CliResult {
    let faults = match fault {
        None => selftest::Faults::default(),
        Some("scan") => selftest::Faults { corrupt_scan: true },
        Some(other) => return Err(Failure::usage(format!("unknown fault {other:?}"))),
    };
    let outcomes = selftest::run_selftest(filter, &faults);
    if outcomes.is_empty() {
        return Err(Failure::usage(format!("no check matches {:?}", filter.unwrap_or(""))));
    }
    print!("{}", selftest::outcomes_table(&outcomes));
    if let Some(path) = csv {
        write(path, &selftest::outcomes_csv(&outcomes))?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_INVARIANT,
            message: format!("failed: {}", failed.join(", ")),
        })
    }
}
