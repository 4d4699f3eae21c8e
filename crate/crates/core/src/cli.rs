//! Command-line front end. `run` returns the process exit code: 0 on success,
//! 1 for invalid input, 2 for runtime failures.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use log::info;
use serde::Serialize;

use crate::ablation::AblationSpec;
use crate::config::RunConfig;
use crate::data::{load_manifest, write_blob, write_toy_corpus, Dataset, Raster, Split, MANIFEST_FILE};
use crate::error::{config_err, data_err, Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::metrics::{evaluate, render_table, report_from_pairs, FeatureEmbedder, MetricReport};
use crate::training::{load_generator, run_ablation, run_training, synthesize_dataset, RunOptions};

/// Overrides the directory that holds runs and the default log file.
pub const RUN_ROOT_ENV: &str = "CRSYNTH_RUN_ROOT";
const DEFAULT_RUN_ROOT: &str = "runs";
const LOG_NAME: &str = "crsynth.log";
const PANEL_GAP: u32 = 2;

#[derive(Debug, Parser)]
#[command(name = "crsynth", version, about = "Cloud removal by SAR-optical synthesis")]
pub struct Cli {
    /// Log file; defaults to `<run root>/crsynth.log`.
    #[arg(long, global = true)]
    pub log_file: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with manifest and print its hash.
    MakeToyData(ToyArgs),
    /// Train from a config file into a run directory.
    Train(TrainArgs),
    /// Score predicted tiles against references.
    Evaluate(EvaluateArgs),
    /// Predict every tile of a manifest split from a checkpoint.
    Synthesize(SynthesizeArgs),
    /// Train the ablation variants and write the comparison table.
    Ablate(AblateArgs),
    /// Side-by-side metrics and image panels for several runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Target T1 cloud fraction.
    #[arg(long, default_value_t = 0.3)]
    pub cloud: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `<run root>/<config file stem>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long, conflicts_with = "resume")]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<tile_id>.bin|.tif` predictions, or a corpus root.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "prediction")]
    pub model_name: String,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Checkpoint directory (`best/` or `checkpoints/epoch_<n>`) or a run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated settings, or `all`.
    #[arg(long, default_value = "all")]
    pub variants: String,
    /// Defaults to `<run root>/<config file stem>_ablation`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run or checkpoint directories, one prediction column each.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    /// Panels for at most this many tiles.
    #[arg(long)]
    pub max_panels: Option<usize>,
}

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from)
}

struct FileLog {
    file: Mutex<fs::File>,
}

impl log::Log for FileLog {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Info
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            let line = format!("[{} {}] {}", r.level(), r.target(), r.args());
            if r.level() == log::Level::Warn {
                eprintln!("{line}");
            }
            if let Ok(mut f) = self.file.lock() {
                let _ = writeln!(f, "{line}");
            }
        }
    }

    fn flush(&self) {
        if let Ok(mut f) = self.file.lock() {
            let _ = f.flush();
        }
    }
}

fn init_logging(path: &Path) {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        let _ = fs::create_dir_all(dir);
    }
    if let Ok(file) = OpenOptions::new().create(true).append(true).open(path) {
        let logger = Box::new(FileLog { file: Mutex::new(file) });
        if log::set_boxed_logger(logger).is_ok() {
            log::set_max_level(log::LevelFilter::Info);
        }
    }
}

/// Parses `args` (program name first), runs the command and maps the outcome
/// to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let log_path = cli.log_file.clone().unwrap_or_else(|| run_root().join(LOG_NAME));
    init_logging(&log_path);
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e} (log: {})", log_path.display());
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::MakeToyData(a) => make_toy_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    }
}

fn make_toy_data(a: &ToyArgs) -> Result<()> {
    let summary = write_toy_corpus(&a.out, a.n, a.size, a.seed, a.cloud, a.force)?;
    info!("wrote {} toy scenes to {}", summary.n, summary.root.display());
    println!("{}", summary.hash);
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string()
}

/// Reads a config and resolves a relative manifest path against the config's directory.
fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::from_toml(&text).map_err(|e| match e {
        Error::TomlDe(inner) => config_err!("{}: {inner}", path.display()),
        other => other,
    })?;
    if cfg.data.manifest.is_relative() {
        if let Some(dir) = path.parent() {
            cfg.data.manifest = dir.join(&cfg.data.manifest);
        }
    }
    if cfg.data.manifest.is_dir() {
        cfg.data.manifest = cfg.data.manifest.join(MANIFEST_FILE);
    }
    Ok((cfg, text))
}

fn train(a: &TrainArgs) -> Result<()> {
    let (cfg, text) = load_config(&a.config)?;
    let run_dir = a.run_dir.clone().unwrap_or_else(|| run_root().join(stem(&a.config)));
    let opts = RunOptions {
        resume: a.resume,
        force: a.force,
        stop_after: None,
        config_text: Some(text),
    };
    let out = run_training(&cfg, &run_dir, &opts)?;
    if let Some(r) = &out.final_report {
        print!("{}", r.to_text());
    }
    println!(
        "run directory: {} (epochs {}, steps {}, best epoch {})",
        run_dir.display(),
        out.epochs_completed,
        out.global_step,
        out.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let report = evaluate(&a.pred, &a.reference, &FeatureEmbedder::optical(), &a.model_name)?;
    report.write(&a.out)?;
    print!("{}", report.to_text());
    Ok(())
}

/// A run directory resolves to its `best/` checkpoint.
fn checkpoint_dir(path: &Path) -> PathBuf {
    let best = path.join("best");
    if best.is_dir() {
        best
    } else {
        path.to_path_buf()
    }
}

fn load_split(manifest: &Path, split: Split, cfg: &RunConfig) -> Result<Dataset> {
    let manifest = if manifest.is_dir() { manifest.join(MANIFEST_FILE) } else { manifest.to_path_buf() };
    let m = load_manifest(&manifest)?;
    let mut d = Dataset::load(&m, split)?;
    d.sar_norm = cfg.data.sar_norm;
    d.optical_norm = cfg.data.optical_norm;
    let (h, w) = d.tile_size();
    cfg.generator.validate_tile(h, w)?;
    Ok(d)
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(config_err!("{} is not empty; pass --force to overwrite", out.display()));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn synthesize(a: &SynthesizeArgs) -> Result<()> {
    let (cfg, generator) = load_generator(&checkpoint_dir(&a.checkpoint))?;
    let data = load_split(&a.manifest, a.split, &cfg)?;
    prepare_out(&a.out, a.force)?;
    let preds = synthesize_dataset(&generator, &data, cfg.train.batch_size)?;
    for ((id, raster), scene) in preds.iter().zip(&data.scenes) {
        write_blob(&a.out.join(format!("{id}.bin")), raster, scene.geo)?;
    }
    println!("wrote {} tiles to {}", preds.len(), a.out.display());
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let (cfg, _) = load_config(&a.config)?;
    let variants: Vec<(String, AblationSpec)> = if a.variants.trim().eq_ignore_ascii_case("all") {
        AblationSpec::table_variants()
    } else {
        a.variants
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|name| {
                AblationSpec::by_name(name)
                    .map(|spec| (name.to_string(), spec))
                    .ok_or_else(|| config_err!("unknown ablation setting {name}"))
            })
            .collect::<Result<_>>()?
    };
    let out = a.out.clone().unwrap_or_else(|| run_root().join(format!("{}_ablation", stem(&a.config))));
    let table = run_ablation(&cfg, &variants, &out, a.force)?;
    print!("{}", table.to_text());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ComparisonReport {
    split: String,
    runs: Vec<MetricReport>,
    panels: Vec<String>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Optical reflectance (first three bands) as RGB, SAR dB (first band) as grey.
fn tile_image(r: &Raster, sar: bool) -> RgbImage {
    let (h, w) = (r.height() as u32, r.width() as u32);
    RgbImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        if sar {
            let g = to_u8((f64::from(r.plane(0)[i]) + 25.0) / 25.0);
            Rgb([g, g, g])
        } else {
            let c = |b: usize| to_u8(f64::from(r.plane(b.min(r.channels() - 1))[i]));
            Rgb([c(0), c(1), c(2)])
        }
    })
}

/// One row: SAR T1, SAR T2, optical T1, one prediction per run, reference.
pub fn compose_panel(columns: &[RgbImage]) -> RgbImage {
    let (w, h) = columns.first().map_or((0, 0), |c| c.dimensions());
    let n = columns.len() as u32;
    let mut out = RgbImage::from_pixel(n * w + n.saturating_sub(1) * PANEL_GAP, h, Rgb([255, 255, 255]));
    for (i, c) in columns.iter().enumerate() {
        image::imageops::replace(&mut out, c, i64::from(i as u32 * (w + PANEL_GAP)), 0);
    }
    out
}

fn report(a: &ReportArgs) -> Result<()> {
    let embedder = FeatureEmbedder::optical();
    let mut runs = Vec::with_capacity(a.runs.len());
    for dir in &a.runs {
        let (cfg, generator) = load_generator(&checkpoint_dir(dir))?;
        let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        runs.push((name, cfg, generator));
    }
    let data = load_split(&a.manifest, a.split, &runs[0].1)?;
    let mut predictions = Vec::with_capacity(runs.len());
    let mut reports = Vec::with_capacity(runs.len());
    for (name, cfg, generator) in &runs {
        if data.tile_size() != load_split(&a.manifest, a.split, cfg)?.tile_size() {
            return Err(data_err!("run {name} cannot score this split"));
        }
        let preds = synthesize_dataset(generator, &data, cfg.train.batch_size)?;
        let pairs = preds
            .iter()
            .zip(&data.scenes)
            .map(|((id, p), s)| {
                Ok((
                    id.clone(),
                    ImageTensor::new(p.to_tensor(), ValueRange::Unit)?,
                    ImageTensor::new(s.s2_t2_ref.to_tensor(), ValueRange::Unit)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(report_from_pairs(name, &pairs, &embedder)?);
        predictions.push(preds);
    }

    fs::create_dir_all(a.out.join("panels")).map_err(|e| Error::io(&a.out, e))?;
    let limit = a.max_panels.unwrap_or(usize::MAX);
    let mut panels = Vec::new();
    for (i, scene) in data.scenes.iter().enumerate().take(limit) {
        let mut cols = vec![
            tile_image(&scene.s1_t1, true),
            tile_image(&scene.s1_t2, true),
            tile_image(&scene.s2_t1, false),
        ];
        cols.extend(predictions.iter().map(|p| tile_image(&p[i].1, false)));
        cols.push(tile_image(&scene.s2_t2_ref, false));
        let rel = format!("panels/{}.png", scene.tile_id);
        let path = a.out.join(&rel);
        compose_panel(&cols).save(&path)?;
        panels.push(rel);
    }

    let rows: Vec<Vec<String>> = reports.iter().map(MetricReport::table_row).collect();
    let mut text = render_table(&["Model", "PSNR", "SSIM", "MAE", "RMSE", "FID"], &rows);
    text.push_str(&format!(
        "\nsplit: {}   tiles: {}   panel columns: SAR T1, SAR T2, optical T1, {}, reference\n",
        a.split,
        data.len(),
        runs.iter().map(|r| r.0.as_str()).collect::<Vec<_>>().join(", ")
    ));
    let put = |name: &str, body: String| {
        let p = a.out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    put("comparison.txt", text.clone())?;
    let summary = ComparisonReport {
        split: a.split.to_string(),
        runs: reports,
        panels,
    };
    put("comparison.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_width_counts_columns_and_gaps() {
        let tile = RgbImage::new(8, 8);
        let p = compose_panel(&vec![tile; 6]);
        assert_eq!(p.dimensions(), (6 * 8 + 5 * PANEL_GAP, 8));
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["crsynth", "train"]), 1);
        assert_eq!(run(["crsynth", "no-such-command"]), 1);
        assert_eq!(run(["crsynth", "--help"]), 0);
    }
}
