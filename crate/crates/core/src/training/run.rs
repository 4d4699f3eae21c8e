use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, save_checkpoint, validate, StepLosses, Trainer};
use crate::config::RunConfig;
use crate::data::{load_manifest, Dataset};
use crate::error::{config_err, Error, Result};
use crate::metrics::{Aggregate, FeatureEmbedder, MetricReport};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const HISTORY_FILE: &str = "history.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_DIR: &str = "best";
pub const REPORT_DIR: &str = "report";
pub const NAN_DUMP: &str = "nan_dump.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub g_lr: f64,
    pub d_lr: f64,
    pub losses: StepLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub val_split: String,
    pub val: Aggregate,
    pub fid: f64,
    /// Generator rate in effect for the next epoch.
    pub g_lr: f64,
    pub best: bool,
}

/// One line of `history.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

impl HistoryRecord {
    fn epoch(&self) -> usize {
        match self {
            HistoryRecord::Step(s) => s.epoch,
            HistoryRecord::Epoch(e) => e.epoch,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Wipe an existing run directory first.
    pub force: bool,
    /// Stop after this many epochs in total, as if interrupted.
    pub stop_after: Option<usize>,
    /// Written as `config.snapshot` instead of the serialized config.
    pub config_text: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub epochs_completed: usize,
    pub global_step: u64,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub history: Vec<HistoryRecord>,
    /// Validation report of the best checkpoint; `None` when stopped early.
    pub final_report: Option<MetricReport>,
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_history(path: &Path, records: &[HistoryRecord]) -> Result<()> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn append(file: &mut fs::File, path: &Path, rec: &HistoryRecord) -> Result<()> {
    writeln!(file, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

/// Newest `checkpoints/epoch_<n>` directory of a run.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        let n = p
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("epoch_"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(n) = n {
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, p));
            }
        }
    }
    Ok(best)
}

fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, String)> {
    let manifest = load_manifest(&cfg.data.manifest)?;
    let with_norms = |mut d: Dataset| {
        d.sar_norm = cfg.data.sar_norm;
        d.optical_norm = cfg.data.optical_norm;
        d
    };
    let train = with_norms(Dataset::load(&manifest, cfg.data.train_split)?);
    let (val, val_name) = if manifest.split(cfg.data.val_split).is_empty() {
        warn!(
            "split {} is empty; validating on {} instead",
            cfg.data.val_split, cfg.data.train_split
        );
        (train.clone(), cfg.data.train_split.to_string())
    } else {
        (with_norms(Dataset::load(&manifest, cfg.data.val_split)?), cfg.data.val_split.to_string())
    };
    let (h, w) = train.tile_size();
    cfg.generator.validate_tile(h, w)?;
    cfg.discriminator.validate_tile(h, w)?;
    if val.tile_size() != (h, w) {
        return Err(config_err!("train tiles are {h}x{w} but validation tiles are {:?}", val.tile_size()));
    }
    Ok((train, val, val_name))
}

fn prepare_dir(cfg: &RunConfig, run_dir: &Path, opts: &RunOptions) -> Result<Option<Trainer>> {
    if opts.force && run_dir.exists() {
        fs::remove_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    }
    fs::create_dir_all(run_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(run_dir, e))?;
    let latest = latest_checkpoint(run_dir)?;
    let history_path = run_dir.join(HISTORY_FILE);
    match latest {
        Some((epoch, path)) if opts.resume => {
            let trainer = load_checkpoint(&path, Some(cfg))?;
            let kept: Vec<HistoryRecord> = read_history(&history_path)?
                .into_iter()
                .filter(|r| r.epoch() <= epoch)
                .collect();
            write_history(&history_path, &kept)?;
            info!("resuming from epoch {epoch} at step {}", trainer.global_step);
            Ok(Some(trainer))
        }
        Some(_) => Err(config_err!(
            "{} already holds checkpoints; resume it or start over with force",
            run_dir.display()
        )),
        None => {
            let snapshot = match &opts.config_text {
                Some(t) => t.clone(),
                None => cfg.to_toml()?,
            };
            let path = run_dir.join(SNAPSHOT_FILE);
            fs::write(&path, snapshot).map_err(|e| Error::io(&path, e))?;
            fs::write(&history_path, "").map_err(|e| Error::io(&history_path, e))?;
            Ok(None)
        }
    }
}

fn dump_nan(run_dir: &Path, err: &Error) {
    let path = run_dir.join(NAN_DUMP);
    let body = serde_json::json!({ "error": err.to_string() });
    if let Err(e) = fs::write(&path, body.to_string()) {
        warn!("could not write {}: {e}", path.display());
    }
}

/// Full loop: per-epoch training, validation on the monitor metric, periodic and
/// best checkpoints, and a final report on the best checkpoint.
pub fn run_training(cfg: &RunConfig, run_dir: &Path, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, val, val_name) = load_splits(cfg)?;
    let mut trainer = match prepare_dir(cfg, run_dir, opts)? {
        Some(t) => t,
        None => Trainer::new(cfg)?,
    };
    let embedder = FeatureEmbedder::optical();
    let tc = &cfg.train;
    let history_path = run_dir.join(HISTORY_FILE);
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&history_path)
        .map_err(|e| Error::io(&history_path, e))?;
    let last_epoch = opts.stop_after.map_or(tc.epochs, |s| s.min(tc.epochs));

    while trainer.epoch < last_epoch {
        let epoch = trainer.epoch + 1;
        let cap = tc.max_steps_per_epoch.unwrap_or(usize::MAX);
        for batch in train.batches(tc.batch_size, tc.shuffle_seed(epoch))?.take(cap) {
            let losses = match trainer.train_step(&batch?) {
                Ok(l) => l,
                Err(e @ Error::Numerical(_)) => {
                    dump_nan(run_dir, &e);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let rec = HistoryRecord::Step(StepRecord {
                epoch,
                step: trainer.global_step,
                g_lr: trainer.g_opt.lr,
                d_lr: trainer.d_opt.lr,
                losses,
            });
            append(&mut log, &history_path, &rec)?;
        }
        let report = validate(&trainer.generator, &val, &embedder, tc.batch_size, "validation")?;
        let before = trainer.best_metric;
        trainer.end_epoch(report.aggregate.psnr);
        let improved = trainer.best_metric != before;
        info!(
            "epoch {epoch}: val PSNR {:.3} SSIM {:.3} (g lr {})",
            report.aggregate.psnr, report.aggregate.ssim, trainer.g_opt.lr
        );
        if improved {
            save_checkpoint(&trainer, &run_dir.join(BEST_DIR))?;
        }
        if epoch % tc.checkpoint_every == 0 || epoch == tc.epochs {
            save_checkpoint(&trainer, &run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch}")))?;
        }
        let rec = HistoryRecord::Epoch(EpochRecord {
            epoch,
            step: trainer.global_step,
            val_split: val_name.clone(),
            val: report.aggregate,
            fid: report.fid,
            g_lr: trainer.g_opt.lr,
            best: improved,
        });
        append(&mut log, &history_path, &rec)?;
    }

    let final_report = if trainer.epoch >= tc.epochs && run_dir.join(BEST_DIR).exists() {
        let best = load_checkpoint(&run_dir.join(BEST_DIR), Some(cfg))?;
        let name = format!("best_epoch_{}", best.epoch);
        let report = validate(&best.generator, &val, &embedder, tc.batch_size, &name)?;
        report.write(&run_dir.join(REPORT_DIR))?;
        Some(report)
    } else {
        None
    };
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        epochs_completed: trainer.epoch,
        global_step: trainer.global_step,
        best_epoch: trainer.best_epoch,
        best_metric: trainer.best_metric,
        history: read_history(&history_path)?,
        final_report,
    })
}
