//! The `cmrsam` command line: phantom generation, training, evaluation and
//! prediction. Exit codes: 0 success, 2 usage or configuration error, 3
//! training aborted on a non-finite value, 4 data geometry mismatch, 1 any
//! other failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{RunConfig, ECHO_FILE};
use crate::dataset::{
    load_clip, save_clip, split_manifest, CineClip, Dims, Manifest, MaskClip, SlicePosition, Split, View, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::{self, ClipMetrics};
use crate::model::Model;
use crate::phantom::{generate_dataset, Grid, ScanSpec};
use crate::preprocess::{phase_selection, prepare_clip, crop_offsets, DataConfig};
use crate::rng;
use crate::train::{predict_clip, train_loop, Checkpoint, LoopOptions, TrainMode, Trainer, FINAL_CHECKPOINT};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRAINING_ABORT: i32 = 3;
pub const EXIT_DIMENSION_MISMATCH: i32 = 4;

/// Fraction of scans assigned to the training split by `phantom`.
pub const TRAIN_FRACTION: f64 = 0.6;

#[derive(Debug, Parser)]
#[command(name = "cmrsam", version, about = "Myocardium segmentation of 2D+T cine MR clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ViewSet {
    Sax,
    Lax,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sax,
    Lax,
    Multi,
    MultiPrompt,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sax => TrainMode::Sax,
            ModeArg::Lax => TrainMode::Lax,
            ModeArg::Multi => TrainMode::Multi,
            ModeArg::MultiPrompt => TrainMode::MultiPrompt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scans: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "sax")]
        views: ViewSet,
        /// Comma list of short-axis levels (basal, mid, apical).
        #[arg(long, value_delimiter = ',')]
        slice_positions: Option<Vec<String>>,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 15)]
        phases: usize,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sax")]
        mode: ModeArg,
        /// Suppress progress output on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and write `metrics.csv` and `metrics.json`.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output directory of the report.
        #[arg(long)]
        report: PathBuf,
        /// Score the ground truth against itself instead of model predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Segment one clip container.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// View prompt for checkpoints trained in `multi-prompt` mode.
        #[arg(long)]
        view: Option<String>,
    },
    /// Print the default configuration with every key.
    Config,
}

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

impl Failure {
    fn usage(error: Error) -> Self {
        Self { code: EXIT_USAGE, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::NonFinite(_) => EXIT_TRAINING_ABORT,
            Error::DimensionMismatch(_) => EXIT_DIMENSION_MISMATCH,
            Error::Config(_) | Error::InvalidParams(_) | Error::UnknownView(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Phantom { out, scans, seed, views, slice_positions, height, width, phases } => {
            let grid = Grid { height, width, num_phases: phases };
            let levels = parse_levels(slice_positions.as_deref()).map_err(Failure::usage)?;
            let manifest = cmd_phantom(&out, scans, seed, views, &levels, grid)?;
            let train = manifest.select(Split::Train).len();
            println!(
                "wrote {} clips ({train} train, {} test) to {}",
                manifest.entries.len(),
                manifest.entries.len() - train,
                out.display()
            );
        }
        Command::Train { config, data, out, mode, quiet } => {
            let cfg = RunConfig::load(&config).map_err(Failure::usage)?;
            let trainer = cmd_train(&cfg, &data, &out, mode.into(), !quiet)?;
            let last = trainer.history.last();
            println!(
                "trained {} epochs in mode {}; final loss {}",
                trainer.epoch,
                trainer.mode,
                last.map(|r| format!("{:.5}", r.loss)).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Eval { ckpt, data, split, report, oracle } => {
            let rep = cmd_eval(ckpt.as_deref(), &data, split, &report, oracle)?;
            if let Some(all) = rep.group("all") {
                println!(
                    "{} clips: mean dice {:.4}, mean hd {}",
                    all.count,
                    all.mean_dice,
                    all.mean_hd.map(|h| format!("{h:.3}")).unwrap_or_else(|| "n/a".into())
                );
            }
        }
        Command::Predict { ckpt, clip, out, view } => {
            let view = view.map(|v| v.parse::<View>()).transpose().map_err(Failure::usage)?;
            let side = cmd_predict(&ckpt, &clip, &out, view)?;
            if let Some(w) = &side.warning {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", out.display());
        }
        Command::Config => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(())
}

fn parse_levels(list: Option<&[String]>) -> Result<Vec<SlicePosition>> {
    let Some(list) = list else {
        return Ok(SlicePosition::LEVELS.to_vec());
    };
    let mut out = Vec::new();
    for s in list {
        let p: SlicePosition = s.trim().parse()?;
        if p == SlicePosition::NotApplicable {
            return Err(Error::InvalidParams("slice positions must be basal, mid or apical".into()));
        }
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidParams("empty slice position list".into()));
    }
    Ok(out)
}

/// Scan `i` is `scan{i:03}` with seed `derive_seed(seed, ["scan", i])`.
/// With two or more scans the manifest is split by scan into train and test.
pub fn cmd_phantom(
    out: &Path,
    scans: usize,
    seed: u64,
    views: ViewSet,
    levels: &[SlicePosition],
    grid: Grid,
) -> Result<Manifest> {
    let mut clip_views: Vec<(View, SlicePosition)> = Vec::new();
    if views != ViewSet::Lax {
        clip_views.extend(levels.iter().map(|p| (View::Sax, *p)));
    }
    if views != ViewSet::Sax {
        clip_views.push((View::Lax, SlicePosition::NotApplicable));
    }
    let specs: Vec<ScanSpec> = (0..scans)
        .map(|i| {
            let mut s = ScanSpec::new(
                format!("scan{i:03}"),
                rng::derive_seed(seed, &[rng::tag("scan"), i as u64]),
                clip_views.clone(),
            );
            s.grid = grid;
            s
        })
        .collect();
    let mut manifest = generate_dataset(&specs, out)?;
    if scans >= 2 {
        manifest = split_manifest(&manifest, TRAIN_FRACTION, seed)?;
        manifest.write(out)?;
    }
    Ok(manifest)
}

/// Loads and prepares the clips of `split` (all clips when `None`).
pub fn load_split(data: &Path, split: Option<Split>, config: &DataConfig) -> Result<Vec<(CineClip, MaskClip)>> {
    let manifest = Manifest::read(data.join(MANIFEST_FILE))?;
    manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| {
            let (c, m) = Manifest::load_entry(data, e)?;
            prepare_clip(&c, &m, config)
        })
        .collect()
}

/// Trains from scratch; the effective configuration is echoed to `out/config.toml`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, mode: TrainMode, verbose: bool) -> Result<Trainer> {
    let all = load_split(data, Some(Split::Train), &cfg.data)?;
    let total = all.len();
    let clips: Vec<_> = all.into_iter().filter(|(c, _)| mode.views().contains(&c.meta.view)).collect();
    if verbose {
        eprintln!("{total} training clips, {} after the {mode} view filter", clips.len());
    }
    if let Some((c, _)) = clips.first() {
        cfg.model.check_geometry(c.dims.height, c.dims.width, c.dims.phases)?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join(ECHO_FILE);
    fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
    let model = Model::build(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.augment.clone(), mode)?;
    trainer.data = cfg.data.clone();
    train_loop(&mut trainer, &clips, &LoopOptions { out_dir: Some(out.to_path_buf()), verbose })?;
    Ok(trainer)
}

fn check_dims(trainer: &Trainer, d: Dims) -> Result<()> {
    if let Some([h, w, t]) = trainer.input_dims {
        if [d.height, d.width, d.phases] != [h, w, t] {
            return Err(Error::DimensionMismatch(format!("data is {d}, checkpoint was trained on {h}x{w}x{t}")));
        }
    }
    trainer.model.config.check_geometry(d.height, d.width, d.phases)
}

/// Writes `metrics.csv` and `metrics.json` into `report`. In oracle mode the
/// ground truth is scored against itself and no checkpoint is needed.
pub fn cmd_eval(
    ckpt: Option<&Path>,
    data: &Path,
    split: SplitArg,
    report: &Path,
    oracle: bool,
) -> Result<metrics::MetricsReport> {
    let split = match split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    };
    let trainer = match (ckpt, oracle) {
        (Some(p), _) => Some(Checkpoint::load(p)?.into_trainer()),
        (None, true) => None,
        (None, false) => return Err(Error::InvalidParams("--ckpt is required unless --oracle is set".into())),
    };
    let data_cfg = trainer.as_ref().map(|t| t.data.clone()).unwrap_or_default();
    let clips = load_split(data, split, &data_cfg)?;
    let mut rows: Vec<ClipMetrics> = Vec::with_capacity(clips.len());
    for (c, m) in &clips {
        let pred = match &trainer {
            Some(t) if !oracle => {
                check_dims(t, c.dims)?;
                predict_clip(&t.model, c, t.mode.prompted().then_some(c.meta.view))?
            }
            _ => m.clone(),
        };
        rows.push(metrics::evaluate_clip(&pred, m, &c.meta)?);
    }
    let rep = metrics::stratified_report(rows);
    fs::create_dir_all(report).map_err(|e| Error::io(report, e))?;
    for (name, text) in [("metrics.csv", rep.to_csv()), ("metrics.json", rep.to_json())] {
        let path = report.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rep)
}

/// Contents of the `.json` file written next to a prediction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionSidecar {
    pub checkpoint: String,
    pub clip: String,
    pub mode: TrainMode,
    pub prompt: Option<View>,
    pub prompt_ignored: bool,
    pub warning: Option<String>,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Predicts a mask for `clip_path` (see [`segment`]) and writes it in the clip
/// container format with a zeroed image payload, plus a JSON sidecar.
pub fn cmd_predict(ckpt: &Path, clip_path: &Path, out: &Path, view: Option<View>) -> Result<PredictionSidecar> {
    let trainer = Checkpoint::load(ckpt)?.into_trainer();
    let (clip, _) = load_clip(clip_path)?;
    let seg = segment(&trainer, &clip, view)?;
    let blank = CineClip { dims: clip.dims, data: vec![0.0; clip.dims.voxels()], meta: clip.meta.clone() };
    save_clip(&blank, &seg.mask, out)?;
    let side = PredictionSidecar {
        checkpoint: ckpt.display().to_string(),
        clip: clip_path.display().to_string(),
        mode: trainer.mode,
        prompt: seg.prompt,
        prompt_ignored: seg.warning.is_some(),
        warning: seg.warning,
    };
    let path = sidecar_path(out);
    let json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(side)
}

/// A predicted mask in the geometry of the stored clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: MaskClip,
    /// Prompt actually fed to the decoder.
    pub prompt: Option<View>,
    pub warning: Option<String>,
}

/// Prepares `clip` as the checkpoint's training data was prepared, predicts,
/// and maps the mask back to the stored geometry: pixels outside the crop
/// window are 0 and every source phase takes the prediction of the nearest
/// kept phase. Prompted checkpoints default to the clip's own view; a view
/// given to a prompt-free checkpoint is ignored with a warning.
pub fn segment(trainer: &Trainer, clip: &CineClip, view: Option<View>) -> Result<Segmentation> {
    let (prepared, _) = prepare_clip(clip, &MaskClip::zeros(clip.dims), &trainer.data)?;
    check_dims(trainer, prepared.dims)?;
    let (prompt, warning) = match (trainer.mode.prompted(), view) {
        (true, v) => (Some(v.unwrap_or(clip.meta.view)), None),
        (false, Some(v)) => (
            None,
            Some(format!("checkpoint was trained without prompts (mode {}); view {v} ignored", trainer.mode)),
        ),
        (false, None) => (None, None),
    };
    let pred = predict_clip(&trainer.model, &prepared, prompt)?;
    let mask = restore_geometry(&pred, clip, &trainer.data)?;
    Ok(Segmentation { mask, prompt, warning })
}

fn restore_geometry(pred: &MaskClip, clip: &CineClip, cfg: &DataConfig) -> Result<MaskClip> {
    let (p, dims) = (pred.dims, clip.dims);
    let kept: Vec<usize> = match cfg.phases {
        Some(t) => phase_selection(dims.phases, t, clip.meta.ed_index, clip.meta.es_index)?.0,
        None => (0..dims.phases).collect(),
    };
    // source phase -> index into the kept phases, nearest first, earlier on ties
    let nearest: Vec<usize> = (0..dims.phases)
        .map(|s| (0..kept.len()).min_by_key(|&k| (kept[k].abs_diff(s), kept[k])).expect("at least one phase"))
        .collect();
    let (r0, c0) = crop_offsets(dims, (p.height, p.width));
    let mut out = MaskClip::zeros(dims);
    for r in 0..p.height {
        for c in 0..p.width {
            for (s, &k) in nearest.iter().enumerate() {
                out.data[dims.index(r0 + r, c0 + c, s)] = pred.data[p.index(r, c, k)];
            }
        }
    }
    Ok(out)
}

/// Final checkpoint path inside a training output directory.
pub fn final_checkpoint(out: &Path) -> PathBuf {
    out.join(FINAL_CHECKPOINT)
}
