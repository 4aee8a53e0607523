//! Command-line front end: argument definitions and subcommand dispatch.
//!
//! Values come from defaults, then the `--config` file, then flags. The merged
//! configuration is written as `effective_config.toml` into each output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataset::{prepare_case, split_cases, PreparedCase, SliceDataset};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionMode, INFERENCE_BATCH};
use crate::losses::LossConfig;
use crate::metrics::{evaluate_case, metrics_csv, write_metrics, MetricRow};
use crate::nn::Checkpoint;
use crate::phantom::generate_corpus;
use crate::preprocess::{fit_landmarks, minmax_invert, LandmarkSet, DEFAULT_PERCENTILES};
use crate::trainer::{train, TrainConfig};
use crate::volume::{
    case_id_of, find_case_file, list_case_dirs, load_case, load_labels, load_volume, save_case, save_volume,
    Sequence, SequenceSet, Volume,
};

#[derive(Debug, Parser)]
#[command(name = "mrsynth", version, about = "Synthesize a missing MRI sequence from the other three")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Require a fixed seed and reproducible outputs.
    #[arg(long, global = true)]
    pub determinism: bool,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus of case directories.
    Phantom(PhantomArgs),
    /// Fit histogram-standardization landmarks for every sequence.
    FitLandmarks(FitArgs),
    /// Train a generator for one target sequence.
    Train(TrainArgs),
    /// Predict the missing sequence with multi-orientation fusion.
    Synthesize(SynthArgs),
    /// Score predictions against references.
    Evaluate(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub cases: Option<usize>,
    /// Cube side in voxels.
    #[arg(long)]
    pub shape: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Landmark file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint root; relative values are taken under the output directory.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<Sequence>,
    /// Loss weight preset (l1, l1m, l1m_adv, l1m_ssim, l1m_vgg, l1m_freq, combined).
    #[arg(long)]
    pub preset: Option<String>,
    /// Start from the laptop-sized training settings.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epoch_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A case directory or a root of case directories.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    #[arg(long, default_value_t = INFERENCE_BATCH)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Root with one directory per case holding predicted volumes.
    #[arg(long)]
    pub pred: PathBuf,
    /// Root of reference case directories.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Score only this sequence; otherwise every sequence present in both.
    #[arg(long)]
    pub target: Option<Sequence>,
    /// Directory for metrics.csv and metrics.json (default: the prediction root).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Defaults < config file < global flags.
pub fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.determinism |= cli.determinism;
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::Phantom(a) => {
            if let Some(n) = a.cases {
                cfg.cases = n;
            }
            if let Some(s) = a.shape {
                cfg.phantom.shape = [s; 3];
            }
            if let Some(o) = &a.out {
                cfg.paths.data_root = o.clone();
            }
        }
        Command::FitLandmarks(a) => {
            if let Some(d) = &a.data {
                cfg.paths.data_root = d.clone();
            }
            if let Some(o) = &a.out {
                cfg.paths.landmarks = Some(o.clone());
            }
        }
        Command::Train(a) => merge_train(&mut cfg, a)?,
        Command::Synthesize(a) => {
            if let Some(d) = &a.input {
                cfg.paths.data_root = d.clone();
            }
            if let Some(o) = &a.out {
                cfg.paths.output_root = o.clone();
            }
            if let Some(l) = &a.landmarks {
                cfg.paths.landmarks = Some(l.clone());
            }
            if let Some(f) = a.fusion {
                cfg.fusion = f;
            }
        }
        Command::Evaluate(a) => {
            cfg.paths.data_root = a.reference.clone();
            cfg.paths.output_root = a.out.clone().unwrap_or_else(|| a.pred.clone());
        }
    }
    cfg.finalize()?;
    let threads = cfg.threads;
    let go = move || dispatch(&cli.command, &cfg);
    if threads > 0 {
        crate::par::with_threads(threads, go)
    } else {
        go()
    }
}

fn merge_train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if a.desk {
        let target = cfg.train.target_sequence;
        let vgg = cfg.train.loss.vgg_source.clone();
        cfg.train = TrainConfig::desk();
        cfg.train.target_sequence = target;
        cfg.train.loss.vgg_source = vgg;
    }
    if let Some(p) = &a.preset {
        let mut loss = LossConfig::preset(p)?;
        loss.vgg_source = cfg.train.loss.vgg_source.clone();
        cfg.train.loss = loss;
    }
    if let Some(d) = &a.data {
        cfg.paths.data_root = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.paths.output_root = o.clone();
    }
    if let Some(c) = &a.ckpt {
        cfg.paths.checkpoint_dir = c.clone();
    }
    if let Some(l) = &a.landmarks {
        cfg.paths.landmarks = Some(l.clone());
    }
    if let Some(t) = a.target {
        cfg.train.target_sequence = t;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(e) = a.epoch_size {
        cfg.train.epoch_size = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr0 = lr;
    }
    cfg.train.validate()
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Phantom(_) => run_phantom(cfg),
        Command::FitLandmarks(_) => run_fit(cfg),
        Command::Train(_) => run_train(cfg),
        Command::Synthesize(a) => run_synthesize(cfg, &a.checkpoint, a.batch),
        Command::Evaluate(a) => run_evaluate(cfg, &a.pred, a.target),
    }
}

fn run_phantom(cfg: &RunConfig) -> Result<()> {
    cfg.phantom.validate()?;
    let out = &cfg.paths.data_root;
    let cases = generate_corpus(&cfg.phantom, cfg.cases)?;
    for c in &cases {
        save_case(c, out.join(&c.case_id))?;
    }
    cfg.write_effective(out)?;
    log::info!("wrote {} phantom cases to {}", cases.len(), out.display());
    Ok(())
}

fn load_all(root: &Path, missing: Option<Sequence>) -> Result<Vec<SequenceSet>> {
    let dirs = list_case_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::MissingInput(format!("no case directories under {}", root.display())));
    }
    dirs.iter().map(|d| load_case(d, missing)).collect()
}

fn run_fit(cfg: &RunConfig) -> Result<()> {
    let out = cfg
        .paths
        .landmarks
        .clone()
        .ok_or_else(|| Error::Config("fit-landmarks needs an output file (--out or paths.landmarks)".into()))?;
    let cases = load_all(&cfg.paths.data_root, None)?;
    let mut set = LandmarkSet::default();
    for s in Sequence::ALL {
        let vols: Vec<&Volume> = cases.iter().filter_map(|c| c.get(s)).collect();
        set.insert(fit_landmarks(s, &vols, &DEFAULT_PERCENTILES)?);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        cfg.write_effective(parent)?;
    }
    set.save(&out)
}

fn landmarks(cfg: &RunConfig) -> Result<Option<LandmarkSet>> {
    cfg.paths.landmarks.as_ref().map(LandmarkSet::load).transpose()
}

fn run_train(cfg: &RunConfig) -> Result<()> {
    let tc = &cfg.train;
    let target = tc.target_sequence;
    let lm = landmarks(cfg)?;
    let raw = load_all(&cfg.paths.data_root, None)?;
    let ids: Vec<String> = raw.iter().map(|c| c.case_id.clone()).collect();
    let (train_ids, dev_ids) = split_cases(&ids);
    let prep = |keep: &[String]| -> Result<Vec<PreparedCase>> {
        raw.iter()
            .filter(|c| keep.contains(&c.case_id))
            .map(|c| prepare_case(c, target, lm.as_ref()))
            .collect()
    };
    let data = SliceDataset::new(prep(&train_ids)?, &tc.planes)?;
    let dev = prep(&dev_ids)?;
    let out = &cfg.paths.output_root;
    cfg.write_effective(out)?;
    let ckpt_root = out.join(&cfg.paths.checkpoint_dir);
    let log_path = out.join("log.csv");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let outcome = train(tc.clone(), &data, &dev, Some(&ckpt_root), &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(last) = outcome.epochs.last().filter(|e| !e.dev.is_empty()) {
        let p = out.join("dev_metrics.csv");
        std::fs::write(&p, metrics_csv(&last.dev)).map_err(|e| Error::io(p, e))?;
    }
    log::info!("best epoch {}", outcome.best_epoch);
    Ok(())
}

fn case_roots(root: &Path) -> Result<Vec<PathBuf>> {
    let dirs = list_case_dirs(root)?;
    Ok(if dirs.is_empty() { vec![root.to_path_buf()] } else { dirs })
}

fn run_synthesize(cfg: &RunConfig, checkpoint: &Path, batch: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let target = ck.meta.target;
    let lm = landmarks(cfg)?;
    let out = &cfg.paths.output_root;
    cfg.write_effective(out)?;
    for dir in case_roots(&cfg.paths.data_root)? {
        let raw = load_case(&dir, Some(target))?;
        let prepared = prepare_case(&raw, target, lm.as_ref())?;
        let fused = fuse(&ck.generator, &prepared.set, target, cfg.fusion, batch)?;
        // Written in the joint input intensity scale.
        let template = prepared.set.get(target.others()[0]).unwrap();
        let pred = minmax_invert(&template.with_data(fused.volume), &prepared.input_scale)?;
        let case_dir = out.join(&raw.case_id);
        std::fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
        save_volume(&pred, case_dir.join(format!("{}-{}.nii.gz", raw.case_id, target)))?;
        log::info!("synthesized {target} for {}", raw.case_id);
    }
    Ok(())
}

fn run_evaluate(cfg: &RunConfig, pred_root: &Path, target: Option<Sequence>) -> Result<()> {
    let mut rows: Vec<MetricRow> = Vec::new();
    for dir in case_roots(&cfg.paths.data_root)? {
        let id = case_id_of(&dir);
        let pred_dir = pred_root.join(&id);
        let seg = find_case_file(&dir, "seg")?.map(load_labels).transpose()?;
        let seqs: Vec<Sequence> = match target {
            Some(t) => vec![t],
            None => Sequence::ALL.to_vec(),
        };
        for s in seqs {
            let Some(ref_file) = find_case_file(&dir, s.as_str())? else {
                if target.is_some() {
                    return Err(Error::MissingInput(format!("{id}: no reference {s}")));
                }
                continue;
            };
            let pred_file = if pred_dir.is_dir() { find_case_file(&pred_dir, s.as_str())? } else { None };
            let Some(pred_file) = pred_file else {
                if target.is_some() {
                    return Err(Error::MissingInput(format!(
                        "{id}: no predicted {s} in {}",
                        pred_dir.display()
                    )));
                }
                continue;
            };
            let row_id = if target.is_some() { id.clone() } else { format!("{id}-{s}") };
            let reference = load_volume(&ref_file)?;
            let pred = load_volume(&pred_file)?;
            rows.push(evaluate_case(&row_id, &pred, &reference, seg.as_ref())?);
        }
    }
    if rows.is_empty() {
        return Err(Error::MissingInput(format!(
            "no prediction/reference pairs between {} and {}",
            pred_root.display(),
            cfg.paths.data_root.display()
        )));
    }
    let out = &cfg.paths.output_root;
    cfg.write_effective(out)?;
    write_metrics(&rows, &out.join("metrics.csv"), &out.join("metrics.json"))
}
