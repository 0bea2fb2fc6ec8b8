//! Command implementations behind the CLI.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use serde::{Deserialize, Serialize};
use srwgan_core::data::{make_synthetic, BatchSampler, FeatureDataset, SyntheticSpec, TaskMode};
use srwgan_core::evaluation::{evaluate, synthesize, EvalReport, EvalSettings};
use srwgan_core::lemma::{lemma_sweep, LemmaSweep};
use srwgan_core::rng::{stream_rng, Stream};
use srwgan_core::tensor::Tensor;
use srwgan_core::training::{TrainConfig, Trainer};

use crate::blob::{read_json, write_json};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset, summarize, DatasetSummary};
use crate::error::{Error, Result};
use crate::grid::{grid_csv, run_grid, GridResult, GridSpec};
use crate::report::{eval_csv, history_csv, write_text, write_timing, Timing, TrainSummary};

/// Few-shot samples a config trains with. They are drawn from the config's
/// own stream, so evaluation can recover them from the config alone.
pub fn shots_for(cfg: &TrainConfig, ds: &FeatureDataset) -> Result<Vec<u32>> {
    if !cfg.mode.uses_shots() {
        return Ok(Vec::new());
    }
    let mut rng = stream_rng(cfg.seed, cfg.run_index, Stream::Shots);
    let sampler = BatchSampler::new(ds, ds, cfg.mode, cfg.batch_size, cfg.shots, &mut rng)?;
    Ok(sampler.shots().to_vec())
}

/// Trains (or continues `resume`) to `cfg.train.epochs` and evaluates the
/// result in the training mode.
pub fn train_run(cfg: &RunConfig, ds: &FeatureDataset, resume: Option<Checkpoint>) -> Result<(Checkpoint, EvalReport)> {
    cfg.validate()?;
    let mut trainer = match resume {
        None => Trainer::new(cfg.train.clone(), ds, ds)?,
        Some(ck) => Trainer::resume(cfg.train.clone(), ds, ds, ck.model, ck.optimizers, ck.history)?,
    };
    trainer.run(&mut ())?;
    let shots = trainer.shots().to_vec();
    let (model, optimizers, history) = trainer.into_parts();
    let report = evaluate(&model, ds, cfg.train.mode, &shots, &cfg.eval)?;
    Ok((Checkpoint { config: cfg.train.clone(), model, optimizers, history }, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub summary: TrainSummary,
}

/// Run directory layout written by `train`.
pub mod layout {
    pub const CONFIG: &str = "config.json";
    pub const CHECKPOINT: &str = "checkpoint";
    pub const HISTORY: &str = "history.csv";
    pub const SUMMARY: &str = "summary.json";
    pub const TIMING: &str = "timing.json";
    pub const EVAL_JSON: &str = "eval.json";
    pub const EVAL_CSV: &str = "eval.csv";
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let started = SystemTime::now();
    let clock = Instant::now();
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let (ck, report) = train_run(cfg, &ds, resume)?;

    let dir = cfg.run_dir();
    write_json(&dir.join(layout::CONFIG), cfg)?;
    save_checkpoint(&ck, &dir.join(layout::CHECKPOINT))?;
    write_text(&dir.join(layout::HISTORY), &history_csv(&ck.history))?;
    let summary = TrainSummary {
        run_id: cfg.run_id(),
        dataset: ds.name.clone(),
        mode: cfg.train.mode,
        variant: cfg.train.variant,
        seed: cfg.train.seed,
        epochs: ck.history.records.len(),
        last: ck.history.records.last().cloned(),
        eval: report,
    };
    write_json(&dir.join(layout::SUMMARY), &summary)?;
    write_timing(&dir.join(layout::TIMING), &Timing::new(started, clock.elapsed()))?;
    Ok(TrainOutcome { run_dir: dir, summary })
}

/// Inputs of `eval` and `synth` once flags and sibling files are resolved.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub checkpoint: Checkpoint,
    pub dataset: FeatureDataset,
    pub settings: EvalSettings,
}

/// Loads a checkpoint with its dataset. Without an explicit dataset or run
/// config, the `config.json` next to the checkpoint directory is used.
pub fn eval_inputs(checkpoint: &Path, config: Option<&RunConfig>, dataset: Option<&Path>) -> Result<EvalInputs> {
    let ck = load_checkpoint(checkpoint)?;
    let sibling = checkpoint.parent().map(|p| p.join(layout::CONFIG)).filter(|p| p.exists());
    let run_cfg = match (config, sibling) {
        (Some(c), _) => Some(c.clone()),
        (None, Some(p)) => Some(read_json::<RunConfig>(&p)?),
        (None, None) => None,
    };
    let ds_path = match (dataset, &run_cfg) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(c)) => c.dataset.clone(),
        (None, None) => return Err(Error::Config("no dataset given and no config.json next to the checkpoint".into())),
    };
    let settings = run_cfg.map(|c| c.eval).unwrap_or_else(|| EvalSettings::new(100, ck.config.seed));
    Ok(EvalInputs { checkpoint: ck, dataset: load_dataset(&ds_path)?, settings })
}

/// Evaluates once per `n_synth` value, in the given order.
pub fn eval_sweep(inputs: &EvalInputs, mode: TaskMode, shots: Option<usize>, n_synth: &[usize]) -> Result<Vec<EvalReport>> {
    let mut cfg = inputs.checkpoint.config.clone();
    if mode != cfg.mode {
        cfg.mode = mode;
        cfg.shots = if mode.uses_shots() { cfg.shots } else { 0 };
    }
    if let Some(s) = shots {
        cfg.shots = s;
    }
    let shot_idx = shots_for(&cfg, &inputs.dataset)?;
    let counts = if n_synth.is_empty() { vec![inputs.settings.n_synth] } else { n_synth.to_vec() };
    counts
        .iter()
        .map(|&n| {
            let settings = EvalSettings { n_synth: n, ..inputs.settings };
            Ok(evaluate(&inputs.checkpoint.model, &inputs.dataset, mode, &shot_idx, &settings)?)
        })
        .collect()
}

pub fn write_eval(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    write_json(&dir.join(layout::EVAL_JSON), &reports)?;
    write_text(&dir.join(layout::EVAL_CSV), &eval_csv(reports))
}

/// Which classes `synth` generates for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassScope {
    Seen,
    Unseen,
    All,
}

/// Synthetic features as CSV: `label,x0,...,x{n-1}`.
pub fn synth_csv(inputs: &EvalInputs, scope: ClassScope, n: usize, seed: u64) -> Result<String> {
    let ds = &inputs.dataset;
    let classes: Vec<u32> = match scope {
        ClassScope::Seen => ds.seen_classes.clone(),
        ClassScope::Unseen => ds.unseen_classes.clone(),
        ClassScope::All => ds.seen_classes.iter().chain(&ds.unseen_classes).copied().collect(),
    };
    let (x, labels) = synthesize(&inputs.checkpoint.model, ds, &classes, n, &mut stream_rng(seed, 0, Stream::Synthesis))?;
    let mut s = String::from("label");
    for j in 0..x.cols() {
        s.push_str(&format!(",x{j}"));
    }
    s.push('\n');
    for (i, l) in labels.iter().enumerate() {
        s.push_str(&l.to_string());
        for v in x.row(i) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Writes a synthetic world and its ground-truth generator.
pub fn cmd_gen_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<DatasetSummary> {
    let world = make_synthetic(spec)?;
    save_dataset(&world.dataset, out)?;
    write_json(&out.join("spec.json"), spec)?;
    write_json(&out.join("generator.json"), &world.generator)?;
    Ok(summarize(&world.dataset))
}

pub fn cmd_convert_check(dir: &Path) -> Result<DatasetSummary> {
    Ok(summarize(&load_dataset(dir)?))
}

pub fn cmd_verify_lemma(seed: u64, trials: u64, dims: &[usize]) -> Result<LemmaSweep> {
    Ok(lemma_sweep(seed, trials, dims)?)
}

pub fn cmd_gridsearch(base: &RunConfig, spec: &GridSpec, threads: usize) -> Result<(PathBuf, Vec<GridResult>)> {
    base.validate()?;
    spec.validate()?;
    let ds = load_dataset(&base.dataset)?;
    let results = run_grid(base, spec, &ds, threads)?;
    let dir = base.out.clone();
    write_json(&dir.join("grid.json"), spec)?;
    write_json(&dir.join("base_config.json"), base)?;
    write_text(&dir.join("gridsearch.csv"), &grid_csv(&results))?;
    write_json(&dir.join("gridsearch.json"), &results)?;
    Ok((dir, results))
}

/// Reads the ground-truth generator written by `gen-synthetic`.
pub fn load_generator(dataset_dir: &Path) -> Result<Tensor> {
    read_json(&dataset_dir.join("generator.json"))
}
