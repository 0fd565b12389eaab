//! Configuration files, run directories, persistence and comparisons.

pub mod checkpoint;
pub mod latents;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ParamGroup;
use crate::trainer::{AgentVariant, Config, EvalReport, TrainError, Trainer};
pub use checkpoint::CheckpointError;
pub use latents::{LatentCsvError, LatentTable};
pub use metrics::MetricsWriter;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LATENTS_FILE: &str = "latents.csv";
/// Checkpoints retained in a run directory.
const KEEP_CHECKPOINTS: usize = 2;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: parse error at line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Invalid { path: String, source: crate::trainer::ConfigError },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Latents(#[from] LatentCsvError),
    #[error("summary: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    RunDir(String),
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses config text; missing keys take defaults, unknown keys are errors.
pub fn parse_config(text: &str, origin: &str) -> Result<Config, RunError> {
    let de = toml::Deserializer::new(text);
    let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let line = e.inner().span().map_or(1, |s| line_of(text, s.start));
        let key = e.path().to_string();
        let message = e.inner().message().to_string();
        let message = if key == "." { message } else { format!("`{key}`: {message}") };
        RunError::Parse { path: origin.to_string(), line, message }
    })?;
    cfg.validate().map_err(|source| RunError::Invalid { path: origin.to_string(), source })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config, RunError> {
    parse_config(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Canonical text form of a config (every key written out).
pub fn config_to_toml(cfg: &Config) -> String {
    toml::to_string(cfg).expect("config is always representable")
}

/// Sample mean and (n−1) standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub world: usize,
    pub encoder: usize,
    pub actor: usize,
    pub critic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub agent_variant: AgentVariant,
    pub seed: u64,
    pub epochs: u64,
    pub env_steps: u64,
    pub final_eval_mean_return: f64,
    pub final_eval_return_std: f64,
    pub final_eval_returns: Vec<f64>,
    pub params: ParamCounts,
}

/// Layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join(SUMMARY_FILE)
    }

    pub fn latents(&self) -> PathBuf {
        self.root.join(LATENTS_FILE)
    }

    /// Trainer restored from the newest checkpoint.
    pub fn load_latest(&self) -> Result<Trainer, RunError> {
        let path = checkpoint::latest(&self.root)?
            .ok_or_else(|| RunError::RunDir(format!("{}: no checkpoint found", self.root.display())))?;
        Ok(checkpoint::load(&path)?)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many epochs in this invocation (the run stays resumable).
    pub max_epochs: Option<u64>,
}

pub enum TrainOutcome {
    Finished(Summary),
    Paused { epoch: u64 },
}

/// Trains from `config_path` into `run_dir`, resuming from the newest
/// checkpoint when the directory already holds this run.
pub fn train(config_path: &Path, run_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome, RunError> {
    let raw = fs::read(config_path)?;
    let text = String::from_utf8(raw.clone())
        .map_err(|_| RunError::RunDir(format!("{}: config is not UTF-8", config_path.display())))?;
    let cfg = parse_config(&text, &config_path.display().to_string())?;
    let dir = RunDir::new(run_dir);
    fs::create_dir_all(run_dir)?;

    let mut trainer = if dir.config().exists() {
        if fs::read(dir.config())? != raw {
            return Err(RunError::RunDir(format!(
                "{} already holds a run with a different config",
                run_dir.display()
            )));
        }
        match checkpoint::latest(run_dir)? {
            Some(p) => {
                let t = checkpoint::load(&p)?;
                log::info!("resuming from {} (epoch {})", p.display(), t.epoch);
                t
            }
            None => Trainer::new(cfg)?,
        }
    } else {
        fs::write(dir.config(), &raw)?;
        Trainer::new(cfg)?
    };
    metrics::truncate_after(&dir.metrics(), trainer.epoch)?;
    let mut writer = MetricsWriter::open(&dir.metrics())?;

    let every = trainer.cfg.run.checkpoint_every;
    let mut done_here = 0;
    while !trainer.is_finished() {
        if opts.max_epochs.is_some_and(|m| done_here >= m) {
            checkpoint::save(run_dir, &trainer)?;
            checkpoint::prune(run_dir, KEEP_CHECKPOINTS)?;
            return Ok(TrainOutcome::Paused { epoch: trainer.epoch });
        }
        let rec = trainer.train_epoch()?;
        log::info!(
            "epoch {} env_steps {} return {:.2} eval {:?}",
            rec.epoch,
            rec.env_steps,
            rec.train_return,
            rec.eval_mean_return
        );
        writer.log(&rec)?;
        done_here += 1;
        if every > 0 && trainer.epoch % every == 0 {
            checkpoint::save(run_dir, &trainer)?;
            checkpoint::prune(run_dir, KEEP_CHECKPOINTS)?;
        }
    }
    checkpoint::save(run_dir, &trainer)?;
    checkpoint::prune(run_dir, KEEP_CHECKPOINTS)?;
    let report = trainer.evaluate(trainer.cfg.eval.episodes, true)?;
    write_latents(&dir.latents(), &trainer, &report)?;
    let summary = summarize(&trainer, &report);
    fs::write(dir.summary(), serde_json::to_string_pretty(&summary)?)?;
    Ok(TrainOutcome::Finished(summary))
}

pub fn summarize(trainer: &Trainer, report: &EvalReport) -> Summary {
    let store = &trainer.agent.store;
    Summary {
        agent_variant: trainer.agent.variant,
        seed: trainer.cfg.run.seed,
        epochs: trainer.epoch,
        env_steps: trainer.env_steps,
        final_eval_mean_return: report.mean_return(),
        final_eval_return_std: report.std_return(),
        final_eval_returns: report.returns.clone(),
        params: ParamCounts {
            world: store.count(Some(ParamGroup::World)),
            encoder: store.count(Some(ParamGroup::Encoder)),
            actor: store.count(Some(ParamGroup::Actor)),
            critic: store.count(Some(ParamGroup::Critic)),
        },
    }
}

/// Width of the `mu_l_*` block for a trainer's variant.
pub fn mu_width(trainer: &Trainer) -> usize {
    match trainer.agent.variant {
        AgentVariant::Oracle => trainer.agent.task_dim(),
        _ => trainer.cfg.model.latent_dim,
    }
}

pub fn write_latents(path: &Path, trainer: &Trainer, report: &EvalReport) -> Result<(), RunError> {
    let dims = &trainer.agent.world.dims;
    let table = LatentTable {
        variant: trainer.agent.variant,
        mu_dim: mu_width(trainer),
        feat_dim: dims.deter + dims.stoch,
        rows: report.latents.clone(),
    };
    latents::write(path, &table)?;
    Ok(())
}

/// Re-evaluates the newest checkpoint of a run.
pub fn evaluate(run_dir: &Path, episodes: Option<usize>) -> Result<EvalReport, RunError> {
    let trainer = RunDir::new(run_dir).load_latest()?;
    let k = episodes.unwrap_or(trainer.cfg.eval.episodes);
    Ok(trainer.evaluate(k, false)?)
}

/// Writes `latents.csv` from fresh evaluation episodes of the newest checkpoint.
pub fn export_latents(run_dir: &Path) -> Result<PathBuf, RunError> {
    let dir = RunDir::new(run_dir);
    let trainer = dir.load_latest()?;
    let report = trainer.evaluate(trainer.cfg.eval.episodes, true)?;
    write_latents(&dir.latents(), &trainer, &report)?;
    Ok(dir.latents())
}

/// Mean ± std of eval returns across runs at one evaluation epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub variant: AgentVariant,
    pub epoch: u64,
    pub env_steps: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

impl fmt::Display for CompareTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>6} {:>10} {:>12} {:>10} {:>5}", "variant", "epoch", "env_steps", "mean", "std", "runs")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>6} {:>10.0} {:>12.3} {:>10.3} {:>5}",
                r.variant.name(),
                r.epoch,
                r.env_steps,
                r.mean,
                r.std,
                r.runs
            )?;
        }
        Ok(())
    }
}

/// Merges the metrics streams of several runs, grouped by variant.
pub fn compare(run_dirs: &[PathBuf]) -> Result<CompareTable, RunError> {
    type Key = (AgentVariant, u64);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for d in run_dirs {
        let dir = RunDir::new(d);
        let cfg = load_config(&dir.config())?;
        for rec in metrics::read(&dir.metrics())? {
            if let Some(r) = rec.eval_mean_return {
                let e = groups.entry((cfg.run.agent_variant, rec.epoch)).or_default();
                e.0.push(r);
                e.1.push(rec.env_steps as f64);
            }
        }
    }
    let rows = groups
        .into_iter()
        .map(|((variant, epoch), (returns, steps))| {
            let (mean, std) = mean_std(&returns);
            CompareRow { variant, epoch, env_steps: mean_std(&steps).0, mean, std, runs: returns.len() }
        })
        .collect();
    Ok(CompareTable { rows })
}
