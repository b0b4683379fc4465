//! The subcommands. Each returns its result so the binary only maps errors to
//! exit codes and prints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use priorzero::metrics::JsonlWriter;
use priorzero::replay::Episode;
use priorzero::text_env::{run_trace, EnvName};
use priorzero::trainer::{CaseStudyRow, EvalRecord, MetricsRecord, Mode};
use priorzero::DefaultTrainer;

use crate::config::{output_dir, ConfigBuilder, RunConfig};
use crate::error::CliError;

/// File holding the resolved configuration inside an output directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    /// Checkpoint directory whose stored configuration and parameters are used.
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Value of `PRIORZERO_OUT`, which wins over `out`.
    pub out_env: Option<String>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub env: Option<EnvName>,
    /// `dotted.path=value` overrides, applied last.
    pub set: Vec<String>,
}

impl Common {
    /// Defaults or the checkpoint's configuration, then the file, the
    /// dedicated flags and finally the dotted overrides.
    pub fn resolve(&self, extra: &[String]) -> Result<RunConfig, CliError> {
        let mut b = match &self.checkpoint {
            Some(dir) => ConfigBuilder::from_checkpoint(dir)?,
            None => ConfigBuilder::defaults()?,
        };
        if let Some(path) = &self.config {
            b.merge_file(path)?;
        }
        if let Some(mode) = self.mode {
            b.set(&format!("mode=\"{mode}\""))?;
        }
        if let Some(env) = self.env {
            b.set(&format!("env=\"{env:?}\""))?;
        }
        if let Some(seed) = self.seed {
            b.set(&format!("seed={seed}"))?;
            b.set(&format!("run.seeds=[{seed}]"))?;
        }
        for s in extra.iter().chain(&self.set) {
            b.set(s)?;
        }
        b.resolve()
    }

    /// Output directory when one was named explicitly.
    fn explicit_out(&self) -> Option<PathBuf> {
        self.out_env
            .clone()
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.out.clone())
    }

    fn trainer(&self, cfg: &RunConfig) -> Result<DefaultTrainer, CliError> {
        let mut t = DefaultTrainer::new(cfg.trainer.clone())?;
        if let Some(dir) = &self.checkpoint {
            t.load_parameters(dir)?;
        }
        Ok(t)
    }
}

/// Outcome of training one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub last: Option<MetricsRecord>,
    pub interrupted: bool,
}

/// Trains every configured seed. With several seeds each run gets its own
/// `seed-<n>` subdirectory.
pub fn train(common: &Common, stop: &AtomicBool) -> Result<Vec<SeedRun>, CliError> {
    let cfg = common.resolve(&[])?;
    let out = output_dir(common.out_env.clone(), common.out.clone(), &cfg.run);
    let seeds = cfg.seeds();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let dir = if seeds.len() > 1 {
            out.join(format!("seed-{seed}"))
        } else {
            out.clone()
        };
        let mut one = cfg.clone();
        one.trainer.seed = seed;
        one.run.seeds = vec![seed];
        one.run.out_dir = dir.display().to_string();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), one.to_toml()?)?;
        let mut trainer = DefaultTrainer::new(one.trainer)?.with_output(&dir)?;
        trainer.train(Some(stop))?;
        let last = trainer.records().last().cloned();
        let interrupted = stop.load(Ordering::SeqCst);
        runs.push(SeedRun {
            seed,
            out_dir: dir,
            last,
            interrupted,
        });
    }
    Ok(runs)
}

/// Evaluates all three variants. Writes `eval.json` when an output
/// directory was named.
pub fn eval(common: &Common, episodes: Option<usize>) -> Result<EvalRecord, CliError> {
    let extra: Vec<String> = episodes.map(|n| format!("eval_episodes={n}")).into_iter().collect();
    let cfg = common.resolve(&extra)?;
    let mut t = common.trainer(&cfg)?;
    let record = t.evaluate()?;
    if let Some(dir) = common.explicit_out() {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&record).map_err(priorzero::error::Error::from)?)?;
    }
    Ok(record)
}

/// Steps one episode with the full agent and returns one row per state.
/// Writes `case_study.jsonl` when an output directory was named.
pub fn case_study(common: &Common) -> Result<Vec<CaseStudyRow>, CliError> {
    let cfg = common.resolve(&[])?;
    let t = common.trainer(&cfg)?;
    let rows = t.case_study(cfg.trainer.seed)?;
    if let Some(dir) = common.explicit_out() {
        fs::create_dir_all(&dir)?;
        write_jsonl(&dir.join("case_study.jsonl"), &rows)?;
    }
    Ok(rows)
}

/// Collects `episodes` episodes with the training policy and writes them to
/// `replay.jsonl` in the output directory, plus the per-step trace to
/// `trace.jsonl` when asked.
pub fn dump_replay(common: &Common, episodes: Option<usize>, trace: bool) -> Result<(PathBuf, Vec<Episode>), CliError> {
    let cfg = common.resolve(&[])?;
    let out = output_dir(common.out_env.clone(), common.out.clone(), &cfg.run);
    let mut t = common.trainer(&cfg)?;
    let n = episodes.unwrap_or(cfg.trainer.episodes_per_collect);
    let eps = t.collect(n)?;
    fs::create_dir_all(&out)?;
    write_jsonl(&out.join("replay.jsonl"), &eps)?;
    if trace {
        let spec = cfg.trainer.env_spec();
        let mut w = JsonlWriter::create(&out.join("trace.jsonl"))?;
        for ep in &eps {
            let actions: Vec<&str> = ep.transitions.iter().map(|tr| tr.action_string.as_str()).collect();
            for rec in run_trace(&spec, &actions)? {
                w.write(&rec)?;
            }
        }
    }
    Ok((out, eps))
}

fn write_jsonl<R: serde::Serialize>(path: &Path, rows: &[R]) -> Result<(), CliError> {
    let mut w = JsonlWriter::create(path)?;
    for r in rows {
        w.write(r)?;
    }
    Ok(())
}

/// Writes records as JSON lines to `out`.
pub fn print_jsonl<R: serde::Serialize, W: Write>(mut out: W, rows: &[R]) -> Result<(), CliError> {
    for r in rows {
        let line = serde_json::to_string(r).map_err(priorzero::error::Error::from)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}
