//! The alternating world-model / prior training loop, its evaluation and the
//! baseline modes.
//!
//! Every random draw comes from a named stream indexed by a counter
//! (episode number, update number, evaluation number), so a run is a pure
//! function of its configuration and the worker count never changes results.

mod actor;
mod config;
mod records;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{CsvWriter, JsonlWriter};
use crate::params::{load_checkpoint, save_checkpoint, FlatParams, Optimizer};
use crate::prior_oracle::{format_reward, PromptTemplate};
use crate::replay::{AdvantageSample, Episode, ReplayBuffer, TargetCache, TargetSpec};
use crate::rlft::{
    attach_logprobs, azsft_loss, blend_format, gae_advantage, phase_normalize, ppo_token_loss,
    ppo_value_loss, NormMode, PhaseStats, RlftLogRecord, ValueHead,
};
use crate::rng::{fnv1a, SeedTree};
use crate::scalar::Scalar;
use crate::search::FusionConfig;
use crate::text_env::EnvSpec;
use crate::token_lm::LmParams;
use crate::vocab::Vocab;
use crate::world_model::{update_target, TargetMode, WmParams, WmSample};

use actor::{EpisodeRun, Models, Policy};
pub use config::{LmConfig, Mode, TrainerConfig};
pub use records::{
    CaseStudyRow, EvalRecord, GaeBatchRecord, Manifest, MetricsRecord, RngState, VariantStats,
};

/// Progress counters of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counters {
    pub env_steps: u64,
    pub episodes: u64,
    pub cycle: u64,
    pub wm_updates: u64,
    pub llm_updates: u64,
    pub llm_fetches: u64,
    pub evals: u64,
    pub target_version: u64,
}

/// Losses accumulated since the last metrics record.
#[derive(Debug, Default)]
struct Pending {
    wm_loss: Vec<f64>,
    llm_loss: Vec<f64>,
    kl: Vec<f64>,
    clip_fraction: Vec<f64>,
    train_returns: Vec<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct Outputs {
    dir: PathBuf,
    metrics: JsonlWriter,
    metrics_csv: CsvWriter,
    llm_log: JsonlWriter,
    gae_log: JsonlWriter,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: JsonlWriter::create(&dir.join("metrics.jsonl"))?,
            metrics_csv: CsvWriter::create(&dir.join("metrics.csv"))?,
            llm_log: JsonlWriter::create(&dir.join("llm_log.jsonl"))?,
            gae_log: JsonlWriter::create(&dir.join("p2_gae.jsonl"))?,
        })
    }
}

/// Parameter files of a checkpoint bundle.
pub const CHECKPOINT_FILES: [&str; 4] = ["wm.bin", "wm_target.bin", "lm.bin", "value_head.bin"];

/// Hex FNV-1a hash of the serialized configuration.
pub fn config_hash(cfg: &TrainerConfig) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(&serde_json::to_string(cfg)?)))
}

/// Owns every model, optimizer and buffer of one run. It is the only writer
/// of parameters; collectors receive read-only snapshots.
pub struct Trainer<T: Scalar> {
    cfg: TrainerConfig,
    seeds: SeedTree,
    vocab: &'static Vocab,
    template: PromptTemplate,
    spec: EnvSpec,
    wm: WmParams<T>,
    wm_target: WmParams<T>,
    wm_opt: Optimizer<T, WmParams<T>>,
    lm: LmParams<T>,
    lm_ref: LmParams<T>,
    lm_opt: Optimizer<T, LmParams<T>>,
    value_head: ValueHead<T>,
    vh_opt: Optimizer<T, ValueHead<T>>,
    buffer: ReplayBuffer,
    cache: TargetCache<T>,
    phase_stats: PhaseStats,
    counters: Counters,
    pending: Pending,
    records: Vec<MetricsRecord>,
    llm_log: Vec<RlftLogRecord>,
    gae_log: Vec<GaeBatchRecord>,
    phase_advantages: Vec<f64>,
    snapshot_clip_fractions: Vec<f64>,
    out: Option<Outputs>,
    start: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedTree::new(cfg.seed);
        let vocab = Vocab::standard();
        let template = cfg.oracle.load_template()?;
        let spec = cfg.env_spec();
        let support = cfg.world_model.support(cfg.env);
        let wm = WmParams::init(vocab.size(), &cfg.world_model, support, &mut seeds.stream("init/wm", 0));
        let lm = LmParams::init_uniform(
            vocab.size(),
            cfg.lm.d_embed,
            cfg.lm.d_hidden,
            cfg.lm.init_scale,
            &mut seeds.stream("init/lm", 0),
        );
        let wcfg = &cfg.world_model;
        let rcfg = &cfg.rlft;
        Ok(Self {
            seeds,
            vocab,
            template,
            spec,
            wm_target: wm.clone(),
            wm_opt: Optimizer::new(wcfg.optimizer, wcfg.lr, wcfg.clip_norm),
            wm,
            lm_ref: lm.clone(),
            lm_opt: Optimizer::new(rcfg.optimizer, rcfg.lr, rcfg.clip_norm),
            value_head: ValueHead::zeros(cfg.lm.d_hidden),
            vh_opt: Optimizer::new(rcfg.optimizer, rcfg.lr, rcfg.clip_norm),
            lm,
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            cache: TargetCache::new(),
            phase_stats: PhaseStats::new(),
            counters: Counters::default(),
            pending: Pending::default(),
            records: Vec::new(),
            llm_log: Vec::new(),
            gae_log: Vec::new(),
            phase_advantages: Vec::new(),
            snapshot_clip_fractions: Vec::new(),
            out: None,
            start: Instant::now(),
            cfg,
        })
    }

    /// Streams metrics, logs and checkpoints into `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        self.out = Some(Outputs::create(dir)?);
        Ok(self)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn wm(&self) -> &WmParams<T> {
        &self.wm
    }

    pub fn wm_target(&self) -> &WmParams<T> {
        &self.wm_target
    }

    pub fn lm(&self) -> &LmParams<T> {
        &self.lm
    }

    pub fn value_head(&self) -> &ValueHead<T> {
        &self.value_head
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn llm_log(&self) -> &[RlftLogRecord] {
        &self.llm_log
    }

    pub fn gae_log(&self) -> &[GaeBatchRecord] {
        &self.gae_log
    }

    /// Normalized advantages of the most recent prior phase, in fetch order.
    pub fn phase_advantages(&self) -> &[f64] {
        &self.phase_advantages
    }

    /// Clip fraction of the first gradient step after every behaviour snapshot.
    pub fn snapshot_clip_fractions(&self) -> &[f64] {
        &self.snapshot_clip_fractions
    }

    /// Whether the prior phase changes the token model in this configuration.
    pub fn lm_trainable(&self) -> bool {
        self.cfg.mode.trains_prior() && self.cfg.prior.is_none()
    }

    fn models(&self) -> Models<'_, T> {
        Models {
            wm: &self.wm,
            lm: &self.lm,
            scripted: self.cfg.prior.as_ref(),
            vocab: self.vocab,
            template: &self.template,
            oracle: &self.cfg.oracle,
            history_act: self.cfg.world_model.history_act,
        }
    }

    fn target_spec(&self) -> TargetSpec {
        TargetSpec {
            history: self.cfg.world_model.history_train,
            unroll: self.cfg.world_model.unroll,
            td_steps: self.cfg.td_steps,
            gamma: self.cfg.gamma,
        }
    }

    fn collect_policy(&self) -> Policy {
        match self.cfg.mode {
            Mode::NaivePolicyP1 => Policy::PriorGreedy {
                history: self.cfg.p1_history,
            },
            Mode::NaiveRlftP2 => Policy::PriorSample {
                history: self.cfg.oracle.history_window,
            },
            mode => Policy::Search {
                query_prior: mode.queries_prior(),
                fusion: self.cfg.effective_fusion(),
                search: self.cfg.search.collect(self.cfg.gamma),
            },
        }
    }

    fn standalone_policy(&self) -> Policy {
        let history = if self.cfg.mode == Mode::NaivePolicyP1 {
            self.cfg.p1_history
        } else {
            self.cfg.oracle.history_window
        };
        Policy::PriorGreedy { history }
    }

    fn full_policy(&self) -> Policy {
        Policy::Search {
            query_prior: self.cfg.mode.queries_prior(),
            fusion: self.cfg.effective_fusion(),
            search: self.cfg.search.eval(self.cfg.gamma),
        }
    }

    fn wm_only_policy(&self) -> Policy {
        Policy::Search {
            query_prior: false,
            fusion: FusionConfig::off(),
            search: self.cfg.search.eval(self.cfg.gamma),
        }
    }

    /// Plays episodes `first..first + count` with streams from `seeds`,
    /// spread over the configured workers and returned in index order.
    fn run_episodes(&self, seeds: SeedTree, first: u64, count: usize, policy: &Policy) -> Result<Vec<EpisodeRun>> {
        let models = self.models();
        let spec = self.spec;
        let play = |i: u64| {
            let mut search_rng = seeds.stream("search", i);
            let mut lm_rng = seeds.stream("lm", i);
            models.run_episode(&spec, policy, &mut search_rng, &mut lm_rng, false)
        };
        let indices: Vec<u64> = (first..first + count as u64).collect();
        let workers = self.cfg.workers.min(count.max(1));
        if workers <= 1 {
            return indices.into_iter().map(play).collect();
        }
        let chunk = count.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| scope.spawn(|| part.iter().map(|&i| play(i)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(count);
            for h in handles {
                out.extend(h.join().map_err(|_| Error::Malformed("collector thread panicked".into()))??);
            }
            Ok(out)
        })
    }

    /// Collects `count` episodes with the training policy into the buffer.
    pub fn collect(&mut self, count: usize) -> Result<Vec<Episode>> {
        let policy = self.collect_policy();
        let runs = self.run_episodes(self.seeds.child("collect"), self.counters.episodes, count, &policy)?;
        let mut episodes = Vec::with_capacity(runs.len());
        for run in runs {
            self.counters.env_steps += run.episode.len() as u64;
            self.counters.episodes += 1;
            self.pending.train_returns.push(run.episode.total_return);
            if self.cfg.mode.uses_world_model() {
                self.buffer.push_episode(run.episode.clone())?;
            }
            episodes.push(run.episode);
        }
        Ok(episodes)
    }

    fn wm_update(&mut self) -> Result<()> {
        let spec = self.target_spec();
        let wcfg = &self.cfg.world_model;
        let mut rng = self.seeds.stream("wm/batch", self.counters.wm_updates);
        let windows = self.buffer.sample_windows(wcfg.batch_size, wcfg.unroll, &mut rng);
        if windows.is_empty() {
            return Err(Error::Malformed("world-model update on an empty buffer".into()));
        }
        self.cache.sync(self.counters.target_version);
        let batch = windows
            .iter()
            .map(|w| self.buffer.build_wm_sample(w, &self.wm_target, &mut self.cache, &spec))
            .collect::<Result<Vec<WmSample<T>>>>()?;
        let (loss, grad) = self.wm.loss_and_grad(&batch, &wcfg.weights())?;
        let total = loss.total.as_f64();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("world-model loss at update {}", self.counters.wm_updates)));
        }
        self.wm_opt.step(&mut self.wm, &grad);
        self.counters.wm_updates += 1;
        match wcfg.target_mode {
            TargetMode::Hard if self.counters.wm_updates.is_multiple_of(wcfg.target_every as u64) => {
                update_target(&mut self.wm_target, &self.wm, TargetMode::Hard, 1.0);
                self.counters.target_version += 1;
            }
            TargetMode::Hard => {}
            TargetMode::Ema => {
                update_target(&mut self.wm_target, &self.wm, TargetMode::Ema, wcfg.target_tau);
                self.counters.target_version += 1;
            }
        }
        self.pending.wm_loss.push(total);
        Ok(())
    }

    /// `n_wm` world-model updates. In the non-alternating mode the prior
    /// updates of the cycle are interleaved evenly.
    pub fn run_wm_phase(&mut self) -> Result<()> {
        let (n_wm, n_llm) = (self.cfg.n_wm, self.cfg.n_llm);
        let interleave = self.cfg.mode == Mode::NonAlternating && self.lm_trainable();
        if interleave {
            self.phase_stats.reset();
            self.phase_advantages.clear();
        }
        let every = (n_wm / n_llm).max(1);
        let mut done = 0;
        for k in 1..=n_wm {
            self.wm_update()?;
            if interleave && k % every == 0 && done < n_llm {
                self.interleaved_llm_update()?;
                done += 1;
            }
        }
        while interleave && done < n_llm {
            self.interleaved_llm_update()?;
            done += 1;
        }
        Ok(())
    }

    fn fetch_batch(&mut self) -> Result<Vec<AdvantageSample>> {
        let spec = self.target_spec();
        let mut rng = self.seeds.stream("llm/fetch", self.counters.llm_fetches);
        self.counters.llm_fetches += 1;
        self.cache.sync(self.counters.target_version);
        let samples = self.buffer.fetch_llm_samples(
            self.cfg.rlft.batch_size,
            &self.wm_target,
            &mut self.cache,
            &spec,
            &mut rng,
        )?;
        if samples.is_empty() {
            return Err(Error::Malformed("no transitions with stored prompts to fine-tune on".into()));
        }
        Ok(samples)
    }

    fn finish_advantages(&self, samples: &mut [AdvantageSample], stats: &PhaseStats) {
        let raw: Vec<f64> = samples.iter().map(|s| s.raw_advantage).collect();
        let normalized = phase_normalize(&raw, stats, self.cfg.rlft.eps_norm);
        let lambda = self.cfg.effective_format_weight();
        for (s, a) in samples.iter_mut().zip(normalized) {
            s.normalized = a;
            s.final_advantage = blend_format(a, s.r_fmt, lambda);
        }
    }

    fn normalize_batch(&mut self, samples: &mut [AdvantageSample]) {
        let stats = match self.cfg.rlft.norm_mode {
            NormMode::PhaseGlobal => self.phase_stats,
            NormMode::Batch => {
                let mut s = PhaseStats::new();
                s.observe(&samples.iter().map(|s| s.raw_advantage).collect::<Vec<_>>());
                s
            }
        };
        self.finish_advantages(samples, &stats);
        self.phase_advantages.extend(samples.iter().map(|s| s.normalized));
    }

    fn interleaved_llm_update(&mut self) -> Result<()> {
        let mut batch = self.fetch_batch()?;
        self.phase_stats
            .observe(&batch.iter().map(|s| s.raw_advantage).collect::<Vec<_>>());
        self.normalize_batch(&mut batch);
        self.llm_update(batch)
    }

    /// `n_llm` prior updates from the buffer. Every batch of the phase is
    /// fetched up front against the fixed target model so the phase
    /// statistics cover the whole phase before any advantage is normalized.
    /// Performs no update when the prior is frozen or scripted.
    pub fn run_llm_phase(&mut self) -> Result<()> {
        if !self.lm_trainable() {
            return Ok(());
        }
        self.phase_stats.reset();
        self.phase_advantages.clear();
        let mut batches = Vec::with_capacity(self.cfg.n_llm);
        for _ in 0..self.cfg.n_llm {
            let batch = self.fetch_batch()?;
            self.phase_stats
                .observe(&batch.iter().map(|s| s.raw_advantage).collect::<Vec<_>>());
            batches.push(batch);
        }
        for mut batch in batches {
            self.normalize_batch(&mut batch);
            self.llm_update(batch)?;
        }
        Ok(())
    }

    /// One prior update: a fresh behaviour snapshot, then `epochs` gradient steps.
    fn llm_update(&mut self, mut samples: Vec<AdvantageSample>) -> Result<()> {
        attach_logprobs(&mut samples, &self.lm, &self.lm_ref)?;
        for epoch in 0..self.cfg.rlft.epochs {
            let (loss, grad, kl, clip, surrogate) = if self.cfg.mode == Mode::Azsft {
                let (loss, grad) = azsft_loss(&self.lm, &samples)?;
                (loss.as_f64(), grad, 0.0, 0.0, 0.0)
            } else {
                let out = ppo_token_loss(&self.lm, &samples, &self.cfg.rlft)?;
                (out.loss.as_f64(), out.grad, out.kl, out.clip_fraction, out.surrogate)
            };
            if epoch == 0 {
                self.snapshot_clip_fractions.push(clip);
            }
            let norm = self.lm_opt.step(&mut self.lm, &grad).as_f64();
            self.log_llm(loss, surrogate, kl, clip, &samples, norm)?;
        }
        self.counters.llm_updates += 1;
        Ok(())
    }

    fn log_llm(
        &mut self,
        loss: f64,
        surrogate: f64,
        kl: f64,
        clip: f64,
        samples: &[AdvantageSample],
        grad_norm: f64,
    ) -> Result<()> {
        let mut stats = PhaseStats::new();
        stats.observe(&samples.iter().map(|s| s.final_advantage).collect::<Vec<_>>());
        let rec = RlftLogRecord {
            iter: self.counters.llm_updates,
            loss,
            surrogate,
            kl,
            clip_fraction: clip,
            adv_mean: stats.mean(),
            adv_std: stats.std(),
            grad_norm,
        };
        if let Some(out) = &mut self.out {
            out.llm_log.write(&rec)?;
        }
        self.pending.llm_loss.push(loss);
        self.pending.kl.push(kl);
        self.pending.clip_fraction.push(clip);
        self.llm_log.push(rec);
        Ok(())
    }

    fn eval_variant(&self, name: &str, index: u64, policy: &Policy) -> Result<VariantStats> {
        let seeds = self.seeds.child("eval").child(&format!("{name}/{index}"));
        let runs = self.run_episodes(seeds, 0, self.cfg.eval_episodes, policy)?;
        let returns: Vec<f64> = runs.iter().map(|r| r.episode.total_return).collect();
        let steps: Vec<usize> = runs.iter().map(|r| r.episode.len()).collect();
        let entropies: Vec<f64> = runs.iter().flat_map(|r| r.root_entropies.iter().copied()).collect();
        let searches = runs.iter().map(|r| r.searches).sum();
        Ok(VariantStats::from_episodes(&returns, &steps, &entropies, searches))
    }

    /// Evaluates the full agent, the standalone prior and the world model
    /// alone with `eval_episodes` each. Evaluation streams are disjoint from
    /// training streams, so evaluating never changes training.
    pub fn evaluate(&mut self) -> Result<EvalRecord> {
        let index = self.counters.evals;
        self.counters.evals += 1;
        let (full, wm_only) = if self.cfg.mode.uses_world_model() {
            (
                Some(self.eval_variant("full", index, &self.full_policy())?),
                Some(self.eval_variant("wm_only", index, &self.wm_only_policy())?),
            )
        } else {
            (None, None)
        };
        let standalone = if self.cfg.mode.queries_prior() {
            self.eval_variant("standalone", index, &self.standalone_policy())?
        } else {
            VariantStats::default()
        };
        Ok(EvalRecord {
            full,
            standalone,
            wm_only,
        })
    }

    fn record(&mut self, phase: &str, eval: &EvalRecord) -> Result<()> {
        let headline = eval.full.as_ref().unwrap_or(&eval.standalone);
        let pending = std::mem::take(&mut self.pending);
        let c = self.counters;
        let rec = MetricsRecord {
            env_steps: c.env_steps,
            wall_ms: self
                .cfg
                .record_wall_time
                .then(|| self.start.elapsed().as_millis() as u64),
            mode: self.cfg.mode,
            phase: phase.to_string(),
            cycle: c.cycle,
            return_mean: headline.return_mean,
            return_min: headline.return_min,
            return_max: headline.return_max,
            root_entropy_mean: headline.root_entropy_mean,
            llm_standalone_return: eval.standalone.return_mean,
            wm_only_return: eval.wm_only.as_ref().and_then(|v| v.return_mean),
            wm_only_root_entropy_mean: eval.wm_only.as_ref().and_then(|v| v.root_entropy_mean),
            wm_loss: mean(&pending.wm_loss),
            llm_loss: mean(&pending.llm_loss),
            kl: mean(&pending.kl),
            clip_fraction: mean(&pending.clip_fraction),
            wm_updates: c.wm_updates,
            llm_updates: c.llm_updates,
            episodes: c.episodes,
            train_return_mean: mean(&pending.train_returns),
        };
        if let Some(out) = &mut self.out {
            out.metrics.write(&rec)?;
            out.metrics_csv.write(&rec)?;
        }
        self.records.push(rec);
        if self.cfg.checkpoints {
            if let Some(dir) = self.out.as_ref().map(|o| o.dir.join("ckpt")) {
                self.save_checkpoint(&dir)?;
            }
        }
        Ok(())
    }

    fn eval_and_record(&mut self, phase: &str) -> Result<()> {
        let eval = self.evaluate()?;
        self.record(phase, &eval)
    }

    /// Runs until `total_env_steps` are collected or `stop` is raised. An
    /// interrupted run writes a checkpoint and no final evaluation. Any error
    /// leaves `diagnostic.json` in the output directory.
    pub fn train(&mut self, stop: Option<&AtomicBool>) -> Result<()> {
        let res = self.train_inner(stop);
        if let Err(e) = &res {
            self.write_diagnostic(e);
        }
        res
    }

    fn stopped(stop: Option<&AtomicBool>) -> bool {
        stop.is_some_and(|s| s.load(Ordering::SeqCst))
    }

    fn train_inner(&mut self, stop: Option<&AtomicBool>) -> Result<()> {
        self.eval_and_record("init")?;
        if self.cfg.total_env_steps == 0 {
            return Ok(());
        }
        let interrupted = match self.cfg.mode {
            Mode::NaivePolicyP1 => self.train_p1(stop)?,
            Mode::NaiveRlftP2 => self.train_p2(stop)?,
            _ => self.train_alternating(stop)?,
        };
        if interrupted {
            if let Some(dir) = self.out.as_ref().map(|o| o.dir.join("ckpt")) {
                self.save_checkpoint(&dir)?;
            }
        }
        Ok(())
    }

    fn budget_left(&self) -> bool {
        self.counters.env_steps < self.cfg.total_env_steps
    }

    fn end_cycle(&mut self) -> Result<()> {
        let last = !self.budget_left();
        if last || self.counters.cycle.is_multiple_of(self.cfg.eval_every) {
            self.eval_and_record(if last { "final" } else { "cycle" })?;
        }
        Ok(())
    }

    fn train_alternating(&mut self, stop: Option<&AtomicBool>) -> Result<bool> {
        let alternating = self.cfg.mode != Mode::NonAlternating;
        let warmup = self.cfg.warmup() as u64;
        let mut warm = false;
        while self.budget_left() {
            if Self::stopped(stop) {
                return Ok(true);
            }
            self.counters.cycle += 1;
            self.collect(self.cfg.episodes_per_collect)?;
            self.run_wm_phase()?;
            if alternating && self.counters.wm_updates >= warmup {
                if !warm {
                    warm = true;
                    self.eval_and_record("warmup_end")?;
                }
                if self.cfg.collect_in_llm_phase {
                    self.collect(self.cfg.episodes_per_collect)?;
                }
                self.run_llm_phase()?;
            }
            self.end_cycle()?;
        }
        Ok(false)
    }

    fn train_p1(&mut self, stop: Option<&AtomicBool>) -> Result<bool> {
        while self.budget_left() {
            if Self::stopped(stop) {
                return Ok(true);
            }
            self.counters.cycle += 1;
            self.collect(self.cfg.episodes_per_collect)?;
            self.end_cycle()?;
        }
        Ok(false)
    }

    fn train_p2(&mut self, stop: Option<&AtomicBool>) -> Result<bool> {
        while self.budget_left() && self.cfg.p2_iterations.is_none_or(|m| self.counters.cycle < m) {
            if Self::stopped(stop) {
                return Ok(true);
            }
            self.counters.cycle += 1;
            let episodes = self.collect(self.cfg.p2_episodes_per_iter)?;
            self.p2_update(&episodes)?;
            let last = !self.budget_left() || self.cfg.p2_iterations == Some(self.counters.cycle);
            if last || self.counters.cycle.is_multiple_of(self.cfg.eval_every) {
                self.eval_and_record(if last { "final" } else { "p2" })?;
            }
        }
        Ok(false)
    }

    /// One on-policy iteration of the naive fine-tuning baseline: GAE from the
    /// value head, advantages standardized over the iteration, then clipped
    /// updates of the token model and its value head.
    fn p2_update(&mut self, episodes: &[Episode]) -> Result<()> {
        let iter = self.counters.cycle;
        let (gamma, lambda) = (self.cfg.gamma, self.cfg.rlft.gae_lambda);
        let mut samples = Vec::new();
        let mut returns = Vec::new();
        for (k, ep) in episodes.iter().enumerate() {
            let mut values = Vec::with_capacity(ep.len() + 1);
            for tr in &ep.transitions {
                let prompt = tr.prompt_ids.as_ref().ok_or_else(|| {
                    Error::Malformed("fine-tuning baseline needs stored prompts".into())
                })?;
                values.push(self.value_head.predict(&self.lm, prompt)?.as_f64());
            }
            values.push(0.0);
            let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = ep.transitions.iter().map(|t| t.done).collect();
            let (adv, ret) = gae_advantage(&rewards, &values, gamma, lambda, &dones)?;
            for (t, tr) in ep.transitions.iter().enumerate() {
                let output_ids = tr.output_ids.clone().expect("stored with prompt");
                samples.push(AdvantageSample {
                    episode_uid: k as u64,
                    t,
                    action_index: tr.action_index,
                    q_n: ret[t],
                    baseline: values[t],
                    raw_advantage: adv[t],
                    normalized: 0.0,
                    r_fmt: tr.llm_output_text.as_deref().map_or(0, format_reward),
                    final_advantage: 0.0,
                    prompt_ids: tr.prompt_ids.clone().expect("checked above"),
                    mask: vec![true; output_ids.len()],
                    output_ids,
                    cot_len: tr.cot_len,
                    visit_weight: 1.0,
                    old_logprobs: Vec::new(),
                    ref_logprobs: Vec::new(),
                });
            }
            returns.extend_from_slice(&ret);
            let rec = GaeBatchRecord {
                iter,
                episode: k,
                gamma,
                lambda,
                rewards,
                values,
                dones,
                advantages: adv,
                returns: ret,
            };
            if let Some(out) = &mut self.out {
                out.gae_log.write(&rec)?;
            }
            self.gae_log.push(rec);
        }
        let mut stats = PhaseStats::new();
        stats.observe(&samples.iter().map(|s| s.raw_advantage).collect::<Vec<_>>());
        self.finish_advantages(&mut samples, &stats);
        self.phase_advantages = samples.iter().map(|s| s.normalized).collect();
        attach_logprobs(&mut samples, &self.lm, &self.lm_ref)?;

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = self.seeds.stream("p2/shuffle", iter);
        let bs = self.cfg.rlft.batch_size;
        let mut first = true;
        for _ in 0..self.cfg.rlft.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            for chunk in order.chunks(bs) {
                let batch: Vec<AdvantageSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let targets: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
                let out = ppo_value_loss(&self.lm, &self.value_head, &batch, &targets, &self.cfg.rlft)?;
                if first {
                    self.snapshot_clip_fractions.push(out.clip_fraction);
                    first = false;
                }
                let norm = self.lm_opt.step(&mut self.lm, &out.grad).as_f64();
                if let Some(vg) = &out.value_grad {
                    self.vh_opt.step(&mut self.value_head, vg);
                }
                self.log_llm(out.loss.as_f64(), out.surrogate, out.kl, out.clip_fraction, &batch, norm)?;
                self.counters.llm_updates += 1;
            }
        }
        Ok(())
    }

    /// Steps one episode with the full agent, recording the root fusion at
    /// every state.
    pub fn case_study(&self, seed: u64) -> Result<Vec<CaseStudyRow>> {
        if !self.cfg.mode.uses_world_model() {
            return Err(Error::Config(format!("mode {} has no search to inspect", self.cfg.mode)));
        }
        let seeds = self.seeds.child("case_study");
        let run = self.models().run_episode(
            &self.spec,
            &self.full_policy(),
            &mut seeds.stream("search", seed),
            &mut seeds.stream("lm", seed),
            true,
        )?;
        Ok(run.case_rows)
    }

    fn rng_state(&self) -> RngState {
        RngState {
            root_seed: self.cfg.seed,
            episodes: self.counters.episodes,
            wm_updates: self.counters.wm_updates,
            llm_fetches: self.counters.llm_fetches,
            evals: self.counters.evals,
        }
    }

    /// Writes the parameter files, the resolved configuration and a manifest
    /// into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.wm, &dir.join(CHECKPOINT_FILES[0]))?;
        save_checkpoint(&self.wm_target, &dir.join(CHECKPOINT_FILES[1]))?;
        save_checkpoint(&self.lm, &dir.join(CHECKPOINT_FILES[2]))?;
        save_checkpoint(&self.value_head, &dir.join(CHECKPOINT_FILES[3]))?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        let manifest = Manifest {
            config_hash: config_hash(&self.cfg)?,
            env_steps: self.counters.env_steps,
            cycle: self.counters.cycle,
            wm_updates: self.counters.wm_updates,
            llm_updates: self.counters.llm_updates,
            target_version: self.counters.target_version,
            rng: self.rng_state(),
            files: CHECKPOINT_FILES.iter().map(|s| s.to_string()).collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Replaces the parameters with those stored in `dir`. Fails when any
    /// stored shape differs from the configured one.
    pub fn load_parameters(&mut self, dir: &Path) -> Result<()> {
        fn load<T: Scalar, P: FlatParams<T>>(current: &mut P, path: &Path) -> Result<()> {
            let loaded: P = load_checkpoint(path)?;
            if loaded.header() != current.header() {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, configuration expects {:?}",
                    path.display(),
                    loaded.header(),
                    current.header()
                )));
            }
            *current = loaded;
            Ok(())
        }
        load(&mut self.wm, &dir.join(CHECKPOINT_FILES[0]))?;
        load(&mut self.wm_target, &dir.join(CHECKPOINT_FILES[1]))?;
        load(&mut self.lm, &dir.join(CHECKPOINT_FILES[2]))?;
        load(&mut self.value_head, &dir.join(CHECKPOINT_FILES[3]))?;
        Ok(())
    }

    fn write_diagnostic(&self, err: &Error) {
        let Some(out) = &self.out else { return };
        let diag = serde_json::json!({
            "error": err.to_string(),
            "mode": self.cfg.mode,
            "counters": self.counters,
        });
        // The original error is what the caller reports; a failure to write
        // the diagnostic must not mask it.
        let _ = fs::write(out.dir.join("diagnostic.json"), diag.to_string());
    }
}
