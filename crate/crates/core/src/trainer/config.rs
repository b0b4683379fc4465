//! Trainer configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior_oracle::{OracleConfig, ScriptedPrior};
use crate::replay::DEFAULT_CAPACITY;
use crate::rlft::RlftConfig;
use crate::search::{FusionConfig, SearchSettings};
use crate::text_env::{EnvName, EnvSpec};
use crate::token_lm::{DEFAULT_D_EMBED, DEFAULT_D_HIDDEN, DEFAULT_INIT_SCALE};
use crate::world_model::WmConfig;

/// Training regime. Every baseline and ablation is a mode of the same loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Fused-prior search with alternating world-model and prior updates.
    #[default]
    Priorzero,
    /// Search with the world-model prior only; the token model is never queried.
    Unizero,
    /// Fused-prior search; the prior is never updated.
    FrozenPrior,
    /// Prior updates interleaved with world-model updates from the first
    /// iteration, with no warm-up.
    NonAlternating,
    /// Greedy action from the prior, no world model or search.
    NaivePolicyP1,
    /// On-policy fine-tuning of the prior with a value head and GAE.
    NaiveRlftP2,
    /// Alternating schedule with the search-imitation loss instead of the
    /// clipped surrogate.
    Azsft,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Priorzero,
        Mode::Unizero,
        Mode::FrozenPrior,
        Mode::NonAlternating,
        Mode::NaivePolicyP1,
        Mode::NaiveRlftP2,
        Mode::Azsft,
    ];

    /// Whether the mode builds and trains a world model.
    pub fn uses_world_model(self) -> bool {
        !matches!(self, Mode::NaivePolicyP1 | Mode::NaiveRlftP2)
    }

    /// Whether collection queries the prior.
    pub fn queries_prior(self) -> bool {
        self != Mode::Unizero
    }

    /// Whether the prior receives gradient updates.
    pub fn trains_prior(self) -> bool {
        matches!(
            self,
            Mode::Priorzero | Mode::NonAlternating | Mode::NaiveRlftP2 | Mode::Azsft
        )
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| serde_json::to_value(m).ok().and_then(|v| v.as_str().map(String::from)) == Some(norm.clone()))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = serde_json::to_value(self).map_err(|_| std::fmt::Error)?;
        f.write_str(v.as_str().unwrap_or_default())
    }
}

/// Token-model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_embed: usize,
    pub d_hidden: usize,
    /// Half-width of the uniform initialization.
    pub init_scale: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_embed: DEFAULT_D_EMBED,
            d_hidden: DEFAULT_D_HIDDEN,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub mode: Mode,
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub env: EnvName,
    /// Environment layout seed; the run seed when absent.
    pub env_seed: Option<u64>,
    /// Episode step limit; the environment default when absent.
    pub max_steps: Option<usize>,
    pub gamma: f64,
    /// TD horizon `n` of the bootstrapped targets.
    pub td_steps: usize,
    pub total_env_steps: u64,
    pub episodes_per_collect: usize,
    /// Evaluate every this many cycles.
    pub eval_every: u64,
    /// Episodes per evaluation variant.
    pub eval_episodes: usize,
    pub n_wm: usize,
    pub n_llm: usize,
    /// World-model updates before the first prior update; `n_wm` when absent.
    pub warmup_wm_iters: Option<usize>,
    /// Also collect at the start of every prior phase.
    pub collect_in_llm_phase: bool,
    /// Parallel collectors. Results do not depend on this value.
    pub workers: usize,
    pub replay_capacity: usize,
    /// Prompt history length for the naive policy baseline.
    pub p1_history: usize,
    /// Episodes per iteration of the naive fine-tuning baseline.
    pub p2_episodes_per_iter: usize,
    /// Iteration cap of the naive fine-tuning baseline; unbounded when absent.
    pub p2_iterations: Option<u64>,
    /// Record wall-clock time in metrics. Off keeps metrics reproducible.
    pub record_wall_time: bool,
    /// Write parameter checkpoints at evaluation points.
    pub checkpoints: bool,
    pub lm: LmConfig,
    pub world_model: WmConfig,
    pub search: SearchSettings,
    pub rlft: RlftConfig,
    pub oracle: OracleConfig,
    /// Fixed prior replacing the token model when present.
    pub prior: Option<ScriptedPrior>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Priorzero,
            seed: 0,
            env: EnvName::LoopTrapRooms,
            env_seed: None,
            max_steps: None,
            gamma: 0.99,
            td_steps: 5,
            total_env_steps: 2_000,
            episodes_per_collect: 2,
            eval_every: 1,
            eval_episodes: 8,
            n_wm: 50,
            n_llm: 5,
            warmup_wm_iters: None,
            collect_in_llm_phase: false,
            workers: 1,
            replay_capacity: DEFAULT_CAPACITY,
            p1_history: 25,
            p2_episodes_per_iter: 50,
            p2_iterations: None,
            record_wall_time: false,
            checkpoints: true,
            lm: LmConfig::default(),
            world_model: WmConfig::default(),
            search: SearchSettings::default(),
            rlft: RlftConfig::default(),
            oracle: OracleConfig::default(),
            prior: None,
        }
    }
}

impl TrainerConfig {
    pub fn env_spec(&self) -> EnvSpec {
        let mut spec = EnvSpec::new(self.env, self.env_seed.unwrap_or(self.seed));
        if let Some(m) = self.max_steps {
            spec.max_steps = m;
        }
        spec
    }

    pub fn warmup(&self) -> usize {
        self.warmup_wm_iters.unwrap_or(self.n_wm)
    }

    /// Fusion settings actually used by collection and evaluation.
    pub fn effective_fusion(&self) -> FusionConfig {
        if self.mode.queries_prior() {
            self.search.fusion.clone()
        } else {
            FusionConfig::off()
        }
    }

    /// Format-reward blend weight; zero without a reasoning prefix, where the
    /// format reward is identically zero.
    pub fn effective_format_weight(&self) -> f64 {
        if self.oracle.cot {
            self.rlft.format_weight
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: &str| Err(Error::Config(msg.into()));
        self.env_spec().validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return cfg("gamma must be in (0, 1]");
        }
        if self.td_steps == 0 {
            return cfg("td_steps must be at least 1");
        }
        if self.episodes_per_collect == 0 {
            return cfg("episodes_per_collect must be at least 1");
        }
        if self.eval_every == 0 {
            return cfg("eval_every must be at least 1");
        }
        if self.n_wm == 0 || self.n_llm == 0 {
            return cfg("n_wm and n_llm must be at least 1");
        }
        if self.workers == 0 {
            return cfg("workers must be at least 1");
        }
        if self.replay_capacity == 0 {
            return cfg("replay_capacity must be at least 1");
        }
        if self.mode == Mode::NaiveRlftP2 && self.p2_episodes_per_iter == 0 {
            return cfg("p2_episodes_per_iter must be at least 1");
        }
        if self.lm.d_embed == 0 || self.lm.d_hidden == 0 || !(self.lm.init_scale >= 0.0) {
            return cfg("lm dimensions must be positive");
        }
        if let Some(p) = &self.prior {
            if !(0.0..=1.0).contains(&p.mass) {
                return cfg("prior.mass must be in [0, 1]");
            }
            if matches!(self.mode, Mode::NaiveRlftP2 | Mode::Azsft) {
                return Err(Error::Config(format!(
                    "mode {} trains the token model and cannot use a scripted prior",
                    self.mode
                )));
            }
        }
        self.world_model.validate()?;
        self.search.validate()?;
        self.rlft.validate()?;
        self.oracle.validate()?;
        Ok(())
    }
}
