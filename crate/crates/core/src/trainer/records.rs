//! Serializable records emitted by the trainer.

use serde::{Deserialize, Serialize};

use super::config::Mode;

/// Returns of one evaluation variant.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VariantStats {
    pub episodes: usize,
    pub return_mean: Option<f64>,
    pub return_min: Option<f64>,
    pub return_max: Option<f64>,
    pub steps_mean: Option<f64>,
    /// Mean root visit entropy over every searched step; absent without search.
    pub root_entropy_mean: Option<f64>,
    /// Search trees built while evaluating this variant.
    pub search_trees: u64,
}

impl VariantStats {
    pub fn from_episodes(returns: &[f64], steps: &[usize], entropies: &[f64], searches: u64) -> Self {
        let n = returns.len();
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let steps_f: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
        Self {
            episodes: n,
            return_mean: mean(returns),
            return_min: returns.iter().copied().reduce(f64::min),
            return_max: returns.iter().copied().reduce(f64::max),
            steps_mean: mean(&steps_f),
            root_entropy_mean: mean(entropies),
            search_trees: searches,
        }
    }
}

/// Evaluation of the full agent, the standalone prior and the world model alone.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Fused root prior plus search; absent in modes without a world model.
    pub full: Option<VariantStats>,
    /// Greedy action from the prior alone.
    pub standalone: VariantStats,
    /// Search with the world-model prior only; absent in modes without a world model.
    pub wm_only: Option<VariantStats>,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub env_steps: u64,
    pub wall_ms: Option<u64>,
    pub mode: Mode,
    /// `init`, `warmup_end`, `cycle`, `final` or `p2`.
    pub phase: String,
    pub cycle: u64,
    pub return_mean: Option<f64>,
    pub return_min: Option<f64>,
    pub return_max: Option<f64>,
    pub root_entropy_mean: Option<f64>,
    pub llm_standalone_return: Option<f64>,
    pub wm_only_return: Option<f64>,
    pub wm_only_root_entropy_mean: Option<f64>,
    pub wm_loss: Option<f64>,
    pub llm_loss: Option<f64>,
    pub kl: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub wm_updates: u64,
    pub llm_updates: u64,
    pub episodes: u64,
    /// Mean return of episodes collected since the previous record.
    pub train_return_mean: Option<f64>,
}

/// One episode of the naive fine-tuning baseline's GAE computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaeBatchRecord {
    pub iter: u64,
    pub episode: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub rewards: Vec<f64>,
    /// One more entry than `rewards`.
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// One state of the root-fusion inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyRow {
    pub step: usize,
    pub observation: String,
    pub actions: Vec<String>,
    pub pi_llm: Vec<f64>,
    pub pi_wm: Vec<f64>,
    pub alpha: f64,
    pub fused_prior: Vec<f64>,
    pub visits: Vec<f64>,
    pub chosen: String,
    pub reward: f64,
}

/// Stream counters that, with the root seed, reproduce every random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RngState {
    pub root_seed: u64,
    pub episodes: u64,
    pub wm_updates: u64,
    pub llm_fetches: u64,
    pub evals: u64,
}

/// Metadata written next to the parameter files of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub env_steps: u64,
    pub cycle: u64,
    pub wm_updates: u64,
    pub llm_updates: u64,
    pub target_version: u64,
    pub rng: RngState,
    pub files: Vec<String>,
}
