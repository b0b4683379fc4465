//! Episode store shared by both trainers.
//!
//! Episodes are evicted whole, oldest first. The world-model trainer samples
//! unroll windows with n-step value targets; the token-model trainer samples
//! transitions that carry a stored prompt and output, with an n-step TD
//! advantage computed from the target world model.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior_oracle::format_reward;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::text_env::{EnvName, ACTION_SLOTS};
use crate::token_lm::TokenId;
use crate::world_model::{EncoderInput, WmParams, WmSample};

pub const DEFAULT_CAPACITY: usize = 10_000;

/// One executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs_text: String,
    pub obs_token_ids: Vec<TokenId>,
    /// Indices of the earlier transitions shown in the prompt history.
    pub history: Vec<usize>,
    pub valid_actions: Vec<String>,
    pub action_index: usize,
    pub action_string: String,
    pub reward: f64,
    pub done: bool,
    /// Search visit policy over all action slots.
    pub pi_mcts: Vec<f64>,
    pub root_value: f64,
    /// Mean log-probability score per admissible action; `None` when the prior
    /// was not queried.
    pub llm_scores: Option<Vec<f64>>,
    pub cot_text: Option<String>,
    pub llm_output_text: Option<String>,
    /// Token ids of the rendered prompt, stored for later fine-tuning.
    pub prompt_ids: Option<Vec<TokenId>>,
    /// Token ids of the taken action's output (optional reasoning, then action).
    pub output_ids: Option<Vec<TokenId>>,
    /// Number of leading reasoning tokens in `output_ids`.
    pub cot_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub env: EnvName,
    pub seed: u64,
    pub transitions: Vec<Transition>,
    /// Observation after the last transition.
    pub final_obs_ids: Vec<TokenId>,
    pub total_return: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Whether the last transition ends the episode.
    pub fn terminated(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.done)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Malformed(msg));
        if self.transitions.is_empty() {
            return bad("episode has no transitions".into());
        }
        let last = self.transitions.len() - 1;
        let mut total = 0.0;
        for (t, tr) in self.transitions.iter().enumerate() {
            if tr.done && t != last {
                return bad(format!("done flag set at step {t} before the last step"));
            }
            if !tr.reward.is_finite() || !tr.root_value.is_finite() {
                return bad(format!("non-finite reward or value at step {t}"));
            }
            total += tr.reward;
            if tr.action_index >= ACTION_SLOTS || tr.action_index >= tr.valid_actions.len() {
                return bad(format!("action index {} out of range at step {t}", tr.action_index));
            }
            if tr.valid_actions[tr.action_index] != tr.action_string {
                return bad(format!("action string mismatch at step {t}"));
            }
            if tr.pi_mcts.len() != ACTION_SLOTS
                || tr.pi_mcts.iter().any(|p| !p.is_finite() || *p < 0.0)
                || (tr.pi_mcts.iter().sum::<f64>() - 1.0).abs() > 1e-6
            {
                return bad(format!("search policy at step {t} is not a distribution"));
            }
            if let Some(scores) = &tr.llm_scores {
                if scores.len() != tr.valid_actions.len() || scores.iter().any(|s| !s.is_finite()) {
                    return bad(format!("prior scores at step {t} are malformed"));
                }
            }
            if tr.history.iter().any(|&h| h >= t) {
                return bad(format!("history at step {t} references the future"));
            }
            if tr.prompt_ids.is_some() != tr.output_ids.is_some() {
                return bad(format!("prompt and output ids at step {t} must be stored together"));
            }
            if tr.output_ids.as_ref().is_some_and(|o| tr.cot_len >= o.len()) {
                return bad(format!("reasoning length at step {t} covers the whole output"));
            }
        }
        if (total - self.total_return).abs() > 1e-9 {
            return bad(format!(
                "total return {} differs from the reward sum {total}",
                self.total_return
            ));
        }
        Ok(())
    }
}

/// A sampled `(episode, start)` position with a per-depth validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    /// Position of the episode in the buffer at sampling time.
    pub episode: usize,
    pub start: usize,
    /// `U + 1` flags; false where the unroll has run past the episode end.
    pub valid: Vec<bool>,
}

/// Horizons and discount used for bootstrapped targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    /// Number of past `(observation, action)` pairs fed to the encoder.
    pub history: usize,
    pub unroll: usize,
    pub td_steps: usize,
    pub gamma: f64,
}

/// Memo of target-model latents and values, valid for one target version.
#[derive(Debug)]
pub struct TargetCache<T> {
    version: u64,
    map: HashMap<(u64, usize, usize), (Vec<T>, T)>,
}

impl<T> Default for TargetCache<T> {
    fn default() -> Self {
        Self {
            version: 0,
            map: HashMap::new(),
        }
    }
}

impl<T: Scalar> TargetCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all entries when the target version changes.
    pub fn sync(&mut self, version: u64) {
        if version != self.version {
            self.map.clear();
            self.version = version;
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn get(
        &mut self,
        target: &WmParams<T>,
        key: (u64, usize, usize),
        input: impl FnOnce() -> EncoderInput,
    ) -> Result<&(Vec<T>, T)> {
        match self.map.entry(key) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => {
                let z = target.encode(&input())?;
                let v = target.value(&z);
                Ok(e.insert((z, v)))
            }
        }
    }
}

/// A transition selected for token-model fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSample {
    pub episode_uid: u64,
    pub t: usize,
    pub action_index: usize,
    pub q_n: f64,
    pub baseline: f64,
    pub raw_advantage: f64,
    pub normalized: f64,
    pub r_fmt: u8,
    pub final_advantage: f64,
    pub prompt_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
    /// Per output token; false tokens contribute nothing to the loss.
    pub mask: Vec<bool>,
    pub cot_len: usize,
    /// Search visit probability of the taken action.
    pub visit_weight: f64,
    /// Per output token log-probabilities under the behaviour snapshot.
    pub old_logprobs: Vec<f64>,
    /// Per output token log-probabilities under the reference model.
    pub ref_logprobs: Vec<f64>,
}

impl AdvantageSample {
    /// `mask · (w_cot on reasoning tokens, 1 on action tokens)`.
    pub fn token_weights(&self, w_cot: f64) -> Vec<f64> {
        self.mask
            .iter()
            .enumerate()
            .map(|(j, &m)| match (m, j < self.cot_len) {
                (false, _) => 0.0,
                (true, true) => w_cot,
                (true, false) => 1.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Stored {
    uid: u64,
    episode: Episode,
}

/// FIFO episode store bounded by a transition count.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Stored>,
    transitions: usize,
    next_uid: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
            transitions: 0,
            next_uid: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().map(|s| &s.episode)
    }

    pub fn episode(&self, index: usize) -> Option<&Episode> {
        self.episodes.get(index).map(|s| &s.episode)
    }

    /// Appends `episode`, then evicts whole episodes from the front while the
    /// stored transition count exceeds capacity. The newest episode is always
    /// kept.
    pub fn push_episode(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        self.transitions += episode.len();
        self.episodes.push_back(Stored {
            uid: self.next_uid,
            episode,
        });
        self.next_uid += 1;
        while self.transitions > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("non-empty");
            self.transitions -= old.episode.len();
        }
        Ok(())
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, s) in self.episodes.iter().enumerate() {
            if flat < s.episode.len() {
                return (i, flat);
            }
            flat -= s.episode.len();
        }
        unreachable!("flat index within stored transitions")
    }

    /// `count` windows drawn uniformly over all stored transitions, with
    /// replacement. Empty when the buffer is empty.
    pub fn sample_windows(&self, count: usize, unroll: usize, rng: &mut Rng) -> Vec<Window> {
        if self.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let (episode, start) = self.locate(rng.random_range(0..self.transitions));
                let len = self.episodes[episode].episode.len();
                Window {
                    episode,
                    start,
                    valid: (0..=unroll).map(|k| start + k < len).collect(),
                }
            })
            .collect()
    }

    /// Encoder input for the state before step `t` (`t = len` is the final state).
    pub fn state_input(&self, episode: usize, t: usize, history: usize) -> EncoderInput {
        state_input(&self.episodes[episode].episode, t, history)
    }

    fn cached<'c, T: Scalar>(
        &self,
        cache: &'c mut TargetCache<T>,
        target: &WmParams<T>,
        episode: usize,
        t: usize,
        history: usize,
    ) -> Result<&'c (Vec<T>, T)> {
        let s = &self.episodes[episode];
        cache.get(target, (s.uid, t, history), || state_input(&s.episode, t, history))
    }

    /// Target-model value of state `t`; zero for the absorbing state past a terminal.
    pub fn target_value<T: Scalar>(
        &self,
        cache: &mut TargetCache<T>,
        target: &WmParams<T>,
        episode: usize,
        t: usize,
        history: usize,
    ) -> Result<T> {
        let ep = &self.episodes[episode].episode;
        if t > ep.len() || (t == ep.len() && ep.terminated()) {
            return Ok(T::zero());
        }
        Ok(self.cached(cache, target, episode, t, history)?.1)
    }

    /// `Σ_{j<n} γ^j r_{t+j} + γ^n v̄(s_{t+n})`, truncating the reward sum at the
    /// episode end and dropping the bootstrap past a terminal.
    pub fn n_step_return<T: Scalar>(
        &self,
        cache: &mut TargetCache<T>,
        target: &WmParams<T>,
        episode: usize,
        t: usize,
        spec: &TargetSpec,
    ) -> Result<T> {
        let ep = &self.episodes[episode].episode;
        if t >= ep.len() {
            return Ok(T::zero());
        }
        let end = (t + spec.td_steps).min(ep.len());
        let rewards: Vec<T> = ep.transitions[t..end].iter().map(|tr| T::lit(tr.reward)).collect();
        let bootstrap = self.target_value(cache, target, episode, end, spec.history)?;
        Ok(td_target(&rewards, T::lit(spec.gamma), bootstrap))
    }

    /// Training sample for `window` with value and consistency targets from `target`.
    pub fn build_wm_sample<T: Scalar>(
        &self,
        window: &Window,
        target: &WmParams<T>,
        cache: &mut TargetCache<T>,
        spec: &TargetSpec,
    ) -> Result<WmSample<T>> {
        let ep = &self.episodes[window.episode].episode;
        let len = ep.len();
        let (s, u) = (window.start, spec.unroll);
        let mut actions = Vec::with_capacity(u);
        let mut reward_targets = Vec::with_capacity(u);
        let mut consistency_targets = Vec::with_capacity(u);
        for k in 0..u {
            match ep.transitions.get(s + k) {
                Some(tr) => {
                    actions.push(tr.action_index);
                    reward_targets.push(T::lit(tr.reward));
                }
                None => {
                    actions.push(0);
                    reward_targets.push(T::zero());
                }
            }
            let next = s + k + 1;
            consistency_targets.push(if next <= len {
                Some(self.cached(cache, target, window.episode, next, spec.history)?.0.clone())
            } else {
                None
            });
        }
        let mut value_targets = Vec::with_capacity(u + 1);
        let mut policy_targets = Vec::with_capacity(u + 1);
        for k in 0..=u {
            value_targets.push(self.n_step_return(cache, target, window.episode, s + k, spec)?);
            policy_targets.push(
                ep.transitions
                    .get(s + k)
                    .map(|tr| tr.pi_mcts.iter().map(|&p| T::lit(p)).collect()),
            );
        }
        Ok(WmSample {
            input: state_input(ep, s, spec.history),
            actions,
            reward_targets,
            value_targets,
            policy_targets,
            consistency_targets,
        })
    }

    /// `count` transitions with stored prompts, drawn uniformly with
    /// replacement, each with `Q^(n)`, the target-model baseline and the raw
    /// advantage filled in.
    pub fn fetch_llm_samples<T: Scalar>(
        &self,
        count: usize,
        target: &WmParams<T>,
        cache: &mut TargetCache<T>,
        spec: &TargetSpec,
        rng: &mut Rng,
    ) -> Result<Vec<AdvantageSample>> {
        let eligible: Vec<(usize, usize)> = self
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.episode
                    .transitions
                    .iter()
                    .enumerate()
                    .filter(|(_, tr)| tr.prompt_ids.is_some())
                    .map(move |(t, _)| (i, t))
            })
            .collect();
        if eligible.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let (i, t) = eligible[rng.random_range(0..eligible.len())];
            let q_n = self.n_step_return(cache, target, i, t, spec)?.as_f64();
            let baseline = self.target_value(cache, target, i, t, spec.history)?.as_f64();
            let tr = &self.episodes[i].episode.transitions[t];
            let output_ids = tr.output_ids.clone().expect("stored with prompt");
            out.push(AdvantageSample {
                episode_uid: self.episodes[i].uid,
                t,
                action_index: tr.action_index,
                q_n,
                baseline,
                raw_advantage: q_n - baseline,
                normalized: 0.0,
                r_fmt: tr.llm_output_text.as_deref().map_or(0, format_reward),
                final_advantage: 0.0,
                prompt_ids: tr.prompt_ids.clone().expect("checked eligible"),
                mask: vec![true; output_ids.len()],
                output_ids,
                cot_len: tr.cot_len,
                visit_weight: tr.pi_mcts[tr.action_index],
                old_logprobs: Vec::new(),
                ref_logprobs: Vec::new(),
            });
        }
        Ok(out)
    }

    /// Writes every stored episode as one JSON line.
    pub fn dump_ndjson(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for ep in self.episodes() {
            serde_json::to_writer(&mut out, ep)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`ReplayBuffer::dump_ndjson`], pushing each
    /// episode in order.
    pub fn load_ndjson(path: &Path, capacity: usize) -> Result<Self> {
        let mut buf = Self::new(capacity);
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            buf.push_episode(serde_json::from_str(&line)?)?;
        }
        Ok(buf)
    }
}

/// `Σ_j γ^j r_j + γ^len · bootstrap`.
pub fn td_target<T: Scalar>(rewards: &[T], gamma: T, bootstrap: T) -> T {
    let mut q = T::zero();
    let mut disc = T::one();
    for &r in rewards {
        q += disc * r;
        disc *= gamma;
    }
    q + disc * bootstrap
}

fn state_input(ep: &Episode, t: usize, history: usize) -> EncoderInput {
    let steps = ep.transitions[t.saturating_sub(history)..t]
        .iter()
        .map(|tr| (tr.obs_token_ids.clone(), tr.action_index))
        .collect();
    let current = match ep.transitions.get(t) {
        Some(tr) => tr.obs_token_ids.clone(),
        None => ep.final_obs_ids.clone(),
    };
    EncoderInput { steps, current }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use crate::world_model::ValueSupport;

    pub(crate) fn transition(t: usize, reward: f64, done: bool) -> Transition {
        let mut pi = vec![0.0; ACTION_SLOTS];
        pi[0] = 0.5;
        pi[1] = 0.5;
        Transition {
            obs_text: format!("room {t}"),
            obs_token_ids: vec![t % 5 + 1],
            history: Vec::new(),
            valid_actions: vec!["north".into(), "south".into()],
            action_index: t % 2,
            action_string: if t.is_multiple_of(2) { "north".into() } else { "south".into() },
            reward,
            done,
            pi_mcts: pi,
            root_value: 0.0,
            llm_scores: Some(vec![-1.0, -2.0]),
            cot_text: None,
            llm_output_text: Some("Action: north".into()),
            prompt_ids: Some(vec![1, 2, 3]),
            output_ids: Some(vec![4, 5]),
            cot_len: 0,
        }
    }

    pub(crate) fn episode(rewards: &[f64]) -> Episode {
        let n = rewards.len();
        Episode {
            env: EnvName::LoopTrapRooms,
            seed: 0,
            transitions: rewards
                .iter()
                .enumerate()
                .map(|(t, &r)| transition(t, r, t + 1 == n))
                .collect(),
            final_obs_ids: vec![9],
            total_return: rewards.iter().sum(),
        }
    }

    fn zero_wm() -> WmParams<f64> {
        WmParams::zeros(10, 3, 2, 4, 5, ValueSupport::new(21, 10.0).unwrap())
    }

    fn spec(n: usize, gamma: f64) -> TargetSpec {
        TargetSpec {
            history: 4,
            unroll: 5,
            td_steps: n,
            gamma,
        }
    }

    #[test]
    fn eviction_keeps_whole_episodes() {
        let mut buf = ReplayBuffer::new(100);
        for _ in 0..3 {
            buf.push_episode(episode(&[0.0; 50])).unwrap();
        }
        assert_eq!(buf.len(), 100);
        assert_eq!(buf.num_episodes(), 2);
    }

    #[test]
    fn push_then_read_round_trips() {
        let mut buf = ReplayBuffer::new(100);
        let ep = episode(&[0.0, 1.0]);
        buf.push_episode(ep.clone()).unwrap();
        assert_eq!(buf.episode(0), Some(&ep));
    }

    #[test]
    fn empty_buffer_samples_nothing() {
        let buf = ReplayBuffer::new(10);
        let mut rng = SeedTree::new(0).stream("r", 0);
        assert!(buf.sample_windows(5, 5, &mut rng).is_empty());
        let wm = zero_wm();
        let got = buf
            .fetch_llm_samples(5, &wm, &mut TargetCache::new(), &spec(5, 0.99), &mut rng)
            .unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn malformed_episodes_are_rejected() {
        let mut buf = ReplayBuffer::new(10);
        let mut ep = episode(&[0.0, 1.0]);
        ep.transitions[0].done = true;
        assert!(buf.push_episode(ep).is_err());
        let mut ep = episode(&[0.0, 1.0]);
        ep.total_return = 3.0;
        assert!(buf.push_episode(ep).is_err());
        let mut ep = episode(&[0.0]);
        ep.transitions[0].pi_mcts[0] = 0.9;
        assert!(buf.push_episode(ep).is_err());
        assert!(buf.is_empty());
    }

    #[test]
    fn short_episode_windows_are_padded() {
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(&[0.0; 6])).unwrap();
        let mut rng = SeedTree::new(1).stream("r", 0);
        let wins = buf.sample_windows(40, 5, &mut rng);
        assert_eq!(wins.len(), 40);
        for w in &wins {
            for (k, &v) in w.valid.iter().enumerate() {
                assert_eq!(v, w.start + k < 6);
            }
            if w.start >= 1 {
                assert!(!w.valid[5]);
            }
        }
        let again = buf.sample_windows(40, 5, &mut SeedTree::new(1).stream("r", 0));
        assert_eq!(wins, again);
    }

    #[test]
    fn td_target_arithmetic() {
        let q: f64 = td_target(&[0.0, 1.0], 0.5, 4.0);
        assert!((q - 1.5).abs() < 1e-12);
        assert!((q - 1.0 - 0.5).abs() < 1e-12);
        assert_eq!(td_target(&[0.7], 0.9, 0.0), 0.7);
    }

    #[test]
    fn terminal_step_has_no_bootstrap() {
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(&[0.0, 0.0, 1.0])).unwrap();
        let wm = zero_wm();
        let q = buf
            .n_step_return(&mut TargetCache::new(), &wm, 0, 2, &spec(5, 0.99))
            .unwrap();
        assert!((q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_model_and_zero_rewards_give_zero_advantages() {
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(&[0.0; 7])).unwrap();
        let wm = zero_wm();
        let mut rng = SeedTree::new(2).stream("r", 0);
        let samples = buf
            .fetch_llm_samples(20, &wm, &mut TargetCache::new(), &spec(3, 0.9), &mut rng)
            .unwrap();
        assert_eq!(samples.len(), 20);
        assert!(samples.iter().all(|s| s.raw_advantage.abs() < 1e-12));
        assert!(samples.iter().all(|s| s.mask.len() == s.output_ids.len()));
    }

    #[test]
    fn wm_sample_shapes_and_masks() {
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(&[0.0, 0.0, 1.0])).unwrap();
        let wm = zero_wm();
        let w = Window {
            episode: 0,
            start: 1,
            valid: vec![true, true, false, false, false, false],
        };
        let s = buf
            .build_wm_sample(&w, &wm, &mut TargetCache::new(), &spec(5, 0.5))
            .unwrap();
        assert_eq!(s.actions.len(), 5);
        assert_eq!(s.value_targets.len(), 6);
        assert_eq!(s.reward_targets, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!((s.value_targets[0] - 0.5).abs() < 1e-12);
        assert!((s.value_targets[1] - 1.0).abs() < 1e-12);
        assert_eq!(s.value_targets[2], 0.0);
        assert_eq!(
            s.policy_targets.iter().map(Option::is_some).collect::<Vec<_>>(),
            vec![true, true, false, false, false, false]
        );
        assert_eq!(
            s.consistency_targets.iter().map(Option::is_some).collect::<Vec<_>>(),
            vec![true, true, false, false, false]
        );
        assert_eq!(s.input.steps.len(), 1);
    }

    #[test]
    fn cache_is_cleared_on_version_change() {
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(&[0.0, 0.0])).unwrap();
        let wm = zero_wm();
        let mut cache = TargetCache::new();
        buf.target_value(&mut cache, &wm, 0, 0, 4).unwrap();
        assert_eq!(cache.len(), 1);
        cache.sync(0);
        assert_eq!(cache.len(), 1);
        cache.sync(1);
        assert!(cache.is_empty());
    }

    #[test]
    fn ndjson_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.ndjson");
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(&[0.0, 1.0])).unwrap();
        buf.push_episode(episode(&[0.5])).unwrap();
        buf.dump_ndjson(&path).unwrap();
        let back = ReplayBuffer::load_ndjson(&path, 100).unwrap();
        assert_eq!(back.episodes().collect::<Vec<_>>(), buf.episodes().collect::<Vec<_>>());
    }
}
