//! Policy fine-tuning math for the token model: advantage normalization and
//! format blending, the clipped per-token surrogate with a k3 KL penalty and
//! reasoning-token down-weighting, and the alternative estimators (group
//! relative, GAE) and the search-imitation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RunningStat;
use crate::params::{FlatParams, OptimizerKind};
use crate::replay::AdvantageSample;
use crate::scalar::{dot, Scalar};
use crate::token_lm::{LmParams, LmSequence, Reduction, TokenId, TokenObjective, TokenSite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Mean and std over every advantage fetched in the current phase.
    #[default]
    PhaseGlobal,
    /// Mean and std of each update batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlftConfig {
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
    /// Loss weight of reasoning-prefix tokens.
    pub cot_weight: f64,
    /// Blend weight of the format reward; only applied when reasoning is on.
    pub format_weight: f64,
    pub entropy_coef: f64,
    pub norm_mode: NormMode,
    pub eps_norm: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_norm: f64,
    /// Samples per update.
    pub batch_size: usize,
    /// Gradient steps per fetched batch.
    pub epochs: usize,
    /// GAE lambda for the naive fine-tuning baseline.
    pub gae_lambda: f64,
    /// Value-loss weight for the naive fine-tuning baseline.
    pub value_coef: f64,
}

impl Default for RlftConfig {
    fn default() -> Self {
        Self {
            clip_low: 0.2,
            clip_high: 0.2,
            kl_coef: 0.01,
            cot_weight: 0.1,
            format_weight: 0.5,
            entropy_coef: 0.0,
            norm_mode: NormMode::PhaseGlobal,
            eps_norm: 1e-8,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-2,
            clip_norm: 1.0,
            batch_size: 16,
            epochs: 1,
            gae_lambda: 0.95,
            value_coef: 0.5,
        }
    }
}

impl RlftConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let checks = [
            (self.clip_low > 0.0 && self.clip_low < 1.0, "rlft.clip_low must be in (0, 1)"),
            (self.clip_high > 0.0, "rlft.clip_high must be positive"),
            (self.kl_coef >= 0.0, "rlft.kl_coef must be non-negative"),
            (unit(self.cot_weight), "rlft.cot_weight must be in [0, 1]"),
            (unit(self.format_weight), "rlft.format_weight must be in [0, 1]"),
            (self.entropy_coef >= 0.0, "rlft.entropy_coef must be non-negative"),
            (self.eps_norm > 0.0, "rlft.eps_norm must be positive"),
            (self.lr > 0.0 && self.lr.is_finite(), "rlft.lr must be positive"),
            (self.clip_norm > 0.0, "rlft.clip_norm must be positive"),
            (self.batch_size >= 1, "rlft.batch_size must be at least 1"),
            (self.epochs >= 1, "rlft.epochs must be at least 1"),
            (unit(self.gae_lambda), "rlft.gae_lambda must be in [0, 1]"),
            (self.value_coef >= 0.0, "rlft.value_coef must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Raw-advantage statistics accumulated over one fine-tuning phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseStats {
    stat: RunningStat<f64>,
}

impl PhaseStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.stat = RunningStat::new();
    }

    pub fn observe(&mut self, advantages: &[f64]) {
        for &a in advantages {
            self.stat.update(a);
        }
    }

    pub fn count(&self) -> u64 {
        self.stat.count
    }

    pub fn mean(&self) -> f64 {
        self.stat.mean
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        self.stat.std()
    }
}

/// `(A − μ) / (σ + ε)` with the statistics already accumulated in `stats`.
pub fn phase_normalize(advantages: &[f64], stats: &PhaseStats, eps_norm: f64) -> Vec<f64> {
    let (mu, sigma) = (stats.mean(), stats.std());
    advantages.iter().map(|a| (a - mu) / (sigma + eps_norm)).collect()
}

/// `(1 − λ) Â + λ r_fmt`.
pub fn blend_format(a_hat: f64, r_fmt: u8, lambda: f64) -> f64 {
    (1.0 - lambda) * a_hat + lambda * f64::from(r_fmt)
}

/// k3 estimator `r − 1 − ln r` with `r = exp(logprob_ref − logprob_policy)`.
pub fn kl_k3<T: Scalar>(logprob_policy: T, logprob_ref: T) -> T {
    let d = logprob_ref - logprob_policy;
    d.exp() - T::one() - d
}

/// Group-relative advantages `(R_i − mean) / (std + ε)`.
pub fn grpo_advantage(rewards: &[f64], eps_norm: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "group-relative advantage needs at least 2 completions, got {}",
            rewards.len()
        )));
    }
    let s = RunningStat::from_slice(rewards);
    Ok(rewards.iter().map(|r| (r - s.mean) / (s.std() + eps_norm)).collect())
}

/// Backward GAE recursion. `values` has one more entry than `rewards`: the
/// value after the last step. A done step cuts both the bootstrap and the trace.
/// Returns `(advantages, return targets)` with `R̂_t = Â_t + V(s_t)`.
pub fn gae_advantage(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
    dones: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::Shape(format!(
            "GAE needs {n} dones and {} values, got {} and {}",
            n + 1,
            dones.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Per-token log-probabilities of `output` after `prompt`, as `f64`.
pub fn token_logprobs<T: Scalar>(params: &LmParams<T>, prompt: &[TokenId], output: &[TokenId]) -> Result<Vec<f64>> {
    Ok(params
        .sequence_logprob(prompt, output, Reduction::Sum)?
        .per_token_logprob
        .into_iter()
        .map(Scalar::as_f64)
        .collect())
}

/// Records behaviour and reference log-probabilities on every sample.
pub fn attach_logprobs<T: Scalar>(
    samples: &mut [AdvantageSample],
    old: &LmParams<T>,
    reference: &LmParams<T>,
) -> Result<()> {
    for s in samples {
        s.old_logprobs = token_logprobs(old, &s.prompt_ids, &s.output_ids)?;
        s.ref_logprobs = token_logprobs(reference, &s.prompt_ids, &s.output_ids)?;
    }
    Ok(())
}

/// Scalar value head read from the token model's hidden state at the prompt
/// boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHead<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> ValueHead<T> {
    pub fn zeros(d_hidden: usize) -> Self {
        Self {
            w: vec![T::zero(); d_hidden],
            b: vec![T::zero()],
        }
    }

    pub fn value(&self, hidden: &[T]) -> T {
        dot(&self.w, hidden) + self.b[0]
    }

    /// Value of the state whose prompt is `prompt`.
    pub fn predict(&self, lm: &LmParams<T>, prompt: &[TokenId]) -> Result<T> {
        Ok(self.value(&lm.hidden(prompt)?))
    }
}

impl<T: Scalar> FlatParams<T> for ValueHead<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.w, &mut self.b]
    }

    fn header(&self) -> Vec<u64> {
        vec![self.w.len() as u64]
    }

    fn zeros_from_header(header: &[u64]) -> Result<Self> {
        match header {
            [d] => Ok(Self::zeros(*d as usize)),
            _ => Err(Error::Shape(format!("value head header {header:?}"))),
        }
    }
}

/// Loss components and gradients of one clipped-surrogate evaluation.
#[derive(Debug, Clone)]
pub struct PpoOutput<T> {
    pub loss: T,
    /// Weighted mean of the clipped surrogate (before negation).
    pub surrogate: f64,
    /// Weighted mean k3.
    pub kl: f64,
    pub entropy: f64,
    /// Fraction of active tokens whose ratio lies outside the clip band.
    pub clip_fraction: f64,
    pub value_loss: f64,
    /// Smallest k3 seen on any active token.
    pub min_k3: f64,
    pub grad: LmParams<T>,
    pub value_grad: Option<ValueHead<T>>,
}

struct ValueTerm<'a, T> {
    head: &'a ValueHead<T>,
    returns: &'a [f64],
    coef: f64,
    grad: ValueHead<T>,
    loss: f64,
}

struct PpoObjective<'a, T> {
    samples: &'a [AdvantageSample],
    weights: Vec<Vec<f64>>,
    cfg: &'a RlftConfig,
    inv_tokens: T,
    inv_samples: T,
    surrogate: f64,
    kl: f64,
    entropy: f64,
    clipped: usize,
    active: usize,
    min_k3: f64,
    value: Option<ValueTerm<'a, T>>,
}

impl<T: Scalar> TokenObjective<T> for PpoObjective<'_, T> {
    fn token(&mut self, site: TokenSite, logp: &[T], grad: &mut [T]) -> T {
        let s = &self.samples[site.seq];
        let j = site.pos;
        if !s.mask[j] {
            return T::zero();
        }
        self.active += 1;
        let w = T::lit(self.weights[site.seq][j]);
        let adv = T::lit(s.final_advantage);
        let lp = logp[site.token];
        let ratio = (lp - T::lit(s.old_logprobs[j])).exp();
        let lo = T::one() - T::lit(self.cfg.clip_low);
        let hi = T::one() + T::lit(self.cfg.clip_high);
        let unclipped = ratio * adv;
        let clipped = ratio.max(lo).min(hi) * adv;
        if ratio < lo || ratio > hi {
            self.clipped += 1;
        }
        let scale = w * self.inv_tokens;
        let surr = unclipped.min(clipped);
        let mut loss = -surr * scale;
        if unclipped <= clipped {
            grad[site.token] -= scale * ratio * adv;
        }
        self.surrogate += (surr * scale).as_f64();

        let beta = T::lit(self.cfg.kl_coef);
        let lr = T::lit(s.ref_logprobs[j]);
        let k3 = kl_k3(lp, lr);
        self.min_k3 = self.min_k3.min(k3.as_f64());
        self.kl += (k3 * scale).as_f64();
        if beta > T::zero() {
            loss += beta * k3 * scale;
            grad[site.token] += beta * scale * (T::one() - (lr - lp).exp());
        }

        let c_ent = T::lit(self.cfg.entropy_coef);
        let h: T = -logp.iter().map(|&l| l.exp() * l).sum::<T>();
        self.entropy += (h * scale).as_f64();
        if c_ent > T::zero() {
            loss -= c_ent * h * scale;
            for (g, &l) in grad.iter_mut().zip(logp) {
                *g += c_ent * scale * l.exp() * (l + T::one());
            }
        }
        loss
    }

    fn prompt_hidden(&mut self, seq: usize, hidden: &[T], grad: &mut [T]) -> T {
        let Some(v) = self.value.as_mut() else {
            return T::zero();
        };
        let pred = v.head.value(hidden);
        let err = pred - T::lit(v.returns[seq]);
        let c = T::lit(v.coef) * self.inv_samples;
        let loss = T::lit(0.5) * c * err * err;
        v.loss += loss.as_f64();
        let g = c * err;
        for ((dh, dw), (&w, &h)) in grad
            .iter_mut()
            .zip(v.grad.w.iter_mut())
            .zip(v.head.w.iter().zip(hidden))
        {
            *dh += g * w;
            *dw += g * h;
        }
        v.grad.b[0] += g;
        loss
    }
}

fn check_sample(i: usize, s: &AdvantageSample, with_ref: bool) -> Result<()> {
    let n = s.output_ids.len();
    let bad = s.mask.len() != n
        || s.old_logprobs.len() != n
        || (with_ref && s.ref_logprobs.len() != n);
    if bad {
        return Err(Error::Shape(format!(
            "sample {i}: mask and log-probabilities must cover all {n} output tokens"
        )));
    }
    if !s.final_advantage.is_finite() {
        return Err(Error::NonFinite(format!("advantage of sample {i}")));
    }
    Ok(())
}

fn ppo_impl<T: Scalar>(
    params: &LmParams<T>,
    samples: &[AdvantageSample],
    cfg: &RlftConfig,
    value: Option<(&ValueHead<T>, &[f64])>,
) -> Result<PpoOutput<T>> {
    for (i, s) in samples.iter().enumerate() {
        check_sample(i, s, true)?;
    }
    let active: usize = samples.iter().map(|s| s.mask.iter().filter(|&&m| m).count()).sum();
    let batch: Vec<LmSequence> = samples
        .iter()
        .map(|s| LmSequence {
            prompt: s.prompt_ids.clone(),
            continuation: s.output_ids.clone(),
        })
        .collect();
    let mut obj = PpoObjective {
        samples,
        weights: samples.iter().map(|s| s.token_weights(cfg.cot_weight)).collect(),
        cfg,
        inv_tokens: T::one() / T::from_usize_lossy(active.max(1)),
        inv_samples: T::one() / T::from_usize_lossy(samples.len().max(1)),
        surrogate: 0.0,
        kl: 0.0,
        entropy: 0.0,
        clipped: 0,
        active: 0,
        min_k3: f64::INFINITY,
        value: value.map(|(head, returns)| ValueTerm {
            head,
            returns,
            coef: cfg.value_coef,
            grad: head.zeros_like(),
            loss: 0.0,
        }),
    };
    let (loss, grad) = params.loss_and_grad(&batch, &mut obj)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("clipped surrogate loss".into()));
    }
    Ok(PpoOutput {
        loss,
        surrogate: obj.surrogate,
        kl: obj.kl,
        entropy: obj.entropy,
        clip_fraction: if obj.active == 0 {
            0.0
        } else {
            obj.clipped as f64 / obj.active as f64
        },
        value_loss: obj.value.as_ref().map_or(0.0, |v| v.loss),
        min_k3: obj.min_k3,
        grad,
        value_grad: obj.value.map(|v| v.grad),
    })
}

/// Clipped per-token surrogate with k3 KL and entropy terms, averaged over
/// every active output token, with its exact gradient.
///
/// Each token's loss is scaled by `w = mask · (cot_weight on reasoning tokens,
/// 1 on action tokens)`; the ratio itself is unweighted.
pub fn ppo_token_loss<T: Scalar>(
    params: &LmParams<T>,
    samples: &[AdvantageSample],
    cfg: &RlftConfig,
) -> Result<PpoOutput<T>> {
    ppo_impl(params, samples, cfg, None)
}

/// [`ppo_token_loss`] plus `value_coef · ½ (v(prompt) − R̂)²` averaged over
/// samples, for the naive fine-tuning baseline.
pub fn ppo_value_loss<T: Scalar>(
    params: &LmParams<T>,
    head: &ValueHead<T>,
    samples: &[AdvantageSample],
    returns: &[f64],
    cfg: &RlftConfig,
) -> Result<PpoOutput<T>> {
    if returns.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} return targets for {} samples",
            returns.len(),
            samples.len()
        )));
    }
    ppo_impl(params, samples, cfg, Some((head, returns)))
}

struct SftObjective<'a, T> {
    samples: &'a [AdvantageSample],
    inv_samples: T,
}

impl<T: Scalar> TokenObjective<T> for SftObjective<'_, T> {
    fn token(&mut self, site: TokenSite, logp: &[T], grad: &mut [T]) -> T {
        let s = &self.samples[site.seq];
        if site.pos < s.cot_len || !s.mask[site.pos] {
            return T::zero();
        }
        let c = T::lit(s.visit_weight) * self.inv_samples;
        grad[site.token] -= c;
        -c * logp[site.token]
    }
}

/// Search-imitation loss: mean over samples of `−w_t Σ_j log π(y_j)` on the
/// selected action's tokens, with `w_t` the visit probability of that action.
pub fn azsft_loss<T: Scalar>(params: &LmParams<T>, samples: &[AdvantageSample]) -> Result<(T, LmParams<T>)> {
    let batch: Vec<LmSequence> = samples
        .iter()
        .map(|s| LmSequence {
            prompt: s.prompt_ids.clone(),
            continuation: s.output_ids.clone(),
        })
        .collect();
    let mut obj = SftObjective {
        samples,
        inv_samples: T::one() / T::from_usize_lossy(samples.len().max(1)),
    };
    let (loss, grad) = params.loss_and_grad(&batch, &mut obj)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("imitation loss".into()));
    }
    Ok((loss, grad))
}

/// One line of the fine-tuning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlftLogRecord {
    pub iter: u64,
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub grad_norm: f64,
}
