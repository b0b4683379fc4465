//! Latent world model: a gated recurrent history encoder, action-conditioned
//! latent dynamics with a scalar reward head, a categorical value head and a
//! policy head over the padded action space.
//!
//! The encoder reads `(observation, action)` pairs; an observation is the mean
//! of its token embeddings. The current observation is fed last with a zero
//! action vector, and the final recurrent state is the latent `z`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{FlatParams, OptimizerKind};
use crate::rng::Rng;
use crate::scalar::{affine, affine_backward, log_softmax, sigmoid, softmax, Scalar};
use crate::text_env::{EnvName, ACTION_SLOTS};
use crate::token_lm::TokenId;

/// Evenly spaced categorical support over `[-v_max, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSupport {
    pub bins: usize,
    pub v_max: f64,
}

impl ValueSupport {
    pub fn new(bins: usize, v_max: f64) -> Result<Self> {
        let s = Self { bins, v_max };
        s.validate()?;
        Ok(s)
    }

    /// The default support for an environment family.
    pub fn for_env(name: EnvName) -> Self {
        match name {
            EnvName::GridCommand => Self { bins: 21, v_max: 1.0 },
            _ => Self { bins: 21, v_max: 10.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 3 || self.bins.is_multiple_of(2) || !(self.v_max > 0.0) || !self.v_max.is_finite() {
            return Err(Error::Config(format!(
                "value support needs an odd bin count >= 3 and v_max > 0, got {} bins over {}",
                self.bins, self.v_max
            )));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.v_max / (self.bins - 1) as f64
    }

    pub fn values<T: Scalar>(&self) -> Vec<T> {
        let h = self.spacing();
        (0..self.bins)
            .map(|i| T::lit(-self.v_max + h * i as f64))
            .collect()
    }

    /// Two-hot weights of `v` (clamped to the support).
    pub fn encode<T: Scalar>(&self, v: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.bins];
        let vm = T::lit(self.v_max);
        let v = v.max(-vm).min(vm);
        let pos = (v + vm) / T::lit(self.spacing());
        let last = self.bins - 1;
        let lo = pos.floor().to_usize().unwrap_or(0).min(last - 1);
        let w_hi = (pos - T::from_usize_lossy(lo)).max(T::zero()).min(T::one());
        out[lo] = T::one() - w_hi;
        out[lo + 1] += w_hi;
        out
    }

    /// Expectation of the support under `probs`.
    pub fn decode<T: Scalar>(&self, probs: &[T]) -> T {
        probs
            .iter()
            .zip(self.values::<T>())
            .map(|(&p, v)| p * v)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Hard,
    Ema,
}

/// World-model architecture, loss weights and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WmConfig {
    pub d_embed: usize,
    pub d_action: usize,
    pub d_latent: usize,
    pub d_hidden: usize,
    pub support_bins: usize,
    /// Value support half-width; the environment default when absent.
    pub v_max: Option<f64>,
    pub c_policy: f64,
    pub c_value: f64,
    pub c_reward: f64,
    pub c_consistency: f64,
    /// History window length used for training windows.
    pub history_train: usize,
    /// History window length used when acting.
    pub history_act: usize,
    /// Unroll depth of the dynamics during training.
    pub unroll: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_norm: f64,
    pub target_mode: TargetMode,
    /// Hard-copy period in WM updates.
    pub target_every: usize,
    /// EMA rate for `target_mode = "ema"`.
    pub target_tau: f64,
    /// Start the reward, value and policy heads at zero, so an untrained
    /// model predicts zero reward and value and a uniform policy.
    pub zero_init_heads: bool,
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            d_embed: 16,
            d_action: 8,
            d_latent: 32,
            d_hidden: 64,
            support_bins: 21,
            v_max: None,
            c_policy: 1.0,
            c_value: 0.25,
            c_reward: 1.0,
            c_consistency: 2.0,
            history_train: 10,
            history_act: 4,
            unroll: 5,
            batch_size: 32,
            optimizer: OptimizerKind::Sgd,
            lr: 3e-4,
            clip_norm: 1.0,
            target_mode: TargetMode::Hard,
            target_every: 100,
            target_tau: 0.01,
            zero_init_heads: true,
        }
    }
}

impl WmConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_embed, self.d_action, self.d_latent, self.d_hidden];
        if dims.contains(&0) {
            return Err(Error::Config("world-model dimensions must be >= 1".into()));
        }
        if self.history_act > self.history_train {
            return Err(Error::Config(
                "wm.history_act must not exceed wm.history_train".into(),
            ));
        }
        if self.unroll == 0 || self.batch_size == 0 || self.target_every == 0 {
            return Err(Error::Config(
                "wm.unroll, wm.batch_size and wm.target_every must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.target_tau) {
            return Err(Error::Config("wm.lr must be > 0 and wm.target_tau in [0, 1]".into()));
        }
        self.support(EnvName::LoopTrapRooms).validate()
    }

    pub fn support(&self, env: EnvName) -> ValueSupport {
        let base = ValueSupport::for_env(env);
        ValueSupport {
            bins: self.support_bins,
            v_max: self.v_max.unwrap_or(base.v_max),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            policy: self.c_policy,
            value: self.c_value,
            reward: self.c_reward,
            consistency: self.c_consistency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub consistency: f64,
}

/// World-model parameters. Matrices are row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct WmParams<T> {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub d_action: usize,
    pub d_latent: usize,
    pub d_hidden: usize,
    pub support: ValueSupport,
    pub tok_embed: Vec<T>,
    pub act_embed: Vec<T>,
    // Gated recurrence: update gate u, reset gate r, candidate n.
    pub w_u: Vec<T>,
    pub u_u: Vec<T>,
    pub b_u: Vec<T>,
    pub w_r: Vec<T>,
    pub u_r: Vec<T>,
    pub b_r: Vec<T>,
    pub w_n: Vec<T>,
    pub u_n: Vec<T>,
    pub b_n: Vec<T>,
    // Dynamics MLP over [z; e_a].
    pub w_d1: Vec<T>,
    pub b_d1: Vec<T>,
    pub w_d2: Vec<T>,
    pub b_d2: Vec<T>,
    pub w_rew: Vec<T>,
    pub b_rew: Vec<T>,
    pub w_val: Vec<T>,
    pub b_val: Vec<T>,
    pub w_pol: Vec<T>,
    pub b_pol: Vec<T>,
}

/// Observation token ids paired with the action taken after them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EncoderInput {
    pub steps: Vec<(Vec<TokenId>, usize)>,
    pub current: Vec<TokenId>,
}

/// Result of one imagined step.
#[derive(Debug, Clone, PartialEq)]
pub struct Recurrent<T> {
    pub z: Vec<T>,
    pub reward: T,
    pub value_logits: Vec<T>,
    pub policy_logits: Vec<T>,
}

/// One training window with targets for every unroll step.
#[derive(Debug, Clone, PartialEq)]
pub struct WmSample<T> {
    pub input: EncoderInput,
    /// `U` actions, padded past the terminal.
    pub actions: Vec<usize>,
    /// `U` observed rewards (0 past the terminal).
    pub reward_targets: Vec<T>,
    /// `U + 1` scalar value targets.
    pub value_targets: Vec<T>,
    /// `U + 1` search policies; `None` where masked.
    pub policy_targets: Vec<Option<Vec<T>>>,
    /// `U` stop-gradient latents of the real next windows; `None` where masked.
    pub consistency_targets: Vec<Option<Vec<T>>>,
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct WmLoss<T> {
    pub total: T,
    pub policy: T,
    pub value: T,
    pub reward: T,
    pub consistency: T,
}

struct GruStep<T> {
    x: Vec<T>,
    h_prev: Vec<T>,
    u: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
    obs: usize,
    action: Option<usize>,
}

struct DynStep<T> {
    s: Vec<T>,
    hid: Vec<T>,
    z_next: Vec<T>,
    action: usize,
}

fn uniform_fill<T: Scalar>(xs: &mut [T], scale: f64, rng: &mut Rng) {
    for x in xs {
        *x = T::lit(rng.random_range(-scale..=scale));
    }
}

impl<T: Scalar> WmParams<T> {
    pub fn zeros(
        vocab_size: usize,
        d_embed: usize,
        d_action: usize,
        d_latent: usize,
        d_hidden: usize,
        support: ValueSupport,
    ) -> Self {
        let dx = d_embed + d_action;
        let ds = d_latent + d_action;
        let z = |n: usize| vec![T::zero(); n];
        Self {
            vocab_size,
            d_embed,
            d_action,
            d_latent,
            d_hidden,
            support,
            tok_embed: z(vocab_size * d_embed),
            act_embed: z(ACTION_SLOTS * d_action),
            w_u: z(d_latent * dx),
            u_u: z(d_latent * d_latent),
            b_u: z(d_latent),
            w_r: z(d_latent * dx),
            u_r: z(d_latent * d_latent),
            b_r: z(d_latent),
            w_n: z(d_latent * dx),
            u_n: z(d_latent * d_latent),
            b_n: z(d_latent),
            w_d1: z(d_hidden * ds),
            b_d1: z(d_hidden),
            w_d2: z(d_latent * d_hidden),
            b_d2: z(d_latent),
            w_rew: z(d_hidden),
            b_rew: z(1),
            w_val: z(support.bins * d_latent),
            b_val: z(support.bins),
            w_pol: z(ACTION_SLOTS * d_latent),
            b_pol: z(ACTION_SLOTS),
        }
    }

    /// Embeddings uniform in `[-1, 1]`; weights uniform in `±1/sqrt(fan_in)`; biases 0.
    pub fn init(vocab_size: usize, cfg: &WmConfig, support: ValueSupport, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(
            vocab_size,
            cfg.d_embed,
            cfg.d_action,
            cfg.d_latent,
            cfg.d_hidden,
            support,
        );
        let dx = (p.d_embed + p.d_action) as f64;
        let dz = p.d_latent as f64;
        let ds = (p.d_latent + p.d_action) as f64;
        let dh = p.d_hidden as f64;
        uniform_fill(&mut p.tok_embed, 1.0, rng);
        uniform_fill(&mut p.act_embed, 1.0, rng);
        for w in [&mut p.w_u, &mut p.w_r, &mut p.w_n] {
            uniform_fill(w, 1.0 / dx.sqrt(), rng);
        }
        for w in [&mut p.u_u, &mut p.u_r, &mut p.u_n] {
            uniform_fill(w, 1.0 / dz.sqrt(), rng);
        }
        uniform_fill(&mut p.w_d1, 1.0 / ds.sqrt(), rng);
        uniform_fill(&mut p.w_d2, 1.0 / dh.sqrt(), rng);
        if !cfg.zero_init_heads {
            uniform_fill(&mut p.w_rew, 1.0 / dh.sqrt(), rng);
            uniform_fill(&mut p.w_val, 1.0 / dz.sqrt(), rng);
            uniform_fill(&mut p.w_pol, 1.0 / dz.sqrt(), rng);
        }
        p
    }

    fn d_x(&self) -> usize {
        self.d_embed + self.d_action
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= ACTION_SLOTS {
            return Err(Error::Shape(format!(
                "action index {a} outside the {ACTION_SLOTS} action slots"
            )));
        }
        Ok(())
    }

    fn obs_embedding(&self, ids: &[TokenId], out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
        if ids.is_empty() {
            return;
        }
        let d = self.d_embed;
        for &id in ids {
            for (o, &e) in out.iter_mut().zip(&self.tok_embed[id * d..(id + 1) * d]) {
                *o += e;
            }
        }
        let inv = T::one() / T::from_usize_lossy(ids.len());
        out.iter_mut().for_each(|v| *v *= inv);
    }

    fn gru_forward(&self, x: &[T], h: &[T]) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let dz = self.d_latent;
        let mut u = vec![T::zero(); dz];
        let mut r = vec![T::zero(); dz];
        let mut n = vec![T::zero(); dz];
        let mut tmp = vec![T::zero(); dz];
        affine(&self.w_u, &self.b_u, x, &mut u);
        affine(&self.u_u, &vec![T::zero(); dz], h, &mut tmp);
        for i in 0..dz {
            u[i] = sigmoid(u[i] + tmp[i]);
        }
        affine(&self.w_r, &self.b_r, x, &mut r);
        affine(&self.u_r, &vec![T::zero(); dz], h, &mut tmp);
        for i in 0..dz {
            r[i] = sigmoid(r[i] + tmp[i]);
        }
        let rh: Vec<T> = r.iter().zip(h).map(|(&a, &b)| a * b).collect();
        affine(&self.w_n, &self.b_n, x, &mut n);
        affine(&self.u_n, &vec![T::zero(); dz], &rh, &mut tmp);
        for i in 0..dz {
            n[i] = (n[i] + tmp[i]).tanh();
        }
        let h_new = (0..dz)
            .map(|i| (T::one() - u[i]) * h[i] + u[i] * n[i])
            .collect();
        (h_new, u, r, n)
    }

    fn encode_cached(&self, input: &EncoderInput) -> Result<(Vec<T>, Vec<GruStep<T>>)> {
        let de = self.d_embed;
        let mut h = vec![T::zero(); self.d_latent];
        let mut cache = Vec::with_capacity(input.steps.len() + 1);
        let mut x = vec![T::zero(); self.d_x()];
        let n_steps = input.steps.len() + 1;
        for i in 0..n_steps {
            let (ids, action) = match input.steps.get(i) {
                Some((ids, a)) => (ids.as_slice(), Some(*a)),
                None => (input.current.as_slice(), None),
            };
            self.check_tokens(ids)?;
            self.obs_embedding(ids, &mut x[..de]);
            match action {
                Some(a) => {
                    self.check_action(a)?;
                    let da = self.d_action;
                    x[de..].copy_from_slice(&self.act_embed[a * da..(a + 1) * da]);
                }
                None => x[de..].iter_mut().for_each(|v| *v = T::zero()),
            }
            let (h_new, u, r, n) = self.gru_forward(&x, &h);
            cache.push(GruStep {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h, h_new),
                u,
                r,
                n,
                obs: i,
                action,
            });
        }
        Ok((h, cache))
    }

    /// Latent state of a history window.
    pub fn encode(&self, input: &EncoderInput) -> Result<Vec<T>> {
        Ok(self.encode_cached(input)?.0)
    }

    /// Value logits and policy logits of `z`.
    pub fn heads(&self, z: &[T]) -> (Vec<T>, Vec<T>) {
        let mut v = vec![T::zero(); self.support.bins];
        let mut p = vec![T::zero(); ACTION_SLOTS];
        affine(&self.w_val, &self.b_val, z, &mut v);
        affine(&self.w_pol, &self.b_pol, z, &mut p);
        (v, p)
    }

    /// Decoded scalar value of `z`.
    pub fn value(&self, z: &[T]) -> T {
        let (v, _) = self.heads(z);
        self.support.decode(&softmax(&v))
    }

    /// Encode plus heads.
    pub fn initial_inference(&self, input: &EncoderInput) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        let z = self.encode(input)?;
        let (v, p) = self.heads(&z);
        Ok((z, v, p))
    }

    fn dynamics(&self, z: &[T], action: usize) -> DynStep<T> {
        let da = self.d_action;
        let mut s = Vec::with_capacity(self.d_latent + da);
        s.extend_from_slice(z);
        s.extend_from_slice(&self.act_embed[action * da..(action + 1) * da]);
        let mut hid = vec![T::zero(); self.d_hidden];
        affine(&self.w_d1, &self.b_d1, &s, &mut hid);
        hid.iter_mut().for_each(|v| *v = v.tanh());
        let mut z_next = vec![T::zero(); self.d_latent];
        affine(&self.w_d2, &self.b_d2, &hid, &mut z_next);
        z_next.iter_mut().for_each(|v| *v = v.tanh());
        DynStep {
            s,
            hid,
            z_next,
            action,
        }
    }

    fn reward_of(&self, hid: &[T]) -> T {
        crate::scalar::dot(&self.w_rew, hid) + self.b_rew[0]
    }

    /// One imagined step from `z` under `action`.
    pub fn recurrent_inference(&self, z: &[T], action: usize) -> Result<Recurrent<T>> {
        self.check_action(action)?;
        if z.len() != self.d_latent {
            return Err(Error::Shape(format!(
                "latent of length {} given to a model with d_latent {}",
                z.len(),
                self.d_latent
            )));
        }
        let step = self.dynamics(z, action);
        let reward = self.reward_of(&step.hid);
        let (value_logits, policy_logits) = self.heads(&step.z_next);
        Ok(Recurrent {
            z: step.z_next,
            reward,
            value_logits,
            policy_logits,
        })
    }

    /// Batch-mean loss over `batch` and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[WmSample<T>], w: &LossWeights) -> Result<(WmLoss<T>, WmParams<T>)> {
        let mut grad = self.zeros_like();
        let mut acc = WmLoss::default();
        if batch.is_empty() {
            return Ok((acc, grad));
        }
        let inv_b = T::one() / T::from_usize_lossy(batch.len());
        for sample in batch {
            let l = self.sample_loss_and_grad(sample, w, inv_b, &mut grad)?;
            acc.total += l.total * inv_b;
            acc.policy += l.policy * inv_b;
            acc.value += l.value * inv_b;
            acc.reward += l.reward * inv_b;
            acc.consistency += l.consistency * inv_b;
        }
        if !acc.total.is_finite() {
            return Err(Error::NonFinite(format!("world-model loss is {}", acc.total)));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("world-model gradient has non-finite entries".into()));
        }
        Ok((acc, grad))
    }

    /// Accumulates `scale * d(loss)/d(params)` into `grad` and returns the
    /// unscaled loss of one sample.
    fn sample_loss_and_grad(
        &self,
        s: &WmSample<T>,
        w: &LossWeights,
        scale: T,
        grad: &mut WmParams<T>,
    ) -> Result<WmLoss<T>> {
        let u_len = s.actions.len();
        if s.reward_targets.len() != u_len
            || s.value_targets.len() != u_len + 1
            || s.policy_targets.len() != u_len + 1
            || s.consistency_targets.len() != u_len
        {
            return Err(Error::Shape("training window target lengths disagree".into()));
        }
        let (c_p, c_v, c_r, c_c) = (
            T::lit(w.policy),
            T::lit(w.value),
            T::lit(w.reward),
            T::lit(w.consistency),
        );
        let (z0, gru_cache) = self.encode_cached(&s.input)?;
        let mut latents = vec![z0];
        let mut dyn_cache = Vec::with_capacity(u_len);
        for &a in &s.actions {
            self.check_action(a)?;
            let step = self.dynamics(latents.last().expect("non-empty"), a);
            latents.push(step.z_next.clone());
            dyn_cache.push(step);
        }

        let mut loss = WmLoss::default();
        let dz_len = self.d_latent;
        // dL/dz_k from the heads and consistency terms at each depth.
        let mut dz: Vec<Vec<T>> = vec![vec![T::zero(); dz_len]; u_len + 1];
        for k in 0..=u_len {
            let z = &latents[k];
            let (vl, pl) = self.heads(z);
            let mut dv = vec![T::zero(); vl.len()];
            let mut dp = vec![T::zero(); pl.len()];

            let v_lp = log_softmax(&vl);
            let target = self.support.encode(s.value_targets[k]);
            let ce_v: T = -target.iter().zip(&v_lp).map(|(&t, &l)| t * l).sum::<T>();
            loss.value += ce_v;
            for i in 0..dv.len() {
                dv[i] = c_v * (v_lp[i].exp() - target[i]) * scale;
            }

            if let Some(pi) = &s.policy_targets[k] {
                let p_lp = log_softmax(&pl);
                let ce_p: T = -pi
                    .iter()
                    .zip(&p_lp)
                    .filter(|(&t, _)| t > T::zero())
                    .map(|(&t, &l)| t * l)
                    .sum::<T>();
                loss.policy += ce_p;
                let total: T = pi.iter().copied().sum();
                for i in 0..dp.len() {
                    dp[i] = c_p * (p_lp[i].exp() * total - pi[i]) * scale;
                }
            }

            affine_backward(&self.w_val, z, &dv, &mut grad.w_val, &mut grad.b_val, Some(&mut dz[k]));
            affine_backward(&self.w_pol, z, &dp, &mut grad.w_pol, &mut grad.b_pol, Some(&mut dz[k]));

            if k >= 1 {
                if let Some(t) = &s.consistency_targets[k - 1] {
                    let (cos, dcos) = cosine_and_grad(z, t);
                    loss.consistency += T::one() - cos;
                    for i in 0..dz_len {
                        dz[k][i] -= c_c * dcos[i] * scale;
                    }
                }
            }
        }

        // Reward terms and backprop through the unroll, deepest step first.
        let mut carry = vec![T::zero(); dz_len];
        for k in (1..=u_len).rev() {
            let step = &dyn_cache[k - 1];
            let r_hat = self.reward_of(&step.hid);
            let err = r_hat - s.reward_targets[k - 1];
            loss.reward += err * err;
            let d_r = T::lit(2.0) * c_r * err * scale;

            let dzk: Vec<T> = (0..dz_len).map(|i| dz[k][i] + carry[i]).collect();
            let d_pre2: Vec<T> = (0..dz_len)
                .map(|i| dzk[i] * (T::one() - step.z_next[i] * step.z_next[i]))
                .collect();
            let mut d_hid = vec![T::zero(); self.d_hidden];
            affine_backward(&self.w_d2, &step.hid, &d_pre2, &mut grad.w_d2, &mut grad.b_d2, Some(&mut d_hid));
            for j in 0..self.d_hidden {
                grad.w_rew[j] += d_r * step.hid[j];
                d_hid[j] += d_r * self.w_rew[j];
            }
            grad.b_rew[0] += d_r;
            let d_pre1: Vec<T> = (0..self.d_hidden)
                .map(|j| d_hid[j] * (T::one() - step.hid[j] * step.hid[j]))
                .collect();
            let mut d_s = vec![T::zero(); step.s.len()];
            affine_backward(&self.w_d1, &step.s, &d_pre1, &mut grad.w_d1, &mut grad.b_d1, Some(&mut d_s));
            carry.copy_from_slice(&d_s[..dz_len]);
            let da = self.d_action;
            let a = step.action;
            for (g, &d) in grad.act_embed[a * da..(a + 1) * da].iter_mut().zip(&d_s[dz_len..]) {
                *g += d;
            }
        }
        let dz0: Vec<T> = (0..dz_len).map(|i| dz[0][i] + carry[i]).collect();
        self.encoder_backward(&s.input, &gru_cache, dz0, grad);

        loss.total = c_p * loss.policy + c_v * loss.value + c_r * loss.reward + c_c * loss.consistency;
        Ok(loss)
    }

    fn encoder_backward(&self, input: &EncoderInput, cache: &[GruStep<T>], dz: Vec<T>, grad: &mut WmParams<T>) {
        let d = self.d_latent;
        let de = self.d_embed;
        let mut dh_next = dz;
        for step in cache.iter().rev() {
            let h = &step.h_prev;
            let mut dh = vec![T::zero(); d];
            let mut du = vec![T::zero(); d];
            let mut dn = vec![T::zero(); d];
            for i in 0..d {
                du[i] = dh_next[i] * (step.n[i] - h[i]);
                dn[i] = dh_next[i] * step.u[i];
                dh[i] = dh_next[i] * (T::one() - step.u[i]);
            }
            let mut dx = vec![T::zero(); step.x.len()];
            let zero_b = &mut vec![T::zero(); d];

            let da_n: Vec<T> = (0..d).map(|i| dn[i] * (T::one() - step.n[i] * step.n[i])).collect();
            let rh: Vec<T> = (0..d).map(|i| step.r[i] * h[i]).collect();
            affine_backward(&self.w_n, &step.x, &da_n, &mut grad.w_n, &mut grad.b_n, Some(&mut dx));
            let mut drh = vec![T::zero(); d];
            affine_backward(&self.u_n, &rh, &da_n, &mut grad.u_n, zero_b, Some(&mut drh));
            let mut da_r = vec![T::zero(); d];
            for i in 0..d {
                dh[i] += drh[i] * step.r[i];
                let dr = drh[i] * h[i];
                da_r[i] = dr * step.r[i] * (T::one() - step.r[i]);
            }
            affine_backward(&self.w_r, &step.x, &da_r, &mut grad.w_r, &mut grad.b_r, Some(&mut dx));
            affine_backward(&self.u_r, h, &da_r, &mut grad.u_r, zero_b, Some(&mut dh));

            let da_u: Vec<T> = (0..d)
                .map(|i| du[i] * step.u[i] * (T::one() - step.u[i]))
                .collect();
            affine_backward(&self.w_u, &step.x, &da_u, &mut grad.w_u, &mut grad.b_u, Some(&mut dx));
            affine_backward(&self.u_u, h, &da_u, &mut grad.u_u, zero_b, Some(&mut dh));

            let ids = input
                .steps
                .get(step.obs)
                .map(|(ids, _)| ids.as_slice())
                .unwrap_or(input.current.as_slice());
            if !ids.is_empty() {
                let inv = T::one() / T::from_usize_lossy(ids.len());
                for &id in ids {
                    for (g, &v) in grad.tok_embed[id * de..(id + 1) * de].iter_mut().zip(&dx[..de]) {
                        *g += v * inv;
                    }
                }
            }
            if let Some(a) = step.action {
                let da = self.d_action;
                for (g, &v) in grad.act_embed[a * da..(a + 1) * da].iter_mut().zip(&dx[de..]) {
                    *g += v;
                }
            }
            dh_next = dh;
        }
    }
}

/// Cosine similarity of `z` and a constant `t`, and its gradient with respect to `z`.
pub fn cosine_and_grad<T: Scalar>(z: &[T], t: &[T]) -> (T, Vec<T>) {
    let eps = T::lit(1e-12);
    let nz = crate::scalar::l2_norm(z);
    let nt = crate::scalar::l2_norm(t);
    if nz < eps || nt < eps {
        return (T::zero(), vec![T::zero(); z.len()]);
    }
    let dot = crate::scalar::dot(z, t);
    let cos = dot / (nz * nt);
    let grad = z
        .iter()
        .zip(t)
        .map(|(&zi, &ti)| ti / (nz * nt) - cos * zi / (nz * nz))
        .collect();
    (cos, grad)
}

/// Hard copy or exponential moving average of `online` into `target`.
pub fn update_target<T: Scalar>(target: &mut WmParams<T>, online: &WmParams<T>, mode: TargetMode, tau: f64) {
    match mode {
        TargetMode::Hard => target.clone_from(online),
        TargetMode::Ema => {
            let tau = T::lit(tau);
            for (t, o) in target.tensors_mut().into_iter().zip(online.tensors()) {
                for (x, &y) in t.iter_mut().zip(o) {
                    *x = (T::one() - tau) * *x + tau * y;
                }
            }
        }
    }
}

impl<T: Scalar> FlatParams<T> for WmParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            &self.tok_embed,
            &self.act_embed,
            &self.w_u,
            &self.u_u,
            &self.b_u,
            &self.w_r,
            &self.u_r,
            &self.b_r,
            &self.w_n,
            &self.u_n,
            &self.b_n,
            &self.w_d1,
            &self.b_d1,
            &self.w_d2,
            &self.b_d2,
            &self.w_rew,
            &self.b_rew,
            &self.w_val,
            &self.b_val,
            &self.w_pol,
            &self.b_pol,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.tok_embed,
            &mut self.act_embed,
            &mut self.w_u,
            &mut self.u_u,
            &mut self.b_u,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_n,
            &mut self.u_n,
            &mut self.b_n,
            &mut self.w_d1,
            &mut self.b_d1,
            &mut self.w_d2,
            &mut self.b_d2,
            &mut self.w_rew,
            &mut self.b_rew,
            &mut self.w_val,
            &mut self.b_val,
            &mut self.w_pol,
            &mut self.b_pol,
        ]
    }

    fn header(&self) -> Vec<u64> {
        vec![
            self.vocab_size as u64,
            self.d_embed as u64,
            self.d_action as u64,
            self.d_latent as u64,
            self.d_hidden as u64,
            ACTION_SLOTS as u64,
            self.support.bins as u64,
            self.support.v_max.to_bits(),
        ]
    }

    fn zeros_from_header(header: &[u64]) -> Result<Self> {
        match *header {
            [v, e, a, z, h, slots, bins, vmax] => {
                if slots as usize != ACTION_SLOTS {
                    return Err(Error::Shape(format!(
                        "checkpoint has {slots} action slots, this build uses {ACTION_SLOTS}"
                    )));
                }
                let support = ValueSupport::new(bins as usize, f64::from_bits(vmax))?;
                Ok(Self::zeros(
                    v as usize,
                    e as usize,
                    a as usize,
                    z as usize,
                    h as usize,
                    support,
                ))
            }
            _ => Err(Error::Malformed(format!(
                "world-model header needs 8 fields, got {}",
                header.len()
            ))),
        }
    }
}
