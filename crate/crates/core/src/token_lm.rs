//! A tiny autoregressive token model used as the language-model prior.
//!
//! The context encoder is the mean of the context's token embeddings, followed
//! by one tanh hidden layer and a linear projection to vocabulary logits. All
//! gradients are written out by hand.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::FlatParams;
use crate::rng::Rng;
use crate::scalar::{affine, affine_backward, log_softmax, softmax, Scalar};

pub type TokenId = usize;

pub const DEFAULT_D_EMBED: usize = 16;
pub const DEFAULT_D_HIDDEN: usize = 32;
pub const DEFAULT_INIT_SCALE: f64 = 0.08;

/// Parameters of the token model. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T> {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    /// `vocab_size x d_embed`
    pub embed: Vec<T>,
    /// `d_hidden x d_embed`
    pub w_hidden: Vec<T>,
    pub b_hidden: Vec<T>,
    /// `vocab_size x d_hidden`
    pub w_out: Vec<T>,
    pub b_out: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Teacher-forced log-probabilities of a continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence<T> {
    pub token_ids: Vec<TokenId>,
    pub per_token_logprob: Vec<T>,
    pub mean_logprob: T,
    /// The requested reduction of `per_token_logprob`.
    pub score: T,
}

/// A prompt and the continuation whose tokens carry a loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmSequence {
    pub prompt: Vec<TokenId>,
    pub continuation: Vec<TokenId>,
}

/// Location of one continuation token inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSite {
    /// Index of the sequence in the batch.
    pub seq: usize,
    /// Index of the token inside the continuation.
    pub pos: usize,
    /// The token being predicted.
    pub token: TokenId,
}

/// A differentiable per-token loss.
///
/// `token` receives the log-probabilities over the vocabulary at one
/// continuation position and must write the gradient of its returned loss
/// with respect to those log-probabilities into `grad` (zeroed beforehand).
pub trait TokenObjective<T: Scalar> {
    fn token(&mut self, site: TokenSite, logprobs: &[T], grad: &mut [T]) -> T;

    /// Called once per sequence with the hidden activation of the bare prompt.
    /// Objectives that attach a head to the prompt representation write the
    /// gradient with respect to `hidden` into `grad` (zeroed beforehand).
    fn prompt_hidden(&mut self, _seq: usize, _hidden: &[T], _grad: &mut [T]) -> T {
        T::zero()
    }
}

impl<T: Scalar, F> TokenObjective<T> for F
where
    F: FnMut(TokenSite, &[T], &mut [T]) -> T,
{
    fn token(&mut self, site: TokenSite, logprobs: &[T], grad: &mut [T]) -> T {
        self(site, logprobs, grad)
    }
}

impl<T: Scalar> LmParams<T> {
    pub fn zeros(vocab_size: usize, d_embed: usize, d_hidden: usize) -> Self {
        Self {
            vocab_size,
            d_embed,
            d_hidden,
            embed: vec![T::zero(); vocab_size * d_embed],
            w_hidden: vec![T::zero(); d_hidden * d_embed],
            b_hidden: vec![T::zero(); d_hidden],
            w_out: vec![T::zero(); vocab_size * d_hidden],
            b_out: vec![T::zero(); vocab_size],
        }
    }

    /// Every entry drawn uniformly from `[-scale, scale]`.
    pub fn init_uniform(
        vocab_size: usize,
        d_embed: usize,
        d_hidden: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut p = Self::zeros(vocab_size, d_embed, d_hidden);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = T::lit(rng.random_range(-scale..=scale));
            }
        }
        p
    }

    /// Deep copy used for behaviour and reference snapshots.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &Self) {
        self.clone_from(snapshot);
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

    fn embedding(&self, id: TokenId) -> &[T] {
        &self.embed[id * self.d_embed..(id + 1) * self.d_embed]
    }

    /// Hidden activation and logits for a context whose embedding sum is `sum`.
    fn head(&self, sum: &[T], len: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let inv = T::one() / T::from_usize_lossy(len);
        let x: Vec<T> = sum.iter().map(|&s| s * inv).collect();
        let mut h = vec![T::zero(); self.d_hidden];
        affine(&self.w_hidden, &self.b_hidden, &x, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = vec![T::zero(); self.vocab_size];
        affine(&self.w_out, &self.b_out, &h, &mut logits);
        (x, h, logits)
    }

    fn add_embedding(&self, sum: &mut [T], id: TokenId) {
        for (s, &e) in sum.iter_mut().zip(self.embedding(id)) {
            *s += e;
        }
    }

    fn context_sum(&self, context: &[TokenId]) -> Vec<T> {
        let mut sum = vec![T::zero(); self.d_embed];
        for &id in context {
            self.add_embedding(&mut sum, id);
        }
        sum
    }

    /// Next-token logits for `context`.
    pub fn forward_logits(&self, context: &[TokenId]) -> Result<Vec<T>> {
        if context.is_empty() {
            return Err(Error::Shape("context must be non-empty".into()));
        }
        self.check_tokens(context)?;
        Ok(self.head(&self.context_sum(context), context.len()).2)
    }

    /// Hidden activation for `context`; the representation a value head reads.
    pub fn hidden(&self, context: &[TokenId]) -> Result<Vec<T>> {
        if context.is_empty() {
            return Err(Error::Shape("context must be non-empty".into()));
        }
        self.check_tokens(context)?;
        Ok(self.head(&self.context_sum(context), context.len()).1)
    }

    /// Teacher-forced log-probabilities of `continuation` after `prompt`.
    pub fn sequence_logprob(
        &self,
        prompt: &[TokenId],
        continuation: &[TokenId],
        reduction: Reduction,
    ) -> Result<ScoredSequence<T>> {
        if prompt.is_empty() || continuation.is_empty() {
            return Err(Error::Shape("prompt and continuation must be non-empty".into()));
        }
        self.check_tokens(prompt)?;
        self.check_tokens(continuation)?;
        let mut sum = self.context_sum(prompt);
        let mut len = prompt.len();
        let mut per_token = Vec::with_capacity(continuation.len());
        for &tok in continuation {
            let (_, _, logits) = self.head(&sum, len);
            per_token.push(log_softmax(&logits)[tok]);
            self.add_embedding(&mut sum, tok);
            len += 1;
        }
        let total: T = per_token.iter().copied().sum();
        let mean = total / T::from_usize_lossy(per_token.len());
        Ok(ScoredSequence {
            token_ids: continuation.to_vec(),
            per_token_logprob: per_token,
            mean_logprob: mean,
            score: match reduction {
                Reduction::Mean => mean,
                Reduction::Sum => total,
            },
        })
    }

    /// Samples up to `max_tokens` tokens, stopping after the first token in
    /// `stop`. The stop token is included in the output.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        max_tokens: usize,
        temperature: f64,
        stop: &[TokenId],
        rng: &mut Rng,
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::Shape("prompt must be non-empty".into()));
        }
        if max_tokens == 0 || temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Config(
                "generation needs max_tokens >= 1 and temperature > 0".into(),
            ));
        }
        self.check_tokens(prompt)?;
        let mut sum = self.context_sum(prompt);
        let mut len = prompt.len();
        let mut out = Vec::new();
        while out.len() < max_tokens {
            let (_, _, logits) = self.head(&sum, len);
            let scaled: Vec<f64> = logits.iter().map(|l| l.as_f64() / temperature).collect();
            let probs = softmax(&scaled);
            let tok = sample_index(&probs, rng);
            out.push(tok);
            if stop.contains(&tok) {
                break;
            }
            self.add_embedding(&mut sum, tok);
            len += 1;
        }
        Ok(out)
    }

    /// Total loss over `batch` and its exact gradient.
    pub fn loss_and_grad<O: TokenObjective<T> + ?Sized>(
        &self,
        batch: &[LmSequence],
        objective: &mut O,
    ) -> Result<(T, LmParams<T>)> {
        let mut grad = self.zeros_like();
        let mut loss = T::zero();
        let d_e = self.d_embed;
        let mut g_logp = vec![T::zero(); self.vocab_size];
        let mut dlogits = vec![T::zero(); self.vocab_size];
        let mut dh = vec![T::zero(); self.d_hidden];
        let mut da = vec![T::zero(); self.d_hidden];
        for (si, seq) in batch.iter().enumerate() {
            if seq.prompt.is_empty() || seq.continuation.is_empty() {
                return Err(Error::Shape(format!("sequence {si} is empty")));
            }
            self.check_tokens(&seq.prompt)?;
            self.check_tokens(&seq.continuation)?;
            let n = seq.continuation.len();
            let p_len = seq.prompt.len();
            // contrib[k] = dL/dx_k / len_k, the per-token embedding gradient
            // flowing from position k into every token of its context.
            let mut contrib = vec![T::zero(); n * d_e];
            let mut sum = self.context_sum(&seq.prompt);
            for (k, &tok) in seq.continuation.iter().enumerate() {
                let len = p_len + k;
                let (x, h, logits) = self.head(&sum, len);
                let logp = log_softmax(&logits);
                g_logp.iter_mut().for_each(|g| *g = T::zero());
                let site = TokenSite {
                    seq: si,
                    pos: k,
                    token: tok,
                };
                loss += objective.token(site, &logp, &mut g_logp);
                dh.iter_mut().for_each(|g| *g = T::zero());
                if k == 0 {
                    loss += objective.prompt_hidden(si, &h, &mut dh);
                }
                let g_total: T = g_logp.iter().copied().sum();
                let mut any = dh.iter().any(|&g| g != T::zero());
                for (v, d) in dlogits.iter_mut().enumerate() {
                    *d = g_logp[v] - logp[v].exp() * g_total;
                    any |= *d != T::zero();
                }
                if any {
                    affine_backward(
                        &self.w_out,
                        &h,
                        &dlogits,
                        &mut grad.w_out,
                        &mut grad.b_out,
                        Some(&mut dh),
                    );
                    for j in 0..self.d_hidden {
                        da[j] = dh[j] * (T::one() - h[j] * h[j]);
                    }
                    let dx = &mut contrib[k * d_e..(k + 1) * d_e];
                    affine_backward(
                        &self.w_hidden,
                        &x,
                        &da,
                        &mut grad.w_hidden,
                        &mut grad.b_hidden,
                        Some(dx),
                    );
                    let inv = T::one() / T::from_usize_lossy(len);
                    dx.iter_mut().for_each(|v| *v *= inv);
                }
                self.add_embedding(&mut sum, tok);
            }
            // Suffix sums: token i of prompt+continuation is in the context of
            // every position k with p_len + k > i.
            for k in (0..n.saturating_sub(1)).rev() {
                for j in 0..d_e {
                    let next = contrib[(k + 1) * d_e + j];
                    contrib[k * d_e + j] += next;
                }
            }
            for &id in &seq.prompt {
                let row = &mut grad.embed[id * d_e..(id + 1) * d_e];
                for j in 0..d_e {
                    row[j] += contrib[j];
                }
            }
            for (i, &id) in seq.continuation.iter().enumerate().take(n - 1) {
                let k = i + 1;
                let row = &mut grad.embed[id * d_e..(id + 1) * d_e];
                for j in 0..d_e {
                    row[j] += contrib[k * d_e + j];
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("token-model loss is {loss}")));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("token-model gradient has non-finite entries".into()));
        }
        Ok((loss, grad))
    }
}

/// Draws an index from a probability vector by inverse CDF.
pub fn sample_index<T: Scalar>(probs: &[T], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

impl<T: Scalar> FlatParams<T> for LmParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            &self.embed,
            &self.w_hidden,
            &self.b_hidden,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.embed,
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    fn header(&self) -> Vec<u64> {
        vec![
            self.vocab_size as u64,
            self.d_embed as u64,
            self.d_hidden as u64,
        ]
    }

    fn zeros_from_header(header: &[u64]) -> Result<Self> {
        match header {
            [v, e, h] => Ok(Self::zeros(*v as usize, *e as usize, *h as usize)),
            _ => Err(Error::Malformed(format!(
                "token-model header needs 3 fields, got {}",
                header.len()
            ))),
        }
    }
}
