//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use priorzero::error::Result;
use priorzero::params::FlatParams;
use priorzero::replay::AdvantageSample;
use priorzero::rlft::token_logprobs;
use priorzero::token_lm::{LmParams, LmSequence, TokenObjective, TokenSite};
use priorzero::rng::{Rng, SeedTree};
use priorzero::scalar::Scalar;
use priorzero::search::{run_mcts, Expansion, LatentModel, SearchConfig};
use priorzero::text_env::ACTION_SLOTS;
use priorzero::world_model::{EncoderInput, WmParams, WmSample};
use rand::seq::index::sample;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Largest relative error between `grad` and central differences of `loss`
/// over `count` random coordinates of `params`.
pub fn max_fd_error<P: FlatParams<f64>>(
    params: &P,
    grad: &P,
    count: usize,
    rng: &mut Rng,
    mut loss: impl FnMut(&P) -> f64,
) -> (f64, usize) {
    let g = grad.flatten();
    let base = params.flatten();
    let n = base.len();
    let mut worst: f64 = 0.0;
    let coords = sample(rng, n, count.min(n));
    let checked = coords.len();
    for i in coords {
        let mut v = base.clone();
        let mut p = params.clone();
        v[i] += FD_STEP;
        p.load_flat(&v).unwrap();
        let up = loss(&p);
        v[i] -= 2.0 * FD_STEP;
        p.load_flat(&v).unwrap();
        let down = loss(&p);
        let fd = (up - down) / (2.0 * FD_STEP);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    (worst, checked)
}

/// Relative closeness used by oracle checks.
pub fn close<T: Scalar>(a: T, b: f64, tol: f64) -> bool {
    (a.as_f64() - b).abs() <= tol
}

pub const VOCAB: usize = 12;

/// A ratio away from the clip kinks at 0.8 and 1.2.
pub fn ratio(rng: &mut Rng) -> f64 {
    match rng.random_range(0..3) {
        0 => rng.random_range(0.5..0.78),
        1 => rng.random_range(0.82..1.18),
        _ => rng.random_range(1.22..1.8),
    }
}

pub fn random_samples(lm: &LmParams<f64>, count: usize, rng: &mut Rng) -> Vec<AdvantageSample> {
    (0..count)
        .map(|i| {
            let plen = rng.random_range(2..7);
            let olen = rng.random_range(1..5);
            let prompt: Vec<usize> = (0..plen).map(|_| rng.random_range(0..VOCAB)).collect();
            let output: Vec<usize> = (0..olen).map(|_| rng.random_range(0..VOCAB)).collect();
            let lp = token_logprobs(lm, &prompt, &output).unwrap();
            let adv = rng.random_range(-2.0..2.0);
            AdvantageSample {
                episode_uid: i as u64,
                t: 0,
                action_index: 0,
                q_n: adv,
                baseline: 0.0,
                raw_advantage: adv,
                normalized: adv,
                r_fmt: 0,
                final_advantage: adv,
                mask: (0..olen).map(|j| j == olen - 1 || rng.random_bool(0.8)).collect(),
                cot_len: rng.random_range(0..olen),
                visit_weight: rng.random_range(0.0..1.0),
                old_logprobs: lp.iter().map(|l| l - ratio(rng).ln()).collect(),
                ref_logprobs: lp.iter().map(|l| l + rng.random_range(-0.5..0.5)).collect(),
                prompt_ids: prompt,
                output_ids: output,
            }
        })
        .collect()
}

/// A depth-2 tree with branching factor `n` at both levels: random rewards on
/// the two levels, zero reward and value below, and a policy head that is
/// uniform over the tree's `n` actions. The latent is `[depth, root action]`.
pub struct Depth2Tree {
    pub n: usize,
    pub r1: Vec<f64>,
    pub r2: Vec<Vec<f64>>,
}

impl Depth2Tree {
    pub fn draw(rng: &mut impl rand::Rng) -> Self {
        let n = rng.random_range(2..=5);
        let r1 = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let r2 = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        Self { n, r1, r2 }
    }

    /// Redraws until the optimal root action beats the runner-up by `margin`.
    pub fn random(rng: &mut impl rand::Rng, gamma: f64, margin: f64) -> Self {
        loop {
            let t = Self::draw(rng);
            let best = t.best_root_action(gamma);
            let runner_up = (0..t.n)
                .filter(|&a| a != best)
                .map(|a| t.q(a, gamma))
                .fold(f64::MIN, f64::max);
            if t.q(best, gamma) - runner_up >= margin {
                return t;
            }
        }
    }

    pub fn q(&self, a: usize, gamma: f64) -> f64 {
        self.r1[a] + gamma * self.r2[a].iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn best_root_action(&self, gamma: f64) -> usize {
        (0..self.n).fold(0, |best, a| if self.q(a, gamma) > self.q(best, gamma) { a } else { best })
    }

    pub fn uniform(&self) -> Vec<f64> {
        (0..ACTION_SLOTS)
            .map(|a| if a < self.n { 1.0 / self.n as f64 } else { 0.0 })
            .collect()
    }
}

impl LatentModel<f64> for Depth2Tree {
    fn expand(&self, z: &[f64], action: usize) -> Result<Expansion<f64>> {
        let depth = z[0] as usize;
        let in_tree = action < self.n;
        let (reward, root_action) = match depth {
            0 if in_tree => (self.r1[action], action as f64),
            1 if in_tree => (self.r2[z[1] as usize][action], z[1]),
            _ => (0.0, z[1]),
        };
        Ok(Expansion {
            z: vec![(depth + 1) as f64, root_action],
            reward,
            value: 0.0,
            policy: self.uniform(),
        })
    }
}

/// Runs MCTS (K = 200, greedy visit policy, no fusion) on 50 random trees
/// and counts how often it picks the expectimax-optimal root action. Panics
/// if visits are not conserved or any internal node used a fused prior.
pub fn agreement(root: u64) -> usize {
    let seeds = SeedTree::new(root);
    let cfg = SearchConfig {
        num_simulations: 200,
        visit_temperature: 0.0,
        trace: true,
        ..SearchConfig::default()
    };
    let mut agree = 0;
    for i in 0..50 {
        let tree = Depth2Tree::random(&mut seeds.stream("tree", i), cfg.discount, 0.05);
        let valid: Vec<bool> = (0..ACTION_SLOTS).map(|a| a < tree.n).collect();
        let r = run_mcts(&tree, vec![0.0, 0.0], &tree.uniform(), &valid, &cfg, &mut seeds.stream("search", i)).unwrap();
        assert_eq!(r.visit_counts.iter().sum::<u32>(), 200);
        assert_eq!(r.fused_internal, 0);
        let chosen = r.visit_policy.iter().position(|&p| p == 1.0).unwrap();
        let best = tree.best_root_action(cfg.discount);
        if chosen == best {
            agree += 1;
        }
    }
    agree
}

/// Two fixed token sequences over a vocabulary of 12.
pub fn lm_batch() -> Vec<LmSequence> {
    vec![
        LmSequence {
            prompt: vec![0, 4, 7, 7, 2],
            continuation: vec![3, 9, 1],
        },
        LmSequence {
            prompt: vec![0, 11],
            continuation: vec![5, 5, 8, 2],
        },
    ]
}

/// A mixture of a CE term, a weighted logprob term and a nonlinear function
/// of one logprob, plus a squared linear readout of the prompt hidden state,
/// so every branch of the backward pass gets exercised.
pub struct MixedObjective {
    pub value_w: Vec<f64>,
}

impl TokenObjective<f64> for MixedObjective {
    fn token(&mut self, s: TokenSite, lp: &[f64], g: &mut [f64]) -> f64 {
        let w = 0.3 + 0.2 * s.pos as f64 + 0.1 * s.seq as f64;
        let x = lp[s.token];
        let other = (s.token + 3) % lp.len();
        g[s.token] = -w + 0.4 * x.exp();
        g[other] = -0.25 * lp[other].cos();
        -w * x + 0.4 * x.exp() - 0.25 * lp[other].sin()
    }

    fn prompt_hidden(&mut self, _seq: usize, h: &[f64], g: &mut [f64]) -> f64 {
        let v: f64 = h.iter().zip(&self.value_w).map(|(a, b)| a * b).sum();
        for (gi, w) in g.iter_mut().zip(&self.value_w) {
            *gi = 2.0 * (v - 0.7) * w;
        }
        (v - 0.7).powi(2)
    }
}

fn random_policy(rng: &mut Rng, n_valid: usize) -> Vec<f64> {
    let mut p = vec![0.0; ACTION_SLOTS];
    for x in p.iter_mut().take(n_valid) {
        *x = rng.random_range(0.05..1.0);
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Three world-model samples with unroll 3, varied history lengths and
/// partially masked policy and consistency targets.
pub fn wm_batch(p: &WmParams<f64>, rng: &mut Rng) -> Vec<WmSample<f64>> {
    let mut out = Vec::new();
    for b in 0..3 {
        let steps = (0..b + 1)
            .map(|i| {
                let ids = (0..2 + i).map(|_| rng.random_range(0..p.vocab_size)).collect();
                (ids, rng.random_range(0..ACTION_SLOTS))
            })
            .collect();
        let input = EncoderInput {
            steps,
            current: (0..3).map(|_| rng.random_range(0..p.vocab_size)).collect(),
        };
        let u = 3;
        let target_z: Vec<f64> = (0..p.d_latent).map(|_| rng.random_range(-1.0..1.0)).collect();
        out.push(WmSample {
            input,
            actions: (0..u).map(|_| rng.random_range(0..ACTION_SLOTS)).collect(),
            reward_targets: (0..u).map(|_| rng.random_range(-1.0..1.0)).collect(),
            value_targets: (0..=u).map(|_| rng.random_range(-3.0..3.0)).collect(),
            policy_targets: (0..=u)
                .map(|k| (k < 3 - b % 2).then(|| random_policy(rng, 3)))
                .collect(),
            consistency_targets: (0..u).map(|k| (k < 2).then(|| target_z.clone())).collect(),
        });
    }
    out
}
