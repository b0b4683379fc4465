//! Latent-space MCTS with root-only prior fusion.
//!
//! The root node's children are the admissible actions with the fused prior.
//! Every other node is expanded over all action slots with the world model's
//! policy head as its prior. Selection is pUCT over min-max normalized Q.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::entropy;
use crate::rng::Rng;
use crate::scalar::{argmax, softmax, Scalar};
use crate::text_env::ACTION_SLOTS;
use crate::world_model::WmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Fixed,
    Adaptive,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Prior weight for `mode = "fixed"`.
    pub alpha: f64,
    /// Bounds for `mode = "adaptive"`.
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Added to every admissible entry of the mixture before renormalizing.
    pub epsilon_mix: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Fixed,
            alpha: 0.5,
            alpha_min: 0.2,
            alpha_max: 0.8,
            epsilon_mix: 1e-8,
        }
    }
}

impl FusionConfig {
    pub fn off() -> Self {
        Self {
            mode: FusionMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha)
            || !unit.contains(&self.alpha_min)
            || !unit.contains(&self.alpha_max)
            || self.alpha_min > self.alpha_max
        {
            return Err(Error::Config(
                "fusion weights must lie in [0, 1] with alpha_min <= alpha_max".into(),
            ));
        }
        if !(self.epsilon_mix > 0.0) {
            return Err(Error::Config("fusion.epsilon_mix must be > 0".into()));
        }
        Ok(())
    }
}

/// Search settings as they appear in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSettings {
    pub collect_simulations: usize,
    pub eval_simulations: usize,
    pub c1: f64,
    pub c2: f64,
    pub collect_temperature: f64,
    pub eval_temperature: f64,
    /// Dirichlet concentration of root noise; no noise when absent.
    pub dirichlet_alpha: Option<f64>,
    pub dirichlet_frac: f64,
    /// Floor on the range used for min-max value normalization; 0 disables it.
    pub min_max_delta: f64,
    pub fusion: FusionConfig,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            collect_simulations: 25,
            eval_simulations: 25,
            c1: 1.25,
            c2: 19652.0,
            collect_temperature: 1.0,
            eval_temperature: 0.25,
            dirichlet_alpha: None,
            dirichlet_frac: 0.25,
            min_max_delta: 0.0,
            fusion: FusionConfig::default(),
        }
    }
}

impl SearchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.collect_simulations == 0 || self.eval_simulations == 0 {
            return Err(Error::Config("search needs at least one simulation".into()));
        }
        if !(self.collect_temperature >= 0.0) || !(self.eval_temperature >= 0.0) {
            return Err(Error::Config("visit temperatures must be >= 0".into()));
        }
        if !(self.min_max_delta >= 0.0) {
            return Err(Error::Config("search.min_max_delta must be >= 0".into()));
        }
        if !(self.c2 > 0.0) {
            return Err(Error::Config("search.c2 must be > 0".into()));
        }
        self.fusion.validate()
    }

    fn build(&self, sims: usize, temperature: f64, discount: f64) -> SearchConfig {
        SearchConfig {
            num_simulations: sims,
            c1: self.c1,
            c2: self.c2,
            discount,
            visit_temperature: temperature,
            dirichlet: self.dirichlet_alpha.map(|a| (a, self.dirichlet_frac)),
            min_max_delta: self.min_max_delta,
            trace: false,
            dump_tree: false,
        }
    }

    pub fn collect(&self, discount: f64) -> SearchConfig {
        self.build(self.collect_simulations, self.collect_temperature, discount)
    }

    /// Evaluation never adds root noise.
    pub fn eval(&self, discount: f64) -> SearchConfig {
        SearchConfig {
            dirichlet: None,
            ..self.build(self.eval_simulations, self.eval_temperature, discount)
        }
    }
}

/// Parameters of one search call.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub num_simulations: usize,
    pub c1: f64,
    pub c2: f64,
    pub discount: f64,
    /// Exponent `1/τ` on visit counts; `τ = 0` selects the most visited action.
    pub visit_temperature: f64,
    /// `(concentration, fraction)` of root Dirichlet noise.
    pub dirichlet: Option<(f64, f64)>,
    /// Floor on the min-max normalization range. With a positive floor, Q
    /// spreads smaller than the floor stay small instead of being stretched
    /// to `[0, 1]`.
    pub min_max_delta: f64,
    /// Record every expansion.
    pub trace: bool,
    /// Attach a JSON-serializable dump of the tree.
    pub dump_tree: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchSettings::default().collect(0.99)
    }
}

/// A model the search can expand leaves with.
pub trait LatentModel<T: Scalar> {
    /// One imagined step: next latent, reward, value estimate and policy over
    /// all action slots.
    fn expand(&self, z: &[T], action: usize) -> Result<Expansion<T>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion<T> {
    pub z: Vec<T>,
    pub reward: T,
    pub value: T,
    pub policy: Vec<T>,
}

impl<T: Scalar> LatentModel<T> for WmParams<T> {
    fn expand(&self, z: &[T], action: usize) -> Result<Expansion<T>> {
        let r = self.recurrent_inference(z, action)?;
        Ok(Expansion {
            value: self.support.decode(&softmax(&r.value_logits)),
            policy: softmax(&r.policy_logits),
            z: r.z,
            reward: r.reward,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    Fused,
    WorldModel,
}

/// One node expansion as seen by the instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionRecord<T> {
    pub depth: usize,
    /// Actions from the root to the expanded node.
    pub path: Vec<usize>,
    pub source: PriorSource,
    pub priors: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub id: usize,
    pub parent: Option<usize>,
    pub action: Option<usize>,
    pub depth: usize,
    pub visits: u32,
    pub q: f64,
    pub prior: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult<T> {
    /// Length `ACTION_SLOTS`; 0 outside the admissible slots.
    pub visit_policy: Vec<T>,
    /// Mean of the values backed up through the root.
    pub root_value: T,
    /// Entropy of the normalized root visit counts in nats.
    pub root_entropy: T,
    pub fused_root_prior: Vec<T>,
    pub visit_counts: Vec<u32>,
    /// Expansions below the root whose prior came from the fused root prior.
    pub fused_internal: usize,
    pub expansions: usize,
    pub trace: Vec<ExpansionRecord<T>>,
    pub tree: Option<Vec<NodeDump>>,
}

/// `(1 - α)·π_WM + α·π_LLM + ε` on the admissible slots, renormalized. Returns
/// the fused prior and the α used.
pub fn fuse_root_prior<T: Scalar>(
    pi_wm: &[T],
    pi_llm: &[T],
    cfg: &FusionConfig,
    valid: &[bool],
) -> Result<(Vec<T>, f64)> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Shape("cannot fuse priors over an empty admissible set".into()));
    }
    if pi_wm.len() != valid.len() || pi_llm.len() != valid.len() {
        return Err(Error::Shape("prior lengths differ from the action mask".into()));
    }
    let alpha = match cfg.mode {
        FusionMode::Off => return Ok((pi_wm.to_vec(), 0.0)),
        FusionMode::Fixed => cfg.alpha,
        FusionMode::Adaptive => {
            let sub: Vec<T> = pi_wm
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(&p, _)| p)
                .collect();
            adaptive_alpha(&sub, cfg.alpha_min, cfg.alpha_max)?
        }
    };
    let a = T::lit(alpha);
    let eps = T::lit(cfg.epsilon_mix);
    let mut out = vec![T::zero(); valid.len()];
    let mut total = T::zero();
    for i in 0..valid.len() {
        if valid[i] {
            out[i] = (T::one() - a) * pi_wm[i] + a * pi_llm[i] + eps;
            total += out[i];
        }
    }
    out.iter_mut().for_each(|p| *p /= total);
    Ok((out, alpha))
}

/// `α_min + (α_max − α_min)(1 − H(π_WM)/ln|A|)` over the admissible actions.
pub fn adaptive_alpha<T: Scalar>(pi_wm: &[T], alpha_min: f64, alpha_max: f64) -> Result<f64> {
    if pi_wm.len() < 2 {
        return Ok(alpha_min);
    }
    let total: T = pi_wm.iter().copied().sum();
    let normalized: Vec<T> = pi_wm.iter().map(|&p| p / total).collect();
    let h = entropy(&normalized)?.as_f64();
    let ratio = (h / (pi_wm.len() as f64).ln()).clamp(0.0, 1.0);
    Ok(alpha_min + (alpha_max - alpha_min) * (1.0 - ratio))
}

/// `N(a)^{1/τ}` normalized; `τ = 0` gives a one-hot on the most visited action
/// with ties to the lowest index.
pub fn visit_policy_from_counts<T: Scalar>(counts: &[u32], temperature: f64) -> Vec<T> {
    let mut out = vec![T::zero(); counts.len()];
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return out;
    }
    if temperature <= 0.0 {
        let best = argmax(counts).expect("non-empty counts");
        out[best] = T::one();
        return out;
    }
    let inv_t = 1.0 / temperature;
    let ln_max = (max as f64).ln();
    let mut total = 0.0;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            let w = if n == 0 {
                0.0
            } else {
                (((n as f64).ln() - ln_max) * inv_t).exp()
            };
            total += w;
            w
        })
        .collect();
    for (o, w) in out.iter_mut().zip(raw) {
        *o = T::lit(w / total);
    }
    out
}

/// Samples an action from `policy`, or takes its argmax when `temperature` is 0.
pub fn select_action<T: Scalar>(policy: &[T], temperature: f64, rng: &mut Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(policy).expect("non-empty policy");
    }
    crate::token_lm::sample_index(policy, rng)
}

struct Node<T> {
    prior: T,
    visits: u32,
    value_sum: T,
    reward: T,
    z: Vec<T>,
    children: Vec<(usize, usize)>,
    parent: Option<usize>,
    action: Option<usize>,
    depth: usize,
}

impl<T: Scalar> Node<T> {
    fn value(&self) -> T {
        if self.visits == 0 {
            T::zero()
        } else {
            self.value_sum / T::lit(self.visits as f64)
        }
    }
}

struct MinMax<T> {
    min: T,
    max: T,
    delta: T,
}

impl<T: Scalar> MinMax<T> {
    fn update(&mut self, v: T) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    /// Degenerate ranges map to 0 so selection is independent of value scale.
    fn normalize(&self, v: T) -> T {
        let range = (self.max - self.min).max(self.delta);
        if self.max >= self.min && range > T::zero() {
            (v - self.min) / range
        } else {
            T::zero()
        }
    }
}

/// Runs `cfg.num_simulations` simulations from `z_root`.
pub fn run_mcts<T: Scalar, M: LatentModel<T> + ?Sized>(
    model: &M,
    z_root: Vec<T>,
    root_prior: &[T],
    valid: &[bool],
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<SearchResult<T>> {
    if cfg.num_simulations == 0 {
        return Err(Error::Config("search needs at least one simulation".into()));
    }
    if root_prior.len() != ACTION_SLOTS || valid.len() != ACTION_SLOTS {
        return Err(Error::Shape(format!(
            "root prior and mask must have {ACTION_SLOTS} entries"
        )));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Shape("search root has no admissible actions".into()));
    }
    let gamma = T::lit(cfg.discount);
    let c1 = cfg.c1;
    let c2 = cfg.c2;

    let mut prior = root_prior.to_vec();
    if let Some((conc, frac)) = cfg.dirichlet {
        let idx: Vec<usize> = (0..ACTION_SLOTS).filter(|&i| valid[i]).collect();
        let gamma_dist = Gamma::new(conc, 1.0)
            .map_err(|e| Error::Config(format!("dirichlet concentration: {e}")))?;
        let draws: Vec<f64> = idx.iter().map(|_| gamma_dist.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        for (&i, d) in idx.iter().zip(draws) {
            prior[i] = T::lit(1.0 - frac) * prior[i] + T::lit(frac * d / s.max(f64::MIN_POSITIVE));
        }
    }

    let mut nodes: Vec<Node<T>> = vec![Node {
        prior: T::one(),
        visits: 0,
        value_sum: T::zero(),
        reward: T::zero(),
        z: z_root,
        children: Vec::new(),
        parent: None,
        action: None,
        depth: 0,
    }];
    let mut trace = Vec::new();
    let mut expansions = 0usize;
    let mut fused_internal = 0usize;
    for a in 0..ACTION_SLOTS {
        if valid[a] {
            let id = nodes.len();
            nodes.push(Node {
                prior: prior[a],
                visits: 0,
                value_sum: T::zero(),
                reward: T::zero(),
                z: Vec::new(),
                children: Vec::new(),
                parent: Some(0),
                action: Some(a),
                depth: 1,
            });
            nodes[0].children.push((a, id));
        }
    }
    if cfg.trace {
        let (priors, source) = expansion_prior(0, &prior, &prior);
        trace.push(ExpansionRecord {
            depth: 0,
            path: Vec::new(),
            source,
            priors: priors.to_vec(),
        });
    }
    let mut mm = MinMax {
        min: T::infinity(),
        max: T::neg_infinity(),
        delta: T::lit(cfg.min_max_delta),
    };

    for _ in 0..cfg.num_simulations {
        let mut path = vec![0usize];
        let mut node = 0usize;
        while !nodes[node].children.is_empty() {
            let child = select_child(&nodes, node, &mm, gamma, c1, c2);
            path.push(child);
            node = child;
        }
        // Expand the leaf `node` from its parent's latent.
        let parent = nodes[node].parent.expect("leaf below the root");
        let action = nodes[node].action.expect("leaf has an action");
        let exp = model.expand(&nodes[parent].z, action)?;
        if !exp.reward.is_finite() || !exp.value.is_finite() {
            return Err(Error::NonFinite("world model produced a non-finite leaf".into()));
        }
        expansions += 1;
        let depth = nodes[node].depth;
        nodes[node].z = exp.z;
        nodes[node].reward = exp.reward;
        let (child_priors, source) = expansion_prior(depth, &prior, &exp.policy);
        for a in 0..ACTION_SLOTS {
            let id = nodes.len();
            nodes.push(Node {
                prior: child_priors[a],
                visits: 0,
                value_sum: T::zero(),
                reward: T::zero(),
                z: Vec::new(),
                children: Vec::new(),
                parent: Some(node),
                action: Some(a),
                depth: depth + 1,
            });
            nodes[node].children.push((a, id));
        }
        if source == PriorSource::Fused {
            fused_internal += 1;
        }
        if cfg.trace {
            let mut p = Vec::new();
            let mut cur = node;
            while let Some(a) = nodes[cur].action {
                p.push(a);
                cur = nodes[cur].parent.expect("non-root has a parent");
            }
            p.reverse();
            trace.push(ExpansionRecord {
                depth,
                path: p,
                source,
                priors: child_priors.to_vec(),
            });
        }

        let mut value = exp.value;
        for &id in path.iter().rev() {
            let n = &mut nodes[id];
            n.value_sum += value;
            n.visits += 1;
            mm.update(n.reward + gamma * n.value());
            value = n.reward + gamma * value;
        }
    }

    let mut counts = vec![0u32; ACTION_SLOTS];
    for &(a, id) in &nodes[0].children {
        counts[a] = nodes[id].visits;
    }
    let visit_policy: Vec<T> = visit_policy_from_counts(&counts, cfg.visit_temperature);
    let total = T::from_usize_lossy(counts.iter().map(|&c| c as usize).sum::<usize>().max(1));
    let admissible: Vec<T> = (0..ACTION_SLOTS)
        .filter(|&i| valid[i])
        .map(|i| T::from_usize_lossy(counts[i] as usize) / total)
        .collect();
    let root_entropy = entropy(&admissible)?;
    let tree = cfg.dump_tree.then(|| {
        nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.visits > 0 || n.parent == Some(0) || n.parent.is_none())
            .map(|(id, n)| NodeDump {
                id,
                parent: n.parent,
                action: n.action,
                depth: n.depth,
                visits: n.visits,
                q: (n.reward + gamma * n.value()).as_f64(),
                prior: n.prior.as_f64(),
                reward: n.reward.as_f64(),
            })
            .collect()
    });
    Ok(SearchResult {
        visit_policy,
        root_value: nodes[0].value(),
        root_entropy,
        fused_root_prior: prior,
        visit_counts: counts,
        fused_internal,
        expansions,
        trace,
        tree,
    })
}

/// Prior for the children of a node expanded at `depth`: the fused prior at
/// the root, the world-model policy everywhere else.
fn expansion_prior<'a, T>(depth: usize, root: &'a [T], model: &'a [T]) -> (&'a [T], PriorSource) {
    if depth == 0 {
        (root, PriorSource::Fused)
    } else {
        (model, PriorSource::WorldModel)
    }
}

fn select_child<T: Scalar>(nodes: &[Node<T>], node: usize, mm: &MinMax<T>, gamma: T, c1: f64, c2: f64) -> usize {
    let children = &nodes[node].children;
    let total: u32 = children.iter().map(|&(_, id)| nodes[id].visits).sum();
    let total_f = total as f64;
    let explore = T::lit(total_f.sqrt() * (c1 + ((total_f + c2 + 1.0) / c2).ln()));
    let mut best = children[0].1;
    let mut best_score = T::neg_infinity();
    for &(_, id) in children {
        let c = &nodes[id];
        let q = if c.visits > 0 {
            mm.normalize(c.reward + gamma * c.value())
        } else {
            T::zero()
        };
        let score = q + c.prior * explore / T::lit(1.0 + c.visits as f64);
        if score > best_score {
            best_score = score;
            best = id;
        }
    }
    best
}
