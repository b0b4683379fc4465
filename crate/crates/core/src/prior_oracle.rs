//! Prompt construction, action scoring and the format reward.
//!
//! Each admissible action is scored by the mean token log-probability of its
//! label given the prompt; the prior is a temperature softmax of those scores
//! over the admissible slots of the padded action space.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{masked_softmax, Scalar};
use crate::text_env::{Observation, ACTION_SLOTS};
use crate::token_lm::{LmParams, Reduction, TokenId};
use crate::vocab::Vocab;

pub const DEFAULT_SYSTEM_TEXT: &str =
    "You are an agent in a text game. Describe the state without choosing, then give one valid action.";
pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/prompt.txt");

const PLACEHOLDERS: [&str; 3] = ["{HISTORY}", "{OBSERVATION}", "{VALID_ACTIONS}"];

/// Prompt and scoring settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Number of past steps serialized into the prompt.
    pub history_window: usize,
    /// Softmax temperature applied to the action scores.
    pub temperature: f64,
    /// Generate a reasoning prefix before scoring.
    pub cot: bool,
    pub cot_max_tokens: usize,
    pub cot_temperature: f64,
    pub system_text: String,
    /// Optional prompt template file; the built-in template when absent.
    pub template_path: Option<String>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            history_window: 2,
            temperature: 1.0,
            cot: false,
            cot_max_tokens: 12,
            cot_temperature: 1.0,
            system_text: DEFAULT_SYSTEM_TEXT.to_string(),
            template_path: None,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("oracle.temperature must be > 0".into()));
        }
        if self.cot && (self.cot_max_tokens == 0 || !(self.cot_temperature > 0.0)) {
            return Err(Error::Config(
                "oracle.cot_max_tokens must be >= 1 and oracle.cot_temperature > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn load_template(&self) -> Result<PromptTemplate> {
        match &self.template_path {
            Some(p) => PromptTemplate::load(Path::new(p)),
            None => Ok(PromptTemplate::default()),
        }
    }
}

/// Prompt template text with `{SYSTEM}`, `{HISTORY}`, `{OBSERVATION}` and
/// `{VALID_ACTIONS}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: DEFAULT_TEMPLATE.trim_end().to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(text: &str) -> Result<Self> {
        for p in PLACEHOLDERS {
            if !text.contains(p) {
                return Err(Error::Config(format!("prompt template lacks {p}")));
            }
        }
        Ok(Self {
            text: text.trim_end().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read template {}: {e}", path.display())))?;
        Self::new(&text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// One past step as shown in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryStep {
    pub step: usize,
    pub obs_text: String,
    pub action: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub system_text: String,
    pub history: Vec<HistoryStep>,
    pub current_obs: String,
    pub valid_actions: Vec<String>,
    pub cot_prefix: Option<String>,
}

/// The prior over the padded action space plus the raw per-action scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDistribution<T> {
    /// Length `ACTION_SLOTS`; exactly 0 outside the admissible slots.
    pub probs: Vec<T>,
    /// Mean label log-probability of each admissible action, in order.
    pub raw_scores: Vec<T>,
    pub temperature: f64,
}

/// Label tokens of one candidate action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Label {
    pub ids: Vec<TokenId>,
    /// Leading tokens that belong to the reasoning prefix.
    pub cot_len: usize,
}

/// Keeps the last `window` steps of `history`.
pub fn build_prompt(
    history: &[HistoryStep],
    observation: &Observation,
    system_text: &str,
    window: usize,
) -> PromptContext {
    let start = history.len().saturating_sub(window);
    PromptContext {
        system_text: system_text.to_string(),
        history: history[start..].to_vec(),
        current_obs: observation.text.clone(),
        valid_actions: observation.valid_actions.clone(),
        cot_prefix: None,
    }
}

/// Formats a reward compactly ("0", "1", "0.55").
pub fn format_reward_value(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        let s = format!("{r:.2}");
        s.trim_end_matches('0').to_string()
    }
}

impl PromptContext {
    pub fn render(&self, template: &PromptTemplate) -> String {
        let history: Vec<String> = self
            .history
            .iter()
            .map(|h| {
                format!(
                    "Step {}:\nObservation: {}\nAction: {}\nReward: {}",
                    h.step,
                    h.obs_text,
                    h.action,
                    format_reward_value(h.reward)
                )
            })
            .collect();
        let mut lines = Vec::new();
        for line in template.text().split('\n') {
            if line.trim() == "{HISTORY}" && history.is_empty() {
                continue;
            }
            lines.push(
                line.replace("{SYSTEM}", &self.system_text)
                    .replace("{HISTORY}", &history.join("\n"))
                    .replace("{OBSERVATION}", &self.current_obs)
                    .replace("{VALID_ACTIONS}", &self.valid_actions.join(", ")),
            );
        }
        lines.join("\n")
    }

    /// `<bos>` followed by the rendered prompt.
    pub fn prompt_ids(&self, template: &PromptTemplate, vocab: &Vocab) -> Vec<TokenId> {
        let mut ids = vec![vocab.bos()];
        ids.extend(vocab.tokenize(&self.render(template)));
        ids
    }

    /// Label of `action`: `Action: <a><eos>`, or `<cot_prefix> <a><eos>` with a
    /// reasoning prefix.
    pub fn label(&self, action: &str, vocab: &Vocab) -> Label {
        match &self.cot_prefix {
            None => {
                let mut ids = vocab.tokenize(&format!("Action: {action}"));
                ids.push(vocab.eos());
                Label { ids, cot_len: 0 }
            }
            Some(prefix) => {
                let prefix_ids = vocab.tokenize(prefix);
                // The trailing "Action :" belongs to the answer, not the reasoning.
                let cot_len = prefix_ids.len().saturating_sub(2);
                let mut ids = prefix_ids;
                ids.extend(vocab.tokenize(action));
                ids.push(vocab.eos());
                Label { ids, cot_len }
            }
        }
    }

    /// The text the model is taken to have produced when choosing `action`.
    pub fn output_text(&self, action: &str) -> String {
        match &self.cot_prefix {
            None => format!("Action: {action}"),
            Some(prefix) => format!("{prefix} {action}"),
        }
    }
}

/// Builds the reasoning prefix `Reasoning: <analysis>\nAction:`.
pub fn cot_prefix(analysis: &str) -> String {
    format!("Reasoning: {analysis}\nAction:")
}

/// Samples a reasoning text after "Reasoning:", stopping at a newline or `<eos>`.
pub fn generate_cot<T: Scalar>(
    params: &LmParams<T>,
    ctx: &PromptContext,
    template: &PromptTemplate,
    vocab: &Vocab,
    cfg: &OracleConfig,
    rng: &mut Rng,
) -> Result<String> {
    let mut prompt = ctx.prompt_ids(template, vocab);
    prompt.extend(vocab.tokenize("Reasoning:"));
    let stop = [vocab.newline(), vocab.eos()];
    let mut out = params.generate(&prompt, cfg.cot_max_tokens, cfg.cot_temperature, &stop, rng)?;
    if out.last().is_some_and(|t| stop.contains(t)) {
        out.pop();
    }
    vocab.detokenize(&out)
}

/// Scores every admissible action and forms the temperature-softmax prior.
pub fn score_actions<T: Scalar>(
    params: &LmParams<T>,
    ctx: &PromptContext,
    template: &PromptTemplate,
    vocab: &Vocab,
    temperature: f64,
) -> Result<PriorDistribution<T>> {
    let prompt = ctx.prompt_ids(template, vocab);
    let mut scores = Vec::with_capacity(ctx.valid_actions.len());
    for a in &ctx.valid_actions {
        let label = ctx.label(a, vocab);
        scores.push(params.sequence_logprob(&prompt, &label.ids, Reduction::Mean)?.score);
    }
    prior_from_scores(scores, temperature)
}

/// `softmax(scores / temperature)` placed on the first `scores.len()` slots.
pub fn prior_from_scores<T: Scalar>(scores: Vec<T>, temperature: f64) -> Result<PriorDistribution<T>> {
    if scores.is_empty() {
        return Err(Error::Oracle("no admissible actions to score".into()));
    }
    if scores.len() > ACTION_SLOTS {
        return Err(Error::Oracle(format!(
            "{} admissible actions exceed the {ACTION_SLOTS} action slots",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Oracle(format!("score of action {bad} is not finite")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Oracle(format!("temperature {temperature} must be > 0")));
    }
    let t = T::lit(temperature);
    let mut logits = vec![T::zero(); ACTION_SLOTS];
    let mut mask = vec![false; ACTION_SLOTS];
    for (i, &s) in scores.iter().enumerate() {
        logits[i] = s / t;
        mask[i] = true;
    }
    Ok(PriorDistribution {
        probs: masked_softmax(&logits, &mask),
        raw_scores: scores,
        temperature,
    })
}

/// 1 iff `text` is exactly `Reasoning: <nonempty>\nAction: <nonempty>` with one
/// occurrence of each keyword.
pub fn format_reward(text: &str) -> u8 {
    if text.matches("Reasoning:").count() != 1 || text.matches("Action:").count() != 1 {
        return 0;
    }
    let Some((first, second)) = text.split_once('\n') else {
        return 0;
    };
    if second.contains('\n') {
        return 0;
    }
    let ok = |line: &str, key: &str| {
        line.strip_prefix(key)
            .is_some_and(|rest| !rest.trim().is_empty())
    };
    u8::from(ok(first, "Reasoning:") && ok(second, "Action:"))
}

/// A fixed prior used in tests and baselines: `mass` on `target` when it is
/// admissible, the remainder spread uniformly; uniform otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPrior {
    pub target: Option<String>,
    pub mass: f64,
}

impl ScriptedPrior {
    pub fn uniform() -> Self {
        Self {
            target: None,
            mass: 0.0,
        }
    }

    pub fn favoring(target: &str, mass: f64) -> Self {
        Self {
            target: Some(target.to_string()),
            mass,
        }
    }

    pub fn distribution<T: Scalar>(&self, valid_actions: &[String]) -> Result<PriorDistribution<T>> {
        let n = valid_actions.len();
        if n == 0 || n > ACTION_SLOTS {
            return Err(Error::Oracle(format!("cannot build a prior over {n} actions")));
        }
        let hit = self
            .target
            .as_ref()
            .and_then(|t| valid_actions.iter().position(|a| a == t));
        let mut probs = vec![T::zero(); ACTION_SLOTS];
        match hit {
            Some(i) if n > 1 => {
                let rest = T::lit((1.0 - self.mass) / (n - 1) as f64);
                probs[..n].iter_mut().for_each(|p| *p = rest);
                probs[i] = T::lit(self.mass);
            }
            _ => {
                let u = T::one() / T::from_usize_lossy(n);
                probs[..n].iter_mut().for_each(|p| *p = u);
            }
        }
        let raw_scores = probs[..n].iter().map(|p| p.ln()).collect();
        Ok(PriorDistribution {
            probs,
            raw_scores,
            temperature: 1.0,
        })
    }
}
