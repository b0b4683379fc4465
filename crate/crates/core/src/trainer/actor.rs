//! Runs one episode under a given acting policy and records it.

use crate::error::{Error, Result};
use crate::prior_oracle::{
    build_prompt, cot_prefix, generate_cot, score_actions, HistoryStep, OracleConfig, PromptContext,
    PromptTemplate, ScriptedPrior,
};
use crate::replay::{Episode, Transition};
use crate::rng::Rng;
use crate::scalar::{argmax, masked_softmax, Scalar};
use crate::search::{fuse_root_prior, run_mcts, select_action, FusionConfig, SearchConfig};
use crate::text_env::{Env, EnvSpec, Observation, ACTION_SLOTS};
use crate::token_lm::{sample_index, LmParams};
use crate::vocab::Vocab;
use crate::world_model::{EncoderInput, WmParams};

use super::records::CaseStudyRow;

/// Read-only model snapshot handed to a collector.
pub(crate) struct Models<'a, T: Scalar> {
    pub wm: &'a WmParams<T>,
    pub lm: &'a LmParams<T>,
    pub scripted: Option<&'a ScriptedPrior>,
    pub vocab: &'a Vocab,
    pub template: &'a PromptTemplate,
    pub oracle: &'a OracleConfig,
    /// Encoder history length while acting.
    pub history_act: usize,
}

/// How actions are chosen.
#[derive(Debug, Clone)]
pub(crate) enum Policy {
    /// Search from the world model's root. The prior is fused in when
    /// `query_prior` is set.
    Search {
        query_prior: bool,
        fusion: FusionConfig,
        search: SearchConfig,
    },
    /// Most probable action under the prior.
    PriorGreedy { history: usize },
    /// Action sampled from the prior.
    PriorSample { history: usize },
}

/// A finished episode plus search diagnostics.
#[derive(Debug, Clone)]
pub(crate) struct EpisodeRun {
    pub episode: Episode,
    pub root_entropies: Vec<f64>,
    pub searches: u64,
    pub case_rows: Vec<CaseStudyRow>,
}

struct PriorQuery<T> {
    probs: Vec<T>,
    scores: Vec<f64>,
    ctx: Option<PromptContext>,
    cot_text: Option<String>,
}

fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}

impl<T: Scalar> Models<'_, T> {
    fn query_prior(
        &self,
        history: &[HistoryStep],
        obs: &Observation,
        window: usize,
        rng: &mut Rng,
    ) -> Result<PriorQuery<T>> {
        if let Some(sp) = self.scripted {
            let d = sp.distribution::<T>(&obs.valid_actions)?;
            return Ok(PriorQuery {
                scores: to_f64(&d.raw_scores),
                probs: d.probs,
                ctx: None,
                cot_text: None,
            });
        }
        let mut ctx = build_prompt(history, obs, &self.oracle.system_text, window);
        let mut cot_text = None;
        if self.oracle.cot {
            let analysis = generate_cot(self.lm, &ctx, self.template, self.vocab, self.oracle, rng)?;
            ctx.cot_prefix = Some(cot_prefix(&analysis));
            cot_text = Some(analysis);
        }
        let d = score_actions(self.lm, &ctx, self.template, self.vocab, self.oracle.temperature)?;
        Ok(PriorQuery {
            scores: to_f64(&d.raw_scores),
            probs: d.probs,
            ctx: Some(ctx),
            cot_text,
        })
    }

    /// Plays one episode from reset. `search_rng` drives search noise and
    /// action sampling; `lm_rng` drives reasoning generation and prior sampling.
    pub fn run_episode(
        &self,
        spec: &EnvSpec,
        policy: &Policy,
        search_rng: &mut Rng,
        lm_rng: &mut Rng,
        case_study: bool,
    ) -> Result<EpisodeRun> {
        let mut env = Env::new(*spec)?;
        let mut transitions: Vec<Transition> = Vec::new();
        let mut history: Vec<HistoryStep> = Vec::new();
        let mut root_entropies = Vec::new();
        let mut case_rows = Vec::new();
        let mut searches = 0;
        let mut total = 0.0;
        while !env.is_done() {
            let obs = env.observation().clone();
            let n = obs.valid_actions.len();
            if n == 0 || n > ACTION_SLOTS {
                return Err(Error::Shape(format!("{n} admissible actions at step {}", obs.step_index)));
            }
            let mask: Vec<bool> = (0..ACTION_SLOTS).map(|i| i < n).collect();
            let obs_ids = self.vocab.tokenize(&obs.text);
            let window = match policy {
                Policy::PriorGreedy { history } | Policy::PriorSample { history } => *history,
                Policy::Search { .. } => self.oracle.history_window,
            };
            let wants_prior = !matches!(policy, Policy::Search { query_prior: false, .. });
            let prior = if wants_prior {
                Some(self.query_prior(&history, &obs, window, lm_rng)?)
            } else {
                None
            };

            let (action, pi, root_value) = match policy {
                Policy::PriorGreedy { .. } | Policy::PriorSample { .. } => {
                    let probs = &prior.as_ref().expect("prior queried").probs;
                    let a = if matches!(policy, Policy::PriorGreedy { .. }) {
                        argmax(&probs[..n]).expect("non-empty")
                    } else {
                        sample_index(&probs[..n], lm_rng)
                    };
                    (a, to_f64(probs), 0.0)
                }
                Policy::Search { fusion, search, .. } => {
                    let start = transitions.len().saturating_sub(self.history_act);
                    let input = EncoderInput {
                        steps: transitions[start..]
                            .iter()
                            .map(|tr| (tr.obs_token_ids.clone(), tr.action_index))
                            .collect(),
                        current: obs_ids.clone(),
                    };
                    let z = self.wm.encode(&input)?;
                    let (_, logits) = self.wm.heads(&z);
                    let pi_wm = masked_softmax(&logits, &mask);
                    let (root_prior, alpha) = match &prior {
                        Some(p) => fuse_root_prior(&pi_wm, &p.probs, fusion, &mask)?,
                        None => (pi_wm.clone(), 0.0),
                    };
                    let res = run_mcts(self.wm, z, &root_prior, &mask, search, search_rng)?;
                    searches += 1;
                    root_entropies.push(res.root_entropy.as_f64());
                    let a = select_action(&res.visit_policy, search.visit_temperature, search_rng);
                    let total_visits: u32 = res.visit_counts.iter().sum();
                    let pi: Vec<f64> = res
                        .visit_counts
                        .iter()
                        .map(|&c| f64::from(c) / f64::from(total_visits.max(1)))
                        .collect();
                    if case_study {
                        case_rows.push(CaseStudyRow {
                            step: obs.step_index,
                            observation: obs.text.clone(),
                            actions: obs.valid_actions.clone(),
                            pi_llm: prior.as_ref().map_or_else(
                                || to_f64(&pi_wm[..n]),
                                |p| to_f64(&p.probs[..n]),
                            ),
                            pi_wm: to_f64(&pi_wm[..n]),
                            alpha,
                            fused_prior: to_f64(&root_prior[..n]),
                            visits: pi[..n].to_vec(),
                            chosen: obs.valid_actions[a].clone(),
                            reward: 0.0,
                        });
                    }
                    (a, pi, res.root_value.as_f64())
                }
            };

            let action_string = obs.valid_actions[action].clone();
            let step = env.step(&action_string)?;
            total += step.reward;
            if let Some(row) = case_rows.last_mut() {
                row.reward = step.reward;
            }
            let (prompt_ids, output_ids, cot_len, output_text, cot_text, scores) = match prior {
                Some(p) => {
                    let (prompt, out, cot_len, text) = match &p.ctx {
                        Some(ctx) => {
                            let label = ctx.label(&action_string, self.vocab);
                            (
                                Some(ctx.prompt_ids(self.template, self.vocab)),
                                Some(label.ids),
                                label.cot_len,
                                Some(ctx.output_text(&action_string)),
                            )
                        }
                        None => (None, None, 0, None),
                    };
                    (prompt, out, cot_len, text, p.cot_text, Some(p.scores))
                }
                None => (None, None, 0, None, None, None),
            };
            history.push(HistoryStep {
                step: obs.step_index,
                obs_text: obs.text.clone(),
                action: action_string.clone(),
                reward: step.reward,
            });
            transitions.push(Transition {
                obs_text: obs.text,
                obs_token_ids: obs_ids,
                history: (transitions.len().saturating_sub(window)..transitions.len()).collect(),
                valid_actions: obs.valid_actions,
                action_index: action,
                action_string,
                reward: step.reward,
                done: step.done,
                pi_mcts: pi,
                root_value,
                llm_scores: scores,
                cot_text,
                llm_output_text: output_text,
                prompt_ids,
                output_ids,
                cot_len,
            });
        }
        let final_obs_ids = self.vocab.tokenize(&env.observation().text);
        Ok(EpisodeRun {
            episode: Episode {
                env: spec.name,
                seed: spec.seed,
                transitions,
                final_obs_ids,
                total_return: total,
            },
            root_entropies,
            searches,
            case_rows,
        })
    }
}
