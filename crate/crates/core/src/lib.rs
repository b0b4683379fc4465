//! Latent world-model search with a trainable token-model root prior.
//!
//! A small learned world model ([`world_model`]) is searched with MCTS
//! ([`search`]). At the root only, its policy is mixed with a prior obtained
//! by scoring every admissible action with a tiny autoregressive token model
//! ([`token_lm`], [`prior_oracle`]). The [`trainer`] alternates world-model
//! updates from replay ([`replay`]) with clipped policy-gradient fine-tuning
//! of the token model ([`rlft`]), whose advantages come from the world
//! model's bootstrapped returns. Three toy text environments live in
//! [`text_env`].
//!
//! Numerical code is generic over the scalar type through [`scalar::Scalar`];
//! the aliases below fix it to `f64`.

pub mod error;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod text_env;
pub mod vocab;
pub mod params;
pub mod token_lm;
pub mod prior_oracle;
pub mod world_model;
pub mod search;
pub mod replay;
pub mod rlft;
pub mod trainer;

/// Double-precision world model.
pub type WorldModel = world_model::WmParams<f64>;
/// Double-precision token model.
pub type TokenModel = token_lm::LmParams<f64>;
/// Double-precision trainer.
pub type DefaultTrainer = trainer::Trainer<f64>;
