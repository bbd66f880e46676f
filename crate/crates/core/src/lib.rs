//! Preference alignment for rectified-flow generators.
//!
//! The crate covers the full loop on a synthetic conditional-generation task:
//! a dense MLP kernel ([`nn`]), flow-matching pretraining and guided sampling
//! ([`flow`]), a five-metric scoring head ([`scorer`]), best-vs-worst
//! preference-pair synthesis ([`pairgen`]), curriculum Flow-DPO ([`dpo`]) and
//! offline evaluation ([`eval`]).

pub mod dpo;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod nn;
pub mod pairgen;
pub mod scorer;
pub mod seed;

pub use error::{Error, Result};
pub use flow::{Condition, FlowSample, ToyTask, ToyTaskConfig, VelocityModel};
pub use nn::{AdamW, AdamWConfig, Mlp};
pub use dpo::{dpo_train, DpoConfig, Schedule, TrainingLog};
pub use eval::{evaluate, EvalConfig, EvalReport};
pub use pairgen::{build_dataset, PairDataset, PairGenConfig, PreferencePair};
pub use scorer::{ScoreExtractor, ScoreHead, ScoreVector, ToyExtractor};
