//! Realism fine-tuning of multi-agent traffic policies from best-of-N
//! preference labels.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`scenegen`] builds synthetic road maps and failure-free reference
//!    demonstrations.
//! 2. [`policy`] behavior-clones a stochastic action policy on those
//!    demonstrations and rolls it out in closed loop with periodic
//!    re-planning.
//! 3. [`preference`] samples N rollouts per context, labels the most
//!    realistic one (synthetic oracle or a human through the label service)
//!    and expands each label into preference pairs.
//! 4. [`reward`] trains a per-step realism scorer with the pairwise
//!    logistic loss.
//! 5. [`finetune`] improves the policy with PPO against the learned reward
//!    mixed with the original behavior-cloning loss.
//!
//! [`metrics`] evaluates failure rate, realism deviation and reward cost.

pub mod error;
pub mod features;
pub mod finetune;
pub mod metrics;
pub mod nnet;
pub mod policy;
pub mod preference;
pub mod reward;
pub mod scenegen;
pub mod world;

pub use error::{Error, Result};
pub use world::{
    Action, ActionLimits, AgentShape, AgentState, AgentTrack, Lane, MapModel, Point, Scenario,
    ScenarioContext, Source, DT, T_HIST,
};
