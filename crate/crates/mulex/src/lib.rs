//! MuleX laboratory: multiple Q-functions trained in parallel from one shared
//! replay buffer, one per reward signal, with a stochastic policy-switching
//! actor, evaluated on the Montezuminha gridworld family.

pub mod actor;
pub mod bonus;
pub mod cli;
pub mod env;
pub mod harness;
pub mod learner;
pub mod nn;
pub mod replay;
