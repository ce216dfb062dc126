//! Offline evaluation of mobile GUI agents: action normalization, prompt
//! dialects, step/episode scoring, self-conditioned replay, decision
//! analytics and run bookkeeping.

pub mod action;
pub mod dialect;
pub mod task;
pub mod eval;
pub mod run_store;
pub mod fixtures;
pub mod gateway;
pub mod runner;
pub mod soeval;
pub mod analytics;
pub mod reward;
pub mod judge;
pub mod stats;
pub mod config;
pub mod report;
