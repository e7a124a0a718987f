//! Counterfactual fairness auditing for clinical multiple-choice QA.
//!
//! The pipeline ingests clinical cases, extracts demographic features,
//! builds counterfactual patient variants (CPVs) that differ only in gender
//! and/or ethnicity, queries language models through a cached, rate-limited
//! gateway, and measures group disparities with accuracy metrics, word-level
//! attributions and embedding-space bias scores.

pub mod corpus;
pub mod cpv;
pub mod demographics;
pub mod embedbias;
pub mod exec;
pub mod extraction;
pub mod ftexport;
pub mod gateway;
pub mod orchestrator;
pub mod parsing;
pub mod prompting;
pub mod statmetrics;
pub mod text;
pub mod wordshap;
