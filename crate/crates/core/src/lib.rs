//! Embarrassingly parallel forests of small domain-expert language models.
//!
//! Experts are branched from seed models, trained independently per domain
//! under a shared compute budget, merged into a forest and ensembled at
//! inference time through a Bayesian posterior over domains.

pub mod btm;
pub mod budget;
pub mod corpus;
pub mod ensemble;
pub mod evalreport;
pub mod experiment;
pub mod synthetic;
pub mod tinylm;
