//! Checklist-driven preference data construction.
//!
//! Instructions are turned into weighted checklists of yes/no requirements,
//! pairs of policy responses are scored against them by a teacher model and
//! optional verification programs, and the pairs with the clearest
//! differences are exported as preference data.

pub mod canonical;
pub mod checklist;
pub mod config;
pub mod eval;
pub mod gateway;
pub mod ingest;
pub mod model;
pub mod pairs;
pub mod pipeline;
pub mod prompts;
pub mod sandbox;
pub mod scoring;
pub mod sim;
pub mod verifier;

pub use config::PipelineConfig;
pub use pipeline::{Pipeline, PipelineError, Stage};
