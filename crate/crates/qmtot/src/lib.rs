//! Tree-of-thoughts reasoning engine and benchmark harness for
//! multiple-choice medical QA, with dual-evaluator answer selection,
//! difficulty banding, and preference-pair distillation.

pub mod backend;
pub mod cli;
pub mod difficulty;
pub mod distill;
pub mod domain;
pub mod engine;
pub mod evaluator;
pub mod pipeline;
pub mod promptkit;
pub mod selector;
pub mod store;

#[cfg(test)]
mod testutil;
