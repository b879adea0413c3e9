//! Shared helpers for unit tests: canned questions and a scripted
//! engine wired to a throwaway fixture file.

use std::collections::BTreeMap;

use crate::backend::{Backend, BackendRef, RetryPolicy};
pub use crate::backend::ScriptBuilder;
use crate::domain::{OptionLabel, Question, RunConfig};
use crate::promptkit::TemplateSet;

pub fn question(id: &str, n_options: usize, gold: Option<char>) -> Question {
    let options: BTreeMap<OptionLabel, String> = (0..n_options)
        .map(|i| {
            (
                OptionLabel::from_index(i).unwrap(),
                format!("option {}", i + 1),
            )
        })
        .collect();
    Question {
        id: id.to_string(),
        stem: format!("Synthetic stem for {id}."),
        options,
        gold: gold.map(|c| OptionLabel::new(c).unwrap()),
    }
}

/// Writes the fixture, returning a backend/templates/config trio whose
/// every role points at it. Keep the TempDir alive for the test's duration.
pub fn scripted_engine(
    script: &ScriptBuilder,
) -> (Backend, TemplateSet, RunConfig, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("fixture.json");
    script.write_to(&fixture).unwrap();
    let backend = Backend::new(RetryPolicy::default(), None, 4);
    let scripted = BackendRef::scripted(fixture.to_string_lossy());
    let mut cfg = RunConfig::default();
    cfg.roles.generator = scripted.clone();
    cfg.roles.validator = scripted.clone();
    cfg.roles.scorer = scripted.clone();
    cfg.roles.judge = scripted.clone();
    cfg.roles.reflector = scripted;
    (backend, TemplateSet::builtin(), cfg, dir)
}
