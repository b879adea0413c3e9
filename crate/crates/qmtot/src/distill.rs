//! Reflection distillation: graded short chains are rewritten into long
//! reflective reasoning, then correct and incorrect long versions of the
//! same question are randomly paired into preference rows for DPO export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendRef, ChatMessage, ChatRequest, Purpose};
use crate::domain::{ChainRecord, Question};
use crate::engine::{GEN_MAX_TOKENS, GEN_TEMPERATURE};
use crate::promptkit::{self, PromptError, TemplateName, TemplateSet};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("reflected text answers {got:?}, source chain answers {want}")]
    AnswerDrift { want: String, got: Option<String> },
    #[error("reflector returned blank text")]
    EmptyReflection,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A reflective long-form rewrite of one graded chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongCoT {
    pub question_id: String,
    /// Identifies the source chain within its run record.
    pub source_chain: String,
    pub text: String,
    pub correct: bool,
}

/// One (prompt, chosen, rejected) training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// The rendered question text used as the DPO prompt.
pub fn render_prompt(q: &Question) -> String {
    format!("{}\n\nOptions:\n{}", q.stem, q.options_block())
}

/// One reflector call rewriting the chain; the correctness label carries
/// over unchanged. The reflector must not flip the final answer: the
/// output is re-parsed and a mismatch is rejected.
pub fn reflect(
    q: &Question,
    chain: &ChainRecord,
    source_chain: &str,
    reflector: &BackendRef,
    backend: &Backend,
    templates: &TemplateSet,
) -> Result<LongCoT, DistillError> {
    let correct = chain
        .correct
        .expect("reflect precondition: chain.correct is set");
    let source_answer = chain.answer.expect("graded chains carry an answer");

    let mut bindings = BTreeMap::new();
    bindings.insert("stem".to_string(), q.stem.clone());
    bindings.insert("options".to_string(), q.options_block());
    bindings.insert("chain".to_string(), chain.rendered());
    let (system, user) = promptkit::render(templates.get(TemplateName::Reflect), &bindings)?;

    let req = ChatRequest {
        model: reflector.model.clone(),
        messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
        temperature: GEN_TEMPERATURE,
        max_tokens: GEN_MAX_TOKENS * 2,
        seed: Some(0),
        purpose: Purpose::Reflect,
        scope: Some(q.id.clone()),
    };
    let text = backend.complete(reflector, &req)?.text.trim().to_string();
    if text.is_empty() {
        return Err(DistillError::EmptyReflection);
    }

    let extracted = promptkit::extract_answer(&text, &q.valid_labels());
    if extracted != Some(source_answer) {
        return Err(DistillError::AnswerDrift {
            want: source_answer.to_string(),
            got: extracted.map(|l| l.to_string()),
        });
    }

    Ok(LongCoT {
        question_id: q.id.clone(),
        source_chain: source_chain.to_string(),
        text,
        correct,
    })
}

/// Per question: shuffle correct and incorrect long CoTs with the seeded
/// generator and pair them positionally, without replacement, yielding
/// exactly min(#correct, #incorrect) pairs. Pairs never cross questions.
pub fn match_pairs(
    longs: &[LongCoT],
    prompts: &BTreeMap<String, String>,
    seed: u64,
) -> Vec<PreferencePair> {
    let mut by_question: BTreeMap<&str, (Vec<&LongCoT>, Vec<&LongCoT>)> = BTreeMap::new();
    for long in longs {
        let entry = by_question.entry(&long.question_id).or_default();
        if long.correct {
            entry.0.push(long);
        } else {
            entry.1.push(long);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (question_id, (mut correct, mut incorrect)) in by_question {
        correct.shuffle(&mut rng);
        incorrect.shuffle(&mut rng);
        let prompt = prompts.get(question_id).cloned().unwrap_or_default();
        for (chosen, rejected) in correct.iter().zip(incorrect.iter()) {
            if chosen.text == rejected.text {
                log::warn!("question {question_id}: identical chosen/rejected text, pair skipped");
                continue;
            }
            pairs.push(PreferencePair {
                question_id: question_id.to_string(),
                prompt: prompt.clone(),
                chosen: chosen.text.clone(),
                rejected: rejected.text.clone(),
            });
        }
    }
    pairs
}

/// JSONL export, one pair per line; returns the number of lines written.
pub fn export_dpo(pairs: &[PreferencePair], path: &Path) -> Result<usize, DistillError> {
    let mut file = std::fs::File::create(path)?;
    for pair in pairs {
        serde_json::to_writer(&mut file, pair).map_err(std::io::Error::from)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(pairs.len())
}

pub fn load_dpo(path: &Path) -> Result<Vec<PreferencePair>, DistillError> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| DistillError::Io(std::io::Error::from(e))))
        .collect()
}
