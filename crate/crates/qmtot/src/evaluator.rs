//! Dual-evaluator scoring: every chain is rated for reasoning coherence
//! and medical correctness, the two are fused with a weighted exponential
//! average, and a judge call settles disagreements between the
//! average-max and score-max options.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendRef, ChatMessage, ChatRequest, Purpose};
use crate::domain::{ChainRecord, ChainScores, OptionLabel, Question};
use crate::engine::{EVAL_MAX_TOKENS, EVAL_TEMPERATURE};
use crate::promptkit::{self, PromptError, TemplateName, TemplateSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("score not parseable after retry")]
    ScoreParse,
    #[error("input out of range: {0}")]
    Range(String),
    #[error("judge candidates must differ")]
    EqualCandidates,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub alpha: f64,
    pub scorer: BackendRef,
    pub retry_on_parse_failure: bool,
}

/// Raw scorer texts kept alongside the run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTranscript {
    pub chain_index: usize,
    pub reasoning_text: String,
    pub correctness_text: String,
}

/// `fs = alpha * exp(r) + (1 - alpha) * exp(c)`, exactly.
pub fn final_score(r: f64, c: f64, alpha: f64) -> Result<f64, EvalError> {
    for (name, v) in [("r", r), ("c", c), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::Range(format!("{name}={v}")));
        }
    }
    Ok(alpha * r.exp() + (1.0 - alpha) * c.exp())
}

const STRICT_REMINDER: &str =
    "\n\nReply with exactly one line of the form \"SCORE: N\" where N is an integer 0-10.";

/// Calls and token usage attributable to one evaluator instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallTally {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub struct Evaluator<'a> {
    pub backend: &'a Backend,
    pub templates: &'a TemplateSet,
    pub cfg: &'a EvaluatorConfig,
    tally: std::cell::RefCell<CallTally>,
}

impl<'a> Evaluator<'a> {
    pub fn new(backend: &'a Backend, templates: &'a TemplateSet, cfg: &'a EvaluatorConfig) -> Self {
        Evaluator {
            backend,
            templates,
            cfg,
            tally: Default::default(),
        }
    }

    /// Usage accumulated so far; resets the counter.
    pub fn take_tally(&self) -> CallTally {
        std::mem::take(&mut self.tally.borrow_mut())
    }

    fn scorer_call(
        &self,
        backend_ref: &BackendRef,
        purpose: Purpose,
        system: &str,
        user: &str,
        scope: &str,
    ) -> Result<String, EvalError> {
        let req = ChatRequest {
            model: backend_ref.model.clone(),
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            temperature: EVAL_TEMPERATURE,
            max_tokens: EVAL_MAX_TOKENS,
            seed: Some(0),
            purpose,
            scope: Some(scope.to_string()),
        };
        let resp = self.backend.complete(backend_ref, &req)?;
        let mut tally = self.tally.borrow_mut();
        tally.calls += 1;
        tally.prompt_tokens += resp.usage.prompt_tokens;
        tally.completion_tokens += resp.usage.completion_tokens;
        Ok(resp.text)
    }

    /// One scoring aspect: parse `SCORE:` from the reply, retrying once
    /// with a stricter reminder suffix when configured. Returns the
    /// normalized score and the raw text that produced it.
    fn score_aspect(
        &self,
        q: &Question,
        chain: &ChainRecord,
        template: TemplateName,
    ) -> Result<(f64, String), EvalError> {
        let mut bindings = std::collections::BTreeMap::new();
        bindings.insert("stem".to_string(), q.stem.clone());
        bindings.insert("options".to_string(), q.options_block());
        bindings.insert("chain".to_string(), chain.rendered());
        let (system, user) = promptkit::render(self.templates.get(template), &bindings)?;

        let text = self.scorer_call(&self.cfg.scorer, Purpose::Score, &system, &user, &q.id)?;
        match promptkit::extract_score(&text) {
            Ok(score) => Ok((score, text)),
            Err(_) if self.cfg.retry_on_parse_failure => {
                let strict_user = format!("{user}{STRICT_REMINDER}");
                let retry_text =
                    self.scorer_call(&self.cfg.scorer, Purpose::Score, &system, &strict_user, &q.id)?;
                match promptkit::extract_score(&retry_text) {
                    Ok(score) => Ok((score, retry_text)),
                    Err(_) => Err(EvalError::ScoreParse),
                }
            }
            Err(_) => Err(EvalError::ScoreParse),
        }
    }

    /// Two scorer calls (reasoning, then correctness) fused per the run's
    /// alpha. A parse failure after the optional retry leaves the chain
    /// unscored (the caller records it as such).
    pub fn score_chain(
        &self,
        q: &Question,
        chain: &ChainRecord,
    ) -> Result<(ChainScores, (String, String)), EvalError> {
        assert!(chain.answer.is_some(), "only answered chains are scored");
        let (r, r_text) = self.score_aspect(q, chain, TemplateName::ScoreReasoning)?;
        let (c, c_text) = self.score_aspect(q, chain, TemplateName::ScoreCorrectness)?;
        let fs = final_score(r, c, self.cfg.alpha)?;
        Ok((ChainScores { r, c, fs }, (r_text, c_text)))
    }

    /// Judge call between two finalist options, each represented by its
    /// best-fs chain. On extraction failure, falls back to `avg_side`
    /// (the argmax-of-average option) and flags it.
    pub fn judge(
        &self,
        q: &Question,
        a: (OptionLabel, &ChainRecord),
        b: (OptionLabel, &ChainRecord),
        judge_ref: &BackendRef,
        avg_side: OptionLabel,
    ) -> Result<(OptionLabel, bool), EvalError> {
        if a.0 == b.0 {
            return Err(EvalError::EqualCandidates);
        }
        let mut bindings = std::collections::BTreeMap::new();
        bindings.insert("stem".to_string(), q.stem.clone());
        bindings.insert("options".to_string(), q.options_block());
        bindings.insert(
            "candidate_a".to_string(),
            format!("Option {}\n{}", a.0, a.1.rendered()),
        );
        bindings.insert(
            "candidate_b".to_string(),
            format!("Option {}\n{}", b.0, b.1.rendered()),
        );
        let (system, user) = promptkit::render(self.templates.get(TemplateName::Judge), &bindings)?;
        let text = self.scorer_call(judge_ref, Purpose::Judge, &system, &user, &q.id)?;
        match promptkit::extract_answer(&text, &[a.0, b.0]) {
            Some(winner) => Ok((winner, false)),
            None => {
                log::warn!(
                    "question {}: judge reply unparseable, falling back to avg side {avg_side}",
                    q.id
                );
                Ok((avg_side, true))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptBuilder;
    use crate::domain::{ReasoningStep, Verdict};
    use crate::testutil::{question, scripted_engine};

    fn answered_chain(letter: char) -> ChainRecord {
        ChainRecord {
            question_id: "q1".to_string(),
            steps: vec![ReasoningStep {
                index: 0,
                text: "step".to_string(),
                verdict: Verdict::Solved,
            }],
            answer: Some(OptionLabel::new(letter).unwrap()),
            scores: None,
            correct: None,
        }
    }

    #[test]
    fn final_score_matches_direct_evaluation() {
        assert_eq!(final_score(0.0, 0.0, 0.6).unwrap(), 1.0);
        let e = std::f64::consts::E;
        assert!((final_score(1.0, 1.0, 0.37).unwrap() - e).abs() < 1e-15);
        let expected = 0.6 * 0.8f64.exp() + 0.4 * 0.4f64.exp();
        assert!((final_score(0.8, 0.4, 0.6).unwrap() - expected).abs() < 1e-15);
        assert!((final_score(0.8, 0.4, 0.6).unwrap() - 1.932054).abs() < 1e-6);
        assert!(final_score(1.2, 0.0, 0.5).is_err());
        assert!(final_score(0.5, 0.5, -0.1).is_err());
    }

    #[test]
    fn score_chain_scripted_fusion() {
        let mut script = ScriptBuilder::new();
        script.push("q1", Purpose::Score, "SCORE: 8");
        script.push("q1", Purpose::Score, "SCORE: 6");
        let (backend, templates, run_cfg, _dir) = scripted_engine(&script);
        let cfg = EvaluatorConfig {
            alpha: 0.6,
            scorer: run_cfg.roles.scorer.clone(),
            retry_on_parse_failure: true,
        };
        let evaluator = Evaluator::new(&backend, &templates, &cfg);
        let q = question("q1", 5, None);
        let (scores, (r_text, c_text)) =
            evaluator.score_chain(&q, &answered_chain('B')).unwrap();
        assert_eq!(scores.r, 0.8);
        assert_eq!(scores.c, 0.6);
        let expected = 0.6 * 0.8f64.exp() + 0.4 * 0.6f64.exp();
        assert!((scores.fs - expected).abs() < 1e-15);
        assert!((scores.fs - 2.0641721).abs() < 1e-6);
        assert_eq!(r_text, "SCORE: 8");
        assert_eq!(c_text, "SCORE: 6");
    }

    #[test]
    fn score_parse_failure_after_retry_is_unscored() {
        let mut script = ScriptBuilder::new();
        script.push("q1", Purpose::Score, "sound differential");
        script.push("q1", Purpose::Score, "still just prose");
        let (backend, templates, run_cfg, _dir) = scripted_engine(&script);
        let cfg = EvaluatorConfig {
            alpha: 0.6,
            scorer: run_cfg.roles.scorer.clone(),
            retry_on_parse_failure: true,
        };
        let evaluator = Evaluator::new(&backend, &templates, &cfg);
        let q = question("q1", 5, None);
        let err = evaluator.score_chain(&q, &answered_chain('B')).unwrap_err();
        assert!(matches!(err, EvalError::ScoreParse));
    }

    #[test]
    fn retry_with_reminder_recovers() {
        let mut script = ScriptBuilder::new();
        script.push("q1", Purpose::Score, "prose only");
        script.push("q1", Purpose::Score, "SCORE: 10");
        script.push("q1", Purpose::Score, "SCORE: 10");
        let (backend, templates, run_cfg, _dir) = scripted_engine(&script);
        let cfg = EvaluatorConfig {
            alpha: 0.6,
            scorer: run_cfg.roles.scorer.clone(),
            retry_on_parse_failure: true,
        };
        let evaluator = Evaluator::new(&backend, &templates, &cfg);
        let q = question("q1", 5, None);
        let (scores, _) = evaluator.score_chain(&q, &answered_chain('A')).unwrap();
        assert_eq!(scores.r, 1.0);
        assert_eq!(scores.c, 1.0);
        assert!((scores.fs - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn judge_scripted_and_fallback() {
        let mut script = ScriptBuilder::new();
        script.push("q1", Purpose::Judge, "The stronger case is (D)");
        script.push("q1", Purpose::Judge, "cannot decide between them");
        let (backend, templates, run_cfg, _dir) = scripted_engine(&script);
        let cfg = EvaluatorConfig {
            alpha: 0.6,
            scorer: run_cfg.roles.scorer.clone(),
            retry_on_parse_failure: false,
        };
        let evaluator = Evaluator::new(&backend, &templates, &cfg);
        let q = question("q1", 5, None);
        let chain_b = answered_chain('B');
        let chain_d = answered_chain('D');
        let b = OptionLabel::new('B').unwrap();
        let d = OptionLabel::new('D').unwrap();

        let (winner, fallback) = evaluator
            .judge(&q, (b, &chain_b), (d, &chain_d), &run_cfg.roles.judge, b)
            .unwrap();
        assert_eq!(winner, d);
        assert!(!fallback);

        let (winner, fallback) = evaluator
            .judge(&q, (b, &chain_b), (d, &chain_d), &run_cfg.roles.judge, b)
            .unwrap();
        assert_eq!(winner, b);
        assert!(fallback);

        let err = evaluator
            .judge(&q, (b, &chain_b), (b, &chain_b), &run_cfg.roles.judge, b)
            .unwrap_err();
        assert!(matches!(err, EvalError::EqualCandidates));
    }
}
