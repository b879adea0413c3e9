//! Wires the stages together: per-question runs for each method,
//! resumable dataset sweeps, difficulty classification, and the
//! distillation pass over graded records.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{Backend, BackendKind};
use crate::difficulty::{self, DifficultyConfig, ManifestRow};
use crate::distill::{self, DistillError, LongCoT};
use crate::domain::{Question, RunConfig};
use crate::engine::{majority_vote, Engine, EngineError, TreeRunStats};
use crate::evaluator::{EvalError, Evaluator, EvaluatorConfig, ScoreTranscript};
use crate::promptkit::TemplateSet;
use crate::selector::{self, SelectionResult};
use crate::store::{Method, RecordStore, RunRecord, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Difficulty(#[from] crate::difficulty::DifficultyError),
    #[error("worker thread panicked")]
    WorkerPanic,
}

pub struct Pipeline<'a> {
    pub backend: &'a Backend,
    pub templates: &'a TemplateSet,
    pub run_cfg: &'a RunConfig,
    pub difficulty_cfg: DifficultyConfig,
    /// All roles scripted: timestamps are zeroed so records replay
    /// byte-identically.
    pub deterministic: bool,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        backend: &'a Backend,
        templates: &'a TemplateSet,
        run_cfg: &'a RunConfig,
        difficulty_cfg: DifficultyConfig,
    ) -> Self {
        let roles = &run_cfg.roles;
        let deterministic = [
            &roles.generator,
            &roles.validator,
            &roles.scorer,
            &roles.judge,
            &roles.reflector,
        ]
        .iter()
        .all(|r| r.kind == BackendKind::Scripted);
        Pipeline {
            backend,
            templates,
            run_cfg,
            difficulty_cfg,
            deterministic,
        }
    }

    fn now_ms(&self) -> u64 {
        if self.deterministic {
            0
        } else {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        }
    }

    fn engine(&self) -> Engine<'_> {
        Engine::new(self.backend, self.templates, self.run_cfg)
    }

    fn evaluator_cfg(&self) -> EvaluatorConfig {
        EvaluatorConfig {
            alpha: self.run_cfg.alpha,
            scorer: self.run_cfg.roles.scorer.clone(),
            retry_on_parse_failure: true,
        }
    }

    /// Runs one question under `method`, producing its run record.
    pub fn run_question(
        &self,
        q: &Question,
        method: Method,
        run_id: &str,
    ) -> Result<RunRecord, PipelineError> {
        let started = self.now_ms();
        let engine = self.engine();
        let n = self.run_cfg.cot_samples;

        let mut record = RunRecord {
            run_id: run_id.to_string(),
            question_id: q.id.clone(),
            method,
            gold: q.gold,
            chains: Vec::new(),
            selection: None,
            stats: None,
            final_answer: None,
            scorer_transcripts: Vec::new(),
            config: self.run_cfg.clone(),
            started_unix_ms: started,
            finished_unix_ms: 0,
        };

        match method {
            Method::Cot => {
                let (chains, stats) = engine.run_cot_with_stats(q, n);
                record.chains = chains;
                record.stats = Some(stats);
            }
            Method::Cotsc => {
                let (chains, stats) = engine.run_cot_with_stats(q, n);
                record.final_answer = majority_vote(&chains);
                record.chains = chains;
                record.stats = Some(stats);
            }
            Method::Tot => {
                let (chains, stats) = engine.run_tree(q)?;
                record.final_answer = majority_vote(&chains);
                record.chains = chains;
                record.stats = Some(stats);
            }
            Method::Qmtot => {
                let (chains, stats) = engine.run_tree(q)?;
                record.chains = chains;
                record.stats = Some(stats);
                self.score_and_select(q, &mut record)?;
            }
        }

        record.finished_unix_ms = self.now_ms();
        Ok(record)
    }

    /// Scoring plus the agreement-or-judge decision, with a CoT-SC vote
    /// computed on demand when the tree produced nothing usable.
    fn score_and_select(&self, q: &Question, record: &mut RunRecord) -> Result<(), PipelineError> {
        let eval_cfg = self.evaluator_cfg();
        let evaluator = Evaluator::new(self.backend, self.templates, &eval_cfg);

        let mut transcripts = Vec::new();
        for i in 0..record.chains.len() {
            if record.chains[i].answer.is_none() {
                continue;
            }
            match evaluator.score_chain(q, &record.chains[i]) {
                Ok((scores, (r_text, c_text))) => {
                    record.chains[i].scores = Some(scores);
                    transcripts.push(ScoreTranscript {
                        chain_index: i,
                        reasoning_text: r_text,
                        correctness_text: c_text,
                    });
                }
                Err(EvalError::ScoreParse) => {
                    log::warn!(
                        "question {}: chain {i} unscored (score parse failure)",
                        q.id
                    );
                }
                Err(other) => return Err(other.into()),
            }
        }
        record.scorer_transcripts = transcripts;

        let aggs = selector::aggregate(&record.chains);

        // tree produced no scored chains: fall back to a CoT-SC vote
        let mut fallback_stats = TreeRunStats::default();
        let cotsc_vote = if aggs.is_empty() {
            let engine = self.engine();
            let (chains, stats) = engine.run_cot_with_stats(q, self.run_cfg.cot_samples);
            fallback_stats = stats;
            let vote = majority_vote(&chains);
            record.chains.extend(chains);
            vote
        } else {
            None
        };

        let selection: SelectionResult = selector::decide(&aggs, cotsc_vote, |avg, max| {
            let best_avg = selector::best_chain_for(&record.chains, avg)
                .expect("avg winner has a scored chain");
            let best_max = selector::best_chain_for(&record.chains, max)
                .expect("max winner has a scored chain");
            match evaluator.judge(
                q,
                (avg, best_avg),
                (max, best_max),
                &self.run_cfg.roles.judge,
                avg,
            ) {
                Ok(result) => result,
                Err(err) => {
                    log::warn!("question {}: judge failed ({err}), using avg side", q.id);
                    (avg, true)
                }
            }
        });
        record.final_answer = selection.chosen;
        record.selection = Some(selection);

        let tally = evaluator.take_tally();
        if let Some(stats) = &mut record.stats {
            stats.llm_calls += tally.calls + fallback_stats.llm_calls;
            stats.prompt_tokens += tally.prompt_tokens + fallback_stats.prompt_tokens;
            stats.completion_tokens += tally.completion_tokens + fallback_stats.completion_tokens;
        }
        Ok(())
    }

    /// Sweeps the dataset, skipping questions already recorded for this
    /// run id (crash-safe resume) and appending records in question order.
    pub fn run_dataset(
        &self,
        store: &RecordStore,
        questions: &[Question],
        method: Method,
        run_id: &str,
        workers: usize,
    ) -> Result<usize, PipelineError> {
        let existing = store.repair_and_load(run_id)?;
        let done: std::collections::BTreeSet<&str> = existing
            .iter()
            .map(|record| record.question_id.as_str())
            .collect();
        let remaining: Vec<&Question> = questions
            .iter()
            .filter(|q| !done.contains(q.id.as_str()))
            .collect();

        let workers = workers.max(1);
        let mut executed = 0usize;
        for batch in remaining.chunks(workers) {
            let records: Vec<Result<RunRecord, PipelineError>> = if workers == 1 {
                batch
                    .iter()
                    .map(|q| self.run_question(q, method, run_id))
                    .collect()
            } else {
                let slots: Vec<Mutex<Option<Result<RunRecord, PipelineError>>>> =
                    batch.iter().map(|_| Mutex::new(None)).collect();
                std::thread::scope(|scope| {
                    for (q, slot) in batch.iter().zip(&slots) {
                        scope.spawn(move || {
                            *slot.lock().unwrap() = Some(self.run_question(q, method, run_id));
                        });
                    }
                });
                slots
                    .into_iter()
                    .map(|slot| {
                        slot.into_inner()
                            .unwrap()
                            .unwrap_or(Err(PipelineError::WorkerPanic))
                    })
                    .collect()
            };
            for record in records {
                store.append_record(&record?)?;
                executed += 1;
            }
        }
        Ok(executed)
    }

    /// Measures CoT-SC accuracy per question and bands it.
    pub fn classify_dataset(
        &self,
        questions: &[Question],
        samples: usize,
    ) -> Result<Vec<ManifestRow>, PipelineError> {
        let engine = self.engine();
        let mut rows = Vec::new();
        for q in questions {
            let acc = difficulty::measure_accuracy(q, samples, &engine)?;
            let omega = self.difficulty_cfg.resolve_omega(q);
            let label = difficulty::classify(acc, &self.difficulty_cfg, omega, samples)?;
            rows.push(ManifestRow {
                question_id: q.id.clone(),
                acc: label.acc,
                samples: label.samples,
                level: label.level,
            });
        }
        Ok(rows)
    }

    /// Reflects every graded chain in `records` into a long CoT and emits
    /// preference pairs. Answer-drift rejections are logged and skipped.
    pub fn distill_records(
        &self,
        questions: &[Question],
        records: &[RunRecord],
        seed: u64,
    ) -> Result<Vec<distill::PreferencePair>, PipelineError> {
        let by_id: BTreeMap<&str, &Question> =
            questions.iter().map(|q| (q.id.as_str(), q)).collect();

        let mut longs: Vec<LongCoT> = Vec::new();
        for record in records {
            let Some(q) = by_id.get(record.question_id.as_str()) else {
                log::warn!("record question {} not in dataset, skipped", record.question_id);
                continue;
            };
            for (i, chain) in record.chains.iter().enumerate() {
                if chain.correct.is_none() {
                    continue;
                }
                let source = format!("{}#{}", record.run_id, i);
                match distill::reflect(
                    q,
                    chain,
                    &source,
                    &self.run_cfg.roles.reflector,
                    self.backend,
                    self.templates,
                ) {
                    Ok(long) => longs.push(long),
                    Err(DistillError::AnswerDrift { want, got }) => {
                        log::warn!(
                            "question {}: reflection drifted ({want} -> {got:?}), chain skipped",
                            q.id
                        );
                    }
                    Err(DistillError::EmptyReflection) => {
                        log::warn!("question {}: blank reflection, chain skipped", q.id);
                    }
                    Err(other) => return Err(other.into()),
                }
            }
        }

        let prompts: BTreeMap<String, String> = questions
            .iter()
            .map(|q| (q.id.clone(), distill::render_prompt(q)))
            .collect();
        Ok(distill::match_pairs(&longs, &prompts, seed))
    }
}

/// Seeded subsample of `n` questions, preserving dataset order.
pub fn subsample(questions: &[Question], n: usize, seed: u64) -> Vec<Question> {
    if n >= questions.len() {
        return questions.to_vec();
    }
    let mut indices: Vec<usize> = (0..questions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut picked: Vec<usize> = indices.into_iter().take(n).collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| questions[i].clone()).collect()
}
