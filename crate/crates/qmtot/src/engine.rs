//! Tree-structured reasoning with validity gating and backtracking, plus
//! the single-chain CoT and self-consistency baselines.
//!
//! Traversal is depth-first with children visited in generation order;
//! every candidate child is assessed by the validator role and either
//! descended into, materialized as a terminal chain, or pruned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendRef, ChatMessage, ChatRequest, Purpose};
use crate::domain::{ChainRecord, OptionLabel, Question, ReasoningStep, RunConfig, Verdict};
use crate::promptkit::{self, PromptError, TemplateName, TemplateSet};

/// Sampling temperature for generation calls (decompose/extend/cot).
pub const GEN_TEMPERATURE: f64 = 0.7;
/// Temperature for validation, scoring, judging, readout: reproducibility
/// over diversity.
pub const EVAL_TEMPERATURE: f64 = 0.0;
pub const GEN_MAX_TOKENS: u32 = 1024;
pub const EVAL_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("generator returned blank text")]
    EmptyGeneration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Open,
    Expanded,
    Pruned,
    Terminal,
}

/// One node of the reasoning tree; `id` indexes into the run's node list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub step: ReasoningStep,
    pub depth: usize,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeRunStats {
    pub nodes_created: u64,
    pub nodes_pruned: u64,
    pub chains_collected: u64,
    pub llm_calls: u64,
    pub paths_per_question: u64,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

/// Full tree-run output, including the final tree for well-formedness
/// inspection.
#[derive(Debug, Clone)]
pub struct TreeRunOutcome {
    pub chains: Vec<ChainRecord>,
    pub stats: TreeRunStats,
    pub nodes: Vec<TreeNode>,
}

pub struct Engine<'a> {
    pub backend: &'a Backend,
    pub templates: &'a TemplateSet,
    pub cfg: &'a RunConfig,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a Backend, templates: &'a TemplateSet, cfg: &'a RunConfig) -> Self {
        Engine {
            backend,
            templates,
            cfg,
        }
    }

    fn chat(
        &self,
        backend_ref: &BackendRef,
        purpose: Purpose,
        template: TemplateName,
        bindings: &std::collections::BTreeMap<String, String>,
        temperature: f64,
        max_tokens: u32,
        seed: u64,
        scope: &str,
        stats: &mut TreeRunStats,
    ) -> Result<String, EngineError> {
        let (system, user) = promptkit::render(self.templates.get(template), bindings)?;
        let req = ChatRequest {
            model: backend_ref.model.clone(),
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            temperature,
            max_tokens,
            seed: Some(seed),
            purpose,
            scope: Some(scope.to_string()),
        };
        stats.llm_calls += 1;
        let resp = self.backend.complete(backend_ref, &req)?;
        stats.prompt_tokens += resp.usage.prompt_tokens;
        stats.completion_tokens += resp.usage.completion_tokens;
        Ok(resp.text)
    }

    fn question_bindings(q: &Question) -> std::collections::BTreeMap<String, String> {
        let mut bindings = std::collections::BTreeMap::new();
        bindings.insert("stem".to_string(), q.stem.clone());
        bindings.insert("options".to_string(), q.options_block());
        bindings
    }

    fn validate_history(
        &self,
        q: &Question,
        history: &[ReasoningStep],
        stats: &mut TreeRunStats,
    ) -> Result<Verdict, EngineError> {
        let mut bindings = Self::question_bindings(q);
        bindings.insert("history".to_string(), render_history(history));
        let text = self.chat(
            &self.cfg.roles.validator,
            Purpose::Validate,
            TemplateName::Validate,
            &bindings,
            EVAL_TEMPERATURE,
            EVAL_MAX_TOKENS,
            self.cfg.seed,
            &q.id,
            stats,
        )?;
        Ok(promptkit::extract_verdict(&text))
    }

    /// One decompose call producing the depth-0 step, with its verdict from
    /// a follow-up validate call. Blank generation is an error here.
    pub fn initial_step(
        &self,
        q: &Question,
        stats: &mut TreeRunStats,
    ) -> Result<ReasoningStep, EngineError> {
        let bindings = Self::question_bindings(q);
        let text = self.chat(
            &self.cfg.roles.generator,
            Purpose::Decompose,
            TemplateName::Decompose,
            &bindings,
            GEN_TEMPERATURE,
            GEN_MAX_TOKENS,
            self.cfg.seed,
            &q.id,
            stats,
        )?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(EngineError::EmptyGeneration);
        }
        let mut step = ReasoningStep {
            index: 0,
            text,
            verdict: Verdict::Promising,
        };
        step.verdict = self.validate_history(q, std::slice::from_ref(&step), stats)?;
        Ok(step)
    }

    /// One generation + validation for a candidate child of `history`.
    /// Returns `None` when the generator produced blank text.
    fn candidate_step(
        &self,
        q: &Question,
        history: &[ReasoningStep],
        seed_salt: u64,
        stats: &mut TreeRunStats,
    ) -> Result<Option<ReasoningStep>, EngineError> {
        let mut bindings = Self::question_bindings(q);
        bindings.insert("history".to_string(), render_history(history));
        let text = self.chat(
            &self.cfg.roles.generator,
            Purpose::Extend,
            TemplateName::Extend,
            &bindings,
            GEN_TEMPERATURE,
            GEN_MAX_TOKENS,
            self.cfg.seed.wrapping_add(seed_salt),
            &q.id,
            stats,
        )?;
        let text = text.trim().to_string();
        if text.is_empty() {
            log::warn!("question {}: blank candidate generation skipped", q.id);
            return Ok(None);
        }
        let mut step = ReasoningStep {
            index: history.len(),
            text,
            verdict: Verdict::Promising,
        };
        let mut extended: Vec<ReasoningStep> = history.to_vec();
        extended.push(step.clone());
        step.verdict = self.validate_history(q, &extended, stats)?;
        Ok(Some(step))
    }

    /// Up to `branching` candidate children of a promising history, each
    /// carrying the validator's verdict. Blank generations are skipped.
    pub fn extend_step(
        &self,
        q: &Question,
        history: &[ReasoningStep],
    ) -> Result<Vec<ReasoningStep>, EngineError> {
        assert!(!history.is_empty(), "history must be non-empty");
        assert_eq!(
            history.last().unwrap().verdict,
            Verdict::Promising,
            "only promising histories extend"
        );
        let mut stats = TreeRunStats::default();
        let mut children = Vec::new();
        for j in 0..self.cfg.branching {
            if let Some(step) = self.candidate_step(q, history, j as u64 + 1, &mut stats)? {
                children.push(step);
            }
        }
        Ok(children)
    }

    /// Answer readout for a solved leaf; builds the chain record and grades
    /// it when the question carries a gold label.
    fn materialize_chain(
        &self,
        q: &Question,
        steps: Vec<ReasoningStep>,
        stats: &mut TreeRunStats,
    ) -> Result<ChainRecord, EngineError> {
        let mut chain = ChainRecord {
            question_id: q.id.clone(),
            steps,
            answer: None,
            scores: None,
            correct: None,
        };
        let mut bindings = Self::question_bindings(q);
        bindings.insert("chain".to_string(), chain.rendered());
        let text = self.chat(
            &self.cfg.roles.generator,
            Purpose::Readout,
            TemplateName::Readout,
            &bindings,
            EVAL_TEMPERATURE,
            EVAL_MAX_TOKENS,
            self.cfg.seed,
            &q.id,
            stats,
        )?;
        chain.answer = promptkit::extract_answer(&text, &q.valid_labels());
        chain.correct = match (chain.answer, q.gold) {
            (Some(answer), Some(gold)) => Some(answer == gold),
            _ => None,
        };
        Ok(chain)
    }

    pub fn run_tree(&self, q: &Question) -> Result<(Vec<ChainRecord>, TreeRunStats), EngineError> {
        let outcome = self.run_tree_with_trace(q)?;
        Ok((outcome.chains, outcome.stats))
    }

    /// Depth-first expansion with validity gating. Stops when `max_chains`
    /// chains are collected, the node budget is exhausted, or the tree is
    /// exhausted. Node-creation attempts (generation calls) are what count
    /// against the budget, so total backend calls stay within
    /// `2 * node_budget + max_chains` for any backend behavior.
    pub fn run_tree_with_trace(&self, q: &Question) -> Result<TreeRunOutcome, EngineError> {
        let cfg = self.cfg;
        let mut stats = TreeRunStats::default();
        let mut nodes: Vec<TreeNode> = Vec::new();
        let mut chains: Vec<ChainRecord> = Vec::new();
        let mut attempts: u64 = 0;

        attempts += 1;
        let root_step = self.initial_step(q, &mut stats)?;
        stats.nodes_created += 1;
        let root_verdict = root_step.verdict;
        nodes.push(TreeNode {
            id: 0,
            parent: None,
            step: root_step,
            depth: 0,
            status: NodeStatus::Open,
        });

        let mut stack: Vec<usize> = Vec::new();
        match root_verdict {
            Verdict::Solved => {
                nodes[0].status = NodeStatus::Terminal;
                let chain = self.materialize_chain(q, path_steps(&nodes, 0), &mut stats)?;
                chains.push(chain);
                stats.chains_collected += 1;
            }
            Verdict::DeadEnd => {
                nodes[0].status = NodeStatus::Pruned;
                stats.nodes_pruned += 1;
            }
            Verdict::Promising => stack.push(0),
        }

        'outer: while let Some(nid) = stack.pop() {
            if stats.chains_collected >= cfg.max_chains as u64
                || attempts >= cfg.node_budget as u64
            {
                break;
            }
            nodes[nid].status = NodeStatus::Expanded;
            let history = path_steps(&nodes, nid);
            let child_depth = nodes[nid].depth + 1;
            let mut pending: Vec<usize> = Vec::new();

            for _ in 0..cfg.branching {
                if attempts >= cfg.node_budget as u64 {
                    break;
                }
                attempts += 1;
                let Some(step) = self.candidate_step(q, &history, attempts, &mut stats)? else {
                    continue;
                };
                stats.nodes_created += 1;
                let id = nodes.len();
                let verdict = step.verdict;
                nodes.push(TreeNode {
                    id,
                    parent: Some(nid),
                    step,
                    depth: child_depth,
                    status: NodeStatus::Open,
                });
                match verdict {
                    Verdict::Solved => {
                        nodes[id].status = NodeStatus::Terminal;
                        let chain = self.materialize_chain(q, path_steps(&nodes, id), &mut stats)?;
                        chains.push(chain);
                        stats.chains_collected += 1;
                        if stats.chains_collected >= cfg.max_chains as u64 {
                            break 'outer;
                        }
                    }
                    Verdict::DeadEnd => {
                        nodes[id].status = NodeStatus::Pruned;
                        stats.nodes_pruned += 1;
                    }
                    Verdict::Promising => {
                        if child_depth >= cfg.max_depth {
                            // length bound k: no further expansion
                            nodes[id].status = NodeStatus::Pruned;
                            stats.nodes_pruned += 1;
                        } else {
                            pending.push(id);
                        }
                    }
                }
            }

            // depth-first: first-generated child pops first
            for id in pending.iter().rev() {
                stack.push(*id);
            }
        }

        stats.paths_per_question = stats.chains_collected;
        Ok(TreeRunOutcome {
            chains,
            stats,
            nodes,
        })
    }

    /// `n` independent single-prompt CoT completions, each parsed for an
    /// answer. Per-sample failures are logged and the sample skipped.
    pub fn run_cot(&self, q: &Question, n: usize) -> Vec<ChainRecord> {
        self.run_cot_with_stats(q, n).0
    }

    pub fn run_cot_with_stats(&self, q: &Question, n: usize) -> (Vec<ChainRecord>, TreeRunStats) {
        let mut chains = Vec::new();
        let mut stats = TreeRunStats::default();
        for i in 0..n {
            let bindings = Self::question_bindings(q);
            let text = match self.chat(
                &self.cfg.roles.generator,
                Purpose::Cot,
                TemplateName::Cot,
                &bindings,
                GEN_TEMPERATURE,
                GEN_MAX_TOKENS,
                self.cfg.seed.wrapping_add(i as u64),
                &q.id,
                &mut stats,
            ) {
                Ok(text) => text,
                Err(err) => {
                    log::warn!("question {}: cot sample {i} failed: {err}", q.id);
                    continue;
                }
            };
            if text.trim().is_empty() {
                log::warn!("question {}: cot sample {i} blank, skipped", q.id);
                continue;
            }
            let answer = promptkit::extract_answer(&text, &q.valid_labels());
            let correct = match (answer, q.gold) {
                (Some(a), Some(gold)) => Some(a == gold),
                _ => None,
            };
            chains.push(ChainRecord {
                question_id: q.id.clone(),
                steps: vec![ReasoningStep {
                    index: 0,
                    text: text.trim().to_string(),
                    verdict: Verdict::Solved,
                }],
                answer,
                scores: None,
                correct,
            });
        }
        (chains, stats)
    }
}

/// Most frequent non-null answer; ties broken alphabetically.
pub fn majority_vote(chains: &[ChainRecord]) -> Option<OptionLabel> {
    let mut counts: std::collections::BTreeMap<OptionLabel, usize> = Default::default();
    for chain in chains {
        if let Some(answer) = chain.answer {
            *counts.entry(answer).or_insert(0) += 1;
        }
    }
    // BTreeMap iterates alphabetically, so strict > keeps the earliest
    // label on ties.
    counts
        .iter()
        .fold(None, |best: Option<(OptionLabel, usize)>, (&label, &n)| {
            match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((label, n)),
            }
        })
        .map(|(label, _)| label)
}

pub fn render_history(steps: &[ReasoningStep]) -> String {
    steps
        .iter()
        .map(|s| format!("Step {}: {}", s.index + 1, s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn path_steps(nodes: &[TreeNode], leaf: usize) -> Vec<ReasoningStep> {
    let mut path = Vec::new();
    let mut cursor = Some(leaf);
    while let Some(id) = cursor {
        path.push(nodes[id].step.clone());
        cursor = nodes[id].parent;
    }
    path.reverse();
    path
}

/// Structural checks over a finished tree: acyclic parent links, consistent
/// depths and step indices, pruned/terminal nodes childless, depth within
/// the length bound.
pub fn check_tree_wellformed(nodes: &[TreeNode], max_depth: usize) -> Result<(), String> {
    if nodes.is_empty() {
        return Ok(());
    }
    let mut child_count = vec![0usize; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        if node.id != i {
            return Err(format!("node {i}: id mismatch {}", node.id));
        }
        match node.parent {
            None => {
                if i != 0 || node.depth != 0 {
                    return Err(format!("node {i}: non-root without parent"));
                }
            }
            Some(p) => {
                if p >= i {
                    return Err(format!("node {i}: parent {p} not earlier (cycle risk)"));
                }
                if node.depth != nodes[p].depth + 1 {
                    return Err(format!("node {i}: depth {} inconsistent", node.depth));
                }
                child_count[p] += 1;
            }
        }
        if node.step.index != node.depth {
            return Err(format!("node {i}: step index != depth"));
        }
        if node.depth > max_depth {
            return Err(format!("node {i}: depth {} exceeds k", node.depth));
        }
        if node.step.text.trim().is_empty() {
            return Err(format!("node {i}: blank step text"));
        }
    }
    for (i, node) in nodes.iter().enumerate() {
        if matches!(node.status, NodeStatus::Pruned | NodeStatus::Terminal) && child_count[i] > 0 {
            return Err(format!("node {i}: pruned/terminal node has children"));
        }
    }
    Ok(())
}

/// Verifies a chain's steps replay a root-to-leaf path in the final tree.
pub fn chain_matches_tree(chain: &ChainRecord, nodes: &[TreeNode]) -> bool {
    nodes.iter().any(|leaf| {
        leaf.status == NodeStatus::Terminal && path_steps(nodes, leaf.id) == chain.steps
    })
}
