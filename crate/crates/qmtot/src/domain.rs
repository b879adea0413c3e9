//! Shared value types and serialization-stable schemas used by every
//! other module: questions, option labels, reasoning steps, chains,
//! scores, and the run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::BackendRef;

/// A single multiple-choice option label, `A`..`Z`.
///
/// Totally ordered by letter, which is also the tie-break order used by
/// majority voting and argmax selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OptionLabel(char);

impl OptionLabel {
    pub fn new(letter: char) -> Option<Self> {
        letter.is_ascii_uppercase().then_some(OptionLabel(letter))
    }

    pub fn letter(&self) -> char {
        self.0
    }

    /// The label at 0-based position `i` (0 → A).
    pub fn from_index(i: usize) -> Option<Self> {
        (i < 26).then(|| OptionLabel((b'A' + i as u8) as char))
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for OptionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                OptionLabel::new(c.to_ascii_uppercase()).ok_or_else(|| format!("not a label: {s}"))
            }
            _ => Err(format!("not a label: {s}")),
        }
    }
}

impl Serialize for OptionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for OptionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One multiple-choice item: stem, labeled options, optional gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    /// Ordered map label -> option text; labels must be consecutive from A.
    pub options: BTreeMap<OptionLabel, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<OptionLabel>,
}

impl Question {
    pub fn valid_labels(&self) -> Vec<OptionLabel> {
        self.options.keys().copied().collect()
    }

    /// Render the options block as shown to the model: one `X) text` line each.
    pub fn options_block(&self) -> String {
        let mut out = String::new();
        for (label, text) in &self.options {
            out.push_str(&format!("{label}) {text}\n"));
        }
        out
    }
}

/// Checks every `Question` invariant; returns one description per violation.
/// Total: never fails, an empty list means the question is well-formed.
pub fn validate_question(q: &Question) -> Vec<String> {
    let mut violations = Vec::new();
    if q.id.trim().is_empty() {
        violations.push("id: empty".to_string());
    }
    if q.stem.trim().is_empty() {
        violations.push("stem: empty".to_string());
    }
    let n = q.options.len();
    if !(2..=26).contains(&n) {
        violations.push(format!("options: expected 2..=26 options, got {n}"));
    }
    let consecutive = q
        .options
        .keys()
        .enumerate()
        .all(|(i, label)| Some(*label) == OptionLabel::from_index(i));
    if !consecutive {
        violations.push("options not consecutive from A".to_string());
    }
    if let Some(gold) = q.gold {
        if !q.options.contains_key(&gold) {
            violations.push(format!("gold not an option: {gold}"));
        }
    }
    violations
}

/// Verdict assigned to a reasoning step by the validity gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Solved,
    Promising,
    DeadEnd,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Solved => "solved",
            Verdict::Promising => "promising",
            Verdict::DeadEnd => "dead_end",
        };
        f.write_str(s)
    }
}

/// One node's worth of reasoning: 0-based depth plus step text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub index: usize,
    pub text: String,
    pub verdict: Verdict,
}

/// Evaluator outputs: reasoning coherence `r`, medical correctness `c`,
/// and the fused final score `fs = alpha*exp(r) + (1-alpha)*exp(c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainScores {
    pub r: f64,
    pub c: f64,
    pub fs: f64,
}

/// One root-to-leaf reasoning path with its extracted answer and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub question_id: String,
    pub steps: Vec<ReasoningStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<OptionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ChainScores>,
    /// Tri-state: unset while ungraded, so ungraded chains never pollute
    /// accuracy counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl ChainRecord {
    /// Render the chain as numbered step lines plus the extracted answer,
    /// the form fed to scorers, the judge, and the reflector.
    pub fn rendered(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&format!("Step {}: {}\n", step.index + 1, step.text));
        }
        if let Some(answer) = self.answer {
            out.push_str(&format!("Final answer: {answer}\n"));
        }
        out
    }
}

/// Which backend serves each pipeline role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub generator: BackendRef,
    pub validator: BackendRef,
    pub scorer: BackendRef,
    pub judge: BackendRef,
    pub reflector: BackendRef,
}

/// Run-level knobs: score fusion weight, tree shape, budgets, and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Weight alpha on the reasoning term of the fused score.
    pub alpha: f64,
    /// Maximum reasoning-path length k; nodes at this depth never expand.
    pub max_depth: usize,
    /// Branching factor b per expansion.
    pub branching: usize,
    /// Stop collecting after this many terminal chains (N).
    pub max_chains: usize,
    /// Hard cap on node-creation attempts per question.
    pub node_budget: usize,
    /// Samples n for the CoT / CoT-SC baselines and difficulty measurement.
    pub cot_samples: usize,
    pub seed: u64,
    pub roles: Roles,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.6,
            max_depth: 5,
            branching: 3,
            max_chains: 8,
            node_budget: 64,
            cot_samples: 5,
            seed: 0,
            roles: Roles {
                generator: BackendRef::scripted(""),
                validator: BackendRef::scripted(""),
                scorer: BackendRef::scripted(""),
                judge: BackendRef::scripted(""),
                reflector: BackendRef::scripted(""),
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut violations = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            violations.push(format!("alpha out of [0,1]: {}", self.alpha));
        }
        if self.max_depth < 1 {
            violations.push("max_depth must be >= 1".to_string());
        }
        if self.branching < 1 {
            violations.push("branching must be >= 1".to_string());
        }
        if self.max_chains < 1 {
            violations.push("max_chains must be >= 1".to_string());
        }
        if self.node_budget < self.max_depth {
            violations.push(format!(
                "node_budget {} < max_depth {}",
                self.node_budget, self.max_depth
            ));
        }
        if self.cot_samples < 1 {
            violations.push("cot_samples must be >= 1".to_string());
        }
        violations
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn question(n: usize, gold: Option<char>) -> Question {
        let options = (0..n)
            .map(|i| {
                (
                    OptionLabel::from_index(i).unwrap(),
                    format!("option {}", i + 1),
                )
            })
            .collect();
        Question {
            id: "q1".to_string(),
            stem: "A patient presents with fever.".to_string(),
            options,
            gold: gold.map(|c| OptionLabel::new(c).unwrap()),
        }
    }

    #[test]
    fn well_formed_question_has_no_violations() {
        assert!(validate_question(&question(5, Some('C'))).is_empty());
    }

    #[test]
    fn non_consecutive_options_rejected() {
        let mut q = question(3, None);
        let b = OptionLabel::new('B').unwrap();
        q.options.remove(&b);
        let violations = validate_question(&q);
        assert_eq!(violations, vec!["options not consecutive from A"]);
    }

    #[test]
    fn gold_outside_options_rejected() {
        let q = question(5, Some('F'));
        let violations = validate_question(&q);
        assert_eq!(violations, vec!["gold not an option: F"]);
    }

    #[test]
    fn option_label_order_matches_letters() {
        let a = OptionLabel::new('A').unwrap();
        let z = OptionLabel::new('Z').unwrap();
        assert!(a < z);
        assert_eq!("C".parse::<OptionLabel>().unwrap().letter(), 'C');
        assert!("AB".parse::<OptionLabel>().is_err());
        assert!("3".parse::<OptionLabel>().is_err());
    }

    #[test]
    fn chain_record_round_trips() {
        let chain = ChainRecord {
            question_id: "q1".to_string(),
            steps: vec![ReasoningStep {
                index: 0,
                text: "check vitals".to_string(),
                verdict: Verdict::Solved,
            }],
            answer: Some(OptionLabel::new('B').unwrap()),
            scores: Some(ChainScores {
                r: 0.8,
                c: 0.6,
                fs: 2.0641721,
            }),
            correct: Some(true),
        };
        let json = serde_json::to_string(&chain).unwrap();
        let back: ChainRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(chain, back);
    }

    #[test]
    fn run_config_bounds_checked() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_empty());
        cfg.alpha = 1.5;
        cfg.node_budget = 2;
        let violations = cfg.validate();
        assert_eq!(violations.len(), 2);
    }
}
