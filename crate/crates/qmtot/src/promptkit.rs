//! Prompt templates and the parsers that turn free-form model text into
//! structured verdicts, option labels, and scores.
//!
//! Templates are UTF-8 files with a `---` line separating the system and
//! user sections and `{name}` placeholders. Shipped defaults live under
//! `templates/`; a config-supplied directory overrides them per file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::domain::{OptionLabel, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("missing binding: {0}")]
    MissingBinding(String),
    #[error("unbound placeholder after render: {0}")]
    UnboundPlaceholder(String),
    #[error("template {0}: {1}")]
    BadTemplate(String, String),
    #[error("no integer follows the SCORE token")]
    ScoreParse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateName {
    Decompose,
    Extend,
    Validate,
    Readout,
    ScoreReasoning,
    ScoreCorrectness,
    Judge,
    Reflect,
    Cot,
}

impl TemplateName {
    pub const ALL: [TemplateName; 9] = [
        TemplateName::Decompose,
        TemplateName::Extend,
        TemplateName::Validate,
        TemplateName::Readout,
        TemplateName::ScoreReasoning,
        TemplateName::ScoreCorrectness,
        TemplateName::Judge,
        TemplateName::Reflect,
        TemplateName::Cot,
    ];

    pub fn file_stem(&self) -> &'static str {
        match self {
            TemplateName::Decompose => "decompose",
            TemplateName::Extend => "extend",
            TemplateName::Validate => "validate",
            TemplateName::Readout => "readout",
            TemplateName::ScoreReasoning => "score_reasoning",
            TemplateName::ScoreCorrectness => "score_correctness",
            TemplateName::Judge => "judge",
            TemplateName::Reflect => "reflect",
            TemplateName::Cot => "cot",
        }
    }

    /// Placeholders that must be bound when rendering this template.
    pub fn required_placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateName::Decompose | TemplateName::Cot => &["stem", "options"],
            TemplateName::Extend | TemplateName::Validate => &["stem", "options", "history"],
            TemplateName::Readout
            | TemplateName::ScoreReasoning
            | TemplateName::ScoreCorrectness
            | TemplateName::Reflect => &["stem", "options", "chain"],
            TemplateName::Judge => &["stem", "options", "candidate_a", "candidate_b"],
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    /// Parses the `system --- user` file format.
    pub fn parse(name: TemplateName, raw: &str) -> Result<Self, PromptError> {
        let mut sections = raw.splitn(2, "\n---\n");
        let system = sections.next().unwrap_or("").trim().to_string();
        let user = sections
            .next()
            .ok_or_else(|| {
                PromptError::BadTemplate(name.to_string(), "missing --- separator".to_string())
            })?
            .trim()
            .to_string();
        if system.is_empty() || user.is_empty() {
            return Err(PromptError::BadTemplate(
                name.to_string(),
                "empty system or user section".to_string(),
            ));
        }
        Ok(PromptTemplate { name, system, user })
    }
}

/// Substitutes `{name}` placeholders in both sections. Every placeholder
/// required by the template name must be bound, and no marker may remain
/// afterwards.
pub fn render(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<(String, String), PromptError> {
    for required in template.name.required_placeholders() {
        if !bindings.contains_key(*required) {
            return Err(PromptError::MissingBinding(required.to_string()));
        }
    }
    let substitute = |text: &str| {
        let mut out = text.to_string();
        for (key, value) in bindings {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        out
    };
    let system = substitute(&template.system);
    let user = substitute(&template.user);
    for rendered in [&system, &user] {
        if let Some(m) = placeholder_re().find(rendered) {
            return Err(PromptError::UnboundPlaceholder(m.as_str().to_string()));
        }
    }
    Ok((system, user))
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\{(stem|options|history|chain|candidate_a|candidate_b)\}").unwrap()
    })
}

/// All nine templates, loaded from shipped defaults and optionally
/// overridden per file from a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let sources: [(TemplateName, &str); 9] = [
            (TemplateName::Decompose, include_str!("../templates/decompose.txt")),
            (TemplateName::Extend, include_str!("../templates/extend.txt")),
            (TemplateName::Validate, include_str!("../templates/validate.txt")),
            (TemplateName::Readout, include_str!("../templates/readout.txt")),
            (
                TemplateName::ScoreReasoning,
                include_str!("../templates/score_reasoning.txt"),
            ),
            (
                TemplateName::ScoreCorrectness,
                include_str!("../templates/score_correctness.txt"),
            ),
            (TemplateName::Judge, include_str!("../templates/judge.txt")),
            (TemplateName::Reflect, include_str!("../templates/reflect.txt")),
            (TemplateName::Cot, include_str!("../templates/cot.txt")),
        ];
        let templates = sources
            .into_iter()
            .map(|(name, raw)| {
                let t = PromptTemplate::parse(name, raw).expect("builtin template");
                (name, t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Builtin set with any `<stem>.txt` files in `dir` overriding.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let path = dir.join(format!("{}.txt", name.file_stem()));
            if path.exists() {
                let raw = std::fs::read_to_string(&path).map_err(|e| {
                    PromptError::BadTemplate(name.to_string(), e.to_string())
                })?;
                set.templates.insert(name, PromptTemplate::parse(name, &raw)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }
}

fn answer_pattern_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(?:final\s+answer|answer)\b\s*(?:is\b)?\s*[:\-]?\s*\(?\s*([A-Za-z])\b",
        )
        .unwrap()
    })
}

fn standalone_letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Uppercase only: a lone lowercase letter is almost always prose
    // ("a patient", "I think").
    RE.get_or_init(|| Regex::new(r"\b([A-Z])\b").unwrap())
}

/// Pulls the chosen option out of free-form completion text.
///
/// Precedence, first hit wins:
/// 1. last `answer is (X)` / `answer: X` / `final answer X` match (case-insensitive),
/// 2. a standalone valid letter on the final non-empty line,
/// 3. the last standalone valid-letter token anywhere.
///
/// `None` signals extraction failure; a returned label is always in `valid`.
pub fn extract_answer(text: &str, valid: &[OptionLabel]) -> Option<OptionLabel> {
    assert!(!valid.is_empty(), "valid option set must be non-empty");
    let to_valid = |c: char| {
        let label = OptionLabel::new(c.to_ascii_uppercase())?;
        valid.contains(&label).then_some(label)
    };

    // Rule 1: last explicit answer-statement match.
    if let Some(label) = answer_pattern_re()
        .captures_iter(text)
        .filter_map(|cap| to_valid(cap[1].chars().next().unwrap()))
        .last()
    {
        return Some(label);
    }

    // Rule 2: final non-empty line is just a letter (punctuation-wrapped ok).
    if let Some(line) = text.lines().rev().find(|l| !l.trim().is_empty()) {
        let stripped: String = line
            .trim()
            .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
            .to_string();
        let mut chars = stripped.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if c.is_ascii_uppercase() {
                if let Some(label) = to_valid(c) {
                    return Some(label);
                }
            }
        }
    }

    // Rule 3: last standalone valid letter anywhere.
    standalone_letter_re()
        .captures_iter(text)
        .filter_map(|cap| to_valid(cap[1].chars().next().unwrap()))
        .last()
}

/// Parses the `VERDICT:` token emitted by the validate template.
/// Non-empty text without the token defaults to promising; empty text is
/// a dead end.
pub fn extract_verdict(text: &str) -> Verdict {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)\bVERDICT\s*:\s*(solved|promising|dead[\s_-]?end)").unwrap()
    });
    if let Some(cap) = re.captures(text) {
        let token = cap[1].to_ascii_lowercase();
        return match token.as_str() {
            "solved" => Verdict::Solved,
            "promising" => Verdict::Promising,
            _ => Verdict::DeadEnd,
        };
    }
    if text.trim().is_empty() {
        Verdict::DeadEnd
    } else {
        Verdict::Promising
    }
}

/// Parses the first integer after a `SCORE:` token, clamps into [0, 10],
/// and normalizes to [0, 1].
pub fn extract_score(text: &str) -> Result<f64, PromptError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\bSCORE\s*:\s*(-?\d+)").unwrap());
    let cap = re.captures(text).ok_or(PromptError::ScoreParse)?;
    let raw: i64 = cap[1].parse().map_err(|_| PromptError::ScoreParse)?;
    Ok(raw.clamp(0, 10) as f64 / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &str) -> Vec<OptionLabel> {
        s.chars().map(|c| OptionLabel::new(c).unwrap()).collect()
    }

    #[test]
    fn builtin_templates_parse_and_render() {
        let set = TemplateSet::builtin();
        let mut bindings = BTreeMap::new();
        bindings.insert("stem".to_string(), "the stem".to_string());
        bindings.insert("options".to_string(), "A) x\nB) y".to_string());
        let (system, user) = render(set.get(TemplateName::Decompose), &bindings).unwrap();
        assert!(!system.is_empty());
        assert!(user.contains("the stem"));
        assert!(user.contains("A) x"));
    }

    #[test]
    fn render_keeps_history_order() {
        let set = TemplateSet::builtin();
        let mut bindings = BTreeMap::new();
        bindings.insert("stem".to_string(), "stem".to_string());
        bindings.insert("options".to_string(), "opts".to_string());
        bindings.insert(
            "history".to_string(),
            "Step 1: first\nStep 2: second".to_string(),
        );
        let (_, user) = render(set.get(TemplateName::Extend), &bindings).unwrap();
        let first = user.find("Step 1: first").unwrap();
        let second = user.find("Step 2: second").unwrap();
        assert!(first < second);
    }

    #[test]
    fn missing_binding_is_an_error() {
        let set = TemplateSet::builtin();
        let mut bindings = BTreeMap::new();
        bindings.insert("stem".to_string(), "stem".to_string());
        let err = render(set.get(TemplateName::Decompose), &bindings).unwrap_err();
        assert_eq!(err, PromptError::MissingBinding("options".to_string()));
    }

    #[test]
    fn judge_template_places_both_candidates() {
        let set = TemplateSet::builtin();
        let mut bindings = BTreeMap::new();
        bindings.insert("stem".to_string(), "stem".to_string());
        bindings.insert("options".to_string(), "opts".to_string());
        bindings.insert("candidate_a".to_string(), "Option B: chain-b".to_string());
        bindings.insert("candidate_b".to_string(), "Option D: chain-d".to_string());
        let (_, user) = render(set.get(TemplateName::Judge), &bindings).unwrap();
        assert!(user.contains("Option B: chain-b"));
        assert!(user.contains("Option D: chain-d"));
    }

    #[test]
    fn answer_rule1_direct_match() {
        assert_eq!(
            extract_answer("Therefore, the answer is (C).", &labels("ABCDE")),
            Some(OptionLabel::new('C').unwrap())
        );
    }

    #[test]
    fn answer_rule1_last_match_outranks_earlier_mention() {
        assert_eq!(
            extract_answer("A is tempting. Final answer: B", &labels("ABCDE")),
            Some(OptionLabel::new('B').unwrap())
        );
    }

    #[test]
    fn answer_rule3_last_standalone_letter() {
        assert_eq!(
            extract_answer(
                "Options A and D both fit, but D explains the anemia.",
                &labels("ABCDE")
            ),
            Some(OptionLabel::new('D').unwrap())
        );
    }

    #[test]
    fn answer_rule2_final_line_letter() {
        assert_eq!(
            extract_answer("Working through it...\n\n(B)\n", &labels("ABCD")),
            Some(OptionLabel::new('B').unwrap())
        );
    }

    #[test]
    fn answer_never_outside_valid_set() {
        assert_eq!(extract_answer("The answer is (F).", &labels("ABCD")), None);
        assert_eq!(extract_answer("no letters here", &labels("ABCD")), None);
    }

    #[test]
    fn answer_stable_under_trailing_punctuation() {
        let valid = labels("ABCDE");
        let base = extract_answer("Final answer: B", &valid);
        assert_eq!(extract_answer("Final answer: B.  \n", &valid), base);
        assert_eq!(extract_answer("Final answer: B...", &valid), base);
    }

    #[test]
    fn verdict_token_and_defaults() {
        assert_eq!(extract_verdict("VERDICT: solved\nThe chain reaches ..."), Verdict::Solved);
        assert_eq!(
            extract_verdict("VERDICT: dead_end — contradicts the vignette"),
            Verdict::DeadEnd
        );
        assert_eq!(extract_verdict("looks plausible so far"), Verdict::Promising);
        assert_eq!(extract_verdict("   "), Verdict::DeadEnd);
    }

    #[test]
    fn score_parse_clamp_and_error() {
        assert_eq!(extract_score("SCORE: 8 — sound differential").unwrap(), 0.8);
        assert_eq!(extract_score("SCORE: 12").unwrap(), 1.0);
        assert_eq!(extract_score("score: -3").unwrap(), 0.0);
        assert_eq!(
            extract_score("no numeric judgment given").unwrap_err(),
            PromptError::ScoreParse
        );
    }
}
