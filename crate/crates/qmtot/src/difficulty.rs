//! Difficulty banding via the reasoning-boundary / bias-boundary rules:
//! easy at or above the accuracy threshold K1, hard at or below the
//! random-guess baseline, medium in between. Accuracy is measured with
//! repeated CoT sampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Question;
use crate::engine::Engine;

#[derive(Debug, Error)]
pub enum DifficultyError {
    #[error("accuracy out of [0,1]: {0}")]
    Range(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("question {0} has no gold answer")]
    MissingGold(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DifficultyConfig {
    /// Accuracy threshold K1 for the easy band.
    pub k1: f64,
    /// Bias boundary: random-guess accuracy. `None` resolves to
    /// 1/|options| per question.
    #[serde(default)]
    pub omega: Option<f64>,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            k1: 0.9,
            omega: None,
        }
    }
}

impl DifficultyConfig {
    pub fn resolve_omega(&self, q: &Question) -> f64 {
        self.omega.unwrap_or(1.0 / q.options.len() as f64)
    }

    pub fn validate(&self, omega: f64) -> Result<(), DifficultyError> {
        if !(0.0 < self.k1 && self.k1 <= 1.0) {
            return Err(DifficultyError::Config(format!("k1 out of (0,1]: {}", self.k1)));
        }
        if !(0.0 < omega && omega < 1.0) {
            return Err(DifficultyError::Config(format!("omega out of (0,1): {omega}")));
        }
        if omega >= self.k1 {
            return Err(DifficultyError::Config(format!(
                "omega {omega} must be below k1 {}",
                self.k1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Easy,
    Medium,
    Hard,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Level::Easy => "easy",
            Level::Medium => "medium",
            Level::Hard => "hard",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyLabel {
    pub level: Level,
    pub acc: f64,
    pub samples: usize,
}

/// One manifest line: {question_id, acc, samples, level}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub question_id: String,
    pub acc: f64,
    pub samples: usize,
    pub level: Level,
}

/// Fraction of `n` CoT samples answering the gold label; unanswered
/// samples count as incorrect.
pub fn measure_accuracy(
    q: &Question,
    n: usize,
    engine: &Engine<'_>,
) -> Result<f64, DifficultyError> {
    if q.gold.is_none() {
        return Err(DifficultyError::MissingGold(q.id.clone()));
    }
    assert!(n >= 1);
    let chains = engine.run_cot(q, n);
    let correct = chains.iter().filter(|c| c.correct == Some(true)).count();
    Ok(correct as f64 / n as f64)
}

/// Closed boundaries per the banding rule: easy iff acc >= k1, hard iff
/// acc <= omega, medium otherwise.
pub fn classify(
    acc: f64,
    cfg: &DifficultyConfig,
    omega: f64,
    samples: usize,
) -> Result<DifficultyLabel, DifficultyError> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(DifficultyError::Range(acc));
    }
    cfg.validate(omega)?;
    let level = if acc >= cfg.k1 {
        Level::Easy
    } else if acc <= omega {
        Level::Hard
    } else {
        Level::Medium
    };
    Ok(DifficultyLabel {
        level,
        acc,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Purpose, ScriptBuilder};
    use crate::engine::Engine;
    use crate::testutil::{question, scripted_engine};

    #[test]
    fn classify_reference_bands() {
        let cfg = DifficultyConfig::default();
        assert_eq!(classify(0.92, &cfg, 0.25, 5).unwrap().level, Level::Easy);
        assert_eq!(classify(0.25, &cfg, 0.25, 5).unwrap().level, Level::Hard);
        assert_eq!(classify(0.50, &cfg, 0.25, 5).unwrap().level, Level::Medium);
        // closed boundaries
        assert_eq!(classify(0.9, &cfg, 0.25, 5).unwrap().level, Level::Easy);
        assert!(classify(1.2, &cfg, 0.25, 5).is_err());
    }

    #[test]
    fn omega_defaults_to_inverse_option_count() {
        let cfg = DifficultyConfig::default();
        assert_eq!(cfg.resolve_omega(&question("q", 5, None)), 0.2);
        assert_eq!(cfg.resolve_omega(&question("q", 4, None)), 0.25);
    }

    #[test]
    fn config_rejects_omega_at_or_above_k1() {
        let cfg = DifficultyConfig { k1: 0.2, omega: None };
        assert!(cfg.validate(0.25).is_err());
        assert!(cfg.validate(0.2).is_err());
    }

    #[test]
    fn measure_accuracy_counts_unanswered_as_wrong() {
        let mut script = ScriptBuilder::new();
        script.push("q1", Purpose::Cot, "The answer is (B).");
        script.push("q1", Purpose::Cot, "The answer is (B).");
        script.push("q1", Purpose::Cot, "no idea");
        script.push("q1", Purpose::Cot, "The answer is (C).");
        script.push("q1", Purpose::Cot, "The answer is (B).");
        let (backend, templates, cfg, _dir) = scripted_engine(&script);
        let engine = Engine::new(&backend, &templates, &cfg);
        let q = question("q1", 4, Some('B'));
        let acc = measure_accuracy(&q, 5, &engine).unwrap();
        assert_eq!(acc, 0.6);
    }

    #[test]
    fn measure_accuracy_direct_count() {
        let mut script = ScriptBuilder::new();
        for letter in ["B", "B", "C", "B"] {
            script.push("q1", Purpose::Cot, &format!("The answer is ({letter})."));
        }
        let (backend, templates, cfg, _dir) = scripted_engine(&script);
        let engine = Engine::new(&backend, &templates, &cfg);
        let q = question("q1", 4, Some('B'));
        assert_eq!(measure_accuracy(&q, 4, &engine).unwrap(), 0.75);
    }

    #[test]
    fn measure_accuracy_requires_gold() {
        let script = ScriptBuilder::new();
        let (backend, templates, cfg, _dir) = scripted_engine(&script);
        let engine = Engine::new(&backend, &templates, &cfg);
        let q = question("q1", 4, None);
        assert!(matches!(
            measure_accuracy(&q, 1, &engine),
            Err(DifficultyError::MissingGold(_))
        ));
    }
}
