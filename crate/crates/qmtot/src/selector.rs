//! Decision workflow: per-option aggregation of fused scores, the
//! agreement check between argmax-average and argmax-max, and the judge
//! fallback when they disagree.

use serde::{Deserialize, Serialize};

use crate::domain::{ChainRecord, OptionLabel};

/// Per-option aggregates over scored, answered chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionAggregate {
    pub option: OptionLabel,
    pub count: usize,
    pub avg_fs: f64,
    pub max_fs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Agreement,
    Judge,
    FallbackCotsc,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<OptionLabel>,
    pub route: Route,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_winner: Option<OptionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_winner: Option<OptionLabel>,
    /// True when the judge route degraded to the argmax-average side
    /// (unparseable judge reply or judge error).
    #[serde(default)]
    pub judge_fallback: bool,
    pub aggregates: Vec<OptionAggregate>,
}

/// Groups scored, answered chains by option. Unanswered or unscored
/// chains are excluded; empty input yields an empty list. Output is
/// ordered alphabetically by option.
pub fn aggregate(chains: &[ChainRecord]) -> Vec<OptionAggregate> {
    let mut grouped: std::collections::BTreeMap<OptionLabel, Vec<f64>> = Default::default();
    for chain in chains {
        if let (Some(answer), Some(scores)) = (chain.answer, chain.scores) {
            grouped.entry(answer).or_default().push(scores.fs);
        }
    }
    grouped
        .into_iter()
        .map(|(option, scores)| OptionAggregate {
            option,
            count: scores.len(),
            avg_fs: scores.iter().sum::<f64>() / scores.len() as f64,
            max_fs: scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
        })
        .collect()
}

/// Argmax over aggregates by `key`, ties broken alphabetically.
fn argmax(aggs: &[OptionAggregate], key: impl Fn(&OptionAggregate) -> f64) -> Option<OptionLabel> {
    let mut best: Option<(OptionLabel, f64)> = None;
    for agg in aggs {
        let v = key(agg);
        best = match best {
            Some((label, bv)) if v > bv || (v == bv && agg.option < label) => {
                Some((agg.option, v))
            }
            None => Some((agg.option, v)),
            other => other,
        };
    }
    best.map(|(label, _)| label)
}

/// Equal argmax winners select directly; different winners go to the
/// judge; no aggregates at all fall back to the CoT-SC vote when one
/// exists, else abstain.
///
/// `judge` receives (avg_winner, max_winner) and returns the chosen side
/// plus a fallback flag; it is invoked iff the winners differ.
pub fn decide(
    aggs: &[OptionAggregate],
    cotsc_vote: Option<OptionLabel>,
    judge: impl FnOnce(OptionLabel, OptionLabel) -> (OptionLabel, bool),
) -> SelectionResult {
    if aggs.is_empty() {
        return match cotsc_vote {
            Some(vote) => SelectionResult {
                chosen: Some(vote),
                route: Route::FallbackCotsc,
                avg_winner: None,
                max_winner: None,
                judge_fallback: false,
                aggregates: Vec::new(),
            },
            None => SelectionResult {
                chosen: None,
                route: Route::Abstain,
                avg_winner: None,
                max_winner: None,
                judge_fallback: false,
                aggregates: Vec::new(),
            },
        };
    }

    let avg_winner = argmax(aggs, |a| a.avg_fs).expect("non-empty aggregates");
    let max_winner = argmax(aggs, |a| a.max_fs).expect("non-empty aggregates");

    if avg_winner == max_winner {
        SelectionResult {
            chosen: Some(avg_winner),
            route: Route::Agreement,
            avg_winner: Some(avg_winner),
            max_winner: Some(max_winner),
            judge_fallback: false,
            aggregates: aggs.to_vec(),
        }
    } else {
        let (chosen, judge_fallback) = judge(avg_winner, max_winner);
        debug_assert!(chosen == avg_winner || chosen == max_winner);
        SelectionResult {
            chosen: Some(chosen),
            route: Route::Judge,
            avg_winner: Some(avg_winner),
            max_winner: Some(max_winner),
            judge_fallback,
            aggregates: aggs.to_vec(),
        }
    }
}

/// The chain with the highest fs among scored chains answering `option`.
pub fn best_chain_for<'a>(
    chains: &'a [ChainRecord],
    option: OptionLabel,
) -> Option<&'a ChainRecord> {
    chains
        .iter()
        .filter(|c| c.answer == Some(option) && c.scores.is_some())
        .max_by(|a, b| {
            a.scores
                .unwrap()
                .fs
                .partial_cmp(&b.scores.unwrap().fs)
                .unwrap()
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ChainScores;

    fn chain(letter: Option<char>, fs: Option<f64>) -> ChainRecord {
        ChainRecord {
            question_id: "q".to_string(),
            steps: vec![],
            answer: letter.map(|c| OptionLabel::new(c).unwrap()),
            scores: fs.map(|fs| ChainScores { r: 0.5, c: 0.5, fs }),
            correct: None,
        }
    }

    fn no_judge(_a: OptionLabel, _b: OptionLabel) -> (OptionLabel, bool) {
        panic!("judge must not be invoked")
    }

    #[test]
    fn aggregate_hand_arithmetic() {
        let chains = vec![
            chain(Some('A'), Some(2.0)),
            chain(Some('A'), Some(3.0)),
            chain(Some('B'), Some(2.6)),
            chain(Some('C'), None),  // unscored: excluded
            chain(None, Some(9.9)),  // unanswered: excluded
        ];
        let aggs = aggregate(&chains);
        assert_eq!(aggs.len(), 2);
        assert_eq!(aggs[0].option.letter(), 'A');
        assert_eq!(aggs[0].count, 2);
        assert_eq!(aggs[0].avg_fs, 2.5);
        assert_eq!(aggs[0].max_fs, 3.0);
        assert_eq!(aggs[1].option.letter(), 'B');
        assert_eq!(aggs[1].count, 1);
        assert_eq!(aggs[1].avg_fs, 2.6);
        assert_eq!(aggs[1].max_fs, 2.6);
    }

    #[test]
    fn aggregate_empty_cases() {
        assert!(aggregate(&[]).is_empty());
        let all_unscored = vec![chain(Some('A'), None), chain(Some('B'), None)];
        assert!(aggregate(&all_unscored).is_empty());
        let single = aggregate(&[chain(Some('C'), Some(1.5))]);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].count, 1);
        assert_eq!(single[0].avg_fs, 1.5);
        assert_eq!(single[0].max_fs, 1.5);
    }

    #[test]
    fn decide_agreement_skips_judge() {
        // A: avg 2.5, max 3.0; B: avg 1.0, max 1.0 -> agreement on A
        let chains = vec![
            chain(Some('A'), Some(2.0)),
            chain(Some('A'), Some(3.0)),
            chain(Some('B'), Some(1.0)),
        ];
        let result = decide(&aggregate(&chains), None, no_judge);
        assert_eq!(result.route, Route::Agreement);
        assert_eq!(result.chosen.unwrap().letter(), 'A');
        assert_eq!(result.avg_winner, result.max_winner);
    }

    #[test]
    fn decide_disagreement_invokes_judge() {
        // A: avg 2.5, max 3.0; B: avg 2.6, max 2.6 -> avg says B, max says A
        let chains = vec![
            chain(Some('A'), Some(2.0)),
            chain(Some('A'), Some(3.0)),
            chain(Some('B'), Some(2.6)),
        ];
        let result = decide(&aggregate(&chains), None, |avg, max| {
            assert_eq!(avg.letter(), 'B');
            assert_eq!(max.letter(), 'A');
            (max, false)
        });
        assert_eq!(result.route, Route::Judge);
        assert_eq!(result.chosen.unwrap().letter(), 'A');
        assert!(!result.judge_fallback);
    }

    #[test]
    fn decide_empty_falls_back_or_abstains() {
        let vote = OptionLabel::new('C').unwrap();
        let result = decide(&[], Some(vote), no_judge);
        assert_eq!(result.route, Route::FallbackCotsc);
        assert_eq!(result.chosen, Some(vote));

        let result = decide(&[], None, no_judge);
        assert_eq!(result.route, Route::Abstain);
        assert_eq!(result.chosen, None);
    }

    #[test]
    fn argmax_ties_break_alphabetically() {
        let chains = vec![chain(Some('B'), Some(2.0)), chain(Some('A'), Some(2.0))];
        let result = decide(&aggregate(&chains), None, no_judge);
        assert_eq!(result.chosen.unwrap().letter(), 'A');
    }

    #[test]
    fn permutation_invariance() {
        let mut chains = vec![
            chain(Some('A'), Some(2.0)),
            chain(Some('B'), Some(2.7)),
            chain(Some('A'), Some(3.0)),
            chain(Some('C'), Some(1.2)),
        ];
        let baseline = decide(&aggregate(&chains), None, |_, m| (m, false));
        chains.reverse();
        let shuffled = decide(&aggregate(&chains), None, |_, m| (m, false));
        assert_eq!(baseline, shuffled);
    }

    #[test]
    fn best_chain_is_max_fs() {
        let chains = vec![
            chain(Some('A'), Some(2.0)),
            chain(Some('A'), Some(3.0)),
            chain(Some('B'), Some(2.6)),
        ];
        let a = OptionLabel::new('A').unwrap();
        assert_eq!(best_chain_for(&chains, a).unwrap().scores.unwrap().fs, 3.0);
    }
}
