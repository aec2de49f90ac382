//! Ranking metrics for response selection: `R_n@k`, MAP, MRR and P@1.
//!
//! Candidates are ranked by descending score; equal scores keep input
//! order. Contexts without any relevant candidate are left out of every
//! mean and counted in [`MetricReport::contexts_skipped`].

use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{Conversation, Dataset, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub context_id: String,
    /// `(score, relevant)` in input order.
    pub candidates: Vec<(f64, bool)>,
}

impl RankedList {
    pub fn new(context_id: impl Into<String>, candidates: Vec<(f64, bool)>) -> Result<Self> {
        let context_id = context_id.into();
        if candidates.is_empty() {
            return Err(Error::CandidateCount {
                id: context_id,
                found: 0,
                expected: 1,
            });
        }
        Ok(Self { context_id, candidates })
    }

    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    /// Input indices in rank order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.sort_by(|&a, &b| self.candidates[b].0.total_cmp(&self.candidates[a].0));
        idx
    }

    /// 1-based ranks of the relevant candidates, ascending.
    pub fn relevant_ranks(&self) -> Vec<usize> {
        self.ranking()
            .into_iter()
            .enumerate()
            .filter(|&(_, i)| self.candidates[i].1)
            .map(|(r, _)| r + 1)
            .collect()
    }

    pub fn has_relevant(&self) -> bool {
        self.candidates.iter().any(|c| c.1)
    }
}

/// 1 if any relevant candidate ranks within the top `k`, else 0.
pub fn recall_at_k(list: &RankedList, k: usize) -> Result<u8> {
    if k == 0 || k > list.n() {
        return Err(Error::RankOutOfRange { k, n: list.n() });
    }
    Ok(list.relevant_ranks().first().is_some_and(|&r| r <= k) as u8)
}

/// Mean of precision at each relevant candidate's rank.
pub fn average_precision(list: &RankedList) -> Option<f64> {
    let ranks = list.relevant_ranks();
    if ranks.is_empty() {
        return None;
    }
    let sum: f64 = ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum();
    Some(sum / ranks.len() as f64)
}

/// Reciprocal rank of the first relevant candidate.
pub fn reciprocal_rank(list: &RankedList) -> Option<f64> {
    list.relevant_ranks().first().map(|&r| 1.0 / r as f64)
}

/// 1 if the top-ranked candidate is relevant.
pub fn precision_at_1(list: &RankedList) -> f64 {
    let top = list.ranking()[0];
    if list.candidates[top].1 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_5: f64,
    pub contexts_evaluated: usize,
    pub contexts_skipped: usize,
}

impl MetricReport {
    /// Column names and values in table order.
    pub fn columns(&self) -> [(&'static str, f64); 6] {
        [
            ("MAP", self.map),
            ("MRR", self.mrr),
            ("P1", self.p_at_1),
            ("R1", self.r_at_1),
            ("R2", self.r_at_2),
            ("R5", self.r_at_5),
        ]
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for (name, v) in self.columns() {
            let _ = write!(head, "{name:>8}");
            let _ = write!(row, "{v:>8.4}");
        }
        format!(
            "{head}\n{row}\ncontexts evaluated: {}, skipped (no relevant candidate): {}\n",
            self.contexts_evaluated, self.contexts_skipped
        )
    }

    /// `NAME=value` lines; values print with full round-trip precision.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (name, v) in self.columns() {
            let _ = writeln!(s, "{name}={v}");
        }
        let _ = writeln!(s, "contexts_evaluated={}", self.contexts_evaluated);
        let _ = writeln!(s, "contexts_skipped={}", self.contexts_skipped);
        s
    }
}

/// Means of the per-context metrics. `R@k` uses `min(k, n)` for lists
/// shorter than `k`.
pub fn aggregate(lists: &[RankedList]) -> MetricReport {
    let mut report = MetricReport::default();
    for list in lists {
        let (Some(ap), Some(rr)) = (average_precision(list), reciprocal_rank(list)) else {
            report.contexts_skipped += 1;
            continue;
        };
        let recall = |k: usize| recall_at_k(list, k.min(list.n())).expect("k clamped to n") as f64;
        report.contexts_evaluated += 1;
        report.map += ap;
        report.mrr += rr;
        report.p_at_1 += precision_at_1(list);
        report.r_at_1 += recall(1);
        report.r_at_2 += recall(2);
        report.r_at_5 += recall(5);
    }
    if report.contexts_evaluated > 0 {
        let n = report.contexts_evaluated as f64;
        for v in [
            &mut report.map,
            &mut report.mrr,
            &mut report.p_at_1,
            &mut report.r_at_1,
            &mut report.r_at_2,
            &mut report.r_at_5,
        ] {
            *v /= n;
        }
    }
    report
}

/// Default candidates per test context.
pub const TEST_CANDIDATES: usize = 10;

/// Scores each context group of `test` and builds its ranked list. With
/// `expected_n`, every context must have exactly that many candidates.
pub fn ranked_lists<F>(test: &Dataset, expected_n: Option<usize>, mut scorer: F) -> Result<Vec<RankedList>>
where
    F: FnMut(&Conversation, &Utterance) -> f64,
{
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    test.groups()
        .into_iter()
        .map(|g| {
            if let Some(n) = expected_n.filter(|&n| n != g.examples.len()) {
                return Err(Error::CandidateCount {
                    id: g.conversation.id().to_string(),
                    found: g.examples.len(),
                    expected: n,
                });
            }
            let cands = g
                .examples
                .iter()
                .map(|e| (scorer(&e.context, &e.response), e.label.is_positive()))
                .collect();
            RankedList::new(g.conversation.id(), cands)
        })
        .collect()
}

/// Ranks every test context with `scorer` and aggregates the metrics.
pub fn evaluate<F>(test: &Dataset, expected_n: Option<usize>, scorer: F) -> Result<MetricReport>
where
    F: FnMut(&Conversation, &Utterance) -> f64,
{
    Ok(aggregate(&ranked_lists(test, expected_n, scorer)?))
}
