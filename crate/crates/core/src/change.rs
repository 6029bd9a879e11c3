//! Semantic change scoring (frequency-corrected diagonal Mahalanobis
//! distance between pre- and post-split mean embeddings) and lexical change
//! scoring (ratio of smoothed relative frequencies), with top-K ranking.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, Year};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::io::{csv_err, csv_reader, schema_banner, write_atomic, write_err};
use crate::store::{MomentTable, WordMoments};

/// Floor applied to each per-component variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Additive smoothing on pre/post counts in the lexical ratio.
pub const LEXICAL_SMOOTHING: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Semantic,
    Lexical,
}

impl ChangeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChangeKind::Semantic => "semantic",
            ChangeKind::Lexical => "lexical",
        }
    }
}

impl std::str::FromStr for ChangeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(ChangeKind::Semantic),
            "lexical" => Ok(ChangeKind::Lexical),
            _ => Err(Error::InvalidArgument(format!("unknown change kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeScoreSeries {
    pub word_id: u32,
    pub scores: Vec<(Year, f64)>,
    pub t_star: Year,
    pub max_score: f64,
}

impl ChangeScoreSeries {
    fn from_scores(word_id: u32, scores: Vec<(Year, f64)>) -> Result<Self> {
        // Strict comparison keeps the earliest year on ties.
        let mut best: Option<(Year, f64)> = None;
        for &(y, s) in &scores {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((y, s));
            }
        }
        let (t_star, max_score) = best.ok_or(Error::Unscorable(word_id))?;
        Ok(ChangeScoreSeries {
            word_id,
            scores,
            t_star,
            max_score,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeCandidate {
    pub word_id: u32,
    pub kind: ChangeKind,
    pub t_star: Year,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Interior years of the corpus span; the first and last year are excluded.
pub fn candidate_years(year_range: (Year, Year)) -> Vec<Year> {
    ((year_range.0 + 1)..year_range.1).collect()
}

/// `sqrt(m- m+) * sum_d (v-_d - v+_d)^2 / s_d` at split year `t`.
pub fn semantic_change_score(moments: &WordMoments, t: Year) -> Result<f64> {
    let split = moments.split_offsets(t)?;
    let var = moments.variance();
    let dist: f64 = split
        .v_minus
        .iter()
        .zip(&split.v_plus)
        .zip(&var)
        .map(|((a, b), s)| {
            let d = a - b;
            d * d / s.max(VARIANCE_FLOOR)
        })
        .sum();
    Ok(((split.m_minus as f64) * (split.m_plus as f64)).sqrt() * dist)
}

pub fn transition_point(
    word_id: u32,
    moments: &WordMoments,
    candidate_years: &[Year],
) -> Result<ChangeScoreSeries> {
    let scores = candidate_years
        .iter()
        .filter_map(|&t| semantic_change_score(moments, t).ok().map(|s| (t, s)))
        .collect();
    ChangeScoreSeries::from_scores(word_id, scores)
}

fn rank(mut series: Vec<ChangeScoreSeries>, kind: ChangeKind, k: usize) -> Result<Vec<ChangeCandidate>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    series.sort_by(|a, b| {
        b.max_score
            .total_cmp(&a.max_score)
            .then(a.word_id.cmp(&b.word_id))
    });
    if k > series.len() {
        log::warn!(
            "requested top {k} {kind} changes but only {} words are scorable",
            series.len()
        );
    }
    Ok(series
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, s)| ChangeCandidate {
            word_id: s.word_id,
            kind,
            t_star: s.t_star,
            score: s.max_score,
            rank: i + 1,
        })
        .collect())
}

/// Score every word in `table` with id below `vocab_len` and keep the top `k`.
pub fn rank_semantic_changes(
    table: &MomentTable,
    vocab_len: usize,
    k: usize,
    exec: Execution,
) -> Result<Vec<ChangeCandidate>> {
    let years = candidate_years(table.year_range);
    let words: Vec<(&u32, &WordMoments)> = table
        .words
        .iter()
        .filter(|(&w, _)| (w as usize) < vocab_len)
        .collect();
    let series = exec::map(exec, &words, |(&w, m)| transition_point(w, m, &years).ok())
        .into_iter()
        .flatten()
        .collect();
    rank(series, ChangeKind::Semantic, k)
}

/// Ratio of smoothed relative frequency after `t` to that up to `t`.
pub fn lexical_change_score(
    counts: &BTreeMap<Year, u64>,
    totals: &BTreeMap<Year, u64>,
    t: Year,
) -> Result<f64> {
    let side = |m: &BTreeMap<Year, u64>| -> (u64, u64) {
        let pre = m.range(..=t).map(|(_, c)| c).sum();
        let post = m.range(t + 1..).map(|(_, c)| c).sum();
        (pre, post)
    };
    let (pre_total, post_total) = side(totals);
    if pre_total == 0 || post_total == 0 {
        return Err(Error::DegenerateSplit(t));
    }
    let (pre, post) = side(counts);
    let rel_pre = (pre as f64 + LEXICAL_SMOOTHING) / pre_total as f64;
    let rel_post = (post as f64 + LEXICAL_SMOOTHING) / post_total as f64;
    Ok(rel_post / rel_pre)
}

pub fn lexical_series(
    word_id: u32,
    counts: &BTreeMap<Year, u64>,
    totals: &BTreeMap<Year, u64>,
    candidate_years: &[Year],
) -> Result<ChangeScoreSeries> {
    let scores = candidate_years
        .iter()
        .filter_map(|&t| lexical_change_score(counts, totals, t).ok().map(|s| (t, s)))
        .collect();
    ChangeScoreSeries::from_scores(word_id, scores)
}

pub fn rank_lexical_changes(
    vocab: &Vocabulary,
    totals: &BTreeMap<Year, u64>,
    k: usize,
    exec: Execution,
) -> Result<Vec<ChangeCandidate>> {
    let years = candidate_years(vocab.year_range);
    let ids: Vec<u32> = (0..vocab.len() as u32).collect();
    let series = exec::map(exec, &ids, |&w| {
        lexical_series(w, &vocab.yearly_counts_by_id(w), totals, &years).ok()
    })
    .into_iter()
    .flatten()
    .collect();
    rank(series, ChangeKind::Lexical, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRow {
    pub word: String,
    pub kind: ChangeKind,
    pub t_star: Year,
    pub score: f64,
    pub rank: usize,
}

pub fn write_changes(path: &Path, words: &[String], changes: &[ChangeCandidate]) -> Result<()> {
    write_atomic(path, |out| {
        writeln!(out, "{}", schema_banner("changes")).map_err(write_err(path))?;
        let mut w = crate::io::csv_writer(out, b'\t');
        for c in changes {
            w.serialize(ChangeRow {
                word: words[c.word_id as usize].clone(),
                kind: c.kind,
                t_star: c.t_star,
                score: c.score,
                rank: c.rank,
            })
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(write_err(path))
    })
}

pub fn read_changes(path: &Path) -> Result<Vec<ChangeRow>> {
    let mut rdr = csv_reader(path, b'\t')?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<ChangeRow>, _>>()
        .map_err(|e| csv_err(path, e))
}
