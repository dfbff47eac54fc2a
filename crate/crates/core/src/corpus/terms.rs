use std::collections::{BTreeMap, HashMap, HashSet};

use super::{split_terms, Document, Query, QueryId};
use crate::error::{Error, Result};

/// Document frequencies over a corpus.
#[derive(Clone, Debug, Default)]
pub struct TermStats {
    n_docs: usize,
    df: HashMap<String, usize>,
    max_df: usize,
}

impl TermStats {
    pub fn from_docs(docs: &[Document]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for d in docs {
            let mut seen = HashSet::new();
            for field in [&d.title, &d.topic, &d.content] {
                for t in split_terms(field) {
                    if seen.insert(t.clone()) {
                        *df.entry(t).or_default() += 1;
                    }
                }
            }
        }
        let max_df = df.values().copied().max().unwrap_or(0);
        TermStats {
            n_docs: docs.len(),
            df,
            max_df,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    /// Smoothed inverse document frequency, `ln((N + 1) / (df + 1))`.
    pub fn idf(&self, term: &str) -> f64 {
        ((self.n_docs as f64 + 1.0) / (self.df(term) as f64 + 1.0)).ln()
    }

    /// IDF rescaled so the most common corpus term maps to 0 and an unseen term to 1.
    pub fn normalized_idf(&self, term: &str) -> f64 {
        let hi = (self.n_docs as f64 + 1.0).ln();
        let lo = ((self.n_docs as f64 + 1.0) / (self.max_df as f64 + 1.0)).ln();
        if hi - lo <= 0.0 {
            return 1.0;
        }
        ((self.idf(term) - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// Term-importance scores of one query.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TermScores(pub BTreeMap<String, f64>);

impl TermScores {
    pub fn get(&self, term: &str) -> f64 {
        self.0.get(term).copied().unwrap_or(0.0)
    }

    /// The `n` highest-scoring terms; ties broken by lexicographic term order.
    /// Returns every term when the query has fewer than `n`.
    pub fn top(&self, n: usize) -> Vec<&str> {
        let mut terms: Vec<(&str, f64)> = self.0.iter().map(|(t, &s)| (t.as_str(), s)).collect();
        terms.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        terms.into_iter().take(n).map(|(t, _)| t).collect()
    }

    fn all_above(&self, terms: &[&str], threshold: f64) -> bool {
        terms.iter().all(|t| self.get(t) > threshold)
    }
}

/// Pluggable stand-in for a query planner.
pub trait TermScorer {
    fn score(&self, query: &Query) -> Result<TermScores>;
}

/// Default scorer: min-max normalized IDF.
pub struct IdfScorer<'a> {
    pub stats: &'a TermStats,
}

impl TermScorer for IdfScorer<'_> {
    fn score(&self, query: &Query) -> Result<TermScores> {
        score_terms(query, self.stats)
    }
}

pub fn score_terms(query: &Query, stats: &TermStats) -> Result<TermScores> {
    let terms = split_terms(&query.text);
    if terms.is_empty() {
        return Err(Error::EmptyQuery);
    }
    Ok(TermScores(
        terms
            .into_iter()
            .map(|t| {
                let s = stats.normalized_idf(&t);
                (t, s)
            })
            .collect(),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssociationResult {
    /// All of q1's top-2 terms score above the click threshold in q2.
    pub click_a_q1_from_q2: bool,
    /// All of q2's top-2 terms score above the click threshold in q1.
    pub click_a_q2_from_q1: bool,
    /// Top-4 terms clear the relevance threshold in both directions.
    pub rel_a: bool,
}

impl AssociationResult {
    pub fn any(&self) -> bool {
        self.click_a_q1_from_q2 || self.click_a_q2_from_q1 || self.rel_a
    }
}

pub fn associate_scores(
    s1: &TermScores,
    s2: &TermScores,
    th_click: f64,
    th_rel: f64,
) -> AssociationResult {
    AssociationResult {
        click_a_q1_from_q2: s2.all_above(&s1.top(2), th_click),
        click_a_q2_from_q1: s1.all_above(&s2.top(2), th_click),
        rel_a: s2.all_above(&s1.top(4), th_rel) && s1.all_above(&s2.top(4), th_rel),
    }
}

pub fn match_association(
    q1: &Query,
    q2: &Query,
    scorer: &dyn TermScorer,
    th_click: f64,
    th_rel: f64,
) -> Result<AssociationResult> {
    let s1 = scorer.score(q1)?;
    let s2 = scorer.score(q2)?;
    Ok(associate_scores(&s1, &s2, th_click, th_rel))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryAssociation {
    pub q1: QueryId,
    pub q2: QueryId,
    pub result: AssociationResult,
}

/// Runs association matching over every unordered query pair, returning the
/// pairs with at least one association (`q1` precedes `q2` in input order).
///
/// With non-negative thresholds a pair can only associate if one query
/// contains the other's top-ranked term, so candidates come from an inverted
/// index instead of the full quadratic scan.
pub fn associate_all(
    queries: &[Query],
    scorer: &dyn TermScorer,
    th_click: f64,
    th_rel: f64,
) -> Result<Vec<QueryAssociation>> {
    let scores: Vec<TermScores> = queries
        .iter()
        .map(|q| scorer.score(q))
        .collect::<Result<_>>()?;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if th_click >= 0.0 && th_rel >= 0.0 {
        let mut postings: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, s) in scores.iter().enumerate() {
            for t in s.0.keys() {
                postings.entry(t.as_str()).or_default().push(i);
            }
        }
        let mut seen = HashSet::new();
        for (i, s) in scores.iter().enumerate() {
            let Some(&top) = s.top(1).first() else {
                continue;
            };
            for &j in &postings[top] {
                if i != j && seen.insert((i.min(j), i.max(j))) {
                    pairs.push((i.min(j), i.max(j)));
                }
            }
        }
        pairs.sort_unstable();
    } else {
        for i in 0..queries.len() {
            for j in i + 1..queries.len() {
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs
        .into_iter()
        .filter_map(|(i, j)| {
            let result = associate_scores(&scores[i], &scores[j], th_click, th_rel);
            result.any().then_some(QueryAssociation {
                q1: queries[i].id,
                q2: queries[j].id,
                result,
            })
        })
        .collect())
}
