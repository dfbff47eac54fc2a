//! Retrieval metrics: recall at K, AUC and contrastive entropy.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{DocId, Document, Query, QueryId, Truth};
use crate::encoder::{embed_documents, embed_queries, DocField, QueryForm, Tokenizer, TowerParams};
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 4] = [50, 100, 500, 1000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: BTreeMap<usize, f64>,
    pub successes: BTreeMap<usize, usize>,
    pub n_queries: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

/// Fraction of queries whose ground-truth doc appears in the top `k` of its ranking.
pub fn recall_at_k(
    rankings: &HashMap<QueryId, Vec<DocId>>,
    truth: &[Truth],
    ks: &[usize],
) -> Result<RecallReport> {
    let mut successes: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for t in truth {
        let ranking = rankings
            .get(&t.query_id)
            .ok_or(Error::MissingRanking(t.query_id))?;
        if let Some(rank) = ranking.iter().position(|&d| d == t.doc_id) {
            for (&k, n) in successes.iter_mut() {
                if rank < k {
                    *n += 1;
                }
            }
        }
    }
    let n = truth.len();
    let recall = successes
        .iter()
        .map(|(&k, &s)| (k, if n == 0 { 0.0 } else { s as f64 / n as f64 }))
        .collect();
    Ok(RecallReport {
        recall,
        successes,
        n_queries: n,
    })
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores count ½.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain(f64::NAN));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropyConfig {
    pub tau: f64,
    /// Prefix length; `None` uses the full embedding.
    pub m: Option<usize>,
    pub pool: usize,
    pub max_len: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig {
            tau: 0.05,
            m: None,
            pool: 480,
            max_len: 128,
        }
    }
}

/// Mean query-to-document InfoNCE where row `i` of `q` pairs with row `i` of `d`.
///
/// Rows are split into consecutive pools of `pool` pairs, dropping a trailing
/// partial pool; fewer than `pool` rows form a single pool.
pub fn entropy_from_embeddings(
    q: &Array2<f64>,
    d: &Array2<f64>,
    tau: f64,
    m: usize,
    pool: usize,
) -> Result<f64> {
    if q.dim() != d.dim() || q.nrows() == 0 {
        return Err(Error::Shape(format!(
            "query {:?} vs doc {:?}",
            q.dim(),
            d.dim()
        )));
    }
    if m == 0 || m > q.ncols() {
        return Err(Error::MrlDim(m));
    }
    if !(tau > 0.0) || pool == 0 {
        return Err(Error::config("entropy needs tau > 0 and a non-empty pool"));
    }
    let unit = |x: &Array2<f64>, what: &str| -> Result<Array2<f64>> {
        let mut u = x.slice(s![.., ..m]).to_owned();
        for (i, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(Error::DegenerateEmbedding(format!("{what} row {i}")));
            }
            row /= n;
        }
        Ok(u)
    };
    let (qu, du) = (unit(q, "query")?, unit(d, "document")?);
    let pool = pool.min(q.nrows());
    let mut total = 0.0;
    let mut count = 0;
    for start in (0..q.nrows()).step_by(pool) {
        if start + pool > q.nrows() {
            break;
        }
        let r = s![start..start + pool, ..];
        let z = qu.slice(r).dot(&du.slice(r).t()) / tau;
        for (i, row) in z.outer_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[i];
            count += 1;
        }
    }
    let h = total / count as f64;
    if !h.is_finite() {
        return Err(Error::Numerics {
            term: "contrastive entropy".into(),
            step: None,
        });
    }
    Ok(h)
}

/// Contrastive entropy of `(query, positive doc)` pairs under the given towers,
/// using the `[EMB]` document embedding.
pub fn contrastive_entropy(
    doc: &TowerParams,
    query: &TowerParams,
    tok: &Tokenizer,
    pairs: &[(Query, Document)],
    cfg: &EntropyConfig,
) -> Result<f64> {
    let queries: Vec<Query> = pairs.iter().map(|(q, _)| q.clone()).collect();
    let docs: Vec<Document> = pairs.iter().map(|(_, d)| d.clone()).collect();
    let q = embed_queries(query, tok, &queries, QueryForm::Teacher, cfg.max_len)?;
    let [_, _, d] = embed_documents(doc, tok, &docs, cfg.max_len)?;
    debug_assert_eq!(DocField::Emb as usize, 2);
    entropy_from_embeddings(&q, &d, cfg.tau, cfg.m.unwrap_or(q.ncols()), cfg.pool)
}
