use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocId, LabeledPair, Query, QueryId, Truth};
use crate::encoder::{embed_queries, QueryForm, Tokenizer, TowerParams};
use crate::error::{Error, Result};
use crate::eval::{auc, entropy_from_embeddings, recall_at_k, RecallReport};
use crate::index::{exact_search, normalize_rows, IvfPqIndex};
use crate::qkd::mean_relative_error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub ks: Vec<usize>,
    pub nprobe: usize,
    /// Oracle score at or above which a pair counts as satisfying.
    pub sat_threshold: f64,
    /// Oracle score at or above which a pair counts as relevant.
    pub rel_threshold: f64,
    pub tau: f64,
    pub entropy_pool: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            ks: vec![10, 50, 100, 500, 1000],
            nprobe: 8,
            sat_threshold: 0.6,
            rel_threshold: 0.4,
            tau: 0.05,
            entropy_pool: 480,
        }
    }
}

/// Everything [`evaluate`] reads. Optional parts enable extra metrics.
pub struct EvalInputs<'a> {
    pub index: &'a IvfPqIndex,
    pub student: &'a TowerParams,
    pub student_tok: &'a Tokenizer,
    pub queries: &'a [Query],
    pub truth: &'a [Truth],
    /// Teacher query tower, for fidelity metrics.
    pub teacher: Option<(&'a TowerParams, &'a Tokenizer)>,
    /// Unit document embeddings with their ids, for exact search, AUC and entropy.
    pub embeddings: Option<(&'a Array2<f64>, &'a [DocId])>,
    pub pairs: &'a [LabeledPair],
    pub params: &'a EvalParams,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub nprobe: usize,
    /// Student queries against the IVFPQ index, as served.
    pub index_recall: RecallReport,
    pub student_exact_recall: Option<RecallReport>,
    pub teacher_index_recall: Option<RecallReport>,
    pub teacher_exact_recall: Option<RecallReport>,
    /// Mean `‖q_stu − q‖ / ‖q‖`.
    pub student_rel_error: Option<f64>,
    /// Mean overlap of student and teacher top-10 index results.
    pub top10_overlap: Option<f64>,
    pub teacher_entropy: Option<f64>,
    pub auc_sat: Option<f64>,
    pub auc_rel: Option<f64>,
}

fn unit_rows(mut x: Array2<f64>) -> Array2<f64> {
    normalize_rows(&mut x);
    x
}

fn index_rankings(
    index: &IvfPqIndex,
    q: &Array2<f64>,
    queries: &[Query],
    nprobe: usize,
    topk: usize,
) -> Result<HashMap<QueryId, Vec<DocId>>> {
    queries
        .iter()
        .zip(q.outer_iter())
        .map(|(query, v)| {
            let hits = index.search(v, nprobe, topk)?;
            Ok((query.id, hits.iter().map(|h| h.id).collect()))
        })
        .collect()
}

fn exact_rankings(
    emb: &Array2<f64>,
    ids: &[DocId],
    q: &Array2<f64>,
    queries: &[Query],
    topk: usize,
) -> HashMap<QueryId, Vec<DocId>> {
    queries
        .iter()
        .zip(q.outer_iter())
        .map(|(query, v)| {
            let hits = exact_search(emb.view(), ids, v, topk);
            (query.id, hits.iter().map(|h| h.id).collect())
        })
        .collect()
}

fn optional_auc(labels: &[bool], scores: &[f64]) -> Result<Option<f64>> {
    match auc(labels, scores) {
        Ok(a) => Ok(Some(a)),
        Err(Error::DegenerateLabels) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Retrieval quality of the served configuration plus teacher comparisons.
pub fn evaluate(inp: &EvalInputs) -> Result<EvalReport> {
    let p = inp.params;
    let kmax = p.ks.iter().copied().max().unwrap_or(10);
    let s_raw = embed_queries(
        inp.student,
        inp.student_tok,
        inp.queries,
        QueryForm::Student,
        inp.max_len,
    )?;
    let s = unit_rows(s_raw.clone());
    let s_index = index_rankings(inp.index, &s, inp.queries, p.nprobe, kmax.max(10))?;
    let index_recall = recall_at_k(&s_index, inp.truth, &p.ks)?;

    let mut report = EvalReport {
        n_queries: inp.queries.len(),
        nprobe: p.nprobe,
        index_recall,
        student_exact_recall: None,
        teacher_index_recall: None,
        teacher_exact_recall: None,
        student_rel_error: None,
        top10_overlap: None,
        teacher_entropy: None,
        auc_sat: None,
        auc_rel: None,
    };

    let teacher = match inp.teacher {
        Some((tower, tok)) => {
            let raw = embed_queries(tower, tok, inp.queries, QueryForm::Teacher, inp.max_len)?;
            report.student_rel_error = Some(mean_relative_error(raw.view(), s_raw.view())?);
            let t = unit_rows(raw);
            let t_index = index_rankings(inp.index, &t, inp.queries, p.nprobe, kmax.max(10))?;
            let mut overlap = 0.0;
            for q in inp.queries {
                let a: HashSet<_> = s_index[&q.id].iter().take(10).collect();
                let b: HashSet<_> = t_index[&q.id].iter().take(10).collect();
                overlap += a.intersection(&b).count() as f64 / 10.0;
            }
            report.top10_overlap = Some(overlap / inp.queries.len().max(1) as f64);
            report.teacher_index_recall = Some(recall_at_k(&t_index, inp.truth, &p.ks)?);
            Some(t)
        }
        None => None,
    };

    if let Some((emb, ids)) = inp.embeddings {
        if emb.nrows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} embeddings for {} ids",
                emb.nrows(),
                ids.len()
            )));
        }
        let s_exact = exact_rankings(emb, ids, &s, inp.queries, kmax);
        report.student_exact_recall = Some(recall_at_k(&s_exact, inp.truth, &p.ks)?);
        let row_of: HashMap<DocId, usize> = ids.iter().enumerate().map(|(i, &d)| (d, i)).collect();
        let q_row: HashMap<QueryId, usize> = inp
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id, i))
            .collect();
        if let Some(t) = &teacher {
            let t_exact = exact_rankings(emb, ids, t, inp.queries, kmax);
            report.teacher_exact_recall = Some(recall_at_k(&t_exact, inp.truth, &p.ks)?);
            let truth_of: HashMap<QueryId, DocId> =
                inp.truth.iter().map(|t| (t.query_id, t.doc_id)).collect();
            let mut d = Array2::zeros(t.raw_dim());
            for (i, q) in inp.queries.iter().enumerate() {
                let doc = truth_of.get(&q.id).ok_or(Error::MissingRanking(q.id))?;
                let row = row_of
                    .get(doc)
                    .ok_or_else(|| Error::config(format!("truth doc {doc} not embedded")))?;
                d.row_mut(i).assign(&emb.row(*row));
            }
            report.teacher_entropy = Some(entropy_from_embeddings(
                t,
                &d,
                p.tau,
                t.ncols(),
                p.entropy_pool,
            )?);
        }
        let mut scores = Vec::with_capacity(inp.pairs.len());
        let (mut sat, mut rel) = (Vec::new(), Vec::new());
        for pair in inp.pairs {
            let (Some(&qi), Some(&di)) = (q_row.get(&pair.query_id), row_of.get(&pair.doc_id))
            else {
                continue;
            };
            scores.push(s.row(qi).dot(&emb.row(di)));
            sat.push(pair.score >= p.sat_threshold);
            rel.push(pair.score >= p.rel_threshold);
        }
        if !scores.is_empty() {
            report.auc_sat = optional_auc(&sat, &scores)?;
            report.auc_rel = optional_auc(&rel, &scores)?;
        }
    }
    Ok(report)
}
