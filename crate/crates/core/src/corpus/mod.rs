//! Synthetic corpus, term scoring, query association and triplet construction.

mod synth;
mod terms;
mod triplets;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::util;

pub use synth::{synth_corpus, RelevanceOracle, SynthConfig, SynthData};
pub use terms::{
    associate_all, match_association, score_terms, AssociationResult, IdfScorer, QueryAssociation,
    TermScorer, TermScores, TermStats,
};
pub use triplets::{build_onehop, expand_multihop, OnehopOutput};

pub type DocId = u32;
pub type QueryId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: DocId,
    pub title: String,
    pub topic: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: QueryId,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TripletSource {
    #[serde(rename = "click_1hop")]
    Click1Hop,
    #[serde(rename = "click_multihop")]
    ClickMultiHop,
    #[serde(rename = "rel_1hop")]
    Rel1Hop,
    #[serde(rename = "rel_multihop")]
    RelMultiHop,
}

impl TripletSource {
    pub fn is_click(self) -> bool {
        matches!(
            self,
            TripletSource::Click1Hop | TripletSource::ClickMultiHop
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingTriplet {
    pub query_id: QueryId,
    pub pos_doc_id: DocId,
    pub neg_doc_id: DocId,
    pub source: TripletSource,
}

/// One impression: the documents shown for a query and the subset clicked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub query_id: QueryId,
    pub exposed: Vec<DocId>,
    pub clicked: Vec<DocId>,
}

/// Candidate documents for a query, sorted by descending relevance score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceList {
    pub query_id: QueryId,
    pub docs: Vec<DocId>,
    pub scores: Vec<f64>,
}

/// Ground-truth document for an evaluation query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub query_id: QueryId,
    pub doc_id: DocId,
}

/// Held-out query and document with the generator's relevance score, used
/// to derive binary labels for AUC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub query_id: QueryId,
    pub doc_id: DocId,
    pub score: f64,
}

/// Whitespace tokenization shared by term scoring and the encoder tokenizer.
pub fn split_terms(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Documents addressable by id.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub docs: Vec<Document>,
    by_id: HashMap<DocId, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Self {
        let by_id = docs.iter().enumerate().map(|(i, d)| (d.id, i)).collect();
        Corpus { docs, by_id }
    }

    pub fn get(&self, id: DocId) -> Option<&Document> {
        self.by_id.get(&id).map(|&i| &self.docs[i])
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    util::write_jsonl(path, rows)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    util::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_json_uses_snake_case_keys() {
        let t = TrainingTriplet {
            query_id: 3,
            pos_doc_id: 7,
            neg_doc_id: 9,
            source: TripletSource::ClickMultiHop,
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"query_id":3,"pos_doc_id":7,"neg_doc_id":9,"source":"click_multihop"}"#
        );
        let back: TrainingTriplet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
