use std::collections::{HashMap, HashSet};

use rand::Rng;

use super::{
    ClickRecord, QueryAssociation, QueryId, RelevanceList, TrainingTriplet, TripletSource,
};
use crate::error::{Error, Result};
use crate::util::rng_for;

#[derive(Clone, Debug, Default)]
pub struct OnehopOutput {
    pub triplets: Vec<TrainingTriplet>,
    /// Clicked documents with no exposed-but-unclicked partner.
    pub skipped_clicks: usize,
}

/// One-hop triplets from click impressions and relevance lists.
///
/// Click triplets pair every clicked document with a uniformly drawn
/// exposed-but-unclicked one. Relevance triplets take the rank-1 document as
/// the positive and draw the negative uniformly from ranks `k_filter+1..=t_filter`.
pub fn build_onehop(
    clicks: &[ClickRecord],
    relevance: &[RelevanceList],
    k_filter: usize,
    t_filter: usize,
    seed: u64,
) -> Result<OnehopOutput> {
    if k_filter >= t_filter {
        return Err(Error::config(format!(
            "k_filter ({k_filter}) must be below t_filter ({t_filter})"
        )));
    }
    let mut rng = rng_for(seed, "onehop");
    let mut out = OnehopOutput::default();
    for rec in clicks {
        let clicked: HashSet<_> = rec.clicked.iter().copied().collect();
        let unclicked: Vec<_> = rec
            .exposed
            .iter()
            .copied()
            .filter(|d| !clicked.contains(d))
            .collect();
        for &pos in &rec.clicked {
            if unclicked.is_empty() {
                out.skipped_clicks += 1;
                continue;
            }
            let neg = unclicked[rng.random_range(0..unclicked.len())];
            out.triplets.push(TrainingTriplet {
                query_id: rec.query_id,
                pos_doc_id: pos,
                neg_doc_id: neg,
                source: TripletSource::Click1Hop,
            });
        }
    }
    for list in relevance {
        if list.docs.len() < t_filter {
            return Err(Error::config(format!(
                "relevance list for query {} has {} candidates, t_filter is {t_filter}",
                list.query_id,
                list.docs.len()
            )));
        }
        let neg = list.docs[rng.random_range(k_filter..t_filter)];
        out.triplets.push(TrainingTriplet {
            query_id: list.query_id,
            pos_doc_id: list.docs[0],
            neg_doc_id: neg,
            source: TripletSource::Rel1Hop,
        });
    }
    Ok(out)
}

/// Copies one-hop documents across associated queries.
///
/// Only one-hop triplets are propagated, so expansion does not chain through
/// intermediate queries and re-expanding an expanded set adds nothing.
pub fn expand_multihop(
    triplets: &[TrainingTriplet],
    associations: &[QueryAssociation],
) -> Vec<TrainingTriplet> {
    let mut click_by_query: HashMap<QueryId, Vec<&TrainingTriplet>> = HashMap::new();
    let mut rel_by_query: HashMap<QueryId, Vec<&TrainingTriplet>> = HashMap::new();
    for t in triplets {
        match t.source {
            TripletSource::Click1Hop => click_by_query.entry(t.query_id).or_default().push(t),
            TripletSource::Rel1Hop => rel_by_query.entry(t.query_id).or_default().push(t),
            _ => {}
        }
    }
    let mut seen: HashSet<(QueryId, u32, u32)> = triplets
        .iter()
        .map(|t| (t.query_id, t.pos_doc_id, t.neg_doc_id))
        .collect();
    let mut out = triplets.to_vec();
    let mut copy = |from: QueryId,
                    to: QueryId,
                    table: &HashMap<QueryId, Vec<&TrainingTriplet>>,
                    source: TripletSource| {
        for t in table.get(&from).into_iter().flatten() {
            if seen.insert((to, t.pos_doc_id, t.neg_doc_id)) {
                out.push(TrainingTriplet {
                    query_id: to,
                    pos_doc_id: t.pos_doc_id,
                    neg_doc_id: t.neg_doc_id,
                    source,
                });
            }
        }
    };
    for a in associations {
        if a.result.click_a_q1_from_q2 {
            copy(a.q2, a.q1, &click_by_query, TripletSource::ClickMultiHop);
        }
        if a.result.click_a_q2_from_q1 {
            copy(a.q1, a.q2, &click_by_query, TripletSource::ClickMultiHop);
        }
        if a.result.rel_a {
            copy(a.q2, a.q1, &rel_by_query, TripletSource::RelMultiHop);
            copy(a.q1, a.q2, &rel_by_query, TripletSource::RelMultiHop);
        }
    }
    out
}
