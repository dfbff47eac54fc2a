use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    split_terms, ClickRecord, Corpus, DocId, Document, LabeledPair, Query, QueryId, RelevanceList,
    TermStats, Truth,
};
use crate::error::{Error, Result};
use crate::util::rng_for;

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "tu", "sa", "vi", "no", "pe", "dra", "zu", "el", "mor", "ti", "fa",
    "gu", "shi", "ba", "qua", "ny", "os", "hal", "ri", "ve",
];

/// Sizes and shape knobs for the synthetic generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_docs: usize,
    /// Training queries.
    pub n_queries: usize,
    /// Held-out evaluation queries, disjoint from the training queries.
    pub n_heldout: usize,
    pub vocab_size: usize,
    pub title_len: usize,
    pub content_len: usize,
    /// Length of every relevance candidate list.
    pub candidates: usize,
    /// Documents shown per click impression.
    pub exposures: usize,
    /// Unlabeled queries for distillation, written from random documents.
    pub n_paraphrase: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_docs: usize, n_queries: usize, vocab_size: usize) -> Self {
        SynthConfig {
            seed,
            n_docs,
            n_queries,
            n_heldout: (n_queries / 6).max(1),
            vocab_size,
            title_len: 5,
            content_len: 16,
            candidates: 100,
            exposures: 8,
            n_paraphrase: 4 * n_queries,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_docs < 100 {
            return Err(Error::config(format!(
                "n_docs must be >= 100, got {}",
                self.n_docs
            )));
        }
        if self.vocab_size < 50 {
            return Err(Error::config(format!(
                "vocab_size must be >= 50, got {}",
                self.vocab_size
            )));
        }
        if self.n_queries == 0 || self.title_len == 0 || self.content_len == 0 {
            return Err(Error::config(
                "query count and field lengths must be positive",
            ));
        }
        if self.candidates > self.n_docs || self.exposures == 0 {
            return Err(Error::config(
                "candidates must not exceed n_docs; exposures > 0",
            ));
        }
        Ok(())
    }
}

/// Latent generative state, kept so relevance can be judged after the fact.
///
/// Stands in for a production cross-encoder: the score mixes IDF-weighted
/// lexical overlap with cosine similarity of latent topic mixtures.
#[derive(Clone, Debug)]
pub struct RelevanceOracle {
    stats: TermStats,
    doc_terms: Vec<HashSet<String>>,
    doc_mix: Vec<[(usize, f64); 2]>,
    doc_index: HashMap<DocId, usize>,
}

impl RelevanceOracle {
    /// Relevance in `[0, 1]` of `doc` for a query written from `source`.
    pub fn score(&self, query_text: &str, source: DocId, doc: DocId) -> f64 {
        let (Some(&s), Some(&d)) = (self.doc_index.get(&source), self.doc_index.get(&doc)) else {
            return 0.0;
        };
        self.score_idx(&split_terms(query_text), s, d)
    }

    fn score_idx(&self, terms: &[String], source: usize, doc: usize) -> f64 {
        let mut total = 0.0;
        let mut hit = 0.0;
        for t in terms {
            let w = self.stats.idf(t).max(1e-3);
            total += w;
            if self.doc_terms[doc].contains(t) {
                hit += w;
            }
        }
        let overlap = if total > 0.0 { hit / total } else { 0.0 };
        0.7 * overlap + 0.3 * mix_cosine(&self.doc_mix[source], &self.doc_mix[doc])
    }

    /// All documents ranked by relevance for one query (descending, ties by id).
    fn rank(&self, terms: &[String], source: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.doc_terms.len())
            .map(|d| (d, self.score_idx(terms, source, d)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }
}

fn mix_cosine(a: &[(usize, f64); 2], b: &[(usize, f64); 2]) -> f64 {
    let mut dot = 0.0;
    for &(ta, wa) in a {
        for &(tb, wb) in b {
            if ta == tb {
                dot += wa * wb;
            }
        }
    }
    let na = (a[0].1 * a[0].1 + a[1].1 * a[1].1).sqrt();
    let nb = (b[0].1 * b[0].1 + b[1].1 * b[1].1).sqrt();
    dot / (na * nb)
}

/// Everything the generator produces.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    /// Source document of every training query.
    pub query_truth: Vec<Truth>,
    pub clicks: Vec<ClickRecord>,
    pub relevance: Vec<RelevanceList>,
    pub heldout: Vec<Query>,
    pub heldout_truth: Vec<Truth>,
    /// Oracle-scored pairs for every held-out query: the source document,
    /// near misses from the oracle ranking and random documents.
    pub heldout_pairs: Vec<LabeledPair>,
    /// Extra unlabeled queries used only as distillation input.
    pub paraphrases: Vec<Query>,
    pub oracle: RelevanceOracle,
}

fn word(mut i: usize) -> String {
    let mut s = String::new();
    loop {
        s.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
        if i == 0 {
            break;
        }
        i -= 1;
    }
    s
}

/// Zipf-weighted word list of one topic.
struct TopicDist {
    words: Vec<usize>,
    cdf: Vec<f64>,
}

impl TopicDist {
    fn new(mut words: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        for i in (1..words.len()).rev() {
            words.swap(i, rng.random_range(0..=i));
        }
        let mut acc = 0.0;
        let cdf = (0..words.len())
            .map(|r| {
                acc += 1.0 / (r as f64 + 1.0);
                acc
            })
            .collect();
        TopicDist { words, cdf }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u = rng.random::<f64>() * self.cdf[self.cdf.len() - 1];
        let i = self
            .cdf
            .partition_point(|&c| c < u)
            .min(self.words.len() - 1);
        self.words[i]
    }
}

struct Generator {
    vocab: Vec<String>,
    topic_names: Vec<String>,
    background: TopicDist,
    topics: Vec<TopicDist>,
}

impl Generator {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let n_topics = (cfg.n_docs / 100).clamp(4, 32);
        let vocab: Vec<String> = (0..cfg.vocab_size).map(word).collect();
        let n_bg = (cfg.vocab_size / 20).max(3);
        let background = TopicDist::new((0..n_bg).collect(), rng);
        let topics = (0..n_topics)
            .map(|k| {
                let words = (n_bg..cfg.vocab_size)
                    .filter(|w| w % n_topics == k)
                    .collect();
                TopicDist::new(words, rng)
            })
            .collect();
        let topic_names = (0..n_topics)
            .map(|k| format!("#{}", word(cfg.vocab_size + k)))
            .collect();
        Generator {
            vocab,
            topic_names,
            background,
            topics,
        }
    }

    fn sample_word(&self, mix: &[(usize, f64); 2], rng: &mut ChaCha8Rng) -> usize {
        if rng.random::<f64>() < 0.1 {
            return self.background.sample(rng);
        }
        let topic = if rng.random::<f64>() < mix[0].1 {
            mix[0].0
        } else {
            mix[1].0
        };
        self.topics[topic].sample(rng)
    }

    fn text(&self, words: &[usize]) -> String {
        words
            .iter()
            .map(|&w| self.vocab[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

struct LatentDoc {
    mix: [(usize, f64); 2],
    /// Non-background words of title and content.
    salient: Vec<usize>,
    /// Cumulative IDF weights over `salient`, filled once corpus stats exist.
    salient_cdf: Vec<f64>,
}

impl LatentDoc {
    fn sample_salient(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = self.salient_cdf[self.salient_cdf.len() - 1];
        let u = rng.random::<f64>() * total;
        let i = self
            .salient_cdf
            .partition_point(|&c| c < u)
            .min(self.salient.len() - 1);
        self.salient[i]
    }
}

fn make_query(gen: &Generator, doc: &LatentDoc, rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..=5);
    let mut words: Vec<usize> = Vec::with_capacity(len);
    let mut attempts = 0;
    while words.len() < len && attempts < 50 {
        attempts += 1;
        let w = if !doc.salient.is_empty() && rng.random::<f64>() < 0.9 {
            doc.sample_salient(rng)
        } else {
            gen.sample_word(&doc.mix, rng)
        };
        if !words.contains(&w) {
            words.push(w);
        }
    }
    gen.text(&words)
}

/// Generates a corpus from latent topic mixtures together with training
/// queries, click impressions, relevance candidate lists and held-out
/// evaluation queries.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "synth");
    let gen = Generator::new(cfg, &mut rng);
    let n_topics = gen.topics.len();
    let n_bg = gen.background.words.len();

    let mut docs = Vec::with_capacity(cfg.n_docs);
    let mut latent = Vec::with_capacity(cfg.n_docs);
    for id in 0..cfg.n_docs {
        let primary = rng.random_range(0..n_topics);
        let secondary = (primary + rng.random_range(1..n_topics)) % n_topics;
        let w = rng.random_range(0.6..0.9);
        let mix = [(primary, w), (secondary, 1.0 - w)];
        let title: Vec<usize> = (0..cfg.title_len)
            .map(|_| gen.sample_word(&mix, &mut rng))
            .collect();
        let content: Vec<usize> = (0..cfg.content_len)
            .map(|_| gen.sample_word(&mix, &mut rng))
            .collect();
        let mut salient: Vec<usize> = title
            .iter()
            .chain(&content)
            .copied()
            .filter(|&w| w >= n_bg)
            .collect();
        salient.sort_unstable();
        salient.dedup();
        docs.push(Document {
            id: id as DocId,
            title: gen.text(&title),
            topic: format!(
                "{} {}",
                gen.topic_names[primary], gen.topic_names[secondary]
            ),
            content: gen.text(&content),
        });
        latent.push(LatentDoc {
            mix,
            salient,
            salient_cdf: Vec::new(),
        });
    }

    let stats = TermStats::from_docs(&docs);
    // queries favour a document's distinctive words
    for l in latent.iter_mut() {
        let mut acc = 0.0;
        l.salient_cdf = l
            .salient
            .iter()
            .map(|&w| {
                acc += stats.idf(&gen.vocab[w]).max(1e-3).powi(2);
                acc
            })
            .collect();
    }
    let doc_terms = docs
        .iter()
        .map(|d| {
            [&d.title, &d.topic, &d.content]
                .iter()
                .flat_map(|f| split_terms(f))
                .collect()
        })
        .collect();
    let oracle = RelevanceOracle {
        stats,
        doc_terms,
        doc_mix: latent.iter().map(|l| l.mix).collect(),
        doc_index: docs.iter().enumerate().map(|(i, d)| (d.id, i)).collect(),
    };

    // training queries cycle through a shuffled document order so every
    // document is a query source before any repeats
    let mut order: Vec<usize> = (0..cfg.n_docs).collect();
    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut query_truth = Vec::with_capacity(cfg.n_queries);
    let mut clicks = Vec::with_capacity(cfg.n_queries);
    let mut relevance = Vec::with_capacity(cfg.n_queries);
    for qi in 0..cfg.n_queries {
        if qi % cfg.n_docs == 0 {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        let src = order[qi % cfg.n_docs];
        let text = make_query(&gen, &latent[src], &mut rng);
        let qid = qi as QueryId;
        let ranked = oracle.rank(&split_terms(&text), src);

        let top = &ranked[..cfg.candidates];
        relevance.push(RelevanceList {
            query_id: qid,
            docs: top.iter().map(|&(d, _)| docs[d].id).collect(),
            scores: top.iter().map(|&(_, s)| s).collect(),
        });

        let mut exposed: Vec<usize> = Vec::with_capacity(cfg.exposures);
        if rng.random::<f64>() < 0.9 {
            exposed.push(src);
        }
        while exposed.len() < cfg.exposures {
            let d = if rng.random::<f64>() < 0.8 {
                top[rng.random_range(0..top.len())].0
            } else {
                rng.random_range(0..cfg.n_docs)
            };
            if !exposed.contains(&d) {
                exposed.push(d);
            }
        }
        let clicked = exposed
            .iter()
            .copied()
            .filter(|&d| {
                let s = oracle.score_idx(&split_terms(&text), src, d);
                let p = 1.0 / (1.0 + (-12.0 * (s - 0.55)).exp());
                rng.random::<f64>() < p
            })
            .map(|d| docs[d].id)
            .collect();
        clicks.push(ClickRecord {
            query_id: qid,
            exposed: exposed.iter().map(|&d| docs[d].id).collect(),
            clicked,
        });
        queries.push(Query { id: qid, text });
        query_truth.push(Truth {
            query_id: qid,
            doc_id: docs[src].id,
        });
    }

    let mut heldout = Vec::with_capacity(cfg.n_heldout);
    let mut heldout_truth = Vec::with_capacity(cfg.n_heldout);
    for hi in 0..cfg.n_heldout {
        let src = rng.random_range(0..cfg.n_docs);
        let qid = (cfg.n_queries + hi) as QueryId;
        heldout.push(Query {
            id: qid,
            text: make_query(&gen, &latent[src], &mut rng),
        });
        heldout_truth.push(Truth {
            query_id: qid,
            doc_id: docs[src].id,
        });
    }

    let mut lrng = rng_for(cfg.seed, "labeled-pairs");
    let mut heldout_pairs = Vec::new();
    for (q, t) in heldout.iter().zip(&heldout_truth) {
        let terms = split_terms(&q.text);
        let src = oracle.doc_index[&t.doc_id];
        let ranked = oracle.rank(&terms, src);
        let mut picked = vec![src];
        for &(d, _) in ranked.iter().take(20) {
            if picked.len() >= 5 {
                break;
            }
            if !picked.contains(&d) && lrng.random_bool(0.5) {
                picked.push(d);
            }
        }
        while picked.len() < 10 {
            let d = lrng.random_range(0..cfg.n_docs);
            if !picked.contains(&d) {
                picked.push(d);
            }
        }
        for d in picked {
            heldout_pairs.push(LabeledPair {
                query_id: q.id,
                doc_id: docs[d].id,
                score: oracle.score_idx(&terms, src, d),
            });
        }
    }

    let mut prng = rng_for(cfg.seed, "paraphrase");
    let first = (cfg.n_queries + cfg.n_heldout) as QueryId;
    let paraphrases = (0..cfg.n_paraphrase)
        .map(|i| {
            let src = prng.random_range(0..cfg.n_docs);
            Query {
                id: first + i as QueryId,
                text: make_query(&gen, &latent[src], &mut prng),
            }
        })
        .collect();

    Ok(SynthData {
        corpus: Corpus::new(docs),
        queries,
        query_truth,
        clicks,
        relevance,
        heldout,
        heldout_truth,
        heldout_pairs,
        paraphrases,
        oracle,
    })
}
