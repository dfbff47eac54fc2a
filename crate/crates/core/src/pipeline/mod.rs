//! Artifact pipeline (data generation, both training stages, indexing and
//! evaluation) plus the newline-delimited JSON query server.

mod report;
mod serve;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    associate_all, build_onehop, expand_multihop, read_jsonl, synth_corpus, write_jsonl, Corpus,
    DocId, Document, IdfScorer, LabeledPair, Query, SynthConfig, TermStats, TrainingTriplet, Truth,
};
use crate::encoder::{
    embed_documents, load_tower, save_tower, DocField, Tokenizer, TowerConfig, TowerParams,
};
use crate::error::{Error, Result};
use crate::index::{
    assign_semantic_id, build_ivfpq, build_residual, load_embeddings, load_index, normalize_rows,
    save_embeddings, save_index, IvfPqConfig,
};
use crate::qkd::{distill, prepare_distill, write_distill_curve, DistillConfig};
use crate::stage1::{prepare_triplets, train_stage1, write_curve, TrainConfig};

pub use report::{evaluate, EvalInputs, EvalParams, EvalReport};
pub use serve::{
    encode_query, handle_request, serve, ErrorResponse, SearchRequest, SearchResponse, ServeState,
};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "DENSENOTE_SEED";

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const HELDOUT_TRUTH_FILE: &str = "heldout_truth.jsonl";
pub const HELDOUT_PAIRS_FILE: &str = "heldout_pairs.jsonl";
pub const PARAPHRASES_FILE: &str = "paraphrases.jsonl";
pub const DOC_TOWER_FILE: &str = "doc_tower.dnt";
pub const QUERY_TOWER_FILE: &str = "query_tower.dnt";
pub const STAGE1_CURVE_FILE: &str = "stage1_curve.csv";
pub const STUDENT_FILE: &str = "student.dnt";
pub const DISTILL_CURVE_FILE: &str = "distill_curve.csv";
pub const EMBEDDINGS_FILE: &str = "doc_embeddings.dneb";
pub const INDEX_FILE: &str = "index.dnix";
pub const REPORT_FILE: &str = "report.json";

/// Synthetic data size and triplet construction knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_docs: usize,
    pub n_queries: usize,
    pub vocab_size: usize,
    pub k_filter: usize,
    pub t_filter: usize,
    pub th_click: f64,
    pub th_rel: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_docs: 2000,
            n_queries: 12000,
            vocab_size: 3000,
            k_filter: 10,
            t_filter: 50,
            th_click: 0.6,
            th_rel: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexParams {
    pub ivf: IvfPqConfig,
    pub semantic_k: usize,
    pub semantic_layers: usize,
    pub semantic_iters: usize,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            ivf: IvfPqConfig {
                nlist: 32,
                ..IvfPqConfig::default()
            },
            semantic_k: crate::index::DEFAULT_K,
            semantic_layers: crate::index::DEFAULT_LAYERS,
            semantic_iters: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Propagated to every stochastic component.
    pub seed: u64,
    pub data: DataConfig,
    pub term_vocab: u32,
    /// Separate hashed vocabulary for the student; `None` shares the teacher's.
    pub student_term_vocab: Option<u32>,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub index: IndexParams,
    pub eval: EvalParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut train = TrainConfig {
            epochs: 100,
            max_steps: Some(600),
            ..TrainConfig::default()
        };
        train.optim.lr = 3e-3;
        PipelineConfig {
            out_dir: PathBuf::from("run"),
            seed: 1,
            data: DataConfig::default(),
            term_vocab: Tokenizer::default().term_vocab(),
            student_term_vocab: None,
            train,
            distill: DistillConfig::default(),
            index: IndexParams::default(),
            eval: EvalParams::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Applies a `DENSENOTE_SEED`-style override.
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| {
                Error::config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))
            })?;
        }
        Ok(self)
    }

    /// Applies the seed override from the process environment.
    pub fn with_env(self) -> Result<Self> {
        let v = std::env::var(SEED_ENV).ok();
        self.with_seed_override(v.as_deref())
    }

    /// Copies the top-level seed into every component config.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = c.seed;
        c.distill.seed = c.seed;
        c.index.ivf.seed = c.seed;
        c
    }

    pub fn teacher_tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.term_vocab)
    }

    pub fn student_tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.student_term_vocab.unwrap_or(self.term_vocab))
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainStage1,
    Distill,
    BuildIndex,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::GenData,
        Stage::TrainStage1,
        Stage::Distill,
        Stage::BuildIndex,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainStage1 => "train-stage1",
            Stage::Distill => "distill",
            Stage::BuildIndex => "build-index",
            Stage::Eval => "eval",
        }
    }

    /// Files the stage writes into the output directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::GenData => &[
                CORPUS_FILE,
                QUERIES_FILE,
                TRIPLETS_FILE,
                HELDOUT_FILE,
                HELDOUT_TRUTH_FILE,
                HELDOUT_PAIRS_FILE,
                PARAPHRASES_FILE,
            ],
            Stage::TrainStage1 => &[DOC_TOWER_FILE, QUERY_TOWER_FILE, STAGE1_CURVE_FILE],
            Stage::Distill => &[STUDENT_FILE, DISTILL_CURVE_FILE],
            Stage::BuildIndex => &[EMBEDDINGS_FILE, INDEX_FILE],
            Stage::Eval => &[REPORT_FILE],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage {s:?}")))
    }
}

/// SHA-256 of every artifact, keyed by file name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn hash_files(dir: &Path, names: &[&str]) -> Result<Self> {
        let mut files = BTreeMap::new();
        for name in names {
            let bytes = fs::read(dir.join(name))?;
            files.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        }
        Ok(Manifest { files })
    }
}

/// Generates the synthetic corpus, queries and training triplets.
pub fn gen_data(data: &DataConfig, seed: u64, out_dir: &Path) -> Result<usize> {
    fs::create_dir_all(out_dir)?;
    let synth = synth_corpus(&SynthConfig::new(
        seed,
        data.n_docs,
        data.n_queries,
        data.vocab_size,
    ))?;
    let onehop = build_onehop(
        &synth.clicks,
        &synth.relevance,
        data.k_filter,
        data.t_filter,
        seed,
    )?;
    let stats = TermStats::from_docs(&synth.corpus.docs);
    let assoc = associate_all(
        &synth.queries,
        &IdfScorer { stats: &stats },
        data.th_click,
        data.th_rel,
    )?;
    let triplets = expand_multihop(&onehop.triplets, &assoc);
    log::info!(
        "gen-data: {} docs, {} queries, {} one-hop and {} total triplets",
        synth.corpus.len(),
        synth.queries.len(),
        onehop.triplets.len(),
        triplets.len()
    );
    write_jsonl(&out_dir.join(CORPUS_FILE), &synth.corpus.docs)?;
    write_jsonl(&out_dir.join(QUERIES_FILE), &synth.queries)?;
    write_jsonl(&out_dir.join(TRIPLETS_FILE), &triplets)?;
    write_jsonl(&out_dir.join(HELDOUT_FILE), &synth.heldout)?;
    write_jsonl(&out_dir.join(HELDOUT_TRUTH_FILE), &synth.heldout_truth)?;
    write_jsonl(&out_dir.join(HELDOUT_PAIRS_FILE), &synth.heldout_pairs)?;
    write_jsonl(&out_dir.join(PARAPHRASES_FILE), &synth.paraphrases)?;
    Ok(triplets.len())
}

/// Initial teacher towers: document and query towers share one init.
pub fn init_teacher(tok: &Tokenizer, seed: u64) -> Result<TowerParams> {
    TowerParams::init(TowerConfig::teacher(tok.table_size()), seed)
}

pub fn init_student(tok: &Tokenizer, seed: u64) -> Result<TowerParams> {
    TowerParams::init(TowerConfig::student(tok.table_size()), seed ^ 0x5eed)
}

/// Document `[EMB]` embeddings, unit-normalized, in corpus order.
pub fn doc_embeddings(
    doc: &TowerParams,
    tok: &Tokenizer,
    docs: &[Document],
    max_len: usize,
) -> Result<Array2<f64>> {
    let [_, _, emb] = embed_documents(doc, tok, docs, max_len)?;
    debug_assert_eq!(DocField::Emb as usize, 2);
    let mut emb = emb;
    normalize_rows(&mut emb);
    Ok(emb)
}

fn stage_train(cfg: &PipelineConfig) -> Result<()> {
    let corpus = Corpus::new(read_jsonl::<Document>(&cfg.path(CORPUS_FILE))?);
    let queries: Vec<Query> = read_jsonl(&cfg.path(QUERIES_FILE))?;
    let triplets: Vec<TrainingTriplet> = read_jsonl(&cfg.path(TRIPLETS_FILE))?;
    let tok = cfg.teacher_tokenizer();
    let data = prepare_triplets(&triplets, &corpus, &queries, &tok, cfg.train.max_len)?;
    let init = init_teacher(&tok, cfg.seed)?;
    let out = train_stage1(init.clone(), init, &data, &cfg.train)?;
    save_tower(&cfg.path(DOC_TOWER_FILE), &out.doc)?;
    save_tower(&cfg.path(QUERY_TOWER_FILE), &out.query)?;
    write_curve(&cfg.path(STAGE1_CURVE_FILE), &out.curve)
}

fn stage_distill(cfg: &PipelineConfig) -> Result<()> {
    let teacher = load_tower(&cfg.path(QUERY_TOWER_FILE))?;
    let mut queries: Vec<Query> = read_jsonl(&cfg.path(QUERIES_FILE))?;
    queries.extend(read_jsonl::<Query>(&cfg.path(PARAPHRASES_FILE))?);
    let (ttok, stok) = (cfg.teacher_tokenizer(), cfg.student_tokenizer());
    let data = prepare_distill(&queries, &teacher, &ttok, &stok, cfg.distill.max_len)?;
    let out = distill(init_student(&stok, cfg.seed)?, &data, &cfg.distill)?;
    save_tower(&cfg.path(STUDENT_FILE), &out.student)?;
    write_distill_curve(&cfg.path(DISTILL_CURVE_FILE), &out.curve)
}

fn stage_index(cfg: &PipelineConfig) -> Result<()> {
    let docs: Vec<Document> = read_jsonl(&cfg.path(CORPUS_FILE))?;
    let doc = load_tower(&cfg.path(DOC_TOWER_FILE))?;
    let emb = doc_embeddings(&doc, &cfg.teacher_tokenizer(), &docs, cfg.train.max_len)?;
    save_embeddings(&cfg.path(EMBEDDINGS_FILE), &emb)?;
    let ids: Vec<DocId> = docs.iter().map(|d| d.id).collect();
    let mut ix = build_ivfpq(emb.view(), &ids, &cfg.index.ivf)?;
    let p = &cfg.index;
    let (codebook, stats) = build_residual(
        emb.view(),
        p.semantic_k,
        p.semantic_layers,
        p.semantic_iters,
        cfg.seed,
    )?;
    log::info!(
        "build-index: residual norms per layer {:?}",
        stats.mean_residual_norm
    );
    let sids = ids
        .iter()
        .zip(emb.outer_iter())
        .map(|(&id, v)| (id, assign_semantic_id(&codebook, v)))
        .collect();
    ix.semantic = Some((codebook, sids));
    save_index(&cfg.path(INDEX_FILE), &ix)
}

fn stage_eval(cfg: &PipelineConfig) -> Result<()> {
    let docs: Vec<Document> = read_jsonl(&cfg.path(CORPUS_FILE))?;
    let queries: Vec<Query> = read_jsonl(&cfg.path(HELDOUT_FILE))?;
    let truth: Vec<Truth> = read_jsonl(&cfg.path(HELDOUT_TRUTH_FILE))?;
    let pairs: Vec<LabeledPair> = read_jsonl(&cfg.path(HELDOUT_PAIRS_FILE))?;
    let index = load_index(&cfg.path(INDEX_FILE))?;
    let student = load_tower(&cfg.path(STUDENT_FILE))?;
    let teacher = load_tower(&cfg.path(QUERY_TOWER_FILE))?;
    let embeddings = load_embeddings(&cfg.path(EMBEDDINGS_FILE))?;
    let ids: Vec<DocId> = docs.iter().map(|d| d.id).collect();
    let (ttok, stok) = (cfg.teacher_tokenizer(), cfg.student_tokenizer());
    let report = evaluate(&EvalInputs {
        index: &index,
        student: &student,
        student_tok: &stok,
        queries: &queries,
        truth: &truth,
        teacher: Some((&teacher, &ttok)),
        embeddings: Some((&embeddings, &ids)),
        pairs: &pairs,
        params: &cfg.eval,
        max_len: cfg.train.max_len,
    })?;
    fs::write(
        cfg.path(REPORT_FILE),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(())
}

fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    match stage {
        Stage::GenData => gen_data(&cfg.data, cfg.seed, &cfg.out_dir).map(|_| ()),
        Stage::TrainStage1 => stage_train(cfg),
        Stage::Distill => stage_distill(cfg),
        Stage::BuildIndex => stage_index(cfg),
        Stage::Eval => stage_eval(cfg),
    }
}

/// Runs every stage in order and writes the manifest.
///
/// A stage is skipped when all its outputs exist, the stored config matches
/// and no earlier stage ran in this invocation. `from` forces that stage and
/// everything after it to rerun.
pub fn run_pipeline(cfg: &PipelineConfig, from: Option<Stage>) -> Result<Manifest> {
    run_pipeline_timed(cfg, from).map(|(m, _)| m)
}

/// Like [`run_pipeline`], also returning wall-clock seconds of each stage that ran.
pub fn run_pipeline_timed(
    cfg: &PipelineConfig,
    from: Option<Stage>,
) -> Result<(Manifest, Vec<(Stage, f64)>)> {
    let cfg = cfg.resolved();
    let mut timings = Vec::new();
    fs::create_dir_all(&cfg.out_dir)?;
    let config_json = serde_json::to_string_pretty(&cfg)? + "\n";
    let config_path = cfg.path(CONFIG_FILE);
    let mut dirty = fs::read_to_string(&config_path).ok().as_deref() != Some(config_json.as_str());
    fs::write(&config_path, &config_json)?;
    for stage in Stage::ALL {
        let missing = stage.outputs().iter().any(|f| !cfg.path(f).exists());
        if dirty || missing || from.is_some_and(|f| stage >= f) {
            let t0 = Instant::now();
            log::info!("{stage}: running");
            run_stage(stage, &cfg).map_err(|e| Error::Stage {
                stage: stage.name(),
                source: Box::new(e),
            })?;
            log::info!("{stage}: done in {:.1?}", t0.elapsed());
            timings.push((stage, t0.elapsed().as_secs_f64()));
            dirty = true;
        } else {
            log::info!("{stage}: up to date");
        }
    }
    let mut names = vec![CONFIG_FILE];
    for stage in Stage::ALL {
        names.extend_from_slice(stage.outputs());
    }
    let manifest = Manifest::hash_files(&cfg.out_dir, &names)?;
    fs::write(
        cfg.path(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok((manifest, timings))
}
