use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use densenote::corpus::{
    read_jsonl, Corpus, DocId, Document, LabeledPair, Query, TrainingTriplet, Truth,
};
use densenote::encoder::{load_tower, save_tower, Tokenizer, TowerConfig, TowerParams};
use densenote::index::{load_embeddings, load_index, save_embeddings, save_index};
use densenote::pipeline::{
    doc_embeddings, encode_query, evaluate, gen_data, run_pipeline, serve, DataConfig, EvalInputs,
    EvalParams, IndexParams, PipelineConfig, ServeState, Stage,
};
use densenote::qkd::{
    check_bound, distill, prepare_distill, write_distill_curve, BoundSample, DistillConfig,
};
use densenote::scaling::{
    fit_mixed, fit_single, read_points, run_sweep, Gamma, Points, SweepConfig,
};
use densenote::stage1::{prepare_triplets, train_stage1, write_curve, TrainConfig};

/// Two-stage dense retrieval at desk scale: synthetic data, dual-tower
/// training, query distillation, IVFPQ indexing, evaluation and serving.
#[derive(Parser)]
#[command(name = "densenote", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Doc,
    Query,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Single,
    Mixed,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, queries, held-out set and training triplets.
    GenData {
        /// Seed (DENSENOTE_SEED overrides it).
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of documents.
        #[arg(long, default_value_t = 2000)]
        docs: usize,
        /// Number of training queries.
        #[arg(long, default_value_t = 12000)]
        queries: usize,
        /// Synthetic vocabulary size.
        #[arg(long, default_value_t = 3000)]
        vocab: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialized tower checkpoint.
    InitTower {
        #[arg(long, value_enum)]
        role: Role,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Init seed (DENSENOTE_SEED overrides it).
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Hashed term vocabulary size.
        #[arg(long, default_value_t = 10_000)]
        term_vocab: u32,
    },
    /// Stage-I joint training of the document and query towers.
    TrainStage1 {
        /// Training triplets (JSON Lines).
        #[arg(long)]
        triplets: PathBuf,
        /// Training config (JSON); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus file; defaults to corpus.jsonl next to the triplets.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Training queries; defaults to queries.jsonl next to the triplets.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Starting checkpoint shared by both towers; fresh init if absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out_doc: PathBuf,
        #[arg(long)]
        out_query: PathBuf,
        /// Loss curve CSV (step,loss,L_con,L_hard).
        #[arg(long)]
        curve: PathBuf,
    },
    /// Stage-II distillation of the teacher query tower into the student.
    Distill {
        /// Teacher query tower checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Distillation queries (JSON Lines); may be repeated.
        #[arg(long, required = true)]
        queries: Vec<PathBuf>,
        /// Distillation config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Student checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional loss curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Separate hashed vocabulary for the student.
        #[arg(long)]
        student_vocab: Option<u32>,
    },
    /// Evaluate both sides of the distillation risk bound on labeled triplets.
    CheckBound {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        doc_tower: PathBuf,
        /// Triplets; each yields a positive and a negative pair.
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Use at most this many triplets.
        #[arg(long, default_value_t = 500)]
        limit: usize,
        /// Report path (JSON).
        #[arg(long)]
        report: PathBuf,
    },
    /// Fit a scaling law to CSV points (x,y or n,d,y).
    FitScaling {
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_enum)]
        form: Form,
        /// Fix the mixed-law exponent instead of fitting it.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a grid of tiny towers and write (n,d,y) points for fit-scaling.
    ScalingSweep {
        /// Pipeline output directory holding corpus, queries, triplets and held-out files.
        #[arg(long)]
        data: PathBuf,
        /// Sweep config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed the corpus with the document tower and build the IVFPQ index.
    BuildIndex {
        #[arg(long)]
        doc_tower: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Index parameters (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Index output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional embedding table output (f32).
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Search the index with the student tower.
    Search {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, default_value_t = 8)]
        nprobe: usize,
        #[arg(long, default_value = "run/index.dnix")]
        index: PathBuf,
        #[arg(long, default_value = "run/student.dnt")]
        student: PathBuf,
    },
    /// Recall, fidelity and AUC report for held-out queries.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "run/student.dnt")]
        student: PathBuf,
        /// Teacher query tower, enabling fidelity metrics.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Document embedding table, enabling exact search, AUC and entropy.
        #[arg(long, requires = "corpus")]
        embeddings: Option<PathBuf>,
        /// Corpus whose order matches the embedding table.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Oracle-scored pairs for AUC.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        nprobe: usize,
    },
    /// Serve newline-delimited JSON search requests over TCP.
    Serve {
        #[arg(long, default_value = "run/index.dnix")]
        index: PathBuf,
        #[arg(long, default_value = "run/student.dnt")]
        student: PathBuf,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// nprobe for requests that omit it.
        #[arg(long, default_value_t = 8)]
        nprobe: usize,
    },
    /// Run gen-data, train-stage1, distill, build-index and eval in order.
    RunPipeline {
        /// Pipeline config (JSON); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Rerun this stage and everything after it.
        #[arg(long)]
        from: Option<Stage>,
    },
}

fn seed_or_env(seed: u64) -> Result<u64> {
    match std::env::var(densenote::pipeline::SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("bad DENSENOTE_SEED {v:?}")),
        Err(_) => Ok(seed),
    }
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn sibling(of: &Path, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| of.parent().unwrap_or(Path::new(".")).join(name))
}

fn tokenizer_for(tower: &TowerParams) -> Result<Tokenizer> {
    Tokenizer::for_table(tower.config.vocab)
        .context("tower vocabulary too small for the special tokens")
}

fn load(path: &Path) -> Result<TowerParams> {
    load_tower(path).with_context(|| format!("loading tower {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            docs,
            queries,
            vocab,
            out,
        } => {
            let data = DataConfig {
                n_docs: docs,
                n_queries: queries,
                vocab_size: vocab,
                ..DataConfig::default()
            };
            let n = gen_data(&data, seed_or_env(seed)?, &out)?;
            println!("wrote {n} triplets to {}", out.display());
        }
        Command::InitTower {
            role,
            out,
            seed,
            term_vocab,
        } => {
            let tok = Tokenizer::new(term_vocab);
            let cfg = match role {
                Role::Doc | Role::Query => TowerConfig::teacher(tok.table_size()),
                Role::Student => TowerConfig::student(tok.table_size()),
            };
            save_tower(&out, &TowerParams::init(cfg, seed_or_env(seed)?)?)?;
        }
        Command::TrainStage1 {
            triplets,
            config,
            corpus,
            queries,
            init,
            out_doc,
            out_query,
            curve,
        } => {
            let cfg: TrainConfig = load_json(config.as_deref())?;
            let corpus = Corpus::new(read_jsonl(&sibling(&triplets, corpus, "corpus.jsonl"))?);
            let queries: Vec<Query> = read_jsonl(&sibling(&triplets, queries, "queries.jsonl"))?;
            let trips: Vec<TrainingTriplet> = read_jsonl(&triplets)?;
            let start = match init {
                Some(p) => load(&p)?,
                None => TowerParams::init(
                    TowerConfig::teacher(Tokenizer::default().table_size()),
                    cfg.seed,
                )?,
            };
            let tok = tokenizer_for(&start)?;
            let data = prepare_triplets(&trips, &corpus, &queries, &tok, cfg.max_len)?;
            let out = train_stage1(start.clone(), start, &data, &cfg)?;
            save_tower(&out_doc, &out.doc)?;
            save_tower(&out_query, &out.query)?;
            write_curve(&curve, &out.curve)?;
            if let Some(last) = out.curve.last() {
                println!("{} steps, final loss {:.4}", out.curve.len(), last.loss);
            }
        }
        Command::Distill {
            teacher,
            queries,
            config,
            out,
            curve,
            student_vocab,
        } => {
            let cfg: DistillConfig = load_json(config.as_deref())?;
            let teacher = load(&teacher)?;
            let ttok = tokenizer_for(&teacher)?;
            let stok = student_vocab.map(Tokenizer::new).unwrap_or(ttok);
            let mut qs: Vec<Query> = Vec::new();
            for p in &queries {
                qs.extend(read_jsonl::<Query>(p)?);
            }
            let data = prepare_distill(&qs, &teacher, &ttok, &stok, cfg.max_len)?;
            let student = TowerParams::init(TowerConfig::student(stok.table_size()), cfg.seed)?;
            let res = distill(student, &data, &cfg)?;
            save_tower(&out, &res.student)?;
            if let Some(c) = curve {
                write_distill_curve(&c, &res.curve)?;
            }
            if let (Some(a), Some(b)) = (res.curve.first(), res.curve.last()) {
                println!("distill loss {:.5} -> {:.5}", a.loss, b.loss);
            }
        }
        Command::CheckBound {
            teacher,
            student,
            doc_tower,
            triplets,
            corpus,
            queries,
            limit,
            report,
        } => {
            let (teacher, student, doc) = (load(&teacher)?, load(&student)?, load(&doc_tower)?);
            let corpus = Corpus::new(read_jsonl(&sibling(&triplets, corpus, "corpus.jsonl"))?);
            let qs: Vec<Query> = read_jsonl(&sibling(&triplets, queries, "queries.jsonl"))?;
            let by_id: HashMap<_, _> = qs.iter().map(|q| (q.id, q)).collect();
            let trips: Vec<TrainingTriplet> = read_jsonl(&triplets)?;
            let mut samples = Vec::new();
            for t in trips.iter().take(limit) {
                let q = by_id
                    .get(&t.query_id)
                    .with_context(|| format!("unknown query {}", t.query_id))?;
                for (doc_id, label) in [(t.pos_doc_id, 1.0), (t.neg_doc_id, 0.0)] {
                    let d = corpus
                        .get(doc_id)
                        .with_context(|| format!("unknown doc {doc_id}"))?;
                    samples.push(BoundSample {
                        query: (*q).clone(),
                        doc: d.clone(),
                        label,
                    });
                }
            }
            let (ttok, stok) = (tokenizer_for(&teacher)?, tokenizer_for(&student)?);
            let r = check_bound(&samples, &teacher, &student, &doc, &ttok, &stok, 128)?;
            write_json(&report, &r)?;
            println!("lhs {:.6e} rhs {:.6e} holds {}", r.lhs, r.rhs, r.holds);
            if !r.holds {
                bail!("bound violated");
            }
        }
        Command::FitScaling {
            points,
            form,
            gamma,
            out,
        } => {
            let pts = read_points(&points)?;
            match (form, pts) {
                (Form::Single, Points::Single { xs, ys }) => {
                    let fit = fit_single(&xs, &ys)?;
                    println!(
                        "C={:.6e} alpha={:.6} delta={:.6} R2={:.6}",
                        fit.c, fit.alpha, fit.delta, fit.r_squared
                    );
                    write_json(&out, &fit)?;
                }
                (Form::Mixed, Points::Mixed(p)) => {
                    let fit = fit_mixed(&p, gamma.map_or(Gamma::Free, Gamma::Fixed))?;
                    println!(
                        "C_N={:.6e} alpha_N={:.6} gamma={:.4} C_D={:.6e} delta={:.6} R2={:.6}",
                        fit.c_n, fit.alpha_n, fit.gamma, fit.c_d, fit.delta, fit.r_squared
                    );
                    write_json(&out, &fit)?;
                }
                (Form::Single, _) => bail!("single fit needs an x,y points file"),
                (Form::Mixed, _) => bail!("mixed fit needs an n,d,y points file"),
            }
        }
        Command::ScalingSweep { data, config, out } => {
            let cfg: SweepConfig = load_json(config.as_deref())?;
            let tok = Tokenizer::default();
            let corpus = Corpus::new(read_jsonl(&data.join("corpus.jsonl"))?);
            let queries: Vec<Query> = read_jsonl(&data.join("queries.jsonl"))?;
            let trips: Vec<TrainingTriplet> = read_jsonl(&data.join("triplets.jsonl"))?;
            let prepared = prepare_triplets(&trips, &corpus, &queries, &tok, 128)?;
            let heldout: Vec<Query> = read_jsonl(&data.join("heldout.jsonl"))?;
            let truth: Vec<Truth> = read_jsonl(&data.join("heldout_truth.jsonl"))?;
            let validation = heldout
                .into_iter()
                .zip(&truth)
                .map(|(q, t)| {
                    Ok((
                        q,
                        corpus.get(t.doc_id).context("truth doc missing")?.clone(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let points = run_sweep(&prepared, &validation, &tok, &cfg)?;
            let mut w = std::io::BufWriter::new(fs::File::create(&out)?);
            writeln!(w, "n,d,y")?;
            for p in &points {
                writeln!(w, "{},{},{}", p.params, p.data, p.entropy)?;
            }
            w.flush()?;
        }
        Command::BuildIndex {
            doc_tower,
            corpus,
            config,
            out,
            embeddings,
        } => {
            let p: IndexParams = load_json(config.as_deref())?;
            let doc = load(&doc_tower)?;
            let docs: Vec<Document> = read_jsonl(&corpus)?;
            let emb = doc_embeddings(&doc, &tokenizer_for(&doc)?, &docs, 128)?;
            if let Some(e) = embeddings {
                save_embeddings(&e, &emb)?;
            }
            let ids: Vec<DocId> = docs.iter().map(|d| d.id).collect();
            let mut ix = densenote::index::build_ivfpq(emb.view(), &ids, &p.ivf)?;
            let (cb, _) = densenote::index::build_residual(
                emb.view(),
                p.semantic_k,
                p.semantic_layers,
                p.semantic_iters,
                p.ivf.seed,
            )?;
            let sids = ids
                .iter()
                .zip(emb.outer_iter())
                .map(|(&id, v)| (id, densenote::index::assign_semantic_id(&cb, v)))
                .collect();
            ix.semantic = Some((cb, sids));
            save_index(&out, &ix)?;
            println!("indexed {} documents", ix.len());
        }
        Command::Search {
            query,
            topk,
            nprobe,
            index,
            student,
        } => {
            let ix = load_index(&index)?;
            let student = load(&student)?;
            let q = encode_query(&student, &tokenizer_for(&student)?, &query, 128)?;
            for h in ix.search(q.view(), nprobe, topk)? {
                println!("{}\t{:.4}", h.id, h.cosine());
            }
        }
        Command::Eval {
            index,
            queries,
            truth,
            report,
            student,
            teacher,
            embeddings,
            corpus,
            pairs,
            nprobe,
        } => {
            let ix = load_index(&index)?;
            let student = load(&student)?;
            let stok = tokenizer_for(&student)?;
            let teacher = teacher.as_deref().map(load).transpose()?;
            let ttok = teacher.as_ref().map(tokenizer_for).transpose()?;
            let qs: Vec<Query> = read_jsonl(&queries)?;
            let truth: Vec<Truth> = read_jsonl(&truth)?;
            let pairs: Vec<LabeledPair> = pairs
                .as_deref()
                .map(read_jsonl)
                .transpose()?
                .unwrap_or_default();
            let emb = embeddings.as_deref().map(load_embeddings).transpose()?;
            let ids: Option<Vec<DocId>> = corpus
                .as_deref()
                .map(|p| read_jsonl::<Document>(p).map(|d| d.iter().map(|d| d.id).collect()))
                .transpose()?;
            let params = EvalParams {
                nprobe,
                ..EvalParams::default()
            };
            let r = evaluate(&EvalInputs {
                index: &ix,
                student: &student,
                student_tok: &stok,
                queries: &qs,
                truth: &truth,
                teacher: teacher.as_ref().zip(ttok.as_ref()),
                embeddings: emb.as_ref().zip(ids.as_deref()),
                pairs: &pairs,
                params: &params,
                max_len: 128,
            })?;
            write_json(&report, &r)?;
            for (k, v) in &r.index_recall.recall {
                println!("R@{k} {v:.4}");
            }
        }
        Command::Serve {
            index,
            student,
            port,
            host,
            nprobe,
        } => {
            let student = load(&student)?;
            let state = ServeState {
                index: load_index(&index)?,
                tok: tokenizer_for(&student)?,
                student,
                max_len: 128,
                default_nprobe: nprobe,
            };
            let listener = TcpListener::bind((host.as_str(), port))
                .with_context(|| format!("binding {host}:{port}"))?;
            serve(listener, Arc::new(state))?;
        }
        Command::RunPipeline {
            config,
            out_dir,
            from,
        } => {
            let mut cfg: PipelineConfig =
                load_json::<PipelineConfig>(config.as_deref())?.with_env()?;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let m = run_pipeline(&cfg, from)?;
            let report = fs::read_to_string(cfg.out_dir.join(densenote::pipeline::REPORT_FILE))?;
            println!("{report}");
            println!("manifest: {} files hashed", m.files.len());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
