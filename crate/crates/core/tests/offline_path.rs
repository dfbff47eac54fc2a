//! Offline path through the public API: synthetic data, a short Stage-I run,
//! distillation, checkpoint and index round trips, then serving.

use densenote::corpus::{build_onehop, synth_corpus, DocId, SynthConfig};
use densenote::encoder::{read_tower, write_tower, Tokenizer, TowerConfig, TowerParams};
use densenote::index::{build_ivfpq, read_index, write_index, IvfPqConfig};
use densenote::pipeline::{doc_embeddings, handle_request, SearchResponse, ServeState};
use densenote::qkd::{distill, prepare_distill, DistillConfig};
use densenote::stage1::{prepare_triplets, train_stage1, TrainConfig};

fn small_tower(tok: &Tokenizer, causal: bool, hidden: usize, seed: u64) -> TowerParams {
    TowerParams::init(
        TowerConfig {
            layers: 1,
            heads: 2,
            hidden,
            dim: 16,
            vocab: tok.table_size(),
            max_pos: 64,
            causal,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn trained_towers_survive_checkpoints_and_serve_results() {
    let data = synth_corpus(&SynthConfig::new(11, 120, 240, 200)).unwrap();
    let onehop = build_onehop(&data.clicks, &data.relevance, 10, 50, 11).unwrap();
    let tok = Tokenizer::new(400);
    let prepared =
        prepare_triplets(&onehop.triplets, &data.corpus, &data.queries, &tok, 64).unwrap();

    let cfg = TrainConfig {
        mrl_dims: vec![8, 16],
        w_m: vec![1.0; 2],
        w_hard: vec![1.0; 2],
        k_workers: 2,
        b_per_worker: 4,
        max_steps: Some(5),
        max_len: 64,
        ..TrainConfig::default()
    };
    let init = small_tower(&tok, true, 8, 1);
    let trained = train_stage1(init.clone(), init.clone(), &prepared, &cfg).unwrap();
    assert_eq!(trained.curve.len(), 5);
    assert_ne!(trained.doc, init);

    let mut buf = Vec::new();
    write_tower(&mut buf, &trained.doc).unwrap();
    let doc = read_tower(&mut buf.as_slice()).unwrap();
    assert_eq!(doc, trained.doc);

    let distill_data = prepare_distill(&data.queries, &trained.query, &tok, &tok, 64).unwrap();
    let dcfg = DistillConfig {
        max_steps: Some(4),
        batch: 16,
        max_len: 64,
        ..DistillConfig::default()
    };
    let student = distill(small_tower(&tok, false, 8, 2), &distill_data, &dcfg)
        .unwrap()
        .student;

    let emb = doc_embeddings(&doc, &tok, &data.corpus.docs, 64).unwrap();
    let ids: Vec<DocId> = data.corpus.docs.iter().map(|d| d.id).collect();
    let ix = build_ivfpq(
        emb.view(),
        &ids,
        &IvfPqConfig {
            nlist: 4,
            m_sub: 4,
            nbits: 4,
            ..IvfPqConfig::default()
        },
    )
    .unwrap();
    let mut bytes = Vec::new();
    write_index(&mut bytes, &ix).unwrap();
    let loaded = read_index(&mut bytes.as_slice()).unwrap();
    assert_eq!(loaded, ix);

    let state = ServeState {
        index: loaded,
        student,
        tok,
        max_len: 64,
        default_nprobe: 4,
    };
    let q = &data.heldout[0];
    let line = format!(r#"{{"query": {:?}, "topk": 7}}"#, q.text);
    let resp: SearchResponse = serde_json::from_str(&handle_request(&state, &line)).unwrap();
    assert_eq!(resp.ids.len(), 7);
    assert!(resp.ids.iter().all(|id| ids.contains(id)));
    assert!(resp.scores.windows(2).all(|w| w[0] >= w[1]));
}
