use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocId, Query};
use crate::encoder::{render_query, QueryForm, Tokenizer, TowerParams};
use crate::error::{Error, Result};
use crate::index::IvfPqIndex;

/// Immutable state shared by every connection.
pub struct ServeState {
    pub index: IvfPqIndex,
    pub student: TowerParams,
    pub tok: Tokenizer,
    pub max_len: usize,
    pub default_nprobe: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default = "default_topk")]
    pub topk: usize,
    #[serde(default)]
    pub nprobe: Option<usize>,
}

fn default_topk() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub ids: Vec<DocId>,
    pub scores: Vec<f64>,
    pub latency_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Unit-length student embedding of free query text.
pub fn encode_query(
    student: &TowerParams,
    tok: &Tokenizer,
    text: &str,
    max_len: usize,
) -> Result<Array1<f64>> {
    let q = Query {
        id: 0,
        text: text.to_string(),
    };
    let p = render_query(&q, tok, QueryForm::Student, max_len)?;
    let mut e = student.embed(&p.tokens, &p.positions)?.swap_remove(0);
    let n = e.dot(&e).sqrt();
    if n == 0.0 {
        return Err(Error::DegenerateEmbedding("student query".into()));
    }
    e /= n;
    Ok(e)
}

fn search(state: &ServeState, req: &SearchRequest) -> Result<SearchResponse> {
    let t0 = Instant::now();
    let q = encode_query(&state.student, &state.tok, &req.query, state.max_len)?;
    let hits = state.index.search(
        q.view(),
        req.nprobe.unwrap_or(state.default_nprobe),
        req.topk,
    )?;
    Ok(SearchResponse {
        ids: hits.iter().map(|h| h.id).collect(),
        scores: hits.iter().map(|h| h.cosine()).collect(),
        latency_us: t0.elapsed().as_micros() as u64,
    })
}

/// Answers one request line with one response line (without the newline).
/// Failures become `{"error": ...}` objects.
pub fn handle_request(state: &ServeState, line: &str) -> String {
    let out = serde_json::from_str::<SearchRequest>(line)
        .map_err(Error::from)
        .and_then(|req| search(state, &req));
    match out {
        Ok(resp) => serde_json::to_string(&resp),
        Err(e) => serde_json::to_string(&ErrorResponse {
            error: e.to_string(),
        }),
    }
    .expect("responses serialize")
}

fn connection(state: &ServeState, stream: TcpStream) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writer.write_all(handle_request(state, &line).as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve(listener: TcpListener, state: Arc<ServeState>) -> Result<()> {
    log::info!("serving on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = stream?;
        let state = Arc::clone(&state);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = connection(&state, stream) {
                log::warn!("connection {peer:?}: {e}");
            }
        });
    }
    Ok(())
}
