//! Stage-I joint training of the document and query towers.
//!
//! Logical workers each encode a slice of the global batch. Their embeddings
//! are concatenated by [`all_gather`], so every loss below is a function of the
//! global batch alone. Gradients flow back from embeddings through each
//! worker's cached forward passes and are summed in worker order.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::thread;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query, QueryId, TrainingTriplet};
use crate::encoder::{
    render_document_prompt, render_query, DocField, ForwardCache, QueryForm, RenderedPrompt,
    Tokenizer, TowerParams, DEFAULT_MRL_DIMS,
};
use crate::error::{Error, Result};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub margin: f64,
    pub alpha: f64,
    pub mrl_dims: Vec<usize>,
    /// Contrastive weight per entry of `mrl_dims`.
    pub w_m: Vec<f64>,
    /// Hard-negative weight per entry of `mrl_dims`.
    pub w_hard: Vec<f64>,
    pub k_workers: usize,
    pub b_per_worker: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Run logical workers on OS threads.
    pub parallel: bool,
    pub max_len: usize,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.05,
            margin: 0.2,
            alpha: 0.5,
            mrl_dims: DEFAULT_MRL_DIMS.to_vec(),
            w_m: vec![1.0; DEFAULT_MRL_DIMS.len()],
            w_hard: vec![1.0; DEFAULT_MRL_DIMS.len()],
            k_workers: 4,
            b_per_worker: 16,
            epochs: 1,
            max_steps: None,
            seed: 0,
            parallel: false,
            max_len: 128,
            optim: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn global_batch(&self) -> usize {
        self.k_workers * self.b_per_worker
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.margin >= 0.0) || !(self.alpha >= 0.0) {
            return bad("margin and alpha must be non-negative");
        }
        if self.mrl_dims.is_empty()
            || self.w_m.len() != self.mrl_dims.len()
            || self.w_hard.len() != self.mrl_dims.len()
        {
            return bad("w_m and w_hard need one weight per MRL dimension");
        }
        if self.w_m.iter().chain(&self.w_hard).any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if self.k_workers == 0 || self.b_per_worker == 0 {
            return bad("k_workers and b_per_worker must be positive");
        }
        Ok(())
    }
}

/// Query, positive and hard-negative embeddings aligned by triplet index.
///
/// `pos[f]` and `neg[f]` hold the document embeddings of [`DocField`] `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatheredBatch {
    pub q: Array2<f64>,
    pub pos: [Array2<f64>; 3],
    pub neg: [Array2<f64>; 3],
}

impl GatheredBatch {
    pub fn zeros(n: usize, dim: usize) -> Self {
        let z = || Array2::zeros((n, dim));
        GatheredBatch {
            q: z(),
            pos: [z(), z(), z()],
            neg: [z(), z(), z()],
        }
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.q.ncols()
    }

    fn mats(&self) -> [&Array2<f64>; 7] {
        let [p0, p1, p2] = &self.pos;
        let [n0, n1, n2] = &self.neg;
        [&self.q, p0, p1, p2, n0, n1, n2]
    }

    fn check(&self) -> Result<()> {
        let shape = self.q.dim();
        if self.mats().iter().any(|m| m.dim() != shape) {
            return Err(Error::BatchShape(
                "query and document embedding sets are misaligned".into(),
            ));
        }
        Ok(())
    }
}

fn check_workers(workers: &[GatheredBatch]) -> Result<(usize, usize)> {
    let first = workers
        .first()
        .ok_or_else(|| Error::BatchShape("no worker batches".into()))?;
    for (w, b) in workers.iter().enumerate() {
        b.check()?;
        if b.q.dim() != first.q.dim() {
            return Err(Error::BatchShape(format!(
                "worker {w} has {:?} entries, worker 0 has {:?}",
                b.q.dim(),
                first.q.dim()
            )));
        }
    }
    Ok(first.q.dim())
}

/// Concatenates worker batches in worker order.
pub fn all_gather(workers: &[GatheredBatch]) -> Result<GatheredBatch> {
    check_workers(workers)?;
    let cat = |pick: &dyn Fn(&GatheredBatch) -> &Array2<f64>| {
        let views: Vec<_> = workers.iter().map(|w| pick(w).view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("shapes checked")
    };
    Ok(GatheredBatch {
        q: cat(&|w| &w.q),
        pos: [
            cat(&|w| &w.pos[0]),
            cat(&|w| &w.pos[1]),
            cat(&|w| &w.pos[2]),
        ],
        neg: [
            cat(&|w| &w.neg[0]),
            cat(&|w| &w.neg[1]),
            cat(&|w| &w.neg[2]),
        ],
    })
}

/// [`all_gather`] with one thread per worker writing its own rows.
pub fn all_gather_parallel(workers: &[GatheredBatch]) -> Result<GatheredBatch> {
    let (b, dim) = check_workers(workers)?;
    let mut out = GatheredBatch::zeros(b * workers.len(), dim);
    let GatheredBatch { q, pos, neg } = &mut out;
    let [p0, p1, p2] = pos;
    let [n0, n1, n2] = neg;
    let mut chunks: Vec<Vec<_>> = (0..workers.len()).map(|_| Vec::with_capacity(7)).collect();
    for mat in [q, p0, p1, p2, n0, n1, n2] {
        for (slot, chunk) in chunks
            .iter_mut()
            .zip(mat.axis_chunks_iter_mut(Axis(0), b.max(1)))
        {
            slot.push(chunk);
        }
    }
    thread::scope(|sc| {
        for (dst, src) in chunks.into_iter().zip(workers) {
            sc.spawn(move || {
                for (mut d, s) in dst.into_iter().zip(src.mats()) {
                    d.assign(s);
                }
            });
        }
    });
    Ok(out)
}

/// Rows of `x[.., ..m]` scaled to unit length.
struct UnitPrefix {
    u: Array2<f64>,
    norms: Vec<f64>,
}

fn unit_prefix(x: &Array2<f64>, m: usize, what: &str) -> Result<UnitPrefix> {
    if m == 0 || m > x.ncols() {
        return Err(Error::MrlDim(m));
    }
    let mut u = x.slice(s![.., ..m]).to_owned();
    let mut norms = Vec::with_capacity(u.nrows());
    for (i, mut row) in u.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateEmbedding(format!(
                "{what} row {i} has norm {n} at m={m}"
            )));
        }
        row /= n;
        norms.push(n);
    }
    Ok(UnitPrefix { u, norms })
}

impl UnitPrefix {
    /// Adds `weight · ∂/∂x` to `dx[.., ..m]` given `du = ∂/∂u`.
    fn backward(&self, du: &Array2<f64>, weight: f64, dx: &mut Array2<f64>) {
        let m = self.u.ncols();
        let mut dx = dx.slice_mut(s![.., ..m]);
        for i in 0..self.u.nrows() {
            let u = self.u.row(i);
            let g = du.row(i);
            let proj = g.dot(&u);
            let c = weight / self.norms[i];
            for ((d, &gj), &uj) in dx.row_mut(i).iter_mut().zip(g).zip(u) {
                *d += c * (gj - proj * uj);
            }
        }
    }
}

/// Mean cross-entropy of each row of `z` against its diagonal entry, and `∂/∂z`.
fn diag_xent(z: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = z.nrows();
    let mut dz = z.clone();
    let mut total = 0.0;
    for (i, mut row) in dz.outer_iter_mut().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - z[(i, i)];
        row.mapv_inplace(|v| (v - lse).exp() / n as f64);
        row[i] -= 1.0 / n as f64;
    }
    (total / n as f64, dz)
}

struct InfoNce {
    q2d: f64,
    d2q: f64,
    dq: Array2<f64>,
    dpos: Array2<f64>,
    dneg: Array2<f64>,
}

/// Both InfoNCE directions on unit rows; gradients are of `q2d + d2q`.
fn infonce_units(q: &UnitPrefix, pos: &UnitPrefix, neg: &UnitPrefix, tau: f64) -> InfoNce {
    let n = q.u.nrows();
    let pool = ndarray::concatenate(Axis(0), &[pos.u.view(), neg.u.view()]).expect("same width");
    let z = q.u.dot(&pool.t()) / tau;
    let (q2d, dz) = diag_xent(&z);
    let mut dq = dz.dot(&pool) / tau;
    let dpool = dz.t().dot(&q.u) / tau;
    let mut dpos = dpool.slice(s![..n, ..]).to_owned();
    let dneg = dpool.slice(s![n.., ..]).to_owned();

    let z2 = pos.u.dot(&q.u.t()) / tau;
    let (d2q, dz2) = diag_xent(&z2);
    dpos += &(dz2.dot(&q.u) / tau);
    dq += &(dz2.t().dot(&pos.u) / tau);
    InfoNce {
        q2d,
        d2q,
        dq,
        dpos,
        dneg,
    }
}

struct Hinge {
    loss: f64,
    dq: Array2<f64>,
    dpos: Array2<f64>,
    dneg: Array2<f64>,
}

fn hinge_units(q: &UnitPrefix, pos: &UnitPrefix, neg: &UnitPrefix, margin: f64) -> Hinge {
    let (n, m) = q.u.dim();
    let mut out = Hinge {
        loss: 0.0,
        dq: Array2::zeros((n, m)),
        dpos: Array2::zeros((n, m)),
        dneg: Array2::zeros((n, m)),
    };
    let inv = 1.0 / n as f64;
    for i in 0..n {
        let (qi, pi, ni) = (q.u.row(i), pos.u.row(i), neg.u.row(i));
        let h = margin - (qi.dot(&pi) - qi.dot(&ni));
        // Running mean, exact when every row has the same hinge.
        out.loss += (h.max(0.0) - out.loss) / (i + 1) as f64;
        if h > 0.0 {
            out.dq.row_mut(i).assign(&((&ni - &pi) * inv));
            out.dpos.row_mut(i).assign(&(&qi * -inv));
            out.dneg.row_mut(i).assign(&(&qi * inv));
        }
    }
    out
}

fn check_field_inputs(gb: &GatheredBatch, m: usize) -> Result<()> {
    gb.check()?;
    if gb.is_empty() {
        return Err(Error::BatchShape("empty batch".into()));
    }
    if m == 0 || m > gb.dim() {
        return Err(Error::MrlDim(m));
    }
    Ok(())
}

/// `(L_q2d, L_d2q)` for one document field at prefix length `m`.
///
/// Each query scores against every gathered positive and hard negative of the
/// field; each positive scores against every gathered query.
pub fn infonce_pair(gb: &GatheredBatch, field: DocField, m: usize, tau: f64) -> Result<(f64, f64)> {
    check_field_inputs(gb, m)?;
    let f = field as usize;
    let r = infonce_units(
        &unit_prefix(&gb.q, m, "query")?,
        &unit_prefix(&gb.pos[f], m, "positive")?,
        &unit_prefix(&gb.neg[f], m, "negative")?,
        tau,
    );
    Ok((r.q2d, r.d2q))
}

/// Mean hinge `max(0, margin − sim(q,d+) + sim(q,d−))` at prefix length `m`.
pub fn margin_hard(gb: &GatheredBatch, field: DocField, m: usize, margin: f64) -> Result<f64> {
    check_field_inputs(gb, m)?;
    let f = field as usize;
    Ok(hinge_units(
        &unit_prefix(&gb.q, m, "query")?,
        &unit_prefix(&gb.pos[f], m, "positive")?,
        &unit_prefix(&gb.neg[f], m, "negative")?,
        margin,
    )
    .loss)
}

/// `½ Σ_m w_m (L_q2d + L_d2q)`.
pub fn aggregate_type(losses: &[(f64, f64)], w: &[f64]) -> f64 {
    0.5 * losses
        .iter()
        .zip(w)
        .map(|((a, b), w)| w * (a + b))
        .sum::<f64>()
}

pub fn contrastive_total(l_t: f64, l_c: f64, l_e: f64) -> f64 {
    l_t + l_c + l_e
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub l_con: f64,
    pub l_hard: f64,
}

fn finite(v: f64, term: String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerics { term, step: None })
    }
}

/// `L = L_con + α·L_hard` and its gradient with respect to every embedding.
pub fn total_loss(gb: &GatheredBatch, cfg: &TrainConfig) -> Result<(LossBreakdown, GatheredBatch)> {
    cfg.validate()?;
    let mut grads = GatheredBatch::zeros(gb.len(), gb.dim());
    let (mut l_con, mut l_hard) = (0.0, 0.0);
    for (mi, &m) in cfg.mrl_dims.iter().enumerate() {
        check_field_inputs(gb, m)?;
        let q = unit_prefix(&gb.q, m, "query")?;
        let mut dq_total = Array2::zeros((gb.len(), m));
        for field in DocField::ALL {
            let f = field as usize;
            let pos = unit_prefix(&gb.pos[f], m, "positive")?;
            let neg = unit_prefix(&gb.neg[f], m, "negative")?;
            let tag = format!("{}, m={m}", field.name());

            let nce = infonce_units(&q, &pos, &neg, cfg.tau);
            let w = 0.5 * cfg.w_m[mi];
            l_con += w * finite(nce.q2d, format!("L_q2d[{tag}]"))?;
            l_con += w * finite(nce.d2q, format!("L_d2q[{tag}]"))?;
            dq_total.scaled_add(w, &nce.dq);
            pos.backward(&nce.dpos, w, &mut grads.pos[f]);
            neg.backward(&nce.dneg, w, &mut grads.neg[f]);

            let hinge = hinge_units(&q, &pos, &neg, cfg.margin);
            let wh = cfg.w_hard[mi];
            l_hard += wh * finite(hinge.loss, format!("L_hard[{tag}]"))?;
            let wa = cfg.alpha * wh;
            if wa != 0.0 {
                dq_total.scaled_add(wa, &hinge.dq);
                pos.backward(&hinge.dpos, wa, &mut grads.pos[f]);
                neg.backward(&hinge.dneg, wa, &mut grads.neg[f]);
            }
        }
        q.backward(&dq_total, 1.0, &mut grads.q);
    }
    let loss = finite(l_con + cfg.alpha * l_hard, "L".into())?;
    Ok((
        LossBreakdown {
            loss,
            l_con,
            l_hard,
        },
        grads,
    ))
}

/// Token sequences for one training triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTriplet {
    pub query: RenderedPrompt,
    pub pos: RenderedPrompt,
    pub neg: RenderedPrompt,
}

/// Renders every triplet's query and documents once.
pub fn prepare_triplets(
    triplets: &[TrainingTriplet],
    corpus: &Corpus,
    queries: &[Query],
    tok: &Tokenizer,
    max_len: usize,
) -> Result<Vec<PreparedTriplet>> {
    let by_id: HashMap<QueryId, &Query> = queries.iter().map(|q| (q.id, q)).collect();
    let mut docs = HashMap::new();
    let mut doc_prompt = |id| -> Result<RenderedPrompt> {
        if let Some(p) = docs.get(&id) {
            return Ok(Clone::clone(p));
        }
        let d = corpus
            .get(id)
            .ok_or_else(|| Error::config(format!("triplet references unknown doc {id}")))?;
        let p = render_document_prompt(d, tok, max_len)?;
        docs.insert(id, p.clone());
        Ok(p)
    };
    triplets
        .iter()
        .map(|t| {
            let q = by_id.get(&t.query_id).ok_or_else(|| {
                Error::config(format!("triplet references unknown query {}", t.query_id))
            })?;
            Ok(PreparedTriplet {
                query: render_query(q, tok, QueryForm::Teacher, max_len)?,
                pos: doc_prompt(t.pos_doc_id)?,
                neg: doc_prompt(t.neg_doc_id)?,
            })
        })
        .collect()
}

struct WorkerPass {
    batch: GatheredBatch,
    caches: Vec<[ForwardCache; 3]>,
}

fn encode_slice(
    doc: &TowerParams,
    query: &TowerParams,
    slice: &[PreparedTriplet],
) -> Result<WorkerPass> {
    let mut batch = GatheredBatch::zeros(slice.len(), doc.config.dim);
    let mut caches = Vec::with_capacity(slice.len());
    for (i, t) in slice.iter().enumerate() {
        let (qe, qc) = query.embed_cached(&t.query.tokens, &t.query.positions)?;
        let (pe, pc) = doc.embed_cached(&t.pos.tokens, &t.pos.positions)?;
        let (ne, nc) = doc.embed_cached(&t.neg.tokens, &t.neg.positions)?;
        if pe.len() != 3 || ne.len() != 3 || qe.len() != 1 {
            return Err(Error::Shape(
                "triplet prompts must carry 3 document and 1 query position".into(),
            ));
        }
        batch.q.row_mut(i).assign(&qe[0]);
        for f in 0..3 {
            batch.pos[f].row_mut(i).assign(&pe[f]);
            batch.neg[f].row_mut(i).assign(&ne[f]);
        }
        caches.push([qc, pc, nc]);
    }
    Ok(WorkerPass { batch, caches })
}

fn backward_slice(
    doc: &TowerParams,
    query: &TowerParams,
    slice: &[PreparedTriplet],
    pass: &WorkerPass,
    grads: &GatheredBatch,
    offset: usize,
) -> (TowerParams, TowerParams) {
    let mut gd = TowerParams::zeros(doc.config);
    let mut gq = TowerParams::zeros(query.config);
    for (i, (t, [qc, pc, nc])) in slice.iter().zip(&pass.caches).enumerate() {
        let r = offset + i;
        query.backward_embed(qc, &t.query.positions, &[grads.q.row(r)], &mut gq);
        let dp: Vec<_> = grads.pos.iter().map(|g| g.row(r)).collect();
        doc.backward_embed(pc, &t.pos.positions, &dp, &mut gd);
        let dn: Vec<_> = grads.neg.iter().map(|g| g.row(r)).collect();
        doc.backward_embed(nc, &t.neg.positions, &dn, &mut gd);
    }
    (gd, gq)
}

/// Gradients for the document and query towers.
#[derive(Clone, Debug)]
pub struct TowerGrads {
    pub doc: TowerParams,
    pub query: TowerParams,
}

/// Loss of one global batch split over `cfg.k_workers` logical workers, with
/// tower gradients when `with_grads` is set.
pub fn batch_loss(
    doc: &TowerParams,
    query: &TowerParams,
    batch: &[PreparedTriplet],
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<TowerGrads>)> {
    cfg.validate()?;
    let k = cfg.k_workers;
    if batch.is_empty() || batch.len() % k != 0 {
        return Err(Error::BatchShape(format!(
            "{} triplets cannot be split evenly over {k} workers",
            batch.len()
        )));
    }
    let b = batch.len() / k;
    let slices: Vec<&[PreparedTriplet]> = batch.chunks(b).collect();
    let passes: Vec<WorkerPass> = if cfg.parallel {
        thread::scope(|sc| {
            let handles: Vec<_> = slices
                .iter()
                .map(|sl| sc.spawn(move || encode_slice(doc, query, sl)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        slices
            .iter()
            .map(|sl| encode_slice(doc, query, sl))
            .collect::<Result<Vec<_>>>()?
    };
    let worker_batches: Vec<GatheredBatch> = passes.iter().map(|p| p.batch.clone()).collect();
    let gathered = if cfg.parallel {
        all_gather_parallel(&worker_batches)?
    } else {
        all_gather(&worker_batches)?
    };
    let (loss, emb_grads) = total_loss(&gathered, cfg)?;
    if !with_grads {
        return Ok((loss, None));
    }
    let parts: Vec<(TowerParams, TowerParams)> = if cfg.parallel {
        thread::scope(|sc| {
            let handles: Vec<_> = slices
                .iter()
                .zip(&passes)
                .enumerate()
                .map(|(w, (sl, pass))| {
                    let g = &emb_grads;
                    sc.spawn(move || backward_slice(doc, query, sl, pass, g, w * b))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    } else {
        slices
            .iter()
            .zip(&passes)
            .enumerate()
            .map(|(w, (sl, pass))| backward_slice(doc, query, sl, pass, &emb_grads, w * b))
            .collect()
    };
    let mut it = parts.into_iter();
    let (mut gd, mut gq) = it.next().expect("at least one worker");
    for (d, q) in it {
        gd.add_assign(&d);
        gq.add_assign(&q);
    }
    Ok((loss, Some(TowerGrads { doc: gd, query: gq })))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub l_con: f64,
    pub l_hard: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub doc: TowerParams,
    pub query: TowerParams,
    pub curve: Vec<LossRecord>,
}

/// Number of optimizer steps `train_stage1` will take on `n` triplets.
pub fn planned_steps(n: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = n / cfg.global_batch();
    let total = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(total, |cap| total.min(cap))
}

/// Trains both towers on shuffled global batches; the last partial batch of
/// each epoch is dropped.
pub fn train_stage1(
    doc: TowerParams,
    query: TowerParams,
    data: &[PreparedTriplet],
    cfg: &TrainConfig,
) -> Result<Stage1Output> {
    cfg.validate()?;
    if doc.config.dim != query.config.dim {
        return Err(Error::config(
            "document and query towers must share the embedding dim",
        ));
    }
    let gb = cfg.global_batch();
    if data.len() < gb {
        return Err(Error::config(format!(
            "{} triplets is less than one global batch of {gb}",
            data.len()
        )));
    }
    let total = planned_steps(data.len(), cfg);
    let (mut doc, mut query) = (doc, query);
    let mut opt = AdamW::new(cfg.optim.clone(), &[&doc, &query]);
    let mut rng = rng_for(cfg.seed, "stage1-shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(gb) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<PreparedTriplet> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) =
                batch_loss(&doc, &query, &batch, cfg, true).map_err(|e| match e {
                    Error::Numerics { term, .. } => Error::Numerics {
                        term,
                        step: Some(step),
                    },
                    other => other,
                })?;
            let g = grads.expect("gradients requested");
            let lr = lr_at(&cfg.optim, step, total);
            opt.step(&mut [&mut doc, &mut query], &[&g.doc, &g.query], lr);
            if !doc.is_finite() || !query.is_finite() {
                return Err(Error::Numerics {
                    term: "parameters".into(),
                    step: Some(step),
                });
            }
            if step % 10 == 0 {
                log::info!("stage1 step {step}/{total} loss {:.4}", loss.loss);
            }
            curve.push(LossRecord {
                step,
                loss: loss.loss,
                l_con: loss.l_con,
                l_hard: loss.l_hard,
            });
            step += 1;
        }
    }
    Ok(Stage1Output { doc, query, curve })
}

/// Writes the loss curve as `step,loss,L_con,L_hard` CSV.
pub fn write_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss,L_con,L_hard")?;
    for r in curve {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.l_con, r.l_hard)?;
    }
    w.flush()?;
    Ok(())
}
